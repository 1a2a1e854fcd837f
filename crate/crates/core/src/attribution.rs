//! Integrated-gradients attribution through the segmentation network.
//!
//! Two products come out of here:
//!
//! * [`attribution_weights`]: per-class source weights `w1`/`w2`. For every
//!   class present in the mask, integrated gradients of the class score are
//!   taken along the straight line from the zero image to each source, summed
//!   over the class region, passed through ReLU and normalised against each
//!   other.
//! * [`unfolding_attribution_map`]: a per-pixel attention map for the fused
//!   image. The integration path is the piecewise-linear curve through the
//!   per-stage fused images `I(0), I(1), ..., I(k)`, with the gradient sampled
//!   at the end of every segment. Summed over pixels, the map telescopes to
//!   `Score(I(k)) - Score(I(0))` whenever the score is linear along each
//!   segment.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::AttentionSource;
use crate::mask::ClassMask;
use crate::segmentor::Segmenter;
use crate::tensor::Tensor;

/// Default stabiliser added to the weight ratio.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Mean class-`class` logit over the pixels labelled `class`.
pub fn class_score(g: &mut Graph, logits: Var, mask: &ClassMask, class: usize) -> Result<Var> {
    mask.expect_fits(g.shape(logits))?;
    let region = mask.region_len(class);
    if region == 0 {
        return Err(Error::EmptyClassRegion { class });
    }
    let classes = g.shape(logits)[1];
    if class >= classes {
        return Err(Error::domain(format!("class {class} out of range for {classes} logits")));
    }
    let plane = g.slice(logits, 1, class, 1)?;
    let ind = g.constant(mask.indicator(class));
    let masked = g.mul(plane, ind)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / region as f64))
}

/// Mean over all pixels of the logit belonging to each pixel's own class.
pub fn image_score(g: &mut Graph, logits: Var, mask: &ClassMask) -> Result<Var> {
    mask.expect_fits(g.shape(logits))?;
    let classes = g.shape(logits)[1];
    let onehot = g.constant(mask.one_hot(classes)?);
    let picked = g.mul(logits, onehot)?;
    let total = g.sum(picked);
    Ok(g.scale(total, 1.0 / mask.num_pixels() as f64))
}

/// Integrated-gradient maps from the zero image to `image`, one per class in
/// `classes`, sharing each forward pass across classes.
fn class_ig_maps(
    segnet: &dyn Segmenter,
    image: &Tensor,
    mask: &ClassMask,
    classes: &[usize],
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::config("integrated gradients need at least one step"));
    }
    mask.expect_fits(image.shape())?;
    let mut maps = vec![Tensor::zeros(image.shape()); classes.len()];
    for m in 1..=steps {
        let alpha = m as f64 / steps as f64;
        let mut g = Graph::new();
        let x = g.param(image.map(|v| alpha * v));
        let logits = segnet.logits(&mut g, x)?;
        for (map, &c) in maps.iter_mut().zip(classes) {
            g.zero_grad();
            let score = class_score(&mut g, logits, mask, c)?;
            g.backward(score)?;
            let grad = g.grad(x).expect("input requires grad");
            for ((acc, gr), iv) in map.data_mut().iter_mut().zip(grad.data()).zip(image.data()) {
                *acc += gr * iv / steps as f64;
            }
        }
    }
    Ok(maps)
}

/// Riemann-sum integrated gradients of `class_score(c)` from the zero image.
pub fn class_integrated_gradients(
    segnet: &dyn Segmenter,
    image: &Tensor,
    mask: &ClassMask,
    class: usize,
    steps: usize,
) -> Result<Tensor> {
    Ok(class_ig_maps(segnet, image, mask, &[class], steps)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttribution {
    pub class: usize,
    /// Integrated-gradient map of the infrared source, summed over the class region.
    pub ir_sum: f64,
    pub vi_sum: f64,
    pub w1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionWeights {
    pub w1: Tensor,
    pub w2: Tensor,
    pub per_class: Vec<ClassAttribution>,
}

/// `(relu(a) + eps) / (relu(a) + relu(b) + 2 eps)`.
pub fn weight_from_sums(ir_sum: f64, vi_sum: f64, eps: f64) -> f64 {
    let (a, b) = (ir_sum.max(0.0), vi_sum.max(0.0));
    (a + eps) / (a + b + 2.0 * eps)
}

/// Builds region-constant `w1`/`w2` maps from per-class attribution sums.
pub fn weights_from_class_sums(
    mask: &ClassMask,
    sums: &[(usize, f64, f64)],
    eps: f64,
) -> Result<AttributionWeights> {
    if eps <= 0.0 {
        return Err(Error::config("eps must be positive"));
    }
    let mut per_pixel = [f64::NAN; 256];
    let mut per_class = Vec::with_capacity(sums.len());
    for &(class, ir_sum, vi_sum) in sums {
        let w1 = weight_from_sums(ir_sum, vi_sum, eps);
        per_pixel[class] = w1;
        per_class.push(ClassAttribution { class, ir_sum, vi_sum, w1 });
    }
    let w1: Vec<f64> = mask.labels().iter().map(|&l| per_pixel[l as usize]).collect();
    if w1.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("class sums do not cover every class in the mask"));
    }
    let w2 = w1.iter().map(|v| 1.0 - v).collect();
    Ok(AttributionWeights {
        w1: Tensor::image(mask.height(), mask.width(), w1)?,
        w2: Tensor::image(mask.height(), mask.width(), w2)?,
        per_class,
    })
}

/// Per-class source weights from integrated gradients of both sources.
pub fn attribution_weights(
    segnet: &dyn Segmenter,
    ir: &Tensor,
    vi: &Tensor,
    mask: &ClassMask,
    steps: usize,
    eps: f64,
) -> Result<AttributionWeights> {
    ir.expect_same_shape(vi)?;
    let classes = mask.classes_present();
    let ir_maps = class_ig_maps(segnet, ir, mask, &classes, steps)?;
    let vi_maps = class_ig_maps(segnet, vi, mask, &classes, steps)?;
    let region_sum = |map: &Tensor, c: usize| -> f64 {
        map.data().iter().zip(mask.labels()).filter(|(_, &l)| l as usize == c).map(|(v, _)| v).sum()
    };
    let sums: Vec<(usize, f64, f64)> = classes
        .iter()
        .zip(ir_maps.iter().zip(&vi_maps))
        .map(|(&c, (a, b))| (c, region_sum(a, c), region_sum(b, c)))
        .collect();
    weights_from_class_sums(mask, &sums, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    /// Index `k` of the last fused state on the path.
    pub stage_index: usize,
    /// `(Score(I(0)), Score(I(k)))`.
    pub endpoint_scores: (f64, f64),
}

impl AttributionMap {
    /// `sum(values) - (Score(I(k)) - Score(I(0)))`.
    pub fn completeness_residual(&self) -> f64 {
        self.values.sum() - (self.endpoint_scores.1 - self.endpoint_scores.0)
    }
}

/// Error-free `a - b`: `(s, e)` with `s = fl(a - b)` and `s + e == a - b` exactly.
fn two_diff(a: f64, b: f64) -> (f64, f64) {
    let s = a - b;
    let bb = s - a;
    let e = (a - (s - bb)) - (b + bb);
    (s, e)
}

/// Correctly rounded sum (Shewchuk partials, as in Python's `math.fsum`).
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else { return 0.0 };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round-half-even correction when the tail straddles a tie.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Segment increments `I(j) - I(j-1)` of a fused-state path, with their
/// rounding residuals kept so the telescoped displacement is exact.
#[derive(Clone, Debug)]
pub struct PathIncrements {
    pub increments: Vec<Tensor>,
    residuals: Vec<Tensor>,
}

impl PathIncrements {
    pub fn new(states: &[Tensor]) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::contract("a path needs at least two states"));
        }
        let mut increments = Vec::with_capacity(states.len() - 1);
        let mut residuals = Vec::with_capacity(states.len() - 1);
        for pair in states.windows(2) {
            pair[1].expect_same_shape(&pair[0])?;
            let (s, e): (Vec<f64>, Vec<f64>) =
                pair[1].data().iter().zip(pair[0].data()).map(|(&a, &b)| two_diff(a, b)).unzip();
            increments.push(Tensor::new(pair[0].shape().to_vec(), s)?);
            residuals.push(Tensor::new(pair[0].shape().to_vec(), e)?);
        }
        Ok(PathIncrements { increments, residuals })
    }

    /// Sum of all increments, correctly rounded per pixel; bitwise equal to
    /// `I(k) - I(0)`.
    pub fn displacement(&self) -> Tensor {
        let shape = self.increments[0].shape().to_vec();
        Tensor::from_fn(shape, |i| {
            exact_sum(
                self.increments.iter().zip(&self.residuals).flat_map(|(s, e)| [s.data()[i], e.data()[i]]),
            )
        })
    }
}

/// Gradient of [`image_score`] at `state`, with the score value.
fn score_gradient(segnet: &dyn Segmenter, state: &Tensor, mask: &ClassMask) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let x = g.param(state.clone());
    let logits = segnet.logits(&mut g, x)?;
    let score = image_score(&mut g, logits, mask)?;
    g.backward(score)?;
    Ok((g.grad(x).expect("input requires grad").clone(), g.value(score).item()?))
}

fn score_value(segnet: &dyn Segmenter, state: &Tensor, mask: &ClassMask) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(state.clone());
    let logits = segnet.logits(&mut g, x)?;
    let score = image_score(&mut g, logits, mask)?;
    g.value(score).item()
}

/// Path attribution over the fused states `I(0..=k)`, gradient sampled at
/// the end of each segment.
pub fn unfolding_attribution_map(
    segnet: &dyn Segmenter,
    states: &[Tensor],
    mask: &ClassMask,
) -> Result<AttributionMap> {
    subdivided_attribution_map(segnet, states, mask, 1)
}

/// [`unfolding_attribution_map`] with `samples` gradient evaluations per
/// segment, at fractions `1/samples, 2/samples, ..., 1` along it.
pub fn subdivided_attribution_map(
    segnet: &dyn Segmenter,
    states: &[Tensor],
    mask: &ClassMask,
    samples: usize,
) -> Result<AttributionMap> {
    if states.len() < 2 {
        return Err(Error::contract("a path needs at least two states"));
    }
    let mut acc = PathAccumulator::new(segnet, mask, &states[0], samples)?;
    for s in &states[1..] {
        acc.push(segnet, mask, s)?;
    }
    Ok(acc.map())
}

/// Builds a path map one segment at a time, so a growing path costs one
/// set of gradient evaluations per new state.
#[derive(Clone, Debug)]
pub struct PathAccumulator {
    samples: usize,
    start: Tensor,
    last: Tensor,
    values: Tensor,
    segments: usize,
    start_score: f64,
    end_score: f64,
}

impl PathAccumulator {
    pub fn new(segnet: &dyn Segmenter, mask: &ClassMask, start: &Tensor, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::config("need at least one sample per segment"));
        }
        let start_score = score_value(segnet, start, mask)?;
        Ok(PathAccumulator {
            samples,
            start: start.clone(),
            last: start.clone(),
            values: Tensor::zeros(start.shape()),
            segments: 0,
            start_score,
            end_score: start_score,
        })
    }

    /// Extends the path by the segment from the last state to `next`.
    pub fn push(&mut self, segnet: &dyn Segmenter, mask: &ClassMask, next: &Tensor) -> Result<()> {
        next.expect_same_shape(&self.last)?;
        let inc = next.zip_with(&self.last, |a, b| a - b)?;
        for s in 1..=self.samples {
            let point = if s == self.samples {
                next.clone()
            } else {
                let t = s as f64 / self.samples as f64;
                self.last.zip_with(&inc, |a, d| a + t * d)?
            };
            let (grad, score) = score_gradient(segnet, &point, mask)?;
            for ((acc, gr), d) in self.values.data_mut().iter_mut().zip(grad.data()).zip(inc.data()) {
                *acc += gr * d / self.samples as f64;
            }
            self.end_score = score;
        }
        self.last = next.clone();
        self.segments += 1;
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn start(&self) -> &Tensor {
        &self.start
    }

    pub fn map(&self) -> AttributionMap {
        AttributionMap {
            values: self.values.clone(),
            stage_index: self.segments,
            endpoint_scores: (self.start_score, self.end_score),
        }
    }
}

#[cfg(test)]
fn exact_difference(states: &[Tensor]) -> Tensor {
    let (first, last) = (&states[0], &states[states.len() - 1]);
    Tensor::from_fn(first.shape().to_vec(), |i| last.data()[i] - first.data()[i])
}

/// Plain input gradient of the image score at `state`.
pub fn grad_attribution_map(segnet: &dyn Segmenter, state: &Tensor, mask: &ClassMask) -> Result<AttributionMap> {
    let (values, score) = score_gradient(segnet, state, mask)?;
    Ok(AttributionMap { values, stage_index: 0, endpoint_scores: (score, score) })
}

/// Attention from path attribution over the states produced so far.
/// The first stage sees a single state and gets an all-zero map.
///
/// Successive calls within one forward pass extend a cached path; a call
/// whose states do not continue that path starts over.
pub struct PathAttention<'a> {
    pub segnet: &'a dyn Segmenter,
    pub mask: &'a ClassMask,
    pub samples_per_segment: usize,
    /// Every map computed, in stage order.
    pub maps: Vec<AttributionMap>,
    path: Option<PathAccumulator>,
}

impl<'a> PathAttention<'a> {
    pub fn new(segnet: &'a dyn Segmenter, mask: &'a ClassMask) -> Self {
        PathAttention { segnet, mask, samples_per_segment: 1, maps: Vec::new(), path: None }
    }
}

impl AttentionSource for PathAttention<'_> {
    fn attention(&mut self, _stage: usize, states: &[Tensor]) -> Result<Tensor> {
        if states.len() < 2 {
            return Ok(Tensor::zeros(states[0].shape()));
        }
        let reusable = self
            .path
            .as_ref()
            .is_some_and(|p| p.segments() < states.len() - 1 && p.start().bitwise_eq(&states[0]));
        if !reusable {
            self.path = Some(PathAccumulator::new(self.segnet, self.mask, &states[0], self.samples_per_segment)?);
        }
        let path = self.path.as_mut().expect("path initialised above");
        for s in &states[path.segments() + 1..] {
            path.push(self.segnet, self.mask, s)?;
        }
        let map = path.map();
        let values = map.values.clone();
        self.maps.push(map);
        Ok(values)
    }
}

/// Attention from the plain gradient at the latest state.
pub struct GradientAttention<'a> {
    pub segnet: &'a dyn Segmenter,
    pub mask: &'a ClassMask,
}

impl AttentionSource for GradientAttention<'_> {
    fn attention(&mut self, stage: usize, states: &[Tensor]) -> Result<Tensor> {
        let last = states.last().ok_or_else(|| Error::contract("no fused states"))?;
        let mut map = grad_attribution_map(self.segnet, last, self.mask)?;
        map.stage_index = stage - 1;
        Ok(map.values)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamTree;
    use crate::segmentor::SegNetParams;

    /// `y_c = a_c * I + b_c` per pixel: linear in the input.
    pub(crate) struct LinearSeg {
        pub slope: Tensor,
        pub offset: Tensor,
    }

    impl Segmenter for LinearSeg {
        fn num_classes(&self) -> usize {
            self.slope.shape()[1]
        }

        fn logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
            let a = g.constant(self.slope.clone());
            let b = g.constant(self.offset.clone());
            let y = g.mul(input, a)?;
            g.add(y, b)
        }
    }

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
    }

    fn rand_mask(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> ClassMask {
        ClassMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
    }

    #[test]
    fn class_score_anchors() {
        let mask = ClassMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut logits = Tensor::zeros([1, 2, 2, 2]);
        logits.data_mut()[4..].copy_from_slice(&[9.0, 2.5, 2.5, 9.0]);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let s = class_score(&mut g, l, &mask, 1).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 2.5);

        let single = ClassMask::new(2, 2, vec![0, 0, 3, 0]).unwrap();
        let l4 = g.constant(Tensor::from_fn([1, 4, 2, 2], |i| i as f64 * 0.5));
        let s = class_score(&mut g, l4, &single, 3).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 7.0);
        assert!(matches!(class_score(&mut g, l4, &single, 2), Err(Error::EmptyClassRegion { class: 2 })));
    }

    #[test]
    fn class_score_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = rand_tensor(&[1, 3, 5, 4], -2.0, 2.0, &mut rng);
        let mask = rand_mask(5, 4, 3, &mut rng);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        for c in mask.classes_present() {
            let s = class_score(&mut g, l, &mask, c).unwrap();
            let (mut acc, mut n) = (0.0, 0);
            for p in 0..20 {
                if mask.labels()[p] as usize == c {
                    acc += logits.at4(0, c, p / 4, p % 4);
                    n += 1;
                }
            }
            assert!((g.value(s).item().unwrap() - acc / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn image_score_anchors_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = rand_tensor(&[1, 3, 4, 4], -2.0, 2.0, &mut rng);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let one = ClassMask::uniform(4, 4, 2);
        let a = image_score(&mut g, l, &one).unwrap();
        let b = class_score(&mut g, l, &one, 2).unwrap();
        assert!((g.value(a).item().unwrap() - g.value(b).item().unwrap()).abs() <= 1e-15);

        let zeros = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let z = image_score(&mut g, zeros, &one).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 0.0);

        let mask = rand_mask(4, 4, 3, &mut rng);
        let s = image_score(&mut g, l, &mask).unwrap();
        let mut acc = 0.0;
        for p in 0..16 {
            acc += logits.at4(0, mask.labels()[p] as usize, p / 4, p % 4);
        }
        assert!((g.value(s).item().unwrap() - acc / 16.0).abs() <= 1e-12);
    }

    #[test]
    fn linear_model_ig_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = LinearSeg {
            slope: rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng),
            offset: rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng),
        };
        let img = rand_tensor(&[1, 1, 5, 5], 0.0, 1.0, &mut rng);
        let mask = rand_mask(5, 5, 3, &mut rng);
        for c in mask.classes_present() {
            let n_c = mask.region_len(c) as f64;
            for steps in [1, 4] {
                let s = class_integrated_gradients(&seg, &img, &mask, c, steps).unwrap();
                for p in 0..25 {
                    let (y, x) = (p / 5, p % 5);
                    let want = if mask.labels()[p] as usize == c {
                        seg.slope.at4(0, c, y, x) / n_c * img.data()[p]
                    } else {
                        0.0
                    };
                    assert!((s.data()[p] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_image_has_zero_attribution() {
        let net = SegNetParams::init(&mut ChaCha8Rng::seed_from_u64(4), 4, 3, 2).unwrap();
        let mask = ClassMask::new(3, 3, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]).unwrap();
        let s = class_integrated_gradients(&net, &Tensor::zeros([1, 1, 3, 3]), &mask, 1, 5).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(class_integrated_gradients(&net, &Tensor::zeros([1, 1, 3, 3]), &mask, 1, 0).is_err());
    }

    #[test]
    fn ig_matches_fresh_graph_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = SegNetParams::init(&mut rng, 5, 3, 2).unwrap();
        let img = rand_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let mask = rand_mask(8, 8, 3, &mut rng);
        let c = 2;
        let s = class_integrated_gradients(&net, &img, &mask, c, 5).unwrap();

        // Oracle: per step a fresh graph, score assembled by explicit loops.
        let mut oracle = vec![0.0; 64];
        for m in 1..=5 {
            let mut g = Graph::new();
            let x = g.param(img.map(|v| v * m as f64 / 5.0));
            let logits = net.logits(&mut g, x).unwrap();
            let mut terms = Vec::new();
            for p in 0..64 {
                if mask.labels()[p] as usize == c {
                    let mut sel = Tensor::zeros([1, 3, 8, 8]);
                    sel.data_mut()[c * 64 + p] = 1.0;
                    let sv = g.constant(sel);
                    let t = g.mul(logits, sv).unwrap();
                    terms.push(g.sum(t));
                }
            }
            let mut score = terms[0];
            for t in &terms[1..] {
                score = g.add(score, *t).unwrap();
            }
            let score = g.scale(score, 1.0 / terms.len() as f64);
            g.backward(score).unwrap();
            for p in 0..64 {
                oracle[p] += g.grad(x).unwrap().data()[p] * img.data()[p] / 5.0;
            }
        }
        for p in 0..64 {
            assert!((s.data()[p] - oracle[p]).abs() <= 1e-9);
        }
    }

    #[test]
    fn weight_rule_cases() {
        let eps = DEFAULT_EPS;
        assert_eq!(weight_from_sums(0.7, 0.7, eps), 0.5);
        let w = weight_from_sums(-2.0, 3.0, eps);
        assert_eq!(w, eps / (3.0 + 2.0 * eps));
        assert!(w <= 1e-6);
        assert_eq!(weight_from_sums(-1.0, -4.0, eps), 0.5);
        assert_eq!(weight_from_sums(0.0, 0.0, eps), 0.5);
    }

    #[test]
    fn weights_are_normalised_and_region_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = SegNetParams::init(&mut rng, 4, 3, 3).unwrap();
        let ir = rand_tensor(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let vi = rand_tensor(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let mask = rand_mask(6, 6, 3, &mut rng);
        let w = attribution_weights(&net, &ir, &vi, &mask, 3, DEFAULT_EPS).unwrap();
        for p in 0..36 {
            let (a, b) = (w.w1.data()[p], w.w2.data()[p]);
            assert!((a + b - 1.0).abs() <= 1e-12);
            assert!((0.0..=1.0).contains(&a));
            let class = mask.labels()[p] as usize;
            let entry = w.per_class.iter().find(|e| e.class == class).unwrap();
            assert_eq!(a, entry.w1);
        }
        assert_eq!(w.per_class.len(), mask.classes_present().len());
    }

    #[test]
    fn identical_sources_get_even_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SegNetParams::init(&mut rng, 4, 3, 3).unwrap();
        let img = rand_tensor(&[1, 1, 5, 5], 0.0, 1.0, &mut rng);
        let mask = rand_mask(5, 5, 3, &mut rng);
        let w = attribution_weights(&net, &img, &img, &mask, 2, DEFAULT_EPS).unwrap();
        assert!(w.w1.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100, 1e-100]), 1.0);
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1.0, 1e-16, 1e-16]), 1.0000000000000002);
    }

    #[test]
    fn path_telescopes_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let k = rng.gen_range(1..7);
            let states: Vec<Tensor> = (0..=k).map(|_| rand_tensor(&[1, 1, 4, 4], -3.0, 3.0, &mut rng)).collect();
            let path = PathIncrements::new(&states).unwrap();
            assert!(path.displacement().bitwise_eq(&exact_difference(&states)));
        }
        assert!(PathIncrements::new(&[Tensor::zeros([1, 1, 2, 2])]).is_err());
    }

    #[test]
    fn identical_states_give_zero_map() {
        let net = SegNetParams::init(&mut ChaCha8Rng::seed_from_u64(9), 4, 3, 2).unwrap();
        let s = Tensor::full([1, 1, 4, 4], 0.3);
        let mask = ClassMask::uniform(4, 4, 1);
        let map = unfolding_attribution_map(&net, &[s.clone(), s.clone(), s], &mask).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(map.stage_index, 2);
    }

    #[test]
    fn linear_score_completeness() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seg = LinearSeg {
            slope: rand_tensor(&[1, 3, 4, 4], -1.0, 1.0, &mut rng),
            offset: rand_tensor(&[1, 3, 4, 4], -1.0, 1.0, &mut rng),
        };
        let mask = rand_mask(4, 4, 3, &mut rng);
        let states: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[1, 1, 4, 4], 0.0, 1.0, &mut rng)).collect();
        for samples in [1, 3] {
            let map = subdivided_attribution_map(&seg, &states, &mask, samples).unwrap();
            assert!(map.completeness_residual().abs() <= 1e-9);
        }
    }

    #[test]
    fn two_stage_map_matches_two_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = SegNetParams::init(&mut rng, 4, 3, 3).unwrap();
        let mask = rand_mask(5, 5, 3, &mut rng);
        let states: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[1, 1, 5, 5], 0.0, 1.0, &mut rng)).collect();
        let map = unfolding_attribution_map(&net, &states, &mask).unwrap();

        let grad_at = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let l = net.logits(&mut g, v).unwrap();
            let oh = g.constant(mask.one_hot(3).unwrap());
            let p = g.mul(l, oh).unwrap();
            let s = g.mean_axes(p, &[2, 3]).unwrap();
            let s = g.sum(s);
            g.backward(s).unwrap();
            g.grad(v).unwrap().clone()
        };
        let (g1, g2) = (grad_at(&states[1]), grad_at(&states[2]));
        for p in 0..25 {
            let want = g1.data()[p] * (states[1].data()[p] - states[0].data()[p])
                + g2.data()[p] * (states[2].data()[p] - states[1].data()[p]);
            assert!((map.values.data()[p] - want).abs() <= 1e-9);
        }
        assert!(unfolding_attribution_map(&net, &states[..1], &mask).is_err());
    }

    #[test]
    fn cached_path_attention_matches_fresh_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = SegNetParams::init(&mut rng, 4, 3, 3).unwrap();
        let mask = rand_mask(5, 5, 3, &mut rng);
        let states: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[1, 1, 5, 5], 0.0, 1.0, &mut rng)).collect();
        let mut att = PathAttention::new(&net, &mask);
        assert!(att.attention(1, &states[..1]).unwrap().data().iter().all(|&v| v == 0.0));
        for k in 2..=4 {
            let got = att.attention(k, &states[..k]).unwrap();
            let fresh = unfolding_attribution_map(&net, &states[..k], &mask).unwrap();
            assert!(got.bitwise_eq(&fresh.values));
            assert_eq!(att.maps.last().unwrap(), &fresh);
        }
        // A different path restarts the cache.
        let other: Vec<Tensor> = states.iter().rev().cloned().collect();
        let got = att.attention(3, &other[..3]).unwrap();
        assert!(got.bitwise_eq(&unfolding_attribution_map(&net, &other[..3], &mask).unwrap().values));
    }

    #[test]
    fn grad_map_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let slope = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let seg = LinearSeg { slope: slope.clone(), offset: Tensor::zeros([1, 2, 3, 3]) };
        let mask = ClassMask::new(3, 3, vec![0, 1, 1, 0, 0, 1, 1, 1, 0]).unwrap();
        for img in [Tensor::zeros([1, 1, 3, 3]), rand_tensor(&[1, 1, 3, 3], 0.0, 1.0, &mut rng)] {
            let map = grad_attribution_map(&seg, &img, &mask).unwrap();
            for p in 0..9 {
                let c = mask.labels()[p] as usize;
                assert!((map.values.data()[p] - slope.data()[c * 9 + p] / 9.0).abs() <= 1e-15);
            }
        }
        let net = SegNetParams::init(&mut rng, 3, 2, 2).unwrap();
        let zero = net.map("", &mut |_, t| Tensor::zeros(t.shape()));
        let map = grad_attribution_map(&zero, &Tensor::full([1, 1, 3, 3], 0.4), &mask).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_map_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = SegNetParams::init(&mut rng, 4, 3, 3).unwrap();
        let mask = rand_mask(4, 4, 3, &mut rng);
        let img = rand_tensor(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let map = grad_attribution_map(&net, &img, &mask).unwrap();
        for p in 0..16 {
            let (mut a, mut b) = (img.clone(), img.clone());
            a.data_mut()[p] += 1e-5;
            b.data_mut()[p] -= 1e-5;
            let fd = (score_value(&net, &a, &mask).unwrap() - score_value(&net, &b, &mask).unwrap()) / 2e-5;
            let an = map.values.data()[p];
            assert!((an - fd).abs() / (fd.abs() + 1e-8) <= 1e-6, "pixel {p}: {an} vs {fd}");
        }
    }

}
