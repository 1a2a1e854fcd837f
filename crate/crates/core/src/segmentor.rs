//! Small fully-convolutional segmentation network.
//!
//! Three same-padded 3x3 convolutions with ReLU between them; the output is
//! raw per-pixel class logits. It only has to be a differentiable per-pixel
//! classifier for the attribution machinery, so depth stays configurable.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::params::{bind, join, Conv, ParamTree};
use crate::tensor::Tensor;

/// Anything that maps a `[N, 1, H, W]` image to `[N, C, H, W]` logits on a graph.
pub trait Segmenter {
    fn num_classes(&self) -> usize;

    fn logits(&self, g: &mut Graph, input: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetParams<T> {
    pub layers: Vec<Conv<T>>,
}

impl SegNetParams<Tensor> {
    pub fn init(rng: &mut impl Rng, hidden: usize, classes: usize, depth: usize) -> Result<Self> {
        if depth < 1 {
            return Err(Error::config("segmentation network needs at least one layer"));
        }
        if classes < 2 {
            return Err(Error::config("segmentation needs at least two classes"));
        }
        let layers = (0..depth)
            .map(|i| {
                let cin = if i == 0 { 1 } else { hidden };
                let cout = if i + 1 == depth { classes } else { hidden };
                Conv::init(rng, cin, cout, 3)
            })
            .collect();
        Ok(SegNetParams { layers })
    }

    pub fn hidden_channels(&self) -> usize {
        self.layers[0].out_channels()
    }
}

impl<T> SegNetParams<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

impl<T> ParamTree<T> for SegNetParams<T> {
    type Mapped<U> = SegNetParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<SegNetParams<U>, E> {
        Ok(SegNetParams { layers: self.layers.try_map(&join(prefix, "conv"), f)? })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.layers.visit(f);
    }
}

/// Logits of `input` under bound parameters.
pub fn seg_forward(g: &mut Graph, input: Var, params: &SegNetParams<Var>) -> Result<Var> {
    match g.shape(input) {
        [_, 1, _, _] => {}
        s => return Err(Error::shape(format!("segmentation input must be [N,1,H,W], got {s:?}"))),
    }
    let mut x = input;
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer.apply(g, x)?;
        if i + 1 < params.layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

impl Segmenter for SegNetParams<Tensor> {
    fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Conv::out_channels)
    }

    fn logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let bound = bind(g, self, false);
        seg_forward(g, input, &bound)
    }
}

/// Mean over pixels of `-log softmax(logits)[true class]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, mask: &ClassMask) -> Result<Var> {
    let (n, classes, _, _) = g.value(logits).dims4()?;
    if n != 1 {
        return Err(Error::shape("cross_entropy expects a single-sample batch"));
    }
    mask.expect_fits(g.shape(logits))?;
    let target = g.constant(mask.one_hot(classes)?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, target)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / mask.num_pixels() as f64))
}

/// Class map from the averaged per-pixel class probabilities of two images;
/// ties go to the lower class id.
pub fn predict_mask(segnet: &dyn Segmenter, a: &Tensor, b: &Tensor) -> Result<ClassMask> {
    a.expect_same_shape(b)?;
    let (_, _, h, w) = a.dims4()?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let la = segnet.logits(&mut g, av)?;
    let lb = segnet.logits(&mut g, bv)?;
    let pa = g.softmax(la)?;
    let pb = g.softmax(lb)?;
    let sum = g.add(pa, pb)?;
    let probs = g.value(sum);
    let classes = probs.shape()[1];
    let labels = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let mut best = 0;
            for c in 1..classes {
                if probs.at4(0, c, y, x) > probs.at4(0, best, y, x) {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ClassMask::new(h, w, labels)
}
