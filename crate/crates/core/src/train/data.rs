//! Synthetic infrared/visible scenes with exact class masks.
//!
//! Shapes carry a class. In the infrared image a shape is a flat per-class
//! temperature, blurred and noisy. In the visible image it is a sinusoidal
//! texture over an illumination ramp, and some shapes are drawn at
//! near-background contrast so that only the infrared image shows them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::tensor::Tensor;

pub const IR_BLUR_SIGMA: f64 = 1.0;
pub const IR_NOISE_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeMeta {
    pub kind: ShapeKind,
    pub class: u8,
    /// Centre `(y, x)` in pixels.
    pub center: (f64, f64),
    /// Half extents for rectangles; the radius is `extent.0` for disks.
    pub extent: (f64, f64),
    pub thermal: f64,
    pub frequency: f64,
    pub orientation: f64,
    /// Drawn at near-background contrast in the visible image.
    pub faint: bool,
}

impl ShapeMeta {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Rect => dy.abs() <= self.extent.0 && dx.abs() <= self.extent.1,
            ShapeKind::Disk => dy * dy + dx * dx <= self.extent.0 * self.extent.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub ir: Tensor,
    pub vi: Tensor,
    pub mask: ClassMask,
    pub shapes: Vec<ShapeMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Probability that a shape is faint in the visible image.
    pub faint_prob: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { min_shapes: 1, max_shapes: 4, kinds: vec![ShapeKind::Rect, ShapeKind::Disk], faint_prob: 0.3 }
    }
}

pub fn gen_synthetic(count: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<SceneSample>> {
    gen_synthetic_with(count, size, classes, seed, &GenOptions::default())
}

pub fn gen_synthetic_with(
    count: usize,
    size: usize,
    classes: usize,
    seed: u64,
    opts: &GenOptions,
) -> Result<Vec<SceneSample>> {
    if size < 8 {
        return Err(Error::config(format!("image size {size} is below the minimum of 8")));
    }
    if !(2..=256).contains(&classes) {
        return Err(Error::config(format!("need 2..=256 classes, got {classes}")));
    }
    if opts.min_shapes == 0 || opts.min_shapes > opts.max_shapes || opts.kinds.is_empty() {
        return Err(Error::config("invalid shape options"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_one(&mut rng, size, classes, opts)).collect()
}

fn gen_one(rng: &mut ChaCha8Rng, size: usize, classes: usize, opts: &GenOptions) -> Result<SceneSample> {
    let s = size as f64;
    let thermal: Vec<f64> = (0..classes).map(|c| if c == 0 { 0.0 } else { rng.gen_range(0.55..0.95) }).collect();
    let background = rng.gen_range(0.1..0.25);
    let count = rng.gen_range(opts.min_shapes..=opts.max_shapes);
    let shapes: Vec<ShapeMeta> = (0..count)
        .map(|_| {
            let kind = opts.kinds[rng.gen_range(0..opts.kinds.len())];
            let class = rng.gen_range(1..classes) as u8;
            let extent = match kind {
                ShapeKind::Rect => (rng.gen_range(0.12 * s..0.3 * s), rng.gen_range(0.12 * s..0.3 * s)),
                ShapeKind::Disk => {
                    let r = rng.gen_range(0.15 * s..0.3 * s);
                    (r, r)
                }
            };
            ShapeMeta {
                kind,
                class,
                center: (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s)),
                extent,
                thermal: thermal[class as usize],
                frequency: rng.gen_range(0.15..0.45),
                orientation: rng.gen_range(0.0..std::f64::consts::PI),
                faint: rng.gen_bool(opts.faint_prob),
            }
        })
        .collect();

    // Topmost shape (last drawn) owns each pixel.
    let owner: Vec<Option<usize>> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
            shapes.iter().rposition(|sh| sh.contains(y, x))
        })
        .collect();
    let labels = owner.iter().map(|o| o.map_or(0, |i| shapes[i].class)).collect();

    let heat: Vec<f64> = owner.iter().map(|o| o.map_or(background, |i| shapes[i].thermal)).collect();
    let noise = Normal::new(0.0, IR_NOISE_SIGMA).expect("valid sigma");
    let ir: Vec<f64> =
        gaussian_blur(&heat, size, size, IR_BLUR_SIGMA).into_iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect();

    let ramp_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ramp_lo, ramp_span) = (rng.gen_range(0.25..0.45), rng.gen_range(0.1..0.3));
    let vi: Vec<f64> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64, (p % size) as f64);
            let t = 0.5 + (x - s / 2.0) * ramp_angle.cos() / s + (y - s / 2.0) * ramp_angle.sin() / s;
            let base = ramp_lo + ramp_span * t;
            let v = match owner[p] {
                None => base,
                Some(i) => {
                    let sh = &shapes[i];
                    let phase = x * sh.orientation.cos() + y * sh.orientation.sin();
                    let texture = (std::f64::consts::TAU * sh.frequency * phase).sin();
                    if sh.faint {
                        base + 0.03 * texture
                    } else {
                        base + 0.2 + 0.2 * texture
                    }
                }
            };
            v.clamp(0.0, 1.0)
        })
        .collect();

    Ok(SceneSample {
        ir: Tensor::image(size, size, ir)?,
        vi: Tensor::image(size, size, vi)?,
        mask: ClassMask::new(size, size, labels)?,
        shapes,
    })
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, edges replicated.
pub fn gaussian_blur(img: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * img[y * width + clampi(x as isize + i as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clampi(y as isize + i as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}

/// Crops a square patch from every image of a sample.
pub fn crop(sample: &SceneSample, top: usize, left: usize, size: usize) -> Result<SceneSample> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    if top + size > h || left + size > w {
        return Err(Error::shape(format!("crop {size} at ({top},{left}) exceeds {h}x{w}")));
    }
    let cut = |t: &Tensor| {
        Tensor::image(size, size, (0..size * size).map(|p| t.at4(0, 0, top + p / size, left + p % size)).collect())
    };
    let labels = (0..size * size).map(|p| sample.mask.labels()[(top + p / size) * w + left + p % size]).collect();
    Ok(SceneSample {
        ir: cut(&sample.ir)?,
        vi: cut(&sample.vi)?,
        mask: ClassMask::new(size, size, labels)?,
        shapes: sample.shapes.clone(),
    })
}
