//! The complete fusion model: unrolled fusion network plus the auxiliary
//! segmenter, and the inference pipeline that ties them together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{attribution_weights, AttributionWeights, GradientAttention, PathAttention};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{forward, AttentionSource, ForwardFlags, FusionParams, FusionTrajectory, Sources, ZeroAttention};
use crate::mask::ClassMask;
use crate::params::{bind, join, ParamTree};
use crate::segmentor::{predict_mask, SegNetParams};
use crate::tensor::Tensor;

/// Layers in the segmenter.
pub const SEG_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: usize,
    pub channels: usize,
    pub seg_classes: usize,
    pub seg_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { stages: 5, channels: 16, seg_classes: 4, seg_channels: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("stages must be at least 1"));
        }
        if self.channels == 0 || self.seg_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(2..=256).contains(&self.seg_classes) {
            return Err(Error::config("segmentation classes must be in 2..=256"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub fusion: FusionParams<T>,
    pub seg: SegNetParams<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            fusion: self.fusion.try_map(&join(prefix, "fusion"), f)?,
            seg: self.seg.try_map(&join(prefix, "seg"), f)?,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.fusion.visit(f);
        self.seg.visit(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Seeded initialisation; fusion parameters are drawn before the segmenter's.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionParams::init(&mut rng, config.stages, config.channels)?;
        let seg = SegNetParams::init(&mut rng, config.seg_channels, config.seg_classes, SEG_DEPTH)?;
        Ok(Model { config, params: ModelParams { fusion, seg } })
    }

    /// Rebuilds a model from named tensors, checking every name and shape
    /// against a fresh initialisation of `config`.
    pub fn from_named(config: ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Model::init(config, 0)?;
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let lookup = |name: &str| named.binary_search_by(|(n, _)| n.as_str().cmp(name)).ok();
        let expected = template.params.leaves().len();
        if named.len() != expected {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected {expected} tensors, found {}", named.len()),
            });
        }
        let params = template.params.try_map("", &mut |name, t| {
            let i = lookup(name).ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("missing tensor {name}"),
            })?;
            let found = &named[i].1;
            if found.shape() != t.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("tensor {name} has shape {:?}, expected {:?}", found.shape(), t.shape()),
                });
            }
            Ok(found.clone())
        })?;
        Ok(Model { config, params })
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.leaves().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.leaves().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Where the per-stage attention maps come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    /// Path attribution along the fused states.
    #[default]
    Path,
    /// Plain input gradient at the latest state.
    Gradient,
    /// All-zero maps.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuseOptions {
    pub ig_steps: usize,
    pub eps: f64,
    pub attention: AttentionMode,
    pub samples_per_segment: usize,
    pub no_ms: bool,
    pub no_ml: bool,
}

impl Default for FuseOptions {
    fn default() -> Self {
        FuseOptions {
            ig_steps: 5,
            eps: crate::attribution::DEFAULT_EPS,
            attention: AttentionMode::Path,
            samples_per_segment: 1,
            no_ms: false,
            no_ml: false,
        }
    }
}

impl FuseOptions {
    pub(crate) fn flags(&self) -> ForwardFlags {
        ForwardFlags { no_attention: self.attention == AttentionMode::Off, no_ms: self.no_ms, no_ml: self.no_ml }
    }
}

/// Everything one inference pass produces. `states` are unclamped.
#[derive(Clone, Debug)]
pub struct FuseResult {
    pub mask: ClassMask,
    pub weights: AttributionWeights,
    pub states: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

impl FuseResult {
    pub fn output(&self) -> &Tensor {
        self.states.last().expect("at least I(0)")
    }
}

/// Runs the fusion network with a given mask and weights. The attention
/// source is chosen from `opts`.
pub fn run_fusion(
    g: &mut Graph,
    params: &ModelParams<Tensor>,
    bound_fusion: &FusionParams<Var>,
    sources: &Sources,
    mask: &ClassMask,
    opts: &FuseOptions,
) -> Result<FusionTrajectory> {
    let mut path;
    let mut grad;
    let source: &mut dyn AttentionSource = match opts.attention {
        AttentionMode::Path => {
            path = PathAttention::new(&params.seg, mask);
            path.samples_per_segment = opts.samples_per_segment;
            &mut path
        }
        AttentionMode::Gradient => {
            grad = GradientAttention { segnet: &params.seg, mask };
            &mut grad
        }
        AttentionMode::Off => &mut ZeroAttention,
    };
    forward(g, sources, bound_fusion, source, opts.flags())
}

/// Inference without ground truth: the class mask is predicted from both
/// sources, then weights, attention and the unrolled stages follow.
pub fn fuse(model: &Model, ir: &Tensor, vi: &Tensor, opts: &FuseOptions) -> Result<FuseResult> {
    ir.expect_same_shape(vi)?;
    let mask = predict_mask(&model.params.seg, ir, vi)?;
    fuse_with_mask(model, ir, vi, mask, opts)
}

pub fn fuse_with_mask(model: &Model, ir: &Tensor, vi: &Tensor, mask: ClassMask, opts: &FuseOptions) -> Result<FuseResult> {
    let weights = attribution_weights(&model.params.seg, ir, vi, &mask, opts.ig_steps, opts.eps)?;
    let mut g = Graph::new();
    let sources = Sources::constants(&mut g, ir, vi, &weights.w1, &weights.w2)?;
    let fusion = bind(&mut g, &model.params.fusion, false);
    let traj = run_fusion(&mut g, &model.params, &fusion, &sources, &mask, opts)?;
    let states = traj.fused_values(&g);
    if let Some(k) = states.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("fused state {k} is not finite")));
    }
    Ok(FuseResult { mask, weights, states, attention: traj.attention })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { stages: 2, channels: 3, seg_classes: 3, seg_channels: 4 }
    }

    fn images(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Tensor::from_fn([1, 1, 6, 7], |_| rng.gen_range(0.0..1.0));
        (img(), img())
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(tiny(), 3).unwrap();
        assert_eq!(a, Model::init(tiny(), 3).unwrap());
        assert_ne!(a, Model::init(tiny(), 4).unwrap());
        assert!(Model::init(ModelConfig { stages: 0, ..tiny() }, 0).is_err());
        assert!(Model::init(ModelConfig { seg_classes: 1, ..tiny() }, 0).is_err());
    }

    #[test]
    fn named_roundtrip_and_validation() {
        let m = Model::init(tiny(), 5).unwrap();
        let named = m.named();
        assert!(named.iter().any(|(n, _)| n == "fusion.stage2.rho"));
        assert!(named.iter().any(|(n, _)| n == "seg.conv3.bias"));
        let mut shuffled = named.clone();
        shuffled.reverse();
        assert_eq!(Model::from_named(tiny(), shuffled).unwrap(), m);

        let mut missing = named.clone();
        missing.pop();
        assert!(Model::from_named(tiny(), missing).is_err());
        let mut bad = named;
        bad[0].1 = Tensor::zeros([1]);
        assert!(Model::from_named(tiny(), bad).is_err());
    }

    #[test]
    fn fuse_shapes_and_determinism() {
        let m = Model::init(tiny(), 6).unwrap();
        let (ir, vi) = images(7);
        let a = fuse(&m, &ir, &vi, &FuseOptions::default()).unwrap();
        assert_eq!(a.states.len(), 3);
        assert_eq!(a.output().shape(), &[1, 1, 6, 7]);
        assert_eq!(a.attention.len(), 2);
        let b = fuse(&m, &ir, &vi, &FuseOptions::default()).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!(x.bitwise_eq(y));
        }
    }

    #[test]
    fn attention_modes_differ() {
        let m = Model::init(tiny(), 8).unwrap();
        let (ir, vi) = images(9);
        let run = |attention| {
            fuse(&m, &ir, &vi, &FuseOptions { attention, ..Default::default() }).unwrap().output().clone()
        };
        let (p, g, o) = (run(AttentionMode::Path), run(AttentionMode::Gradient), run(AttentionMode::Off));
        assert!(!p.bitwise_eq(&g));
        assert!(!p.bitwise_eq(&o));
    }
}
