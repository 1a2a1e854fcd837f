//! Joint training of the fusion network and the segmenter.
//!
//! Every iteration recomputes the attribution weights and the attention maps
//! from the current segmenter (as constants), builds the full loss over a
//! batch on one graph, and takes a single Adam step over all parameters.

mod adam;
mod data;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_global_norm, AdamState};
pub use data::{crop, gaussian_blur, gen_synthetic, gen_synthetic_with, GenOptions, SceneSample, ShapeKind, ShapeMeta};

use crate::attribution::{attribution_weights, AttributionWeights, GradientAttention, PathAttention, DEFAULT_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{forward, AttentionSource, ForwardFlags, Sources, ZeroAttention};
use crate::losses::{gradient_loss, intensity_loss, seg_loss, total_loss_var, LossBreakdown, LossWeights};
use crate::model::{AttentionMode, FuseOptions, Model, ModelConfig, ModelParams};
use crate::params::{bind, grads, ParamTree};
use crate::tensor::Tensor;

/// Independent ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablations {
    pub no_attention: bool,
    pub grad_instead_of_ig: bool,
    pub no_l_int: bool,
    pub no_l_grad: bool,
    pub no_ms: bool,
    pub no_ml: bool,
    pub seg_loss_fused_only: bool,
}

impl Ablations {
    /// Flag names accepted by [`Ablations::parse`]. `no-memory` sets both
    /// memory switches.
    pub const NAMES: [&'static str; 8] =
        ["no-attention", "grad", "no-l-int", "no-l-grad", "no-ms", "no-ml", "no-memory", "seg-fused-only"];

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no-attention" => self.no_attention = true,
            "grad" => self.grad_instead_of_ig = true,
            "no-l-int" => self.no_l_int = true,
            "no-l-grad" => self.no_l_grad = true,
            "no-ms" => self.no_ms = true,
            "no-ml" => self.no_ml = true,
            "no-memory" => {
                self.no_ms = true;
                self.no_ml = true;
            }
            "seg-fused-only" => self.seg_loss_fused_only = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Comma-separated flag list; empty means none.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            a.set(name)?;
        }
        Ok(a)
    }

    pub fn attention_mode(&self) -> AttentionMode {
        if self.no_attention {
            AttentionMode::Off
        } else if self.grad_instead_of_ig {
            AttentionMode::Gradient
        } else {
            AttentionMode::Path
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ig_steps: usize,
    pub lambda: f64,
    pub mu: f64,
    pub eps: f64,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Stop after this many iterations, mid-epoch if necessary.
    pub max_iters: Option<usize>,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            ig_steps: 5,
            lambda: 1.0,
            mu: 0.1,
            eps: DEFAULT_EPS,
            lr: 1e-4,
            lr_halve_every: 10,
            epochs: 50,
            batch: 4,
            patch: 32,
            seed: 0,
            clip_norm: 10.0,
            max_iters: None,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.ig_steps == 0 {
            return Err(Error::config("ig_steps must be at least 1"));
        }
        if self.patch < 8 {
            return Err(Error::config("patch size must be at least 8"));
        }
        if self.batch == 0 || self.lr_halve_every == 0 {
            return Err(Error::config("batch and lr_halve_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("lr, eps and clip_norm must be positive"));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::config("lambda and mu must be non-negative"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, mu: self.mu, no_int: self.ablations.no_l_int, no_grad: self.ablations.no_l_grad }
    }

    pub fn fuse_options(&self) -> FuseOptions {
        FuseOptions {
            ig_steps: self.ig_steps,
            eps: self.eps,
            attention: self.ablations.attention_mode(),
            samples_per_segment: 1,
            no_ms: self.ablations.no_ms,
            no_ml: self.ablations.no_ml,
        }
    }

    /// `lr * 0.5^floor(epoch / lr_halve_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub fused: Var,
    pub parts: LossBreakdown,
}

/// Loss graph of one sample against bound parameters. `weights` and the
/// maps from `attention` enter as constants.
pub fn sample_loss(
    g: &mut Graph,
    bound: &ModelParams<Var>,
    sample: &SceneSample,
    weights: &AttributionWeights,
    attention: &mut dyn AttentionSource,
    cfg: &TrainConfig,
) -> Result<SampleLoss> {
    let s = Sources::constants(g, &sample.ir, &sample.vi, &weights.w1, &weights.w2)?;
    let flags = ForwardFlags {
        no_attention: cfg.ablations.no_attention,
        no_ms: cfg.ablations.no_ms,
        no_ml: cfg.ablations.no_ml,
    };
    let traj = forward(g, &s, &bound.fusion, attention, flags)?;
    let fused = traj.output();
    let l_int = intensity_loss(g, fused, s.ir, s.vi, s.w1, s.w2)?;
    let l_grad = gradient_loss(g, fused, s.ir, s.vi)?;
    let l_seg = seg_loss(g, &bound.seg, s.ir, s.vi, fused, &sample.mask, cfg.ablations.seg_loss_fused_only)?;
    let (total, parts) = total_loss_var(g, l_int, l_grad, l_seg, &cfg.loss_weights())?;
    Ok(SampleLoss { total, fused, parts })
}

/// The attention source a training or evaluation pass uses for `cfg`.
fn attention_for<'a>(cfg: &TrainConfig, params: &'a ModelParams<Tensor>, sample: &'a SceneSample) -> Box<dyn AttentionSource + 'a> {
    match cfg.ablations.attention_mode() {
        AttentionMode::Path => Box::new(PathAttention::new(&params.seg, &sample.mask)),
        AttentionMode::Gradient => Box::new(GradientAttention { segnet: &params.seg, mask: &sample.mask }),
        AttentionMode::Off => Box::new(ZeroAttention),
    }
}

/// Builds the mean loss over `samples` on `g`, with weights and attention
/// taken from the current parameter values.
fn batch_loss(
    g: &mut Graph,
    model: &Model,
    bound: &ModelParams<Var>,
    samples: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut sums = [0.0; 4];
    for sample in samples {
        let w = attribution_weights(&model.params.seg, &sample.ir, &sample.vi, &sample.mask, cfg.ig_steps, cfg.eps)?;
        let mut att = attention_for(cfg, &model.params, sample);
        let sl = sample_loss(g, bound, sample, &w, att.as_mut(), cfg)?;
        total = Some(match total {
            None => sl.total,
            Some(t) => g.add(t, sl.total)?,
        });
        for (acc, v) in sums.iter_mut().zip([sl.parts.l_int, sl.parts.l_grad, sl.parts.l_seg, sl.parts.l_total]) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let total = total.ok_or_else(|| Error::contract("empty batch"))?;
    let mean = g.scale(total, 1.0 / n);
    let parts = LossBreakdown { l_int: sums[0] / n, l_grad: sums[1] / n, l_seg: sums[2] / n, l_total: sums[3] / n };
    Ok((mean, parts))
}

/// Mean loss of `model` over whole, uncropped samples.
pub fn dataset_loss(model: &Model, samples: &[SceneSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = bind(&mut g, &model.params, false);
    Ok(batch_loss(&mut g, model, &bound, samples, cfg)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "iter,epoch,lr,l_int,l_grad,l_seg,l_total";

impl fmt::Display for LogRow {
    /// Floats use Rust's shortest round-trip formatting.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(f, "{},{},{},{},{},{},{}", self.iter, self.epoch, self.lr, l.l_int, l.l_grad, l.l_seg, l.l_total)
    }
}

pub fn write_log(rows: &[LogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last successful step.
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<Error>,
}

fn flatten(p: &ModelParams<Tensor>) -> Vec<Tensor> {
    p.leaves().into_iter().map(|(_, t)| t.clone()).collect()
}

fn unflatten(template: &ModelParams<Tensor>, flat: Vec<Tensor>) -> ModelParams<Tensor> {
    let mut it = flat.into_iter();
    template.map("", &mut |_, _| it.next().expect("one tensor per leaf"))
}

fn batch_samples(chunk: &[usize], dataset: &[SceneSample], patch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SceneSample>> {
    chunk
        .iter()
        .map(|&i| {
            let s = &dataset[i];
            let (h, w) = (s.mask.height(), s.mask.width());
            if patch >= h && patch >= w {
                Ok(s.clone())
            } else {
                let size = patch.min(h).min(w);
                let top = rng.gen_range(0..=h - size);
                let left = rng.gen_range(0..=w - size);
                crop(s, top, left, size)
            }
        })
        .collect()
}

/// Trains from the seeded initialisation. Configuration errors are returned
/// directly; numeric failures end training early and are reported in
/// [`TrainOutcome::aborted`].
pub fn train(cfg: &TrainConfig, dataset: &[SceneSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(s) = dataset.iter().find(|s| s.mask.max_class() >= cfg.model.seg_classes) {
        return Err(Error::domain(format!(
            "mask class {} exceeds the configured {} classes",
            s.mask.max_class(),
            cfg.model.seg_classes
        )));
    }
    let mut model = Model::init(cfg.model, cfg.seed)?;
    let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(&model.params.leaves().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::new();
    let mut iter = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_iters.is_some_and(|m| iter >= m) {
                return Ok(TrainOutcome { model, log, aborted: None });
            }
            let samples = batch_samples(chunk, dataset, cfg.patch, &mut rng)?;
            match step(&model, &samples, cfg, &names, &mut adam, lr) {
                Ok((params, loss)) => {
                    model.params = params;
                    log.push(LogRow { iter, epoch, lr, loss });
                }
                Err(e @ Error::NonFinite(_)) => return Ok(TrainOutcome { model, log, aborted: Some(e) }),
                Err(e) => return Err(e),
            }
            iter += 1;
        }
    }
    Ok(TrainOutcome { model, log, aborted: None })
}

fn step(
    model: &Model,
    samples: &[SceneSample],
    cfg: &TrainConfig,
    names: &[String],
    adam: &mut AdamState,
    lr: f64,
) -> Result<(ModelParams<Tensor>, LossBreakdown)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, &model.params, true);
    let (loss, parts) = batch_loss(&mut g, model, &bound, samples, cfg)?;
    g.backward(loss)?;
    let mut grad = flatten(&grads(&g, &bound));
    clip_global_norm(&mut grad, cfg.clip_norm);
    let mut flat = flatten(&model.params);
    let mut trial = adam.clone();
    trial.step(&mut flat, &grad, names, lr)?;
    if let Some(i) = flat.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {} diverged", names[i])));
    }
    *adam = trial;
    Ok((unflatten(&model.params, flat), parts))
}
