//! Unrolled fusion network.
//!
//! Each stage takes a gradient step on the weighted fidelity terms, then runs
//! a learned proximal block: `conv_in`, a memory-fed `conv_mem` with ReLU, an
//! attention-gated residual branch `conv_att`, and `conv_out` back to one
//! channel. Fused images are never clamped between stages.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memory::{update_memories, ConvLstmParams, MemoryState};
use crate::params::{join, Conv, ParamTree};
use crate::tensor::Tensor;

pub const RHO_INIT: f64 = 0.01;

/// Supplies the attention map for stage `stage` (1-based) from the fused
/// states `I(0..stage-1)` produced so far.
pub trait AttentionSource {
    fn attention(&mut self, stage: usize, states: &[Tensor]) -> Result<Tensor>;
}

/// Precomputed per-stage maps, indexed from stage 1.
pub struct FixedAttention(pub Vec<Tensor>);

impl AttentionSource for FixedAttention {
    fn attention(&mut self, stage: usize, _states: &[Tensor]) -> Result<Tensor> {
        self.0
            .get(stage - 1)
            .cloned()
            .ok_or_else(|| Error::contract(format!("no attention map for stage {stage}")))
    }
}

/// Zero maps everywhere (uniform 0.5 gate).
pub struct ZeroAttention;

impl AttentionSource for ZeroAttention {
    fn attention(&mut self, _stage: usize, states: &[Tensor]) -> Result<Tensor> {
        Ok(Tensor::zeros(states[0].shape()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub conv_in: Conv<T>,
    pub conv_mem: Conv<T>,
    pub conv_att: Conv<T>,
    pub conv_out: Conv<T>,
    /// Step size, shape `[1]`.
    pub rho: T,
}

impl StageParams<Tensor> {
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        StageParams {
            conv_in: Conv::init(rng, 1, channels, 3),
            conv_mem: Conv::init(rng, 3 * channels, channels, 3),
            conv_att: Conv::init(rng, channels, channels, 3),
            conv_out: Conv::init(rng, channels, 1, 3),
            rho: Tensor::full([1], RHO_INIT),
        }
    }
}

impl<T> ParamTree<T> for StageParams<T> {
    type Mapped<U> = StageParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<StageParams<U>, E> {
        Ok(StageParams {
            conv_in: self.conv_in.try_map(&join(prefix, "conv_in"), f)?,
            conv_mem: self.conv_mem.try_map(&join(prefix, "conv_mem"), f)?,
            conv_att: self.conv_att.try_map(&join(prefix, "conv_att"), f)?,
            conv_out: self.conv_out.try_map(&join(prefix, "conv_out"), f)?,
            rho: f(&join(prefix, "rho"), &self.rho)?,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.conv_in.visit(f);
        self.conv_mem.visit(f);
        self.conv_att.visit(f);
        self.conv_out.visit(f);
        f(&self.rho);
    }
}

/// Per-stage proximal blocks plus the ConvLSTM shared by all stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub stages: Vec<StageParams<T>>,
    pub lstm: ConvLstmParams<T>,
}

impl FusionParams<Tensor> {
    pub fn init(rng: &mut impl Rng, stages: usize, channels: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::config("need at least one stage"));
        }
        if channels == 0 {
            return Err(Error::config("need at least one feature channel"));
        }
        let stages = (0..stages).map(|_| StageParams::init(rng, channels)).collect();
        Ok(FusionParams { stages, lstm: ConvLstmParams::init(rng, channels) })
    }

    pub fn channels(&self) -> usize {
        self.lstm.channels()
    }
}

impl<T> FusionParams<T> {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

impl<T> ParamTree<T> for FusionParams<T> {
    type Mapped<U> = FusionParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<FusionParams<U>, E> {
        Ok(FusionParams {
            stages: self.stages.try_map(&join(prefix, "stage"), f)?,
            lstm: self.lstm.try_map(&join(prefix, "lstm"), f)?,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.stages.visit(f);
        self.lstm.visit(f);
    }
}

/// The two sources and their weights, all `[N, 1, H, W]` on one graph.
#[derive(Clone, Copy, Debug)]
pub struct Sources {
    pub ir: Var,
    pub vi: Var,
    pub w1: Var,
    pub w2: Var,
}

impl Sources {
    pub fn constants(g: &mut Graph, ir: &Tensor, vi: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Self> {
        for t in [vi, w1, w2] {
            ir.expect_same_shape(t)?;
        }
        match ir.shape() {
            [_, 1, _, _] => {}
            s => return Err(Error::shape(format!("sources must be [N,1,H,W], got {s:?}"))),
        }
        Ok(Sources {
            ir: g.constant(ir.clone()),
            vi: g.constant(vi.clone()),
            w1: g.constant(w1.clone()),
            w2: g.constant(w2.clone()),
        })
    }
}

/// `w1 * ir + w2 * vi`.
pub fn init_fused(g: &mut Graph, s: &Sources) -> Result<Var> {
    let a = g.mul(s.w1, s.ir)?;
    let b = g.mul(s.w2, s.vi)?;
    g.add(a, b)
}

/// `w1 * (fused - ir) + w2 * (fused - vi)`.
pub fn fidelity_gradient(g: &mut Graph, fused: Var, s: &Sources) -> Result<Var> {
    let d1 = g.sub(fused, s.ir)?;
    let d2 = g.sub(fused, s.vi)?;
    let a = g.mul(s.w1, d1)?;
    let b = g.mul(s.w2, d2)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub f0: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

/// One unrolled stage; returns the new fused image and its features.
pub fn run_stage(
    g: &mut Graph,
    prev: Var,
    s: &Sources,
    m_s: Var,
    m_l: Var,
    attention: Var,
    p: &StageParams<Var>,
) -> Result<(Var, StageFeatures)> {
    let fid = fidelity_gradient(g, prev, s)?;
    let step = g.mul(p.rho, fid)?;
    let f0 = g.sub(prev, step)?;
    let f1 = p.conv_in.apply(g, f0)?;
    if g.shape(f1) != g.shape(m_s) || g.shape(f1) != g.shape(m_l) {
        return Err(Error::shape(format!(
            "stage features {:?} do not match memories {:?} / {:?}",
            g.shape(f1),
            g.shape(m_s),
            g.shape(m_l)
        )));
    }
    let cat = g.concat(&[f1, m_s, m_l], 1)?;
    let f2 = p.conv_mem.apply(g, cat)?;
    let f2 = g.relu(f2);
    let gate = g.sigmoid(attention);
    let att = p.conv_att.apply(g, f2)?;
    let gated = g.mul(gate, att)?;
    let f3 = g.add(gated, f2)?;
    let out = p.conv_out.apply(g, f3)?;
    Ok((out, StageFeatures { f0, f1, f2, f3 }))
}

/// Ablation switches for the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardFlags {
    /// Feed zero attention without consulting the source.
    pub no_attention: bool,
    pub no_ms: bool,
    pub no_ml: bool,
}

#[derive(Clone, Debug)]
pub struct FusionTrajectory {
    /// `I(0..=K)`.
    pub fused: Vec<Var>,
    pub features: Vec<StageFeatures>,
    /// Attention map fed to each stage.
    pub attention: Vec<Tensor>,
    /// State after each stage.
    pub memories: Vec<MemoryState>,
}

impl FusionTrajectory {
    pub fn output(&self) -> Var {
        *self.fused.last().expect("trajectory holds I(0)")
    }

    pub fn fused_values(&self, g: &Graph) -> Vec<Tensor> {
        self.fused.iter().map(|&v| g.value(v).clone()).collect()
    }
}

/// Runs all stages. Attention maps are computed from detached copies of the
/// fused states and enter the graph as constants.
pub fn forward(
    g: &mut Graph,
    s: &Sources,
    params: &FusionParams<Var>,
    attention: &mut dyn AttentionSource,
    flags: ForwardFlags,
) -> Result<FusionTrajectory> {
    if params.stages.is_empty() {
        return Err(Error::config("need at least one stage"));
    }
    let (n, _, h, w) = g.value(s.ir).dims4()?;
    let channels = g.shape(params.lstm.ml.weight)[0];
    let zeros = g.constant(Tensor::zeros([n, channels, h, w]));
    let mut state = MemoryState::zeros(g, n, channels, h, w);
    let mut traj = FusionTrajectory {
        fused: vec![init_fused(g, s)?],
        features: Vec::new(),
        attention: Vec::new(),
        memories: Vec::new(),
    };
    for (k, stage) in params.stages.iter().enumerate() {
        let map = if flags.no_attention {
            Tensor::zeros([n, 1, h, w])
        } else {
            let states: Vec<Tensor> = traj.fused_values(g);
            let map = attention.attention(k + 1, &states)?;
            if map.shape() != [n, 1, h, w] {
                return Err(Error::shape(format!("attention map {:?} for stage {}", map.shape(), k + 1)));
            }
            map
        };
        let a = g.constant(map.clone());
        let m_s = if flags.no_ms { zeros } else { state.m_s };
        let m_l = if flags.no_ml { zeros } else { state.m_l };
        let (out, feats) = run_stage(g, traj.output(), s, m_s, m_l, a, stage)?;
        state = update_memories(g, [feats.f1, feats.f2, feats.f3], &state, &params.lstm)?;
        traj.fused.push(out);
        traj.features.push(feats);
        traj.attention.push(map);
        traj.memories.push(state);
    }
    Ok(traj)
}
