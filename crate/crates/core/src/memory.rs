//! Cross-stage memory: the short-term memory is the previous stage's last
//! feature map, the long-term memory is read out of a ConvLSTM cell.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Conv, ParamTree};
use crate::tensor::Tensor;

/// One gate: a biased kernel on `z` and an unbiased kernel on `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T> {
    pub z: Conv<T>,
    pub h: T,
}

impl<T> ParamTree<T> for Gate<T> {
    type Mapped<U> = Gate<U>;

    fn try_map<U, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<Gate<U>, E> {
        Ok(Gate { z: self.z.try_map(&join(prefix, "z"), f)?, h: f(&join(prefix, "h.weight"), &self.h)? })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.z.visit(f);
        f(&self.h);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<T> {
    pub input: Gate<T>,
    pub forget: Gate<T>,
    pub cell: Gate<T>,
    pub output: Gate<T>,
    /// Hidden state to long-term memory.
    pub ml: Conv<T>,
}

impl ConvLstmParams<Tensor> {
    /// Gates see `3 * channels` input channels; the hidden width equals `channels`.
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        let gate = |rng: &mut _, forget_bias: f64| {
            let mut z = Conv::init(rng, 3 * channels, channels, 3);
            z.bias = Tensor::full([channels], forget_bias);
            let h = Conv::init(rng, channels, channels, 3).weight;
            Gate { z, h }
        };
        let input = gate(rng, 0.0);
        let forget = gate(rng, 1.0);
        let cell = gate(rng, 0.0);
        let output = gate(rng, 0.0);
        ConvLstmParams { input, forget, cell, output, ml: Conv::init(rng, channels, channels, 3) }
    }

    pub fn channels(&self) -> usize {
        self.ml.out_channels()
    }
}

impl<T> ParamTree<T> for ConvLstmParams<T> {
    type Mapped<U> = ConvLstmParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ConvLstmParams<U>, E> {
        Ok(ConvLstmParams {
            input: self.input.try_map(&join(prefix, "input"), f)?,
            forget: self.forget.try_map(&join(prefix, "forget"), f)?,
            cell: self.cell.try_map(&join(prefix, "cell"), f)?,
            output: self.output.try_map(&join(prefix, "output"), f)?,
            ml: self.ml.try_map(&join(prefix, "ml"), f)?,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.input.visit(f);
        self.forget.visit(f);
        self.cell.visit(f);
        self.output.visit(f);
        self.ml.visit(f);
    }
}

/// Graph-side memory carried between stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryState {
    pub m_s: Var,
    pub m_l: Var,
    pub h: Var,
    pub c: Var,
}

impl MemoryState {
    /// All-zero state for a `[n, channels, height, width]` feature shape.
    pub fn zeros(g: &mut Graph, n: usize, channels: usize, height: usize, width: usize) -> Self {
        let shape = [n, channels, height, width];
        MemoryState {
            m_s: g.constant(Tensor::zeros(shape)),
            m_l: g.constant(Tensor::zeros(shape)),
            h: g.constant(Tensor::zeros(shape)),
            c: g.constant(Tensor::zeros(shape)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    pub h: Var,
    pub c: Var,
    pub i: Var,
    pub f: Var,
    pub o: Var,
}

fn gate_pre(g: &mut Graph, gate: &Gate<Var>, z: Var, h: Var) -> Result<Var> {
    let a = gate.z.apply(g, z)?;
    let b = g.conv2d_same(h, gate.h, None)?;
    g.add(a, b)
}

pub fn convlstm_step(g: &mut Graph, z: Var, h_prev: Var, c_prev: Var, p: &ConvLstmParams<Var>) -> Result<LstmOutput> {
    if g.shape(h_prev) != g.shape(c_prev) {
        return Err(Error::shape(format!(
            "hidden {:?} and cell {:?} states differ",
            g.shape(h_prev),
            g.shape(c_prev)
        )));
    }
    let i = gate_pre(g, &p.input, z, h_prev)?;
    let i = g.sigmoid(i);
    let f = gate_pre(g, &p.forget, z, h_prev)?;
    let f = g.sigmoid(f);
    let cand = gate_pre(g, &p.cell, z, h_prev)?;
    let cand = g.tanh(cand);
    let o = gate_pre(g, &p.output, z, h_prev)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmOutput { h, c, i, f, o })
}

pub fn update_memories(
    g: &mut Graph,
    features: [Var; 3],
    state: &MemoryState,
    p: &ConvLstmParams<Var>,
) -> Result<MemoryState> {
    let [f1, f2, f3] = features;
    let z = g.concat(&[f1, f2, f3], 1)?;
    let out = convlstm_step(g, z, state.h, state.c, p)?;
    let m_l = p.ml.apply(g, out.h)?;
    Ok(MemoryState { m_s: f3, m_l, h: out.h, c: out.c })
}
