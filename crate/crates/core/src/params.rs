//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `T = Tensor` for stored
//! weights and `T = Var` once bound to a [`Graph`]. [`ParamTree::try_map`]
//! walks leaves in a fixed order with dotted names such as
//! `fusion.stage1.conv_in.weight`, which gives checkpointing, optimisation and
//! graph binding one traversal to share.

use std::convert::Infallible;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Mapped<U>: ParamTree<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Self::Mapped<U>, E>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        match self.try_map::<U, Infallible>(prefix, &mut |n, t| Ok(f(n, t))) {
            Ok(m) => m,
            Err(never) => match never {},
        }
    }

    /// Leaves in traversal order.
    fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        // Collect names first; references come from a second walk over `self`.
        self.map("", &mut |name, _| out.push(name.to_owned()));
        let mut refs = Vec::new();
        self.visit(&mut |t| refs.push(t));
        out.into_iter().zip(refs).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Puts every tensor of `tree` on `g`, as trainable leaves or constants.
pub fn bind<P: ParamTree<Tensor>>(g: &mut Graph, tree: &P, trainable: bool) -> P::Mapped<Var> {
    tree.map("", &mut |_, t| g.leaf(t.clone(), trainable))
}

/// Reads the current values of a bound tree back into tensors.
pub fn values<P: ParamTree<Var>>(g: &Graph, tree: &P) -> P::Mapped<Tensor> {
    tree.map("", &mut |_, v| g.value(*v).clone())
}

/// Gradients of a bound tree after backward; untouched leaves get zeros.
pub fn grads<P: ParamTree<Var>>(g: &Graph, tree: &P) -> P::Mapped<Tensor> {
    tree.map("", &mut |_, v| {
        g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)))
    })
}

/// A convolution: `weight` is `[out, in, k, k]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

impl Conv<Tensor> {
    /// He-style uniform init over `±sqrt(6 / fan_in)`; zero bias.
    pub fn init(rng: &mut impl Rng, cin: usize, cout: usize, k: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv {
            weight: Tensor::from_fn([cout, cin, k, k], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros([cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Conv<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d_same(x, self.weight, Some(self.bias))
    }
}

impl<T> ParamTree<T> for Conv<T> {
    type Mapped<U> = Conv<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Conv<U>, E> {
        Ok(Conv {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        f(&self.weight);
        f(&self.bias);
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;

    /// Elements are named `{prefix}{i}` counting from 1, e.g. `stage1`.
    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Self::Mapped<U>, E> {
        self.iter().enumerate().map(|(i, p)| p.try_map(&format!("{prefix}{}", i + 1), f)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        for p in self {
            p.visit(f);
        }
    }
}
