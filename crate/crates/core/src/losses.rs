//! Training objective: weighted intensity fidelity, Sobel gradient
//! fidelity and the segmentation cross-entropy on all three images.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::segmentor::{cross_entropy, seg_forward, SegNetParams};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_MU: f64 = 0.1;

/// `mean(w1 * (f - ir)^2 + w2 * (f - vi)^2)`.
pub fn intensity_loss(g: &mut Graph, fused: Var, ir: Var, vi: Var, w1: Var, w2: Var) -> Result<Var> {
    let d1 = g.sub(fused, ir)?;
    let d1 = g.square(d1);
    let d1 = g.mul(w1, d1)?;
    let d2 = g.sub(fused, vi)?;
    let d2 = g.square(d2);
    let d2 = g.mul(w2, d2)?;
    let sum = g.add(d1, d2)?;
    g.mean(sum)
}

fn sobel_abs(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let (gx, gy) = g.sobel(x)?;
    Ok((g.abs(gx), g.abs(gy)))
}

/// Mean absolute gap between the fused image's per-direction Sobel
/// magnitudes and the stronger of the two sources in that direction.
pub fn gradient_loss(g: &mut Graph, fused: Var, ir: Var, vi: Var) -> Result<Var> {
    let (fx, fy) = sobel_abs(g, fused)?;
    let (ax, ay) = sobel_abs(g, ir)?;
    let (bx, by) = sobel_abs(g, vi)?;
    let tx = g.max(ax, bx)?;
    let ty = g.max(ay, by)?;
    let dx = g.sub(fx, tx)?;
    let dx = g.abs(dx);
    let dy = g.sub(fy, ty)?;
    let dy = g.abs(dy);
    let both = g.add(dx, dy)?;
    let m = g.mean(both)?;
    Ok(g.scale(m, 0.5))
}

/// Average of the cross-entropies of the segmenter on `ir`, `vi` and `fused`,
/// or the fused term alone with `fused_only`.
pub fn seg_loss(
    g: &mut Graph,
    segnet: &SegNetParams<Var>,
    ir: Var,
    vi: Var,
    fused: Var,
    mask: &ClassMask,
    fused_only: bool,
) -> Result<Var> {
    let lf = seg_forward(g, fused, segnet)?;
    let cf = cross_entropy(g, lf, mask)?;
    if fused_only {
        return Ok(cf);
    }
    let la = seg_forward(g, ir, segnet)?;
    let ca = cross_entropy(g, la, mask)?;
    let lb = seg_forward(g, vi, segnet)?;
    let cb = cross_entropy(g, lb, mask)?;
    let s = g.add(ca, cb)?;
    let s = g.add(s, cf)?;
    Ok(g.scale(s, 1.0 / 3.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    /// Drop the intensity term.
    pub no_int: bool,
    pub no_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: DEFAULT_LAMBDA, mu: DEFAULT_MU, no_int: false, no_grad: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_int: f64,
    pub l_grad: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

/// `l_int + lambda * l_grad + mu * l_seg` on scalars. Dropped terms count as 0.
pub fn total_loss(l_int: f64, l_grad: f64, l_seg: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_int", l_int), ("l_grad", l_grad), ("l_seg", l_seg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let l_int = if w.no_int { 0.0 } else { l_int };
    let l_grad = if w.no_grad { 0.0 } else { l_grad };
    Ok(LossBreakdown { l_int, l_grad, l_seg, l_total: l_int + w.lambda * l_grad + w.mu * l_seg })
}

/// Graph-side counterpart of [`total_loss`]: combines the three term nodes in
/// the same order, so the node value equals the breakdown's `l_total`.
pub fn total_loss_var(g: &mut Graph, l_int: Var, l_grad: Var, l_seg: Var, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let parts = total_loss(g.value(l_int).item()?, g.value(l_grad).item()?, g.value(l_seg).item()?, w)?;
    let int = if w.no_int { g.scale(l_int, 0.0) } else { l_int };
    let grad = if w.no_grad { g.scale(l_grad, 0.0) } else { l_grad };
    let grad = g.scale(grad, w.lambda);
    let seg = g.scale(l_seg, w.mu);
    let total = g.add(int, grad)?;
    let total = g.add(total, seg)?;
    debug_assert_eq!(g.value(total).item()?, parts.l_total);
    Ok((total, parts))
}
