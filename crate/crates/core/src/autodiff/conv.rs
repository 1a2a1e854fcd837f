//! Raw 2-D cross-correlation kernels over NCHW buffers.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be rank 4, got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape(format!("conv2d kernel must be rank 4, got {kernel:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must have odd size, got {kh}x{kw}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    /// Output columns `x` whose tap `kx` lands inside the input row.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn y_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.ho);
        (lo, hi.max(lo))
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.cin {
                let src = &input[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (y0, y1) = g.y_range(ky);
                    for kx in 0..g.kw {
                        let wt = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.x_range(kx);
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let row_in = &src[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            let row_out = &mut o[y * g.wo + x0..][..x1 - x0];
                            for (d, s) in row_out.iter_mut().zip(row_in) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut grad_in = vec![0.0; g.n * g.cin * plane_in];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * plane_out..][..plane_out];
            for ci in 0..g.cin {
                let gi = &mut grad_in[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (y0, y1) = g.y_range(ky);
                    for kx in 0..g.kw {
                        let wt = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.x_range(kx);
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let row_in = &mut gi[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            let row_out = &go[y * g.wo + x0..][..x1 - x0];
                            for (d, s) in row_in.iter_mut().zip(row_out) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(crate) fn backward_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut grad_k = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &grad_out[(n * g.cout + co) * plane_out..][..plane_out];
            for ci in 0..g.cin {
                let src = &input[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (y0, y1) = g.y_range(ky);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.x_range(kx);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - g.pad;
                            let row_in = &src[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                            let row_out = &go[y * g.wo + x0..][..x1 - x0];
                            acc += row_in.iter().zip(row_out).map(|(a, b)| a * b).sum::<f64>();
                        }
                        grad_k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    grad_k
}

pub(crate) fn backward_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let mut grad_b = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[(n * g.cout + co) * plane_out..][..plane_out].iter().sum::<f64>();
        }
    }
    grad_b
}
