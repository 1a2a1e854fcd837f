//! Reference-free fusion quality metrics on single-channel images in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plane of a `[1, 1, H, W]` tensor as `(h, w, data)`.
fn plane(img: &Tensor) -> Result<(usize, usize, &[f64])> {
    match img.dims4()? {
        (1, 1, h, w) => Ok((h, w, img.data())),
        (n, c, _, _) => Err(Error::shape(format!("metrics take one grayscale image, got N={n}, C={c}"))),
    }
}

/// 8-bit level of a [0, 1] value: clamp, scale, round half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy(img: &Tensor) -> Result<f64> {
    let (_, _, data) = plane(img)?;
    let mut hist = [0usize; 256];
    for &v in data {
        hist[quantize(v) as usize] += 1;
    }
    let n = data.len() as f64;
    Ok(-hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>())
}

/// `sqrt(RF^2 + CF^2)` on the 0-255 scale, where RF and CF are the RMS of
/// the horizontal and vertical first differences over all adjacent pairs.
pub fn spatial_frequency(img: &Tensor) -> Result<f64> {
    let (h, w, d) = plane(img)?;
    if h < 2 || w < 2 {
        return Err(Error::shape("spatial frequency needs at least 2x2 pixels"));
    }
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            rf += (255.0 * (d[y * w + x] - d[y * w + x - 1])).powi(2);
        }
    }
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            cf += (255.0 * (d[y * w + x] - d[(y - 1) * w + x])).powi(2);
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    Ok((rf + cf).sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Mean of the Pearson correlations of the fused image with each source.
pub fn correlation_coefficient(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<f64> {
    f.expect_same_shape(ir)?;
    f.expect_same_shape(vi)?;
    let (_, _, fd) = plane(f)?;
    let undefined = || Error::UndefinedMetric("correlation with a constant image".into());
    let a = pearson(fd, ir.data()).ok_or_else(undefined)?;
    let b = pearson(fd, vi.data()).ok_or_else(undefined)?;
    Ok((a + b) / 2.0)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalised 11x11 Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (y, x) = ((i / SSIM_WINDOW) as f64 - r, (i % SSIM_WINDOW) as f64 - r);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Window-averaged SSIM and its two factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    /// `(2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)`.
    pub luminance: f64,
    /// `(2 cov + C2) / (var_a + var_b + C2)`.
    pub contrast_structure: f64,
}

/// SSIM over all fully contained 11x11 windows (no padding), range 1.
pub fn ssim_parts(a: &Tensor, b: &Tensor) -> Result<SsimParts> {
    a.expect_same_shape(b)?;
    let (h, w, ad) = plane(a)?;
    let bd = b.data();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let win = ssim_window();
    let (mut s_sum, mut l_sum, mut cs_sum) = (0.0, 0.0, 0.0);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &g) in win.iter().enumerate() {
                let p = (y + k / SSIM_WINDOW) * w + x + k % SSIM_WINDOW;
                let (va, vb) = (ad[p], bd[p]);
                ma += g * va;
                mb += g * vb;
                aa += g * va * va;
                bb += g * vb * vb;
                ab += g * va * vb;
            }
            let (var_a, var_b, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
            s_sum += l * cs;
            l_sum += l;
            cs_sum += cs;
        }
    }
    let n = (oh * ow) as f64;
    Ok(SsimParts { ssim: s_sum / n, luminance: l_sum / n, contrast_structure: cs_sum / n })
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_parts(a, b)?.ssim)
}

/// Mean of SSIM(f, ir) and SSIM(f, vi).
pub fn ssim_fusion(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<f64> {
    Ok((ssim(f, ir)? + ssim(f, vi)?) / 2.0)
}

pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Sobel strength and orientation on interior pixels.
fn edges(h: usize, w: usize, d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::with_capacity((h - 2) * (w - 2));
    let mut a = Vec::with_capacity((h - 2) * (w - 2));
    let at = |y: usize, x: usize| d[y * w + x];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let sx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let sy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            g.push((sx * sx + sy * sy).sqrt());
            a.push(if sx == 0.0 { std::f64::consts::FRAC_PI_2 } else { (sy / sx).atan() });
        }
    }
    (g, a)
}

/// Edge preservation of one source in the fused image, per pixel.
fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let g = if gs == 0.0 || gf == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Xydeas-Petrovic edge-transfer quality. With the standard constants, a
/// perfect transfer scores `Qg(1) * Qa(1)`, about 0.9748.
pub fn qabf(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<f64> {
    f.expect_same_shape(ir)?;
    f.expect_same_shape(vi)?;
    let (h, w, fd) = plane(f)?;
    if h < 3 || w < 3 {
        return Err(Error::shape("Qabf needs at least 3x3 pixels"));
    }
    let (gf, af) = edges(h, w, fd);
    let (ga, aa) = edges(h, w, ir.data());
    let (gb, ab) = edges(h, w, vi.data());
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        let qa = preservation(ga[i], aa[i], gf[i], af[i]);
        let qb = preservation(gb[i], ab[i], gf[i], af[i]);
        num += qa * ga[i] + qb * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("Qabf with edgeless sources".into()));
    }
    Ok(num / den)
}

/// Perfect-transfer score of [`qabf`] under the standard constants.
pub fn qabf_ceiling() -> f64 {
    preservation(1.0, 0.0, 1.0, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub en: f64,
    pub sf: f64,
    /// `None` when a correlation is undefined (constant image).
    pub cc: Option<f64>,
    pub qabf: Option<f64>,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<Self> {
        let optional = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricReport {
            en: entropy(f)?,
            sf: spatial_frequency(f)?,
            cc: optional(correlation_coefficient(f, ir, vi))?,
            qabf: optional(qabf(f, ir, vi))?,
            ssim: ssim_fusion(f, ir, vi)?,
        })
    }

    /// Per-field mean; optional fields average over the reports that have them.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg_opt = |get: fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(get).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(MetricReport {
            en: reports.iter().map(|r| r.en).sum::<f64>() / n,
            sf: reports.iter().map(|r| r.sf).sum::<f64>() / n,
            cc: avg_opt(|r| r.cc),
            qabf: avg_opt(|r| r.qabf),
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        })
    }

    /// `{"en":…, "sf":…, "cc":…, "qabf":…, "ssim":…}` with six decimals;
    /// missing values are `null`.
    pub fn to_json(&self) -> String {
        let num = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map_or_else(|| "null".to_owned(), num);
        format!(
            "{{\"en\": {}, \"sf\": {}, \"cc\": {}, \"qabf\": {}, \"ssim\": {}}}",
            num(self.en),
            num(self.sf),
            opt(self.cc),
            opt(self.qabf),
            num(self.ssim)
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 1, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn entropy_anchors_and_oracle() {
        assert_eq!(entropy(&Tensor::full([1, 1, 4, 4], 0.3)).unwrap(), 0.0);
        let all = Tensor::from_fn([1, 1, 16, 16], |i| i as f64 / 255.0);
        assert_eq!(entropy(&all).unwrap(), 8.0);

        let img = rand_img(8, 8, 1);
        let mut counts = std::collections::BTreeMap::new();
        for &v in img.data() {
            *counts.entry((v * 255.0).round() as i64).or_insert(0usize) += 1;
        }
        let want: f64 = counts.values().map(|&c| c as f64 / 64.0).map(|p| -p * p.log2()).sum();
        assert!((entropy(&img).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn spatial_frequency_anchors_and_oracle() {
        assert_eq!(spatial_frequency(&Tensor::full([1, 1, 5, 5], 0.7)).unwrap(), 0.0);
        let stripes = Tensor::from_fn([1, 1, 6, 6], |i| (i % 2) as f64);
        assert_eq!(spatial_frequency(&stripes).unwrap(), 255.0);

        let img = rand_img(7, 5, 2);
        let px = |y: usize, x: usize| img.at4(0, 0, y, x) * 255.0;
        let (mut rf, mut nr, mut cf, mut nc) = (0.0, 0, 0.0, 0);
        for y in 0..7 {
            for x in 0..5 {
                if x > 0 {
                    rf += (px(y, x) - px(y, x - 1)).powi(2);
                    nr += 1;
                }
                if y > 0 {
                    cf += (px(y, x) - px(y - 1, x)).powi(2);
                    nc += 1;
                }
            }
        }
        let want = ((rf / nr as f64).sqrt().powi(2) + (cf / nc as f64).sqrt().powi(2)).sqrt();
        assert!((spatial_frequency(&img).unwrap() - want).abs() <= 1e-10);
    }

    #[test]
    fn correlation_anchors_and_oracle() {
        let x = rand_img(6, 6, 3);
        assert!((correlation_coefficient(&x, &x, &x).unwrap() - 1.0).abs() <= 1e-12);
        let inv = x.map(|v| 1.0 - v);
        assert!(correlation_coefficient(&x, &x, &inv).unwrap().abs() <= 1e-12);
        let flat = Tensor::full([1, 1, 6, 6], 0.5);
        assert!(matches!(correlation_coefficient(&x, &flat, &x), Err(Error::UndefinedMetric(_))));

        let (f, a, b) = (rand_img(8, 8, 4), rand_img(8, 8, 5), rand_img(8, 8, 6));
        let corr = |p: &Tensor, q: &Tensor| {
            let n = 64.0;
            let mp = p.sum() / n;
            let mq = q.sum() / n;
            let cov: f64 = p.data().iter().zip(q.data()).map(|(x, y)| (x - mp) * (y - mq)).sum::<f64>() / n;
            let sp = (p.data().iter().map(|x| (x - mp).powi(2)).sum::<f64>() / n).sqrt();
            let sq = (q.data().iter().map(|y| (y - mq).powi(2)).sum::<f64>() / n).sqrt();
            cov / (sp * sq)
        };
        let want = (corr(&f, &a) + corr(&f, &b)) / 2.0;
        assert!((correlation_coefficient(&f, &a, &b).unwrap() - want).abs() <= 1e-12);
    }

    /// Direct sliding-window SSIM: builds each window's Gaussian weights from
    /// scratch and uses two-pass moments.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (_, _, h, w) = a.dims4().unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let mut wsum = 0.0;
                let mut ws = Vec::new();
                for dy in 0..11 {
                    for dx in 0..11 {
                        let (ry, rx) = (dy as f64 - 5.0, dx as f64 - 5.0);
                        let g = (-(rx * rx + ry * ry) / 4.5).exp();
                        wsum += g;
                        ws.push((g, a.at4(0, 0, y0 + dy, x0 + dx), b.at4(0, 0, y0 + dy, x0 + dx)));
                    }
                }
                let ma: f64 = ws.iter().map(|(g, p, _)| g * p).sum::<f64>() / wsum;
                let mb: f64 = ws.iter().map(|(g, _, q)| g * q).sum::<f64>() / wsum;
                let va: f64 = ws.iter().map(|(g, p, _)| g * (p - ma).powi(2)).sum::<f64>() / wsum;
                let vb: f64 = ws.iter().map(|(g, _, q)| g * (q - mb).powi(2)).sum::<f64>() / wsum;
                let cv: f64 = ws.iter().map(|(g, p, q)| g * (p - ma) * (q - mb)).sum::<f64>() / wsum;
                let (c1, c2) = (0.0001, 0.0009);
                total += ((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_anchors_and_oracle() {
        let x = rand_img(12, 13, 7);
        assert!((ssim_fusion(&x, &x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let shifted = x.map(|v| v + 0.2);
        let p = ssim_parts(&x, &shifted).unwrap();
        assert!(p.luminance < 1.0);
        assert!((p.contrast_structure - 1.0).abs() <= 1e-9);
        assert!(ssim(&rand_img(10, 12, 1), &rand_img(10, 12, 2)).is_err());

        let (a, b) = (rand_img(14, 12, 8), rand_img(14, 12, 9));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-8);
        let c = a.zip_with(&b, |p, q| 0.7 * p + 0.3 * q).unwrap();
        assert!((ssim(&a, &c).unwrap() - ssim_oracle(&a, &c)).abs() <= 1e-8);
    }

    /// Two-edge pattern: a vertical step at x = 3 and a horizontal step at y = 5.
    fn two_edges(lo: f64, hi: f64, flip: bool) -> Tensor {
        Tensor::from_fn([1, 1, 8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            let v = if x >= 3 { hi } else { lo } + if y >= 5 { 0.25 } else { 0.0 };
            if flip { 1.0 - v } else { v }
        })
    }

    /// Separately coded Qabf: explicit 3x3 kernel loops and the textbook
    /// piecewise definitions.
    fn qabf_oracle(f: &Tensor, a: &Tensor, b: &Tensor) -> f64 {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let sobel = |t: &Tensor, y: usize, x: usize| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = t.at4(0, 0, y + i - 1, x + j - 1);
                    gx += kx[i][j] * v;
                    gy += ky[i][j] * v;
                }
            }
            let g = (gx * gx + gy * gy).sqrt();
            let ang = if gx == 0.0 { std::f64::consts::PI / 2.0 } else { (gy / gx).atan() };
            (g, ang)
        };
        let q = |gs: f64, as_: f64, gf: f64, af: f64| {
            let gr = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
            let ar = 1.0 - (as_ - af).abs() * 2.0 / std::f64::consts::PI;
            0.9994 / (1.0 + (-15.0 * (gr - 0.5)).exp()) * 0.9879 / (1.0 + (-22.0 * (ar - 0.8)).exp())
        };
        let (mut num, mut den) = (0.0, 0.0);
        for y in 1..7 {
            for x in 1..7 {
                let (gf, af) = sobel(f, y, x);
                let (ga, aa) = sobel(a, y, x);
                let (gb, ab) = sobel(b, y, x);
                num += q(ga, aa, gf, af) * ga + q(gb, ab, gf, af) * gb;
                den += ga + gb;
            }
        }
        num / den
    }

    #[test]
    fn qabf_anchors_and_oracle() {
        let x = two_edges(0.1, 0.6, false);
        let perfect = qabf(&x, &x, &x).unwrap();
        assert!((perfect - qabf_ceiling()).abs() <= 1e-12);
        assert!((qabf_ceiling() - 0.974_8).abs() <= 1e-3);

        let flat = Tensor::full([1, 1, 8, 8], 0.4);
        assert!(qabf(&flat, &x, &two_edges(0.2, 0.3, true)).unwrap() <= 0.02);
        assert!(matches!(qabf(&x, &flat, &flat), Err(Error::UndefinedMetric(_))));

        let (a, b) = (two_edges(0.1, 0.6, false), two_edges(0.2, 0.5, true));
        let f = a.zip_with(&b, |p, q| 0.6 * p + 0.4 * q).unwrap();
        let got = qabf(&f, &a, &b).unwrap();
        assert!((got - qabf_oracle(&f, &a, &b)).abs() <= 1e-8);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn metrics_are_symmetric_in_sources() {
        let (f, a, b) = (rand_img(12, 12, 10), rand_img(12, 12, 11), rand_img(12, 12, 12));
        assert_eq!(MetricReport::compute(&f, &a, &b).unwrap(), MetricReport::compute(&f, &b, &a).unwrap());
    }

    #[test]
    fn report_json_and_mean() {
        let x = rand_img(11, 11, 13);
        let r = MetricReport::compute(&x, &x, &x).unwrap();
        let j = r.to_json();
        assert!(j.contains("\"ssim\": 1.000000"), "{j}");
        assert!(j.contains("\"cc\": 1.000000"));
        let flat = Tensor::full([1, 1, 11, 11], 0.5);
        let r2 = MetricReport::compute(&x, &flat, &x).unwrap();
        assert!(r2.cc.is_none());
        assert!(r2.to_json().contains("\"cc\": null"));
        let m = MetricReport::mean(&[r, r2]).unwrap();
        assert_eq!(m.cc, r.cc);
        assert!(MetricReport::mean(&[]).is_none());
    }
}
