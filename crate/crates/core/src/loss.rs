//! Image losses and metrics: L1, SSIM / D-SSIM with an analytic backward pass, the
//! combined appearance loss with its regularizer-weight schedule, PSNR, and least-squares
//! color correction.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::appearance::{identity_regularizer, identity_regularizer_grad, Affine};
use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Linear warmup from zero to `peak`, then cosine decay from `peak` to `final_value`
/// reached at `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambda2Schedule {
    pub warmup_iters: usize,
    pub peak: f64,
    pub final_value: f64,
    pub total_iters: usize,
}

impl Default for Lambda2Schedule {
    fn default() -> Self {
        Self { warmup_iters: 5000, peak: 0.3, final_value: 0.2, total_iters: 30_000 }
    }
}

impl Lambda2Schedule {
    /// Same shape over a different iteration budget; the warmup keeps its fraction.
    pub fn scaled_to(&self, total_iters: usize) -> Self {
        let frac = self.warmup_iters as f64 / self.total_iters.max(1) as f64;
        Self {
            warmup_iters: (frac * total_iters as f64).round() as usize,
            total_iters,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= self.final_value && self.final_value >= 0.0) {
            return Err(Error::Config("lambda2 schedule needs peak >= final >= 0".into()));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "lambda2 warmup ({}) exceeds total iterations ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        Ok(())
    }

    /// Weight at `iter`; iterations past `total_iters` hold the final value.
    pub fn at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            return self.peak * iter as f64 / self.warmup_iters as f64;
        }
        if iter >= self.total_iters {
            return if self.total_iters == self.warmup_iters { self.peak } else { self.final_value };
        }
        let t = (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        self.final_value + (self.peak - self.final_value) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lambda2_at(iter: usize, schedule: &Lambda2Schedule) -> f64 {
    schedule.at(iter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: Lambda2Schedule,
    /// Turning this off zeroes the regularizer weight at every iteration.
    pub identity_regularizer: bool,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: Lambda2Schedule::default(),
            identity_regularizer: true,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!("lambda1 must lie in [0, 1], got {}", self.lambda1)));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) || !(self.ssim_sigma > 0.0) {
            return Err(Error::Config("SSIM window must be odd and sigma positive".into()));
        }
        self.lambda2.validate()
    }

    pub fn lambda2_at(&self, iter: usize) -> f64 {
        if self.identity_regularizer {
            self.lambda2.at(iter)
        } else {
            0.0
        }
    }
}

pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn l1_grad(a: &Image, b: &Image, scale: f64, out: &mut [f64]) {
    let s = scale / a.data().len() as f64;
    for ((o, x), y) in out.iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        *o += if d > 0.0 {
            s
        } else if d < 0.0 {
            -s
        } else {
            0.0
        };
    }
}

/// Folds an out-of-range index back into `[0, n)` by mirror reflection about the edge
/// samples (`-1 -> 1`, `n -> n-2`), repeating as needed for small images.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian SSIM with reflect padding.
#[derive(Debug, Clone)]
pub struct Ssim {
    kernel: Vec<f64>,
}

struct Plane<'a> {
    data: &'a [f64],
    w: usize,
    h: usize,
}

impl Ssim {
    pub fn new(window: usize, sigma: f64) -> Self {
        let r = (window / 2) as f64;
        let mut kernel: Vec<f64> = (0..window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        Self { kernel }
    }

    fn radius(&self) -> isize {
        (self.kernel.len() / 2) as isize
    }

    /// Source index of each position in a row padded by the kernel radius on both sides.
    fn padded_indices(&self, n: usize) -> Vec<usize> {
        let r = self.radius();
        (0..n as isize + 2 * r).map(|j| reflect(j - r, n)).collect()
    }

    /// `out = G * src` (horizontal then vertical pass).
    fn blur(&self, p: &Plane) -> Vec<f64> {
        let (w, h, r) = (p.w, p.h, self.radius());
        let idx = self.padded_indices(w);
        let mut padded = vec![0.0; idx.len()];
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &p.data[y * w..(y + 1) * w];
            for (d, &i) in padded.iter_mut().zip(&idx) {
                *d = row[i];
            }
            for (x, t) in tmp[y * w..(y + 1) * w].iter_mut().enumerate() {
                *t = self.kernel.iter().zip(&padded[x..]).map(|(k, v)| k * v).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (k, wk) in self.kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let (dst, src) = (&mut out[y * w..(y + 1) * w], &tmp[sy * w..(sy + 1) * w]);
                for (o, t) in dst.iter_mut().zip(src) {
                    *o += wk * t;
                }
            }
        }
        out
    }

    /// `out = G^T * src`, the adjoint of [`Ssim::blur`].
    fn blur_adjoint(&self, p: &Plane) -> Vec<f64> {
        let (w, h, r) = (p.w, p.h, self.radius());
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for (k, wk) in self.kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let (dst, src) = (&mut tmp[sy * w..(sy + 1) * w], &p.data[y * w..(y + 1) * w]);
                for (t, v) in dst.iter_mut().zip(src) {
                    *t += wk * v;
                }
            }
        }
        let idx = self.padded_indices(w);
        let mut acc = vec![0.0; idx.len()];
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (x, g) in tmp[y * w..(y + 1) * w].iter().enumerate() {
                for (a, wk) in acc[x..].iter_mut().zip(&self.kernel) {
                    *a += wk * g;
                }
            }
            let row = &mut out[y * w..(y + 1) * w];
            for (a, &i) in acc.iter().zip(&idx) {
                row[i] += a;
            }
        }
        out
    }

    /// Mean SSIM over pixels and channels, with the gradient with respect to `a` (scaled
    /// by `grad_scale`) added into `grad` when given.
    fn eval(&self, a: &Image, b: &Image, grad: Option<(&mut [f64], f64)>) -> f64 {
        let (w, h) = (a.width(), a.height());
        let n = w * h;
        let total = (3 * n) as f64;
        let mut sum = 0.0;
        let mut grad = grad;
        for c in 0..3 {
            let pa: Vec<f64> = (0..n).map(|i| a.data()[3 * i + c]).collect();
            let pb: Vec<f64> = (0..n).map(|i| b.data()[3 * i + c]).collect();
            let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<f64>>();
            let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let blur = |v: &[f64]| self.blur(&Plane { data: v, w, h });
            let (mu_a, mu_b) = (blur(&pa), blur(&pb));
            let (ea2, eb2, eab) = (blur(&sq(&pa)), blur(&sq(&pb)), blur(&prod));

            let mut d_mu = vec![0.0; n];
            let mut d_saa = vec![0.0; n];
            let mut d_sab = vec![0.0; n];
            for i in 0..n {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let saa = ea2[i] - ma * ma;
                let sbb = eb2[i] - mb * mb;
                let sab = eab[i] - ma * mb;
                let a1 = 2.0 * ma * mb + SSIM_C1;
                let a2 = 2.0 * sab + SSIM_C2;
                let b1 = ma * ma + mb * mb + SSIM_C1;
                let b2 = saa + sbb + SSIM_C2;
                let s = (a1 * a2) / (b1 * b2);
                sum += s;
                if grad.is_some() {
                    let ds_dsab = 2.0 * a1 / (b1 * b2);
                    let ds_dsaa = -s / b2;
                    let ds_dmu = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
                    d_sab[i] = ds_dsab;
                    d_saa[i] = ds_dsaa;
                    // the variance terms also depend on mu_a
                    d_mu[i] = ds_dmu - ds_dsab * mb - 2.0 * ds_dsaa * ma;
                }
            }
            if let Some((g, scale)) = grad.as_mut() {
                let adj = |v: &[f64]| self.blur_adjoint(&Plane { data: v, w, h });
                let (g_mu, g_saa, g_sab) = (adj(&d_mu), adj(&d_saa), adj(&d_sab));
                let k = *scale / total;
                for i in 0..n {
                    g[3 * i + c] += k * (g_mu[i] + 2.0 * pa[i] * g_saa[i] + pb[i] * g_sab[i]);
                }
            }
        }
        sum / total
    }

    pub fn ssim(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_size(b)?;
        Ok(self.eval(a, b, None))
    }

    /// SSIM and its gradient with respect to `a`.
    pub fn ssim_with_grad(&self, a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
        a.check_same_size(b)?;
        let mut g = vec![0.0; a.data().len()];
        let s = self.eval(a, b, Some((&mut g, 1.0)));
        Ok((s, g))
    }
}

impl Default for Ssim {
    fn default() -> Self {
        Ssim::new(11, 1.5)
    }
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ssim::default().ssim(a, b)
}

pub fn d_ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// PSNR in dB for images with unit peak; inputs are clamped to `[0, 1]` and the result is
/// capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub dssim: f64,
    pub lid: f64,
    pub lambda2: f64,
    pub total: f64,
}

/// Gradients of the total loss with respect to the transformed image (interleaved RGB)
/// and to each regularized matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub image: Vec<f64>,
    pub matrices: Vec<Affine>,
}

/// Combined loss `(1 - l1) L1 + l1 D-SSIM + l2(iter) L_ID`.
///
/// `matrices` are the regularized transforms (cells with geometry); an empty set
/// contributes zero.
pub fn total_loss(
    transformed: &Image,
    target: &Image,
    matrices: &[Affine],
    iter: usize,
    config: &LossConfig,
) -> Result<(LossTerms, LossGrad)> {
    transformed.check_same_size(target)?;
    let ssim = Ssim::new(config.ssim_window, config.ssim_sigma);
    let lambda1 = config.lambda1;
    let lambda2 = config.lambda2_at(iter);

    let l1 = l1_loss(transformed, target)?;
    let mut g = vec![0.0; transformed.data().len()];
    l1_grad(transformed, target, 1.0 - lambda1, &mut g);
    // d(D-SSIM)/d(a) = -0.5 dSSIM/da
    let s = if lambda1 != 0.0 {
        ssim.eval(transformed, target, Some((&mut g, -0.5 * lambda1)))
    } else {
        ssim.eval(transformed, target, None)
    };
    let dssim = (1.0 - s) / 2.0;
    let (lid, gm) = if matrices.is_empty() {
        (0.0, Vec::new())
    } else {
        let mut gm = identity_regularizer_grad(matrices);
        for m in &mut gm {
            m.iter_mut().for_each(|v| *v *= lambda2);
        }
        (identity_regularizer(matrices), gm)
    };
    let total = (1.0 - lambda1) * l1 + lambda1 * dssim + lambda2 * lid;
    Ok((LossTerms { l1, dssim, lid, lambda2, total }, LossGrad { image: g, matrices: gm }))
}

/// Baseline reconstruction loss `(1 - l) L1 + l D-SSIM` without an appearance module.
pub fn baseline_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<f64> {
    Ok((1.0 - lambda) * l1_loss(rendered, target)? + lambda * d_ssim(rendered, target)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFit {
    Affine,
    /// The rendered colors were rank deficient; only a per-channel bias was fitted.
    BiasOnly,
}

/// Least-squares affine map from `rendered` colors to `reference` colors, applied and
/// clamped to `[0, 1]`.
pub fn color_correct(rendered: &Image, reference: &Image) -> Result<(Image, Affine, ColorFit)> {
    rendered.check_same_size(reference)?;
    let n = rendered.len_pixels() as f64;
    let mut mean_r = Vector3::zeros();
    let mut mean_t = Vector3::zeros();
    for i in 0..rendered.len_pixels() {
        mean_r += Vector3::from_column_slice(&rendered.data()[3 * i..3 * i + 3]);
        mean_t += Vector3::from_column_slice(&reference.data()[3 * i..3 * i + 3]);
    }
    mean_r /= n;
    mean_t /= n;
    // centered normal equations: cov_rr * M_lin^T = cov_rt
    let mut cov_rr = Matrix3::zeros();
    let mut cov_tr = Matrix3::zeros();
    for i in 0..rendered.len_pixels() {
        let r = Vector3::from_column_slice(&rendered.data()[3 * i..3 * i + 3]) - mean_r;
        let t = Vector3::from_column_slice(&reference.data()[3 * i..3 * i + 3]) - mean_t;
        cov_rr += r * r.transpose();
        cov_tr += t * r.transpose();
    }
    let eig = SymmetricEigen::new(cov_rr).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let solved = if hi > 1e-14 && lo > 1e-9 * hi { cov_rr.try_inverse().map(|inv| cov_tr * inv) } else { None };
    let (lin, fit) = match solved {
        Some(m) => (m, ColorFit::Affine),
        None => (Matrix3::identity(), ColorFit::BiasOnly),
    };
    let bias = mean_t - lin * mean_r;
    let mut m = [0.0; 12];
    for r in 0..3 {
        for c in 0..3 {
            m[4 * r + c] = lin[(r, c)];
        }
        m[4 * r + 3] = bias[r];
    }
    let mut out = rendered.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let c = crate::appearance::apply_affine([px[0], px[1], px[2]], &m);
        for k in 0..3 {
            px[k] = c[k].clamp(0.0, 1.0);
        }
    }
    Ok((out, m, fit))
}

/// PSNR and SSIM with both images clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn image_metrics(a: &Image, b: &Image) -> Result<ImageMetrics> {
    let (a, b) = (a.clamped(), b.clamped());
    Ok(ImageMetrics { psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)? })
}

/// Metrics as-is and after color-correcting `a` toward `b`.
pub fn metrics_with_correction(a: &Image, b: &Image) -> Result<(ImageMetrics, ImageMetrics)> {
    let raw = image_metrics(a, b)?;
    let (corrected, _, _) = color_correct(&a.clamped(), &b.clamped())?;
    Ok((raw, image_metrics(&corrected, b)?))
}
