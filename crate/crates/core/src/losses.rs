//! Generator and discriminator losses, and evaluation metrics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Scalar, Tensor};
use crate::normal::{angular_error, ImageTensor, Vec3};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// PSNR reported when the mean squared error is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 120.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_reconstruction: f64,
    pub lambda_adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reconstruction: 999.0,
            lambda_adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let (r, a) = (self.lambda_reconstruction, self.lambda_adversarial);
        if !(r >= 0.0 && a >= 0.0) || (r == 0.0 && a == 0.0) {
            return Err(Error::invalid(format!(
                "loss weights ({r}, {a}) must be non-negative and not both zero"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconstructionVariant {
    /// Mean over pixels of `1 - y_i . yhat_i`.
    #[default]
    PerPixel,
    /// `1 - cos` of the two images flattened into single vectors, averaged over the batch.
    Global,
}

impl FromStr for ReconstructionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pixel" | "per-pixel" => Ok(Self::PerPixel),
            "global" => Ok(Self::Global),
            other => Err(Error::invalid(format!("unknown reconstruction variant `{other}`"))),
        }
    }
}

impl fmt::Display for ReconstructionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerPixel => "per_pixel",
            Self::Global => "global",
        })
    }
}

fn check_fields<T: Scalar>(target: &Tensor<T>, generated: &Tensor<T>, weights: Option<&[T]>) -> Result<()> {
    if target.shape() != generated.shape() {
        return Err(Error::shape(
            format!("{:?}", target.shape()),
            format!("{:?}", generated.shape()),
        ));
    }
    if target.channels() != 3 {
        return Err(Error::shape("3 channels", target.channels()));
    }
    if let Some(w) = weights {
        let pixels = target.batch() * target.height() * target.width();
        if w.len() != pixels {
            return Err(Error::shape(pixels, w.len()));
        }
    }
    Ok(())
}

/// Cosine reconstruction loss and its gradient with respect to `generated`.
///
/// `weights` (one per pixel, `[N, H, W]` order) restricts or reweights the
/// per-pixel variant; for the global variant they multiply both fields.
pub fn reconstruction_loss_with_grad<T: Scalar>(
    target: &Tensor<T>,
    generated: &Tensor<T>,
    variant: ReconstructionVariant,
    weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    check_fields(target, generated, weights)?;
    let [n, _, h, w] = target.shape();
    let plane = h * w;
    let weight = |i: usize, p: usize| weights.map_or(T::one(), |ws| ws[i * plane + p]);
    let mut grad = Tensor::zeros(target.shape());
    match variant {
        ReconstructionVariant::PerPixel => {
            let total: T = match weights {
                Some(ws) => ws.iter().copied().sum(),
                None => T::from_usize(n * plane).unwrap(),
            };
            if total <= T::zero() {
                return Ok((T::zero(), grad));
            }
            let mut loss = T::zero();
            for i in 0..n {
                let (y, yh) = (target.sample(i), generated.sample(i));
                let g = &mut grad.data_mut()[i * 3 * plane..][..3 * plane];
                for p in 0..plane {
                    let wt = weight(i, p);
                    let dot = (0..3).map(|c| y[c * plane + p] * yh[c * plane + p]).sum::<T>();
                    loss = loss + wt * (T::one() - dot);
                    for c in 0..3 {
                        g[c * plane + p] = -wt * y[c * plane + p] / total;
                    }
                }
            }
            Ok((loss / total, grad))
        }
        ReconstructionVariant::Global => {
            let batch = T::from_usize(n).unwrap();
            let mut loss = T::zero();
            for i in 0..n {
                let (y, yh) = (target.sample(i), generated.sample(i));
                let wv = |k: usize| weight(i, k % plane);
                let (mut dot, mut ny, mut nyh) = (T::zero(), T::zero(), T::zero());
                for k in 0..3 * plane {
                    let (a, b) = (y[k] * wv(k), yh[k] * wv(k));
                    dot = dot + a * b;
                    ny = ny + a * a;
                    nyh = nyh + b * b;
                }
                let (ny, nyh) = (ny.sqrt(), nyh.sqrt());
                if ny == T::zero() || nyh == T::zero() {
                    loss = loss + T::one();
                    continue;
                }
                loss = loss + T::one() - dot / (ny * nyh);
                let g = &mut grad.data_mut()[i * 3 * plane..][..3 * plane];
                for k in 0..3 * plane {
                    let (a, b) = (y[k] * wv(k), yh[k] * wv(k));
                    let d = -(a / (ny * nyh) - dot * b / (ny * nyh * nyh * nyh));
                    g[k] = d * wv(k) / batch;
                }
            }
            Ok((loss / batch, grad))
        }
    }
}

pub fn reconstruction_loss<T: Scalar>(
    target: &Tensor<T>,
    generated: &Tensor<T>,
    variant: ReconstructionVariant,
) -> Result<T> {
    reconstruction_loss_with_grad(target, generated, variant, None).map(|(l, _)| l)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean `-ln p`: cross-entropy against the "real" label. Returns the loss and `d loss / d p`.
pub fn adversarial_loss_generator<T: Scalar>(disc_probs: &[T]) -> (f64, Vec<T>) {
    if disc_probs.is_empty() {
        return (0.0, Vec::new());
    }
    let n = disc_probs.len() as f64;
    let mut loss = 0.0;
    let grad = disc_probs
        .iter()
        .map(|p| {
            let pc = clamp_prob(p.to_f64().unwrap());
            loss -= pc.ln();
            T::lit(-1.0 / (n * pc))
        })
        .collect();
    (loss / n, grad)
}

/// `mean(-ln p_real) + mean(-ln(1 - p_fake))` with gradients for both batches.
pub fn discriminator_loss<T: Scalar>(real_probs: &[T], fake_probs: &[T]) -> (f64, Vec<T>, Vec<T>) {
    let mut loss = 0.0;
    let nr = real_probs.len().max(1) as f64;
    let nf = fake_probs.len().max(1) as f64;
    let real_grad = real_probs
        .iter()
        .map(|p| {
            let pc = clamp_prob(p.to_f64().unwrap());
            loss -= pc.ln() / nr;
            T::lit(-1.0 / (nr * pc))
        })
        .collect();
    let fake_grad = fake_probs
        .iter()
        .map(|p| {
            let pc = clamp_prob(p.to_f64().unwrap());
            loss -= (1.0 - pc).ln() / nf;
            T::lit(1.0 / (nf * (1.0 - pc)))
        })
        .collect();
    (loss, real_grad, fake_grad)
}

pub fn total_generator_loss(rec: f64, adv: f64, w: &LossWeights) -> f64 {
    w.lambda_reconstruction * rec + w.lambda_adversarial * adv
}

/// Fraction of reals with `p > 0.5` plus fakes with `p <= 0.5`.
pub fn discriminator_accuracy<T: Scalar>(real_probs: &[T], fake_probs: &[T]) -> Result<f64> {
    let total = real_probs.len() + fake_probs.len();
    if total == 0 {
        return Err(Error::invalid("discriminator accuracy needs at least one prediction"));
    }
    let half = T::lit(0.5);
    let correct = real_probs.iter().filter(|&&p| p > half).count() + fake_probs.iter().filter(|&&p| p <= half).count();
    Ok(correct as f64 / total as f64)
}

/// Maps `[-1, 1]` components to `[0, 1]` with `(v + 1) / 2`.
pub fn to_unit_range(t: &ImageTensor) -> ImageTensor {
    ImageTensor {
        data: t.data.iter().map(|&v| (v + 1.0) / 2.0).collect(),
        ..t.clone()
    }
}

fn check_images(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) || a.data.len() != b.data.len() {
        return Err(Error::shape(
            format!("{}x{}x{}", a.width, a.height, a.channels),
            format!("{}x{}x{}", b.width, b.height, b.channels),
        ));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions (11x11 Gaussian,
/// sigma 1.5, K1 0.01, K2 0.03, data range 1). Inputs are `[0, 1]` images.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_images(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let taps = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(ch).map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(ch).map(|&v| f64::from(v)).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let saa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let sbb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let sab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log10(1 / MSE)` on `[0, 1]` images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_images(a, b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("PSNR of empty images"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Sum and count of angular errors over the selected pixels.
pub fn angular_error_sum(predicted: &[Vec3], target: &[Vec3], select: &[bool]) -> (f64, usize) {
    predicted
        .iter()
        .zip(target)
        .zip(select)
        .filter(|(_, &s)| s)
        .fold((0.0, 0), |(sum, n), ((p, t), _)| (sum + angular_error(*p, *t), n + 1))
}

pub const CSV_HEADER: &str = "epoch,gen_loss,rec_loss,adv_loss,disc_loss,ssim,psnr,disc_acc,mae_deg";

/// One evaluation row: training-loss averages since the previous evaluation
/// plus held-out metrics. SSIM/PSNR are over full images; the angular error
/// is over occluded pixels only.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub epoch: usize,
    pub gen_loss: f64,
    pub rec_loss: f64,
    pub adv_loss: f64,
    pub disc_loss: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub disc_accuracy: f64,
    pub mean_angular_error: f64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}",
            self.epoch,
            self.gen_loss,
            self.rec_loss,
            self.adv_loss,
            self.disc_loss,
            self.ssim,
            self.psnr,
            self.disc_accuracy,
            self.mean_angular_error
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.gen_loss,
            self.rec_loss,
            self.adv_loss,
            self.disc_loss,
            self.ssim,
            self.psnr,
            self.disc_accuracy,
            self.mean_angular_error,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
