//! Full-reference image quality metrics on `[0, 1]`-ranged images.

use crate::error::{Error, Result};
use crate::image::ImageF;

/// MSE below which [`psnr`] reports the documented cap instead of a ratio.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// PSNR value reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Side length of the SSIM window.
const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM window.
const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for the luminance and contrast terms on unit-range data.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(op: &'static str, pred: &ImageF, target: &ImageF) -> Result<()> {
    let same = pred.width() == target.width()
        && pred.height() == target.height()
        && pred.channels() == target.channels();
    if !same {
        return Err(Error::ShapeMismatch {
            op,
            left: format!("{}x{}x{}", pred.width(), pred.height(), pred.channels()),
            right: format!(
                "{}x{}x{}",
                target.width(),
                target.height(),
                target.channels()
            ),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images:
/// `10 log10(1 / MSE)`, reported as [`PSNR_CAP`] when the MSE falls below
/// [`PSNR_MSE_FLOOR`] (identical images would otherwise divide by zero).
pub fn psnr(pred: &ImageF, target: &ImageF) -> Result<f64> {
    check_same_shape("psnr", pred, target)?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse < PSNR_MSE_FLOOR {
        Ok(PSNR_CAP)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// The normalized 11x11 Gaussian window used by [`ssim`].
fn ssim_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dx * dx + dy * dy) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all valid 11x11 window positions,
/// Gaussian-weighted local statistics, averaged across channels.
///
/// Identical images score exactly 1; anticorrelated high-contrast content
/// goes negative. Requires both dimensions to be at least the window size.
pub fn ssim(pred: &ImageF, target: &ImageF) -> Result<f64> {
    check_same_shape("ssim", pred, target)?;
    let (w, h, c) = (pred.width(), pred.height(), pred.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            what: "ssim",
            why: format!("image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let window = ssim_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                let mut wi = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let weight = window[wi];
                        wi += 1;
                        let a = pred.get(x0 + dx, y0 + dy, ch);
                        let b = target.get(x0 + dx, y0 + dy, ch);
                        mu_x += weight * a;
                        mu_y += weight * b;
                        xx += weight * a * a;
                        yy += weight * b * b;
                        xy += weight * a * b;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image quality scores for a held-out set, with aggregate means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    /// Score one prediction/target pair and append it.
    pub fn push_pair(&mut self, pred: &ImageF, target: &ImageF) -> Result<()> {
        self.psnr.push(psnr(pred, target)?);
        self.ssim.push(ssim(pred, target)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
