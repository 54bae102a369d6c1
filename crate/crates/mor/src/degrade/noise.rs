//! Additive Gaussian and signal-dependent Poisson (shot) noise.
//!
//! Noise strengths are specified in 8-bit units to match how degradation
//! recipes are usually quoted: a Gaussian `sigma` of 15 means a standard
//! deviation of 15 gray levels out of 255.

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::numeric::SeededRng;

/// Add i.i.d. Gaussian noise with standard deviation `sigma` in 8-bit units
/// (`sigma / 255` in the float domain), then clamp to `[0, 1]`.
/// Every sample, including each RGB channel, gets an independent draw.
pub fn add_gaussian_noise(img: &ImageF, sigma: f64, rng: &mut SeededRng) -> Result<ImageF> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(
            "gaussian noise sigma",
            format!("must be non-negative, got {sigma}"),
        ));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let s = sigma / 255.0;
    for v in out.data_mut() {
        *v = (*v + rng.normal(0.0, s)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Add Poisson (shot) noise: each sample `v` is replaced by
/// `Poisson(v * 255 / scale) * scale / 255`, clamped to `[0, 1]`.
///
/// `scale` controls severity: larger values mean fewer effective photon
/// counts and therefore stronger noise. Zero-valued samples stay exactly
/// zero, and `scale = 0` disables the noise entirely.
pub fn add_poisson_noise(img: &ImageF, scale: f64, rng: &mut SeededRng) -> Result<ImageF> {
    if !(scale >= 0.0) {
        return Err(Error::invalid(
            "poisson noise scale",
            format!("must be non-negative, got {scale}"),
        ));
    }
    let mut out = img.clone();
    if scale == 0.0 {
        return Ok(out);
    }
    for v in out.data_mut() {
        let lambda = *v * 255.0 / scale;
        *v = (rng.poisson(lambda) * scale / 255.0).clamp(0.0, 1.0);
    }
    Ok(out)
}
