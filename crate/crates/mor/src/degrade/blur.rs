//! Gaussian and generalized-Gaussian blurs with reflected boundaries.

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Reflect an index into `[0, n)` about the edge samples (`-1 -> 1`,
/// `n -> n - 2`), so filtering never reads outside the image.
pub(crate) fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn check_kernel(kernel_size: usize) -> Result<usize> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::invalid(
            "blur kernel",
            format!("size must be odd and positive, got {kernel_size}"),
        ));
    }
    Ok(kernel_size / 2)
}

/// Normalized 1-D Gaussian taps for a centred odd-length kernel.
fn gaussian_taps(sigma: f64, kernel_size: usize) -> Result<Vec<f64>> {
    let radius = check_kernel(kernel_size)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid(
            "blur sigma",
            format!("must be positive, got {sigma}"),
        ));
    }
    let mut taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Separable Gaussian blur. The kernel is the truncated discrete Gaussian of
/// the given odd size, normalized to sum exactly one, so constant regions are
/// preserved bit-for-bit.
pub fn gaussian_blur(img: &ImageF, sigma: f64, kernel_size: usize) -> Result<ImageF> {
    let taps = gaussian_taps(sigma, kernel_size)?;
    let radius = (kernel_size / 2) as isize;
    let (w, h) = (img.width(), img.height());

    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|ch| {
            let src = img.plane(ch);
            // Horizontal pass.
            let mut mid = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &t) in taps.iter().enumerate() {
                        let sx = reflect(x as isize + k as isize - radius, w);
                        acc += t * src[y * w + sx];
                    }
                    mid[y * w + x] = acc;
                }
            }
            // Vertical pass.
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &t) in taps.iter().enumerate() {
                        let sy = reflect(y as isize + k as isize - radius, h);
                        acc += t * mid[sy * w + x];
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect();

    ImageF::from_planes(w, h, &planes)
}

/// Isotropic generalized-Gaussian blur with weights
/// `w(r) = exp(-(r^2 / (2 sigma^2))^(beta / 2))`, normalized to sum one.
///
/// `beta = 2` recovers the ordinary Gaussian; smaller `beta` gives heavier
/// tails, larger `beta` approaches a disc. The kernel is not separable, so
/// the convolution runs directly over the 2-D window.
pub fn generalized_gaussian_blur(
    img: &ImageF,
    sigma: f64,
    beta: f64,
    kernel_size: usize,
) -> Result<ImageF> {
    let radius = check_kernel(kernel_size)? as isize;
    if !(sigma > 0.0) || !(beta > 0.0) {
        return Err(Error::invalid(
            "generalized blur",
            format!("sigma and beta must be positive, got sigma {sigma}, beta {beta}"),
        ));
    }

    let mut kernel = vec![0.0; kernel_size * kernel_size];
    let mut sum = 0.0;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let r2 = (dx * dx + dy * dy) as f64;
            let w = (-(r2 / (2.0 * sigma * sigma)).powf(beta / 2.0)).exp();
            kernel[((dy + radius) * kernel_size as isize + dx + radius) as usize] = w;
            sum += w;
        }
    }
    for w in &mut kernel {
        *w /= sum;
    }

    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|ch| {
            let src = img.plane(ch);
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -radius..=radius {
                        let sy = reflect(y as isize + dy, h);
                        for dx in -radius..=radius {
                            let sx = reflect(x as isize + dx, w);
                            let kw = kernel
                                [((dy + radius) * kernel_size as isize + dx + radius) as usize];
                            acc += kw * src[sy * w + sx];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect();

    ImageF::from_planes(w, h, &planes)
}
