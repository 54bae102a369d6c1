//! Procedural grayscale textures.
//!
//! Everything in this crate that needs image content — embedder calibration,
//! training patches, metric and pipeline tests — draws it from here, so the
//! whole system is self-contained and reproducible. A `variant` index picks
//! one of five families and seeds its parameters; the same variant always
//! produces the same pixels.

use crate::image::ImageF;
use crate::numeric::SeededRng;

/// Salt mixed into every texture stream so textures do not collide with
/// other uses of the same user-facing seed.
const TEXTURE_SALT: u64 = 0x7E87_0115;

/// Deterministic grayscale texture for `variant`.
///
/// Families cycle with the variant index: sinusoidal gratings, checkerboards,
/// smooth value-noise clouds, radial waves, and plaid (crossed gratings with
/// a little noise). Parameters (frequency, orientation, contrast, cell size)
/// are drawn per variant. Output values stay within `[0.02, 0.98]`, leaving
/// headroom for additive noise in degradation tests.
pub fn texture(width: usize, height: usize, variant: u64) -> ImageF {
    let mut rng = SeededRng::stream(TEXTURE_SALT, variant);
    let family = variant % 5;
    let mut img = ImageF::new(width, height, 1).expect("texture dims");
    let (w, h) = (width as f64, height as f64);

    match family {
        0 => {
            // Oriented sinusoidal grating.
            let cycles = rng.uniform(2.0, 12.0);
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let contrast = rng.uniform(0.25, 0.45);
            let (c, s) = (theta.cos(), theta.sin());
            fill(&mut img, |x, y| {
                let u = (x / w) * c + (y / h) * s;
                0.5 + contrast * (std::f64::consts::TAU * cycles * u + phase).sin()
            });
        }
        1 => {
            // Two-tone checkerboard.
            let cell = rng.below(14) as usize + 2;
            let lo = rng.uniform(0.05, 0.35);
            let hi = rng.uniform(0.6, 0.95);
            fill(&mut img, |x, y| {
                let parity = ((x as usize / cell) + (y as usize / cell)) % 2;
                if parity == 0 {
                    lo
                } else {
                    hi
                }
            });
        }
        2 => {
            // Smooth cloud: coarse random lattice, bilinear interpolation.
            let grid = rng.below(5) as usize + 3;
            let lattice: Vec<f64> = (0..(grid + 1) * (grid + 1))
                .map(|_| rng.uniform(0.1, 0.9))
                .collect();
            fill(&mut img, |x, y| {
                let gx = (x / w) * grid as f64;
                let gy = (y / h) * grid as f64;
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                let at = |i: usize, j: usize| lattice[j.min(grid) * (grid + 1) + i.min(grid)];
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                top * (1.0 - fy) + bot * fy
            });
        }
        3 => {
            // Radial waves around a random centre.
            let cx = rng.uniform(0.2, 0.8) * w;
            let cy = rng.uniform(0.2, 0.8) * h;
            let cycles = rng.uniform(3.0, 10.0);
            let contrast = rng.uniform(0.25, 0.45);
            fill(&mut img, |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / w.max(h);
                0.5 + contrast * (std::f64::consts::TAU * cycles * r).sin()
            });
        }
        _ => {
            // Plaid: crossed gratings plus mild pixel noise.
            let fx = rng.uniform(2.0, 9.0);
            let fy = rng.uniform(2.0, 9.0);
            let amp = rng.uniform(0.15, 0.25);
            let mut noise = SeededRng::stream(TEXTURE_SALT ^ 0xA5A5, variant);
            fill(&mut img, |x, y| {
                let a = (std::f64::consts::TAU * fx * x / w).sin();
                let b = (std::f64::consts::TAU * fy * y / h).sin();
                0.5 + amp * a + amp * b + noise.uniform(-0.04, 0.04)
            });
        }
    }

    for v in img.data_mut() {
        *v = v.clamp(0.02, 0.98);
    }
    img
}

fn fill(img: &mut ImageF, mut f: impl FnMut(f64, f64) -> f64) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, 0, f(x as f64, y as f64));
        }
    }
}
