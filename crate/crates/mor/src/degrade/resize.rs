//! Bicubic resampling (Catmull-Rom, `a = -0.5`).

use crate::error::{Error, Result};
use crate::image::ImageF;

use super::blur::reflect;

/// Catmull-Rom cubic kernel (the common bicubic with `a = -0.5`).
/// Interpolating: `k(0) = 1`, `k(n) = 0` for other integers, support `|t| < 2`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Precomputed taps for one output coordinate along one axis.
struct Taps {
    base: isize,
    weights: [f64; 4],
}

/// Half-pixel-centre mapping: output sample `i` reads source coordinate
/// `(i + 0.5) * in/out - 0.5`, which keeps the image centred for any scale.
fn axis_taps(out_len: usize, in_len: usize) -> Vec<Taps> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * ratio - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let mut weights = [
                cubic(frac + 1.0),
                cubic(frac),
                cubic(frac - 1.0),
                cubic(frac - 2.0),
            ];
            // The kernel sums to one analytically; renormalize to keep
            // constants exact under floating point.
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            Taps {
                base: floor as isize - 1,
                weights,
            }
        })
        .collect()
}

/// Resample to `out_width x out_height` with a separable Catmull-Rom kernel
/// and reflected boundaries. Same-size calls are exact identity. Output is
/// clamped to `[0, 1]` (cubic kernels overshoot near edges).
pub fn resize_bicubic(img: &ImageF, out_width: usize, out_height: usize) -> Result<ImageF> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::invalid("resize", "zero output dimension"));
    }
    let (w, h) = (img.width(), img.height());
    let xtaps = axis_taps(out_width, w);
    let ytaps = axis_taps(out_height, h);

    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|ch| {
            let src = img.plane(ch);
            // Horizontal pass at source height.
            let mut mid = vec![0.0; out_width * h];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (x, t) in xtaps.iter().enumerate() {
                    let mut acc = 0.0;
                    for (k, &wt) in t.weights.iter().enumerate() {
                        acc += wt * row[reflect(t.base + k as isize, w)];
                    }
                    mid[y * out_width + x] = acc;
                }
            }
            // Vertical pass.
            let mut out = vec![0.0; out_width * out_height];
            for (y, t) in ytaps.iter().enumerate() {
                for x in 0..out_width {
                    let mut acc = 0.0;
                    for (k, &wt) in t.weights.iter().enumerate() {
                        acc += wt * mid[reflect(t.base + k as isize, h) * out_width + x];
                    }
                    out[y * out_width + x] = acc.clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();

    ImageF::from_planes(out_width, out_height, &planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textures::texture;

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert_eq!(cubic(-1.0), 0.0);
        assert!(cubic(0.5) > 0.5 && cubic(0.5) < 1.0);
        assert!(cubic(1.5) < 0.0, "negative lobe");
        // Partition of unity at an arbitrary phase.
        let s: f64 = cubic(0.3 + 1.0) + cubic(0.3) + cubic(0.3 - 1.0) + cubic(0.3 - 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_identity() {
        let img = texture(19, 13, 8);
        let out = resize_bicubic(&img, 19, 13).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constants_survive_any_scale() {
        let img = ImageF::constant(16, 16, 3, 0.42).unwrap();
        for (ow, oh) in [(4, 4), (7, 5), (32, 48), (16, 4)] {
            let out = resize_bicubic(&img, ow, oh).unwrap();
            for &v in out.data() {
                assert!((v - 0.42).abs() < 1e-14, "{ow}x{oh}");
            }
        }
    }

    #[test]
    fn linear_ramps_reproduce_exactly_in_the_interior() {
        // Catmull-Rom has linear precision, so away from reflected borders a
        // ramp must come back as the same ramp.
        let w = 32;
        let img = ImageF::from_vec(
            w,
            8,
            1,
            (0..w * 8).map(|i| (i % w) as f64 / w as f64).collect(),
        )
        .unwrap();

        // Upscale x2.
        let up = resize_bicubic(&img, w * 2, 8).unwrap();
        for x in 8..w * 2 - 8 {
            let src = (x as f64 + 0.5) * 0.5 - 0.5;
            let want = src / w as f64;
            assert!(
                (up.get(x, 4, 0) - want).abs() < 1e-12,
                "up x={x}: {} vs {want}",
                up.get(x, 4, 0)
            );
        }

        // Downscale x2.
        let down = resize_bicubic(&img, w / 2, 8).unwrap();
        for x in 4..w / 2 - 4 {
            let src = (x as f64 + 0.5) * 2.0 - 0.5;
            let want = src / w as f64;
            assert!(
                (down.get(x, 4, 0) - want).abs() < 1e-12,
                "down x={x}: {} vs {want}",
                down.get(x, 4, 0)
            );
        }
    }

    #[test]
    fn downsample_then_upsample_approximates_smooth_content() {
        // A low-frequency texture should survive a x2 round trip closely.
        let img = texture(32, 32, 12); // value-noise cloud family (12 % 5 == 2)
        let down = resize_bicubic(&img, 16, 16).unwrap();
        let back = resize_bicubic(&down, 32, 32).unwrap();
        let mse: f64 = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / img.data().len() as f64;
        assert!(mse.sqrt() < 0.05, "round-trip rmse {}", mse.sqrt());
    }

    #[test]
    fn output_stays_in_range_despite_overshoot() {
        // Step edges make cubic interpolation overshoot; clamping bounds it.
        let mut img = ImageF::new(16, 4, 1).unwrap();
        for y in 0..4 {
            for x in 8..16 {
                img.set(x, y, 0, 1.0);
            }
        }
        let out = resize_bicubic(&img, 64, 4).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_zero_output() {
        let img = ImageF::constant(4, 4, 1, 0.5).unwrap();
        assert!(resize_bicubic(&img, 0, 4).is_err());
    }
}
