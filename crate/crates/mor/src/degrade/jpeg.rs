//! JPEG-style compression proxy.
//!
//! Models the lossy core of JPEG — 8x8 block DCT, quantization with the
//! standard luminance table scaled by the usual quality curve, inverse DCT —
//! without the entropy coding (which is lossless and therefore irrelevant to
//! image quality). Each channel is processed independently with the luminance
//! table; chroma subsampling is intentionally omitted. The result reproduces
//! the artifacts that matter downstream: ringing and 8-pixel blocking.

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Standard JPEG luminance quantization table (quality 50 base), row-major.
const BASE_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality-scaled quantization table following the libjpeg convention:
/// `qf = 5000/q` below 50 else `200 - 2q`, entries
/// `clamp(floor((base * qf + 50) / 100), 1, 255)`. Quality 100 yields the
/// all-ones table (near-lossless).
pub(crate) fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(
            "jpeg quality",
            format!("must be in 1..=100, got {quality}"),
        ));
    }
    let qf = if quality < 50 {
        5000.0 / quality as f64
    } else {
        200.0 - 2.0 * quality as f64
    };
    let mut table = [0.0; 64];
    for (t, &b) in table.iter_mut().zip(&BASE_TABLE) {
        *t = ((b * qf + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    Ok(table)
}

/// Orthonormal 8-point DCT-II basis matrix: `D[u][x] = c(u) cos((2x+1)u pi/16)`
/// with `c(0) = sqrt(1/8)`, `c(u) = sqrt(2/8)` otherwise. `D D^T = I`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    d
}

/// Apply the compression proxy at the given quality (1..=100).
///
/// Pixels are mapped to the JPEG range (`v * 255 - 128`), edges replicated to
/// a multiple of 8, each block transformed, quantized (`round(F / t) * t`
/// with the orthonormal-DCT table `t / 8`), inverted, and cropped back.
/// Output is clamped to `[0, 1]`.
pub fn jpeg_proxy_compress(img: &ImageF, quality: u32) -> Result<ImageF> {
    let table = quant_table(quality)?;
    let d = dct_basis();
    let (w, h) = (img.width(), img.height());
    let bw = w.div_ceil(8) * 8;
    let bh = h.div_ceil(8) * 8;

    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|ch| {
            let src = img.plane(ch);
            // Pad by edge replication and shift to [-128, 127].
            let mut padded = vec![0.0; bw * bh];
            for y in 0..bh {
                let sy = y.min(h - 1);
                for x in 0..bw {
                    let sx = x.min(w - 1);
                    padded[y * bw + x] = src[sy * w + sx] * 255.0 - 128.0;
                }
            }

            for by in (0..bh).step_by(8) {
                for bx in (0..bw).step_by(8) {
                    let mut block = [[0.0f64; 8]; 8];
                    for (y, row) in block.iter_mut().enumerate() {
                        for (x, v) in row.iter_mut().enumerate() {
                            *v = padded[(by + y) * bw + bx + x];
                        }
                    }
                    // F = D B D^T. The orthonormal 2-D DCT-II equals the
                    // JPEG FDCT (identical normalization), so the table
                    // entries are used as quantization steps directly.
                    let f = mat8(&d, &matt8(&block, &d));
                    let mut q = [[0.0f64; 8]; 8];
                    for u in 0..8 {
                        for v in 0..8 {
                            let step = table[u * 8 + v];
                            q[u][v] = (f[u][v] / step).round() * step;
                        }
                    }
                    // B' = D^T Q D.
                    let back = matt8_left(&d, &mat8(&q, &d));
                    for (y, row) in back.iter().enumerate() {
                        for (x, v) in row.iter().enumerate() {
                            padded[(by + y) * bw + bx + x] = *v;
                        }
                    }
                }
            }

            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = ((padded[y * bw + x] + 128.0) / 255.0).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();

    ImageF::from_planes(w, h, &planes)
}

/// `A * B` for 8x8.
fn mat8(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            let aik = a[i][k];
            for j in 0..8 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// `A * B^T` for 8x8.
fn matt8(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += a[i][k] * b[j][k];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// `A^T * B` for 8x8.
fn matt8_left(a: &[[f64; 8]; 8], b: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += a[k][i] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textures::texture;

    fn rmse(a: &ImageF, b: &ImageF) -> f64 {
        let se: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        (se / a.data().len() as f64).sqrt()
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let d = dct_basis();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|k| d[i][k] * d[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-14, "rows {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn quality_table_endpoints() {
        let q100 = quant_table(100).unwrap();
        assert!(q100.iter().all(|&t| t == 1.0), "quality 100 is all ones");
        let q50 = quant_table(50).unwrap();
        for (t, &b) in q50.iter().zip(&BASE_TABLE) {
            assert_eq!(*t, b, "quality 50 reproduces the base table");
        }
        // Lower quality means coarser steps everywhere.
        let q10 = quant_table(10).unwrap();
        for (lo, hi) in q10.iter().zip(q50.iter()) {
            assert!(lo >= hi);
        }
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn mid_gray_is_exactly_preserved() {
        // 128/255 maps to 0 after the level shift; every DCT coefficient is
        // then exactly zero and survives any quantization.
        let img = ImageF::constant(20, 14, 1, 128.0 / 255.0).unwrap();
        for q in [5, 50, 95] {
            let out = jpeg_proxy_compress(&img, q).unwrap();
            assert_eq!(out, img, "quality {q}");
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = ImageF::constant(17, 9, 1, 0.71).unwrap();
        let out = jpeg_proxy_compress(&img, 30).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| (v - first).abs() < 1e-12));
        // DC quantization can shift the level by at most half a DC step:
        // table[0]/8 / 2 in shifted units = 16*(qf scale)... bound loosely.
        assert!((first - 0.71).abs() < 2.0 / 255.0);
    }

    #[test]
    fn quality_100_is_near_lossless() {
        let img = texture(40, 32, 6);
        let out = jpeg_proxy_compress(&img, 100).unwrap();
        // All-ones table: each coefficient moves by at most half a gray
        // level, so the spatial RMSE stays below half a level too.
        assert!(rmse(&img, &out) < 0.002, "rmse {}", rmse(&img, &out));
    }

    #[test]
    fn lower_quality_hurts_more() {
        let img = texture(48, 48, 1);
        let e90 = rmse(&img, &jpeg_proxy_compress(&img, 90).unwrap());
        let e50 = rmse(&img, &jpeg_proxy_compress(&img, 50).unwrap());
        let e10 = rmse(&img, &jpeg_proxy_compress(&img, 10).unwrap());
        assert!(e10 > e50 && e50 > e90, "rmse q90={e90} q50={e50} q10={e10}");
        assert!(e10 > 0.01, "strong compression must visibly distort");
    }

    #[test]
    fn rgb_channels_processed_independently() {
        let gray = texture(24, 24, 2);
        let rgb = ImageF::from_planes(
            24,
            24,
            &[gray.plane(0), gray.plane(0), gray.plane(0)],
        )
        .unwrap();
        let out_rgb = jpeg_proxy_compress(&rgb, 40).unwrap();
        let out_gray = jpeg_proxy_compress(&gray, 40).unwrap();
        for c in 0..3 {
            assert_eq!(out_rgb.plane(c), out_gray.plane(0), "channel {c}");
        }
    }

    #[test]
    fn non_multiple_of_8_sizes_round_trip() {
        for (w, h) in [(7, 5), (9, 16), (23, 11)] {
            let img = texture(w, h, 4);
            let out = jpeg_proxy_compress(&img, 80).unwrap();
            assert_eq!(out.width(), w);
            assert_eq!(out.height(), h);
        }
    }
}
