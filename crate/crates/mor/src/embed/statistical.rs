//! Statistical image embedder.
//!
//! A self-contained stand-in for a learned image encoder: seven pixel
//! statistics, each chosen to respond to one kind of quality loss, are
//! z-scored against a frozen calibration corpus and L2-normalized into a
//! 7-dimensional embedding. The matching prompt "embeddings" are signed unit
//! axes in the same space, so the cosine comparisons used downstream reduce
//! to reading off components.
//!
//! Feature order:
//!
//! | # | feature                      | responds to            |
//! |---|------------------------------|------------------------|
//! | 0 | Laplacian MAD (raw)          | sensor/shot noise      |
//! | 1 | mean gradient (smooth)       | blur (sharpness loss)  |
//! | 2 | 8-block boundary ratio (raw) | compression blocking   |
//! | 3 | std dev (smooth)             | contrast loss          |
//! | 4 | mean luminance (raw)         | exposure shift         |
//! | 5 | mid-band fraction            | resolution loss        |
//! | 6 | p95-p5 range (smooth)        | tonal range collapse   |
//!
//! "Smooth" features are measured after a Gaussian pre-filter so that
//! additive noise does not masquerade as sharpness or detail. The noise
//! feature is measured on the raw image by construction, and so is the
//! blockiness ratio: pre-filtering would blunt the very block edges it looks
//! for while leaving the interior floor it normalizes by.

use crate::degrade::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::ImageF;

use super::{Embedding, PromptPairSet};

pub(crate) const FEATURE_COUNT: usize = 7;

/// Dimension -> (feature index, polarity). Polarity `+1` means a larger
/// feature value indicates *better* quality on that dimension; the positive
/// prompt axis points that way and the negative prompt is its opposite.
const AXES: [(usize, f64); 7] = [
    (2, -1.0), // Overall_Quality: blockiness up = quality down
    (1, 1.0),  // Blurriness: gradient up = sharper
    (0, -1.0), // Noise: Laplacian MAD up = noisier
    (5, 1.0),  // Resolution: mid-band energy up = more resolved detail
    (3, 1.0),  // Edge_Clarity: contrast up = crisper edges
    (6, 1.0),  // Clarity: tonal range up = clearer
    (4, 1.0),  // Details: luminance axis (weakest proxy of the seven)
];

/// Per-feature mean over the calibration corpus (see `calibration_features`
/// in the test module). Frozen so embeddings are stable across builds; the
/// `calibration_constants_match_corpus` test regenerates and compares.
const FEATURE_MEAN: [f64; 7] = [
    0.20177238173625528,
    0.04091440632905229,
    1.1734044197227986,
    0.09442987664431766,
    0.4905820653128478,
    0.09956651822594065,
    0.2919981058309431,
];

/// Per-feature standard deviation over the calibration corpus.
const FEATURE_STD: [f64; 7] = [
    0.1319217818685314,
    0.02342891271800862,
    0.790699008392432,
    0.056927211612818635,
    0.045821987890845815,
    0.06511024957951643,
    0.18062431698343348,
];

/// Pre-filter applied before measuring structure-sensitive features. The
/// width is chosen so that heavy sensor noise (sigma up to ~30/255) is
/// largely flattened while real edges, which are spatially coherent, keep
/// most of their contrast.
fn presmooth(gray: &ImageF) -> ImageF {
    gaussian_blur(gray, 1.6, 9).expect("fixed valid parameters")
}

/// Median of the absolute interior Laplacian — a robust noise level proxy.
fn laplacian_mad(gray: &ImageF) -> f64 {
    let (w, h) = (gray.width(), gray.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut mags = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = 4.0 * gray.get(x, y, 0)
                - gray.get(x - 1, y, 0)
                - gray.get(x + 1, y, 0)
                - gray.get(x, y - 1, 0)
                - gray.get(x, y + 1, 0);
            mags.push(lap.abs());
        }
    }
    median(&mut mags)
}

/// Mean forward-difference gradient magnitude.
fn mean_gradient(gray: &ImageF) -> f64 {
    let (w, h) = (gray.width(), gray.height());
    if w < 2 || h < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = gray.get(x + 1, y, 0) - gray.get(x, y, 0);
            let gy = gray.get(x, y + 1, 0) - gray.get(x, y, 0);
            sum += (gx * gx + gy * gy).sqrt();
        }
    }
    sum / ((w - 1) * (h - 1)) as f64
}

/// Ratio of mean absolute step across 8-pixel block boundaries to the mean
/// elsewhere. Near 1 for unblocked images, above 1 for block compression.
fn blockiness(gray: &ImageF) -> f64 {
    let (w, h) = (gray.width(), gray.height());
    let (mut bsum, mut bcount) = (0.0, 0usize);
    let (mut isum, mut icount) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w - 1 {
            let d = (gray.get(x + 1, y, 0) - gray.get(x, y, 0)).abs();
            if x % 8 == 7 {
                bsum += d;
                bcount += 1;
            } else {
                isum += d;
                icount += 1;
            }
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let d = (gray.get(x, y + 1, 0) - gray.get(x, y, 0)).abs();
            if y % 8 == 7 {
                bsum += d;
                bcount += 1;
            } else {
                isum += d;
                icount += 1;
            }
        }
    }
    if bcount == 0 || icount == 0 {
        return 1.0;
    }
    const EPS: f64 = 1e-6;
    (bsum / bcount as f64 + EPS) / (isum / icount as f64 + EPS)
}

fn std_dev(gray: &ImageF) -> f64 {
    let mean = gray.mean();
    let var = gray
        .data()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / gray.data().len() as f64;
    var.sqrt()
}

/// Fraction of total variance carried by a mid-frequency band
/// (difference of Gaussians, sigma 1 vs 2). Resolution loss drains this
/// band; high-frequency noise mostly does not enter it.
fn midband_fraction(gray: &ImageF) -> f64 {
    let fine = gaussian_blur(gray, 1.0, 7).expect("fixed valid parameters");
    let coarse = gaussian_blur(gray, 2.0, 13).expect("fixed valid parameters");
    let band_energy: f64 = fine
        .data()
        .iter()
        .zip(coarse.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let mean = gray.mean();
    let total: f64 = gray.data().iter().map(|v| (v - mean).powi(2)).sum();
    band_energy / (total + 1e-9)
}

/// p95 - p5 of the luminance distribution.
fn tonal_range(gray: &ImageF) -> f64 {
    let mut values = gray.data().to_vec();
    values.sort_unstable_by(f64::total_cmp);
    let pick = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
    pick(0.95) - pick(0.05)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Raw (un-normalized) feature vector for an image.
pub(crate) fn features(img: &ImageF) -> [f64; FEATURE_COUNT] {
    let gray = img.to_luma();
    let smooth = presmooth(&gray);
    [
        laplacian_mad(&gray),
        mean_gradient(&smooth),
        blockiness(&gray),
        std_dev(&smooth),
        gray.mean(),
        midband_fraction(&gray),
        tonal_range(&smooth),
    ]
}

/// Compute the statistical embedding of an image: features, z-scored by the
/// frozen calibration constants, L2-normalized.
pub fn statistical_embed(img: &ImageF) -> Result<Embedding> {
    let f = features(img);
    let z: Vec<f64> = f
        .iter()
        .zip(FEATURE_MEAN.iter().zip(&FEATURE_STD))
        .map(|(&v, (&m, &s))| (v - m) / s)
        .collect();
    Embedding::new(z).map_err(|_| {
        Error::invalid(
            "statistical_embed",
            "image is statistically indistinguishable from the corpus mean",
        )
    })
}

/// Built-in prompt pairs for the statistical space: for each dimension, the
/// positive prompt is the signed unit axis of its feature (sign chosen so
/// that it points toward good quality) and the negative prompt is the
/// opposite axis.
pub fn statistical_prompt_pairs() -> PromptPairSet {
    let pairs = AXES
        .iter()
        .map(|&(feature, polarity)| {
            let mut pos = vec![0.0; FEATURE_COUNT];
            pos[feature] = polarity;
            let neg: Vec<f64> = pos.iter().map(|v| -v).collect();
            (
                Embedding::new(pos).expect("unit axis"),
                Embedding::new(neg).expect("unit axis"),
            )
        })
        .collect();
    PromptPairSet::new(pairs).expect("seven axes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{
        add_gaussian_noise, degrade_image, jpeg_proxy_compress, resize_bicubic,
        DegradationProfile,
    };
    use crate::embed::DIMENSIONS;
    use crate::numeric::SeededRng;
    use crate::textures::texture;

    /// The 64-image calibration corpus: 16 textures in four states — clean,
    /// mildly degraded, severely degraded (both at original resolution), and
    /// a 2x resolution round trip. Returns the feature vectors.
    fn calibration_features() -> Vec<[f64; FEATURE_COUNT]> {
        let mut same_size_deg1 = DegradationProfile::deg1();
        same_size_deg1.scale = 1;
        let mut same_size_deg2 = DegradationProfile::deg2();
        same_size_deg2.scale = 1;

        let mut out = Vec::with_capacity(64);
        for variant in 0..16u64 {
            let clean = texture(48, 48, variant);
            out.push(features(&clean));

            let (mild, _) = degrade_image(&clean, &same_size_deg1, 100 + variant)
                .expect("valid profile");
            out.push(features(&mild));

            let (severe, _) = degrade_image(&clean, &same_size_deg2, 200 + variant)
                .expect("valid profile");
            out.push(features(&severe));

            let down = resize_bicubic(&clean, 24, 24).expect("valid resize");
            let lowres = resize_bicubic(&down, 48, 48).expect("valid resize");
            out.push(features(&lowres));
        }
        out
    }

    /// Mean and std of each feature over the calibration corpus.
    fn calibration_stats() -> ([f64; FEATURE_COUNT], [f64; FEATURE_COUNT]) {
        let all = calibration_features();
        let n = all.len() as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        for f in &all {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = [0.0; FEATURE_COUNT];
        for f in &all {
            for ((s, v), m) in std.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
        }
        (mean, std)
    }

    /// Component of the normalized embedding along a dimension's *negative*
    /// (bad-quality) prompt; larger means the embedder sees more of that
    /// degradation.
    fn badness(img: &ImageF, dimension: &str) -> f64 {
        let idx = DIMENSIONS.iter().position(|d| *d == dimension).unwrap();
        let (feature, polarity) = AXES[idx];
        let e = statistical_embed(img).unwrap();
        -polarity * e.as_slice()[feature]
    }

    #[test]
    fn calibration_constants_match_corpus() {
        // Guards the frozen literals: if the corpus or the features change,
        // this fails and prints the new constants to paste in.
        let (mean, std) = calibration_stats();
        for i in 0..FEATURE_COUNT {
            assert!(
                (mean[i] - FEATURE_MEAN[i]).abs() < 1e-12
                    && (std[i] - FEATURE_STD[i]).abs() < 1e-12,
                "feature {i}: regenerate constants:\nmean {mean:?}\nstd {std:?}"
            );
        }
    }

    #[test]
    fn calibration_stds_are_healthy() {
        // Z-scoring divides by these; none may be near zero.
        for (i, s) in FEATURE_STD.iter().enumerate() {
            assert!(*s > 1e-4, "feature {i} has degenerate spread {s}");
        }
    }

    #[test]
    fn noise_moves_the_noise_axis() {
        let clean = texture(48, 48, 12);
        let mut rng = SeededRng::new(5);
        let noisy = add_gaussian_noise(&clean, 20.0, &mut rng).unwrap();
        assert!(
            badness(&noisy, "Noise") > badness(&clean, "Noise"),
            "noisy {} vs clean {}",
            badness(&noisy, "Noise"),
            badness(&clean, "Noise")
        );
    }

    #[test]
    fn blur_moves_the_blurriness_axis() {
        let clean = texture(48, 48, 0);
        let blurred = gaussian_blur(&clean, 2.0, 11).unwrap();
        assert!(badness(&blurred, "Blurriness") > badness(&clean, "Blurriness"));
    }

    #[test]
    fn compression_moves_the_overall_quality_axis() {
        let clean = texture(48, 48, 12);
        let crushed = jpeg_proxy_compress(&clean, 8).unwrap();
        assert!(badness(&crushed, "Overall_Quality") > badness(&clean, "Overall_Quality"));
    }

    #[test]
    fn resolution_round_trip_moves_the_resolution_axis() {
        // Aliasing can inject spurious mid-band energy on near-Nyquist
        // gratings, so the claim is statistical: on average over the texture
        // families a 4x resolution round trip reads as resolution loss.
        let mut mean_delta = 0.0;
        for variant in 0..20u64 {
            let clean = texture(48, 48, variant);
            let down = resize_bicubic(&clean, 12, 12).unwrap();
            let lowres = resize_bicubic(&down, 48, 48).unwrap();
            mean_delta += (badness(&lowres, "Resolution") - badness(&clean, "Resolution")) / 20.0;
        }
        assert!(mean_delta > 0.02, "mean shift {mean_delta}");

        // And sharply on a clean radial-wave instance.
        let clean = texture(48, 48, 3);
        let down = resize_bicubic(&clean, 12, 12).unwrap();
        let lowres = resize_bicubic(&down, 48, 48).unwrap();
        assert!(badness(&lowres, "Resolution") > badness(&clean, "Resolution") + 0.1);
    }


    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let img = texture(32, 32, 3);
        let a = statistical_embed(&img).unwrap();
        let b = statistical_embed(&img).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.as_slice().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), 7);
    }

    #[test]
    fn prompt_pairs_are_opposed_unit_axes() {
        let pairs = statistical_prompt_pairs();
        assert_eq!(pairs.dim(), 7);
        for (pos, neg) in pairs.pairs() {
            for (p, n) in pos.as_slice().iter().zip(neg.as_slice()) {
                assert_eq!(*p, -*n);
            }
            assert_eq!(
                pos.as_slice().iter().filter(|v| **v != 0.0).count(),
                1,
                "one-hot"
            );
        }
    }
}
