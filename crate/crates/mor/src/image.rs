use crate::error::{Error, Result};

/// Floating-point image: grayscale (1 channel) or RGB (3 channels),
/// row-major with interleaved channels, values nominally in `[0, 1]`.
///
/// Operations that can push values out of range (noise, compression,
/// interpolation overshoot) clamp back to `[0, 1]` where documented;
/// intermediate buffers inside the trainer are allowed to leave the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// BT.601 luma weights used for RGB -> grayscale reduction.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::validated(width, height, channels)?;
        Ok(ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        let mut img = Self::new(width, height, channels)?;
        img.data.fill(value);
        Ok(img)
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::validated(width, height, channels)?;
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                op: "ImageF::from_vec",
                left: format!("{width}x{height}x{channels}"),
                right: format!("len {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(ImageF {
            width,
            height,
            channels,
            data,
        })
    }

    fn validated(width: usize, height: usize, channels: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("ImageF", "zero width or height"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(
                "ImageF",
                format!("channels must be 1 or 3, got {channels}"),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && ch < self.channels);
        self.data[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height && ch < self.channels);
        self.data[(y * self.width + x) * self.channels + ch] = v;
    }

    /// Grayscale reduction; identity copy when already single-channel.
    pub fn to_luma(&self) -> ImageF {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]);
        }
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// One channel as a contiguous plane (row-major).
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        assert!(ch < self.channels, "channel {ch} of {}", self.channels);
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    /// Reassemble an image from per-channel planes of size `width * height`.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        Self::validated(width, height, channels)?;
        for p in planes {
            if p.len() != width * height {
                return Err(Error::ShapeMismatch {
                    op: "ImageF::from_planes",
                    left: format!("{width}x{height}"),
                    right: format!("plane len {}", p.len()),
                });
            }
        }
        let mut data = Vec::with_capacity(width * height * channels);
        for i in 0..width * height {
            for p in planes {
                data.push(p[i]);
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates() {
        assert!(ImageF::new(0, 4, 1).is_err());
        assert!(ImageF::new(4, 4, 2).is_err());
        assert!(ImageF::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageF::from_vec(2, 2, 1, vec![0.0, 0.0, 0.0, f64::NAN]).is_err());
        assert!(ImageF::new(4, 4, 3).is_ok());
    }

    #[test]
    fn indexing_is_row_major_interleaved() {
        let mut img = ImageF::new(2, 2, 3).unwrap();
        img.set(1, 0, 2, 0.5);
        // (y * width + x) * channels + ch = (0 * 2 + 1) * 3 + 2 = 5
        assert_eq!(img.data()[5], 0.5);
        assert_eq!(img.get(1, 0, 2), 0.5);
    }

    #[test]
    fn luma_weights_sum_to_one() {
        let img = ImageF::constant(3, 3, 3, 0.4).unwrap();
        let gray = img.to_luma();
        assert_eq!(gray.channels(), 1);
        for &v in gray.data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn planes_round_trip() {
        let img = ImageF::from_vec(
            2,
            1,
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        )
        .unwrap();
        let planes: Vec<Vec<f64>> = (0..3).map(|c| img.plane(c)).collect();
        assert_eq!(planes[0], vec![0.1, 0.4]);
        assert_eq!(planes[2], vec![0.3, 0.6]);
        let back = ImageF::from_planes(2, 1, &planes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn clamp_bounds_values() {
        let mut img = ImageF::new(1, 1, 1).unwrap();
        img.data_mut()[0] = 1.7;
        img.clamp01();
        assert_eq!(img.data()[0], 1.0);
        img.data_mut()[0] = -0.3;
        img.clamp01();
        assert_eq!(img.data()[0], 0.0);
    }
}
