use std::path::Path;

use aal_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Channels-last image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        ensure(height > 0 && width > 0 && channels > 0, || {
            format!("image dimensions must be positive, got {height}x{width}x{channels}")
        })?;
        ensure(pixels.len() == height * width * channels, || {
            format!("{} pixels for a {height}x{width}x{channels} image", pixels.len())
        })?;
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { height, width, channels, pixels: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * channels);
        let pixels = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self { height, width, channels, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mutable pixel access for in-crate operators, which must keep values in `[0, 1]`.
    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        debug_assert!((0.0..=1.0).contains(&v));
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Validation(format!("cannot write a {c}-channel image as PNG"))),
        };
        image::save_buffer(path, &self.to_bytes(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Stacks same-shaped images into an NCHW tensor (constant, no gradient).
pub fn images_to_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        ensure(img.same_shape(first), || {
            format!("mixed image shapes in batch: {}x{}x{} vs {h}x{w}x{c}", img.height, img.width, img.channels)
        })?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f64::from(img.get(y, x, ch)));
                }
            }
        }
    }
    Ok(Tensor::constant(vec![images.len(), c, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 1.0]).is_ok());
    }

    #[test]
    fn batch_is_channels_first() {
        let img = ImageTensor::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = images_to_batch(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let expect: Vec<f64> = [0.1f32, 0.4, 0.2, 0.5, 0.3, 0.6].iter().map(|&v| f64::from(v)).collect();
        assert_eq!(t.data(), expect.as_slice());
    }
}
