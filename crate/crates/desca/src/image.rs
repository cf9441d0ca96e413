//! Single-channel floating-point image container.
//!
//! Intensities live in `[0, 1]` after load-time normalization. Images are
//! immutable after construction and safe to share across worker threads.

use crate::error::{DescaError, Result};

/// A grayscale image stored row-major as `f32` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    /// Wraps raw row-major data. Fails if `data.len() != width * height`
    /// or any value is not finite.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DescaError::Contract(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescaError::Contract(
                "image contains non-finite values".into(),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    /// Clamped sampling: coordinates outside the domain replicate the nearest
    /// edge pixel. This is the boundary policy used by every operation in the
    /// crate, so patches anchored near (or outside) the border are well defined.
    #[inline]
    pub fn sample(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Returns a `(width + 2*margin) x (height + 2*margin)` image whose border
    /// replicates the nearest edge pixel. `margin == 0` returns a copy.
    pub fn pad_replicate(&self, margin: usize) -> Image {
        let m = margin as isize;
        Image::from_fn(self.width + 2 * margin, self.height + 2 * margin, |x, y| {
            self.sample(x as isize - m, y as isize - m)
        })
    }

    /// Applies a pixelwise intensity map, clamping the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Crops the rectangle with top-left `(x0, y0)` and the given size.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(DescaError::Contract(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |x, y| {
            self.get(x0 + x, y0 + y)
        }))
    }
}
