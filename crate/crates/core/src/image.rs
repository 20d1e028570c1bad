use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

/// Smallest accepted raster side.
pub const MIN_SIDE: usize = 8;

/// Linear-intensity RGB raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub const CHANNELS: usize = 3;

    /// Wraps `data` (length `height * width * 3`) after checking the raster
    /// invariants: sides of at least 8 pixels, finite values in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "Image::new",
                format!("{} values for {height}x{width}x3", data.len()),
            ));
        }
        if let Some(bad) = data
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::InvalidInput(format!(
                "image value {} at index {bad} outside [0,1]",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from `f(y, x, c)`; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-mean luminance plane, row-major.
    pub fn luminance(&self) -> Vec<T> {
        let third = T::from_f64c(1.0 / 3.0);
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) * third)
            .collect()
    }

    pub fn same_dims<U: Real>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64c(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel scene depth, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> DepthMap<T> {
    /// Wraps `data` after checking that every depth is finite and positive.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::shape(
                "DepthMap::new",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(Error::InvalidInput(format!(
                "depth value {} at index {bad} is not finite and positive",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, depth: T) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn cast<U: Real>(&self) -> DepthMap<U> {
        DepthMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64c(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel transmission `exp(-beta * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap<T = f32> {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) data: Vec<T>,
}

impl<T: Real> TransmissionMap<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }
}

/// Scattering coefficient and atmospheric light for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn new(beta: f64, airlight: [f64; 3]) -> Result<Self> {
        let p = Self { beta, airlight };
        p.validate()?;
        Ok(p)
    }

    /// Zero scattering: the identity haze.
    pub fn clear() -> Self {
        Self {
            beta: 0.0,
            airlight: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidInput(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if let Some(a) = self
            .airlight
            .iter()
            .find(|a| !a.is_finite() || **a < 0.0 || **a > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "atmospheric light channel {a} outside [0,1]"
            )));
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "raster {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}
