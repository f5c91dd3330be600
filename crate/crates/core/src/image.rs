//! Row-major `H x W x C` pixel buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 4;

/// An interleaved `H x W x C` image; pixel `(y, x)` channel `c` lives at
/// `(y * width + x) * channels + c`.
///
/// Float images are expected in `[0, 1]`; transforms never look at values,
/// so any `Copy` pixel type works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

pub type ImageTensor = Image<f32>;

impl<T: Copy> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::DimensionTooSmall {
                height,
                width,
                min: MIN_SIDE,
            });
        }
        if channels == 0 {
            return Err(Error::Shape("image needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// The channel values of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }
}

impl Image<f32> {
    /// Quantize to 8-bit, clamping to `[0, 1]` first.
    pub fn to_u8(&self) -> Image<u8> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn from_u8(img: &Image<u8>) -> Self {
        Image {
            height: img.height,
            width: img.width,
            channels: img.channels,
            data: img.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    /// Maximum absolute per-value difference.
    pub fn linf_distance(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl Image<u8> {
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }
}
