//! 8-bit RGB raster.

use alloc::vec;
use alloc::vec::Vec;

pub const MIN_HEIGHT: usize = 16;
pub const MIN_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("image {height}x{width} is below the 16x8 minimum")]
    TooSmall { height: usize, width: usize },
    #[error("buffer of {len} bytes does not fill {height}x{width}x3")]
    BadBuffer {
        height: usize,
        width: usize,
        len: usize,
    },
}

/// Row-major interleaved RGB, `height × width × 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height < MIN_HEIGHT || width < MIN_WIDTH {
            return Err(ImageError::TooSmall { height, width });
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::BadBuffer {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let mut data = vec![0u8; height * width * 3];
        for px in data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Swaps rows and columns.
    pub fn transpose(&self) -> Image {
        let mut out = vec![0u8; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * 3;
                let dst = (x * self.height + y) * 3;
                out[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        Image {
            height: self.width,
            width: self.height,
            data: out,
        }
    }

    /// Mirrors left to right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }
}
