//! Interleaved RGB8 rasters and the padding rules used whenever a window
//! reaches past an image border.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster buffer holds {actual} bytes, expected {expected} for {width}x{height} RGB8")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("window size must be at least 1 pixel")]
    EmptyWindow,
    #[error("window at ({x}, {y}) of size {size} does not overlap a {width}x{height} raster")]
    OutsideRaster {
        x: i64,
        y: i64,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("window at ({x}, {y}) of size {size} exceeds a {width}x{height} raster and padding is disabled")]
    NeedsPadding {
        x: i64,
        y: i64,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// How pixels outside the source raster are synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Mirror about the edge pixel without repeating it: index `-k` maps to `k`.
    #[default]
    Reflect,
    /// Fill with a single gray value on all channels.
    Constant(u8),
}

/// Row-major, interleaved 8-bit RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// A fixed-size raster cut from a larger image.
pub type Patch = Raster;

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(RasterError::BufferSize {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Pixel lookup with out-of-range coordinates resolved through `pad`.
    #[inline]
    pub fn pixel_padded(&self, x: i64, y: i64, pad: PadPolicy) -> [u8; 3] {
        let inside = x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height;
        if inside {
            return self.pixel(x as usize, y as usize);
        }
        match pad {
            PadPolicy::Constant(v) => [v, v, v],
            PadPolicy::Reflect => self.pixel(reflect_index(x, self.width), reflect_index(y, self.height)),
        }
    }

    /// Cut a `size`×`size` window whose top-left corner is `origin`.
    ///
    /// Reflect padding needs at least one source pixel under the window;
    /// constant padding accepts any origin.
    pub fn extract(&self, origin: (i64, i64), size: usize, pad: PadPolicy) -> Result<Patch, RasterError> {
        self.extract_rect(origin, size, size, pad)
    }

    pub fn extract_rect(
        &self,
        origin: (i64, i64),
        width: usize,
        height: usize,
        pad: PadPolicy,
    ) -> Result<Raster, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyWindow);
        }
        let (ox, oy) = origin;
        let overlaps =
            ox < self.width as i64 && oy < self.height as i64 && ox + width as i64 > 0 && oy + height as i64 > 0;
        if !overlaps && matches!(pad, PadPolicy::Reflect) {
            return Err(RasterError::OutsideRaster {
                x: ox,
                y: oy,
                size: width.max(height),
                width: self.width,
                height: self.height,
            });
        }
        let mut out = Vec::with_capacity(width * height * 3);
        let fully_inside =
            ox >= 0 && oy >= 0 && ox as usize + width <= self.width && oy as usize + height <= self.height;
        if fully_inside {
            let (ox, oy) = (ox as usize, oy as usize);
            for row in oy..oy + height {
                let start = (row * self.width + ox) * 3;
                out.extend_from_slice(&self.data[start..start + width * 3]);
            }
        } else {
            for dy in 0..height as i64 {
                for dx in 0..width as i64 {
                    out.extend_from_slice(&self.pixel_padded(ox + dx, oy + dy, pad));
                }
            }
        }
        Ok(Raster {
            width,
            height,
            data: out,
        })
    }

    /// Crop that refuses to pad.
    pub fn crop(&self, origin: (i64, i64), size: usize) -> Result<Patch, RasterError> {
        let (ox, oy) = origin;
        if ox < 0 || oy < 0 || ox as usize + size > self.width || oy as usize + size > self.height {
            return Err(RasterError::NeedsPadding {
                x: ox,
                y: oy,
                size,
                width: self.width,
                height: self.height,
            });
        }
        self.extract(origin, size, PadPolicy::Constant(0))
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length is an invariant of Raster")
    }

    pub fn from_rgb_image(img: image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        }
    }

    /// Decode any 8-bit image file the `image` crate understands into RGB8.
    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path).map_err(|source| RasterError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_rgb_image(img.into_rgb8()))
    }

    /// Write as PNG (or whatever format the extension selects).
    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        self.to_rgb_image().save(path).map_err(|source| RasterError::Write {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Mirror an index into `0..len` without repeating the edge sample.
///
/// The mapping is periodic with period `2·(len−1)`, so any integer resolves.
#[inline]
pub fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let r = i.rem_euclid(period);
    if r >= len as i64 {
        (period - r) as usize
    } else {
        r as usize
    }
}

/// ITU-R BT.601 luma, the weighting used for grayscale everywhere in the crate.
#[inline]
pub fn luma(rgb: [u8; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}
