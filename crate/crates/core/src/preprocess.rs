//! Byte stream to grayscale image conversion.
//!
//! A stream is zero padded to a multiple of [`ROW_WIDTH`], laid out row-major
//! with that width, and box-filtered down (or up) to a square image whose
//! pixels are normalized to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// Fixed width of the byte matrix.
pub const ROW_WIDTH: usize = 800;

/// Side length of the network input image.
pub const IMAGE_SIZE: usize = 400;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteStream {
    pub data: Vec<u8>,
    pub source_id: String,
}

impl ByteStream {
    pub fn new(data: Vec<u8>, source_id: impl Into<String>) -> Self {
        Self {
            data,
            source_id: source_id.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(data, path.display().to_string()))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Row-major byte grid with exactly [`ROW_WIDTH`] columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteMatrix {
    rows: usize,
    values: Vec<u8>,
}

impl ByteMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        ROW_WIDTH
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * ROW_WIDTH + col]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.values[row * ROW_WIDTH..(row + 1) * ROW_WIDTH]
    }
}

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                format!("{} pixels", height * width),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Writes an 8-bit PNG with `round(pixel * 255)` intensities.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Zero pads to the smallest multiple of [`ROW_WIDTH`] not below the input length.
pub fn pad_bytes(stream: &ByteStream) -> Result<ByteStream> {
    if stream.is_empty() {
        return Err(Error::EmptyInput {
            source_id: stream.source_id.clone(),
        });
    }
    let padded_len = stream.len().div_ceil(ROW_WIDTH) * ROW_WIDTH;
    let mut data = Vec::with_capacity(padded_len);
    data.extend_from_slice(&stream.data);
    data.resize(padded_len, 0);
    Ok(ByteStream::new(data, stream.source_id.clone()))
}

pub fn reshape_bytes(stream: &ByteStream) -> Result<ByteMatrix> {
    let len = stream.len();
    if len == 0 {
        return Err(Error::EmptyInput {
            source_id: stream.source_id.clone(),
        });
    }
    if len % ROW_WIDTH != 0 {
        return Err(Error::NotAligned {
            len,
            width: ROW_WIDTH,
        });
    }
    Ok(ByteMatrix {
        rows: len / ROW_WIDTH,
        values: stream.data.clone(),
    })
}

/// Overlap of source cell `k` with destination cell `i`, in units of
/// `1 / dst` source pixels. Source cell `k` spans `[k*dst, (k+1)*dst)` and
/// destination cell `i` spans `[i*src, (i+1)*src)` on a common integer axis,
/// so every weight is an exact integer.
pub(crate) fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, u64)>> {
    (0..dst)
        .map(|i| {
            let lo = i * src;
            let hi = (i + 1) * src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .filter_map(|k| {
                    let a = lo.max(k * dst);
                    let b = hi.min((k + 1) * dst);
                    (b > a).then(|| (k, (b - a) as u64))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted box resize of the byte matrix to a `size × size` image.
pub fn resize_image(matrix: &ByteMatrix) -> GrayImage {
    resize_image_to(matrix, IMAGE_SIZE)
}

/// [`resize_image`] with a configurable output side length.
pub fn resize_image_to(matrix: &ByteMatrix, size: usize) -> GrayImage {
    let rows = matrix.rows();
    let col_w = box_weights(ROW_WIDTH, size);
    let row_w = box_weights(rows, size);

    // horizontal pass: each source row to `size` columns, weights still unnormalized
    let mut horiz = vec![0.0f64; rows * size];
    for r in 0..rows {
        let src = matrix.row(r);
        let dst = &mut horiz[r * size..(r + 1) * size];
        for (j, weights) in col_w.iter().enumerate() {
            let mut acc = 0u64;
            for &(k, w) in weights {
                acc += w * src[k] as u64;
            }
            dst[j] = acc as f64;
        }
    }

    // each output pixel covers ROW_WIDTH * rows units of (1/size)^2 area
    let norm = 1.0 / (ROW_WIDTH as f64 * rows as f64 * 255.0);
    let mut pixels = vec![0.0f32; size * size];
    for (i, weights) in row_w.iter().enumerate() {
        let out = &mut pixels[i * size..(i + 1) * size];
        for (j, px) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &(k, w) in weights {
                acc += w as f64 * horiz[k * size + j];
            }
            *px = (acc * norm).clamp(0.0, 1.0) as f32;
        }
    }
    GrayImage {
        height: size,
        width: size,
        pixels,
    }
}

pub fn binary_to_image(stream: &ByteStream) -> Result<GrayImage> {
    binary_to_image_sized(stream, IMAGE_SIZE)
}

/// Full pipeline with a configurable output side length.
pub fn binary_to_image_sized(stream: &ByteStream, size: usize) -> Result<GrayImage> {
    if size == 0 {
        return Err(Error::BadSpec("image size must be positive".into()));
    }
    let padded = pad_bytes(stream)?;
    let matrix = reshape_bytes(&padded)?;
    Ok(resize_image_to(&matrix, size))
}
