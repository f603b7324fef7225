//! RGB float images plus PFM and PNG file I/O.
//!
//! PFM (portable float map) is the canonical on-disk format: little-endian `f32`, rows
//! stored bottom-to-top. PNG output is 8-bit and only meant for inspection.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_size(&self, other: &Image) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Rounds every value through `f32`, so that in-memory images equal what a PFM
    /// round trip would produce.
    pub fn quantized_f32(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Columns `[x0, x1)` as a new image.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Image {
        assert!(x0 <= x1 && x1 <= self.width, "column range out of bounds");
        let w = x1 - x0;
        let mut data = Vec::with_capacity(w * self.height * 3);
        for y in 0..self.height {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Image { width: w, height: self.height, data }
    }

    /// Left half `[0, W/2)` and right half `[W/2, W)` column ranges.
    pub fn split_columns(&self) -> (Image, Image) {
        let mid = self.width / 2;
        (self.crop_columns(0, mid), self.crop_columns(mid, self.width))
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(path.as_ref(), self.width, self.height, 3, &self.data)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
        let (w, h, ch, data) = read_pfm(path.as_ref())?;
        if ch != 3 {
            return Err(Error::Format {
                path: path.as_ref().into(),
                msg: "expected a color (PF) map".into(),
            });
        }
        Image::from_raw(w, h, data)
    }

    /// 8-bit PNG of the image clamped to `[0, 1]`.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path.as_ref(), ::image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Writes a PFM with `channels` of 1 (`Pf`) or 3 (`PF`). Data is top-row-first.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height * channels);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    write!(out, "{tag}\n{width} {height}\n-1.0\n").expect("write to vec");
    let row_len = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a PFM, returning `(width, height, channels, data)` with the top row first.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format { path: path.into(), msg: msg.into() };

    // Three whitespace-terminated header tokens: tag, "w h", scale.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("missing PF/Pf tag")),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err(bad("truncated raster"));
    }
    let row_len = width * channels;
    let mut data = vec![0.0; n];
    for (k, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (k / row_len, k % row_len);
        data[(height - 1 - file_row) * row_len + col] = v as f64;
    }
    Ok((width, height, channels, data))
}
