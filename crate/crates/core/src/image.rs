//! RGB float images, their file formats, and pixel losses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_f32_vec, read_magic, read_u32, write_f32_slice};

const RAW_MAGIC: &[u8; 4] = b"DRIM";

/// `height × width × 3`, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Residuals this small are below the precision images are stored at
/// (f32 on unit-range values) and carry no L1 gradient.
pub const L1_DEADBAND: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    L1,
    Mse,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) && self.data.len() == other.data.len() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Mean pixel loss against `target` and its cotangent w.r.t. `self`.
    /// The L1 subgradient is zero for residuals within [`L1_DEADBAND`].
    pub fn loss(&self, target: &Image, kind: PixelLoss) -> Result<(f64, Image)> {
        self.check_shape(target)?;
        let n = self.data.len() as f64;
        let mut grad = Image::zeros(self.width, self.height);
        let mut total = 0.0;
        for ((g, a), b) in grad.data.iter_mut().zip(&self.data).zip(&target.data) {
            let d = a - b;
            match kind {
                PixelLoss::L1 => {
                    total += d.abs();
                    *g = if d > L1_DEADBAND {
                        1.0 / n
                    } else if d < -L1_DEADBAND {
                        -1.0 / n
                    } else {
                        0.0
                    };
                }
                PixelLoss::Mse => {
                    total += d * d;
                    *g = 2.0 * d / n;
                }
            }
        }
        Ok((total / n, grad))
    }

    /// 2×2 box filter; odd trailing rows/columns are dropped.
    pub fn downsample2x(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let s = self.data[3 * ((2 * y) * self.width + 2 * x) + c]
                        + self.data[3 * ((2 * y) * self.width + 2 * x + 1) + c]
                        + self.data[3 * ((2 * y + 1) * self.width + 2 * x) + c]
                        + self.data[3 * ((2 * y + 1) * self.width + 2 * x + 1) + c];
                    out.data[3 * (y * w + x) + c] = 0.25 * s;
                }
            }
        }
        out
    }

    /// Reverse pass of [`Image::downsample2x`] into an image of
    /// `width × height`.
    pub fn downsample2x_backward(&self, width: usize, height: usize) -> Image {
        let mut out = Image::zeros(width, height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let g = 0.25 * self.data[3 * (y * self.width + x) + c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out.data[3 * ((2 * y + dy) * width + 2 * x + dx) + c] = g;
                    }
                }
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let channels = info.color_type.samples();
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            let rgb = match channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            data.extend(rgb.iter().map(|v| *v as f64 / 255.0));
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn write_raw_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(RAW_MAGIC)?;
        for v in [self.width as u32, self.height as u32, 3] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f32_slice(w, &self.data)
    }

    pub fn read_raw_from<R: Read>(r: &mut R) -> std::result::Result<Image, String> {
        read_magic(r, RAW_MAGIC)?;
        let width = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let c = read_u32(r)?;
        if c != 3 {
            return Err(format!("expected 3 channels, found {c}"));
        }
        if width == 0 || height == 0 || width * height > 1 << 26 {
            return Err(format!("implausible image size {width}x{height}"));
        }
        Ok(Image {
            width,
            height,
            data: read_f32_vec(r, width * height * 3)?,
        })
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_raw_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Image::read_raw_from(&mut BufReader::new(file)).map_err(|e| Error::format(path, e))
    }

    /// Reads a raw `DRIM` file, or a PNG for any other extension.
    pub fn read_any(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Image::read_png(path),
            _ => Image::read_raw(path),
        }
    }

    /// Rounds values to single precision, as stored by the raw format.
    pub fn quantized_f32(mut self) -> Image {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self
    }
}
