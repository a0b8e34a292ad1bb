use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Single-channel raster, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "{} values do not fill a {width}x{height} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(invalid("image intensities must be finite and within [0, 1]"));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        GrayImage { width, height, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel value, or zero outside the raster.
    #[inline]
    pub fn get_padded(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Reads a binary (P5) portable graymap, 8- or 16-bit.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::decode_pgm(BufReader::new(file))
    }

    pub fn decode_pgm(mut reader: impl BufRead) -> Result<Self> {
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Parse { line: 0, message: "truncated PGM header".into() });
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P5" {
            return Err(Error::Parse { line: 1, message: format!("unsupported magic {:?}", header[0]) });
        }
        let field = |i: usize| -> Result<usize> {
            header[i].parse().map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad PGM header field {:?}", header[i]),
            })
        };
        let (width, height, maxval) = (field(1)?, field(2)?, field(3)?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse { line: 1, message: format!("bad maxval {maxval}") });
        }
        let bytes_per = if maxval < 256 { 1 } else { 2 };
        let mut raw = vec![0u8; width * height * bytes_per];
        reader.read_exact(&mut raw)?;
        let scale = 1.0 / maxval as f32;
        let data = if bytes_per == 1 {
            raw.iter().map(|&b| (b as f32 * scale).min(1.0)).collect()
        } else {
            raw.chunks_exact(2)
                .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 * scale).min(1.0))
                .collect()
        };
        Ok(GrayImage { width, height, data })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>, sixteen_bit: bool) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        self.encode_pgm(&mut out, sixteen_bit)?;
        out.flush()?;
        Ok(())
    }

    pub fn encode_pgm(&self, mut out: impl Write, sixteen_bit: bool) -> Result<()> {
        let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
        write!(out, "P5\n{} {}\n{}\n", self.width, self.height, maxval)?;
        if sixteen_bit {
            let buf: Vec<u8> = self
                .data
                .iter()
                .flat_map(|&v| ((v as f64 * 65535.0).round() as u16).to_be_bytes())
                .collect();
            out.write_all(&buf)?;
        } else {
            let buf: Vec<u8> = self.data.iter().map(|&v| (v as f64 * 255.0).round() as u8).collect();
            out.write_all(&buf)?;
        }
        Ok(())
    }
}
