// SPDX-License-Identifier: Apache-2.0

//! Images, heatmaps and binary PGM (P5) files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Height × width × channels, values clamped to `[0, 1]`, HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Invalid("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite pixel".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
        self
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Invalid("PGM export needs a single channel".into()));
        }
        Ok(encode_pgm(self.height, self.width, &self.data))
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (h, w, data) = decode_pgm(bytes)?;
        Self::new(h, w, 1, data)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pgm()?)?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_pgm(&buf)
    }
}

/// Single-channel map over image pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Flat index of the maximum, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Min-max rescale to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Heatmap {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let values = if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Heatmap {
            height: self.height,
            width: self.width,
            values,
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.height, self.width, &self.values)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pgm())?;
        Ok(())
    }
}

fn encode_pgm(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary graymap with maxval up to 65535.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::format("PGM", m);
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("header values out of range"));
    }
    pos += 1; // single whitespace after maxval
    let body = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    let wide = maxval > 255;
    let need = h * w * if wide { 2 } else { 1 };
    if body.len() < need {
        return Err(bad("raster too short"));
    }
    let m = maxval as f64;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as f64 / m).collect()
    };
    Ok((h, w, data))
}
