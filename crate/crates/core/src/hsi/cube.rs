use std::fs;
use std::path::Path;

use crate::error::{CstError, Result};
use crate::tensor::Tensor;

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HEADER_LEN: usize = 16;

/// A hyperspectral image stored band-sequential: band, then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(CstError::Validation(format!(
                "cube dims must be positive, got {}x{}x{}",
                height, width, bands
            )));
        }
        let n = height * width * bands;
        if data.len() != n {
            return Err(CstError::Validation(format!(
                "cube {}x{}x{} needs {} values, got {}",
                height,
                width,
                bands,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CstError::Validation(format!("non-finite value at index {}", i)));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn from_fn(height: usize, width: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(b, y, x));
                }
            }
        }
        HsiCube {
            height,
            width,
            bands,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[(band * self.height + y) * self.width + x]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    /// Spectrum of one pixel as `f64`.
    pub fn spectrum(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, y, x) as f64).collect()
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<HsiCube> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(CstError::Geometry(format!(
                "crop {}x{} at ({}, {}) outside {}x{} cube",
                h, w, y, x, self.height, self.width
            )));
        }
        Ok(HsiCube::from_fn(h, w, self.bands, |b, yy, xx| {
            self.get(b, y + yy, x + xx)
        }))
    }

    /// Channel-last `[H, W, B]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, b) = self.dims();
        let mut data = vec![0.0; h * w * b];
        for band in 0..b {
            for (p, v) in self.band(band).iter().enumerate() {
                data[p * b + band] = *v as f64;
            }
        }
        Tensor::new(vec![h, w, b], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<HsiCube> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(CstError::DimMismatch(format!("expected [H, W, B] tensor, got {:?}", s)));
        }
        let (h, w, b) = (s[0], s[1], s[2]);
        let d = t.data();
        HsiCube::new(
            h,
            w,
            b,
            (0..b)
                .flat_map(|band| (0..h * w).map(move |p| d[p * b + band] as f32))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<HsiCube> {
        HsiCube::new(
            self.height,
            self.width,
            self.bands,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

pub fn encode_cube(cube: &HsiCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cube.data.len());
    out.extend_from_slice(HSC1_MAGIC);
    for d in [cube.height, cube.width, cube.bands] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < HEADER_LEN {
        return Err(CstError::Format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != HSC1_MAGIC {
        return Err(CstError::Format(format!(
            "bad magic {:?}, expected \"HSC1\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, b) = (dim(0), dim(1), dim(2));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CstError::Format("header dims overflow".into()))?;
    let found = bytes.len() - HEADER_LEN;
    if found != expected {
        return Err(CstError::Length { expected, found });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HsiCube::new(h, w, b, data)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)).map_err(|e| CstError::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CstError::io(path, e))?;
    decode_cube(&bytes)
}
