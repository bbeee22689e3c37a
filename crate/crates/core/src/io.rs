//! File formats: the `DINF0001` binary tensor, PGM/PPM images and JSON
//! sidecars.
//!
//! Tensor layout: the 8-byte magic, a little-endian `u32` dtype tag
//! (0 = f32, 1 = f64, 2 = i32), a `u32` rank, `rank` little-endian `u64`
//! dims, then the row-major payload in little-endian order.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::schedule::Patch;

pub const MAGIC: &[u8; 8] = b"DINF0001";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn tag(&self) -> u32 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "dims {dims:?} hold {n} values, payload has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_canvas(c: &Patch) -> Self {
        Tensor {
            dims: c.shape().to_vec(),
            data: TensorData::F64(c.iter().copied().collect()),
        }
    }

    pub fn from_labels(labels: &Array2<u32>) -> Self {
        let data = labels.iter().map(|&v| v as i32).collect();
        Tensor {
            dims: labels.shape().to_vec(),
            data: TensorData::I32(data),
        }
    }

    /// Floating tensor of rank 2 (one channel) or 3 as a canvas.
    pub fn to_canvas(&self) -> Result<Patch> {
        let values: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(_) => return Err(Error::InvalidArgument("integer tensor is not a canvas".into())),
        };
        let shape = match self.dims[..] {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "canvas tensor must have rank 2 or 3, got {:?}",
                    self.dims
                )))
            }
        };
        Ok(Patch::from_shape_vec(shape, values).expect("length checked at construction"))
    }

    /// Integer rank-2 tensor as a label grid.
    pub fn to_labels(&self) -> Result<Array2<u32>> {
        let TensorData::I32(v) = &self.data else {
            return Err(Error::InvalidArgument("label tensor must be i32".into()));
        };
        let [h, w] = self.dims[..] else {
            return Err(Error::InvalidArgument(format!(
                "label tensor must have rank 2, got {:?}",
                self.dims
            )));
        };
        let labels = v
            .iter()
            .map(|&x| u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("negative label {x}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((h, w), labels).expect("length checked at construction"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.data.tag().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err(format!("truncated: needed {n} more bytes, {} left", cur.len()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let tag = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("element count overflows")?;
        let width = match tag {
            0 | 2 => 4,
            1 => 8,
            t => return Err(format!("unknown dtype tag {t}")),
        };
        let payload = take(n.checked_mul(width).ok_or("payload size overflows")?)?;
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        let data = match tag {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Tensor::from_bytes(&bytes).map_err(|reason| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    })
}

/// Linear intensity map used for a PGM export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrayScale {
    pub min: f64,
    pub max: f64,
}

/// Binary PGM of one plane, mapping min to 0 and max to 255.
pub fn write_pgm(path: &Path, plane: ArrayView2<'_, f64>) -> Result<GrayScale> {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels: Vec<u8> = plane
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    write_pnm(path, "P5", plane.dim(), &pixels)?;
    Ok(GrayScale { min, max })
}

/// Label grid as gray levels `label * floor(255 / max_label)`.
pub fn write_label_pgm(path: &Path, labels: &Array2<u32>, max_label: u32) -> Result<()> {
    let step = 255 / max_label.max(1);
    let pixels: Vec<u8> = labels.iter().map(|&l| (l.min(max_label) * step) as u8).collect();
    write_pnm(path, "P5", labels.dim(), &pixels)
}

/// Label grid with a fixed colour per label; 0 is black.
pub fn write_label_ppm(path: &Path, labels: &Array2<u32>) -> Result<()> {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
        [240, 50, 230],
    ];
    let pixels: Vec<u8> = labels
        .iter()
        .flat_map(|&l| {
            if l == 0 {
                [0, 0, 0]
            } else {
                PALETTE[(l as usize - 1) % PALETTE.len()]
            }
        })
        .collect();
    write_pnm(path, "P6", labels.dim(), &pixels)
}

fn write_pnm(path: &Path, magic: &str, (h, w): (usize, usize), pixels: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
