//! 3D volume container and its on-disk format.
//!
//! File layout (`V3F1`): 4-byte magic, three little-endian u32 extents
//! dx, dy, dz, then dx*dy*dz little-endian f32 values with x fastest.
//! File size is exactly 16 + 4*dx*dy*dz bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::tensor::Tensor;
use crate::Result;

pub const VOLUME_MAGIC: &[u8; 4] = b"V3F1";

/// Dense 3D grid of voxel intensities. Index (x, y, z) with x fastest, so the
/// memory order matches a [1,1,dz,dy,dx] tensor exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dx: usize, dy: usize, dz: usize) -> Self {
        Volume {
            dx,
            dy,
            dz,
            data: vec![0.0; dx * dy * dz],
        }
    }

    pub fn from_data(dx: usize, dy: usize, dz: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != dx * dy * dz {
            return Err(TensorError::InvalidArgument(format!(
                "volume data length {} does not match {dx}x{dy}x{dz}",
                data.len()
            )));
        }
        Ok(Volume { dx, dy, dz, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.dx, self.dy, self.dz)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dy + y) * self.dx + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v as f64;
        }
        acc / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as a [1,1,dz,dy,dx] host tensor (no reordering needed).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: vec![1, 1, self.dz, self.dy, self.dx],
            data: self.data.clone(),
            requires_grad: false,
        }
    }

    /// Rebuild from [.., dz, dy, dx]-shaped data in volume memory order.
    pub fn from_tensor_data(dx: usize, dy: usize, dz: usize, data: &[f32]) -> Result<Self> {
        Self::from_data(dx, dy, dz, data.to_vec())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let io_err = |e| TensorError::VolumeIo {
            path: path.display().to_string(),
            source: e,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(VOLUME_MAGIC).map_err(io_err)?;
        for extent in [self.dx, self.dy, self.dz] {
            w.write_all(&(extent as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let io_err = |e| TensorError::VolumeIo {
            path: path.display().to_string(),
            source: e,
        };
        let file = File::open(path).map_err(io_err)?;
        let file_len = file.metadata().map_err(io_err)?.len();
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != VOLUME_MAGIC {
            return Err(TensorError::BadMagic {
                path: path.display().to_string(),
            });
        }
        let mut extent = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut extent).map_err(io_err)?;
            *d = u32::from_le_bytes(extent) as usize;
        }
        let (dx, dy, dz) = (dims[0], dims[1], dims[2]);
        let n = dx * dy * dz;
        let expected = 16 + 4 * n as u64;
        if file_len != expected {
            return Err(TensorError::SizeMismatch {
                path: path.display().to_string(),
                expected,
                actual: file_len,
            });
        }
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Volume { dx, dy, dz, data })
    }
}
