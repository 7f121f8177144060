//! Center-slice extraction and binary PGM (P5) output.
//!
//! Plane convention: axial fixes z, coronal fixes y, sagittal fixes x. The
//! intensity map [0,1] -> [0,255] clamps and rounds half up. The config
//! digest rides in a PGM comment line.

use std::path::Path;

use neurovol_tensor::Volume;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

fn to_byte(v: f32) -> u8 {
    let clamped = v.clamp(0.0, 1.0);
    (clamped * 255.0 + 0.5).floor() as u8
}

/// Extracts the center slice of a plane as (width, height, bytes).
pub fn center_slice(volume: &Volume, plane: Plane) -> (usize, usize, Vec<u8>) {
    let (dx, dy, dz) = volume.shape();
    match plane {
        Plane::Axial => {
            let z = dz / 2;
            let mut px = Vec::with_capacity(dx * dy);
            for y in 0..dy {
                for x in 0..dx {
                    px.push(to_byte(volume.get(x, y, z)));
                }
            }
            (dx, dy, px)
        }
        Plane::Coronal => {
            let y = dy / 2;
            let mut px = Vec::with_capacity(dx * dz);
            for z in 0..dz {
                for x in 0..dx {
                    px.push(to_byte(volume.get(x, y, z)));
                }
            }
            (dx, dz, px)
        }
        Plane::Sagittal => {
            let x = dx / 2;
            let mut px = Vec::with_capacity(dy * dz);
            for z in 0..dz {
                for y in 0..dy {
                    px.push(to_byte(volume.get(x, y, z)));
                }
            }
            (dy, dz, px)
        }
    }
}

pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    pixels: &[u8],
    digest: &str,
) -> Result<(), CliError> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n# config_digest={digest}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes the three center-slice views of a volume next to `stem`.
pub fn write_slice_set(
    dir: &Path,
    stem: &str,
    volume: &Volume,
    digest: &str,
) -> Result<Vec<std::path::PathBuf>, CliError> {
    let mut written = Vec::new();
    for plane in Plane::ALL {
        let (w, h, px) = center_slice(volume, plane);
        let path = dir.join(format!("{stem}_{}.pgm", plane.name()));
        write_pgm(&path, w, h, &px, digest)?;
        written.push(path);
    }
    Ok(written)
}
