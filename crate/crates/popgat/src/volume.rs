//! Portable 3D volume files and intensity preprocessing.
//!
//! A volume on disk is a pair of files: a JSON header (`<name>.json`) with
//! `{shape, spacing_mm, dtype, order}` and a sibling raw little-endian
//! payload (`<name>.bin`).  `shape` and `spacing_mm` are ordered (z, y, x);
//! `order` is always "C" (x fastest).  `f32` volumes hold intensities,
//! `u8` volumes hold segmentation class labels.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const HU_CLIP_MIN: f32 = -1024.0;
pub const HU_CLIP_MAX: f32 = 150.0;

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            VolumeData::F32(_) => "f32",
            VolumeData::U8(_) => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Extents ordered (z, y, x).
    pub shape: [usize; 3],
    /// Physical voxel spacing in millimetres, ordered (z, y, x).
    pub spacing_mm: [f64; 3],
    pub data: VolumeData,
}

impl Volume {
    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Ok(v),
            VolumeData::U8(_) => Err(Error::InvalidArgument {
                op: "Volume::as_f32",
                reason: "volume holds u8 labels, expected f32 intensities".into(),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            VolumeData::U8(v) => Ok(v),
            VolumeData::F32(_) => Err(Error::InvalidArgument {
                op: "Volume::as_u8",
                reason: "volume holds f32 intensities, expected u8 labels".into(),
            }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Write `<path>.json` + `<path>.bin`; `path` should end in `.json`.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    if volume.numel() != volume.data.len() {
        return Err(Error::InvalidShape {
            op: "write_volume",
            shape: volume.shape.to_vec(),
            reason: format!("payload has {} elements", volume.data.len()),
        });
    }
    let header = VolumeHeader {
        shape: volume.shape,
        spacing_mm: volume.spacing_mm,
        dtype: volume.data.dtype().to_string(),
        order: "C".to_string(),
    };
    let header_json = serde_json::to_string(&header).map_err(|e| Error::Json {
        context: format!("serializing header for {}", path.display()),
        source: e,
    })?;
    std::fs::write(path, header_json)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let bin = payload_path(path);
    let mut file = std::fs::File::create(&bin)
        .map_err(|e| Error::io(format!("creating {}", bin.display()), e))?;
    match &volume.data {
        VolumeData::F32(values) => {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf)
        }
        VolumeData::U8(values) => file.write_all(values),
    }
    .map_err(|e| Error::io(format!("writing {}", bin.display()), e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header_text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let header: VolumeHeader = serde_json::from_str(&header_text).map_err(|e| Error::Json {
        context: format!("parsing header {}", path.display()),
        source: e,
    })?;
    if header.order != "C" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unsupported element order '{}', expected C", header.order),
        });
    }
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    let bin = payload_path(path);
    let mut file = std::fs::File::open(&bin)
        .map_err(|e| Error::io(format!("opening {}", bin.display()), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", bin.display()), e))?;
    let data = match header.dtype.as_str() {
        "f32" => {
            if bytes.len() != n * 4 {
                return Err(Error::Format {
                    path: bin.display().to_string(),
                    reason: format!("expected {} bytes for f32 payload, found {}", n * 4, bytes.len()),
                });
            }
            VolumeData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "u8" => {
            if bytes.len() != n {
                return Err(Error::Format {
                    path: bin.display().to_string(),
                    reason: format!("expected {n} bytes for u8 payload, found {}", bytes.len()),
                });
            }
            VolumeData::U8(bytes)
        }
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("unsupported dtype '{other}'"),
            })
        }
    };
    Ok(Volume {
        shape: header.shape,
        spacing_mm: header.spacing_mm,
        data,
    })
}

/// Behavior for samples outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Clamp coordinates to the border voxel (used for resampling).
    Clamp,
    /// Treat everything outside as 0 (used for augmentation fill).
    Zero,
}

#[inline]
fn voxel(data: &[f32], shape: [usize; 3], z: i64, y: i64, x: i64, boundary: Boundary) -> f32 {
    let [nz, ny, nx] = shape;
    match boundary {
        Boundary::Clamp => {
            let z = z.clamp(0, nz as i64 - 1) as usize;
            let y = y.clamp(0, ny as i64 - 1) as usize;
            let x = x.clamp(0, nx as i64 - 1) as usize;
            data[(z * ny + y) * nx + x]
        }
        Boundary::Zero => {
            if z < 0 || y < 0 || x < 0 || z >= nz as i64 || y >= ny as i64 || x >= nx as i64 {
                0.0
            } else {
                data[(z as usize * ny + y as usize) * nx + x as usize]
            }
        }
    }
}

/// Trilinear interpolation at a (possibly fractional) voxel coordinate.
pub fn sample_trilinear(data: &[f32], shape: [usize; 3], z: f64, y: f64, x: f64, boundary: Boundary) -> f32 {
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = ((z - z0) as f32, (y - y0) as f32, (x - x0) as f32);
    let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
    let mut acc = 0.0f32;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let wz = if dz == 0 { 1.0 - fz } else { fz };
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                let w = wz * wy * wx;
                if w > 0.0 {
                    acc += w * voxel(data, shape, z0 + dz, y0 + dy, x0 + dx, boundary);
                }
            }
        }
    }
    acc
}

/// Validate that a flat buffer matches the voxel count of `shape`.
pub fn check_len(len: usize, shape: [usize; 3], op: &'static str) -> Result<()> {
    let n: usize = shape.iter().product();
    if len != n {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("buffer has {len} elements, expected {n}"),
        });
    }
    Ok(())
}

/// Nearest-neighbor lookup for label volumes (rounds half up).
pub fn sample_nearest(data: &[u8], shape: [usize; 3], z: f64, y: f64, x: f64) -> u8 {
    let [nz, ny, nx] = shape;
    let zi = (z + 0.5).floor() as i64;
    let yi = (y + 0.5).floor() as i64;
    let xi = (x + 0.5).floor() as i64;
    if zi < 0 || yi < 0 || xi < 0 || zi >= nz as i64 || yi >= ny as i64 || xi >= nx as i64 {
        return 0;
    }
    data[(zi as usize * ny + yi as usize) * nx + xi as usize]
}

/// A resampled, clipped and min-max-normalized volume ready for the network.
#[derive(Debug, Clone)]
pub struct PreprocessedVolume {
    pub shape: [usize; 3],
    pub spacing_mm: f64,
    /// Intensities in [0, 1].
    pub data: Vec<f32>,
    /// Set when the clipped volume was constant (output forced to zeros).
    pub constant: bool,
}

/// Resample to isotropic `target_spacing_mm` (trilinear), clip intensities
/// to the fixed window, then min-max normalize per patient.
pub fn preprocess_volume(volume: &Volume, target_spacing_mm: f64) -> Result<PreprocessedVolume> {
    let src = volume.as_f32()?;
    if src.is_empty() {
        return Err(Error::InvalidArgument {
            op: "preprocess_volume",
            reason: "empty volume".into(),
        });
    }
    if !(target_spacing_mm > 0.0) || volume.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument {
            op: "preprocess_volume",
            reason: format!(
                "spacings must be positive (source {:?}, target {target_spacing_mm})",
                volume.spacing_mm
            ),
        });
    }
    let out_shape: [usize; 3] = std::array::from_fn(|d| {
        ((volume.shape[d] as f64 * volume.spacing_mm[d] / target_spacing_mm).round() as usize).max(1)
    });
    let needs_resample = out_shape != volume.shape
        || volume.spacing_mm.iter().any(|&s| (s - target_spacing_mm).abs() > 1e-12);
    let mut data = if needs_resample {
        let mut out = Vec::with_capacity(out_shape[0] * out_shape[1] * out_shape[2]);
        let ratio: [f64; 3] = std::array::from_fn(|d| target_spacing_mm / volume.spacing_mm[d]);
        for z in 0..out_shape[0] {
            let sz = (z as f64 + 0.5) * ratio[0] - 0.5;
            for y in 0..out_shape[1] {
                let sy = (y as f64 + 0.5) * ratio[1] - 0.5;
                for x in 0..out_shape[2] {
                    let sx = (x as f64 + 0.5) * ratio[2] - 0.5;
                    out.push(sample_trilinear(src, volume.shape, sz, sy, sx, Boundary::Clamp));
                }
            }
        }
        out
    } else {
        src.to_vec()
    };
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for v in &mut data {
        *v = v.clamp(HU_CLIP_MIN, HU_CLIP_MAX);
        min = min.min(*v);
        max = max.max(*v);
    }
    let constant = min == max;
    if constant {
        log::warn!("preprocess_volume: constant intensity volume, output all zeros");
        data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let inv = 1.0 / (max - min);
        data.iter_mut().for_each(|v| *v = (*v - min) * inv);
    }
    Ok(PreprocessedVolume {
        shape: out_shape,
        spacing_mm: target_spacing_mm,
        data,
        constant,
    })
}
