//! Training-time volume augmentation.
//!
//! Each training volume is intensity-scaled and resampled through one
//! affine map combining small per-axis rotations, an isotropic zoom, and a
//! translation that realises the random crop (zoom > 1) or random
//! zero-padding placement (zoom < 1) back to the original shape.  Images
//! are interpolated trilinearly with zero fill outside the volume; label
//! masks use nearest-neighbour lookup.  Evaluation uses the identity
//! transform, so augmented and clean pipelines share one code path.

use crate::error::Result;
use crate::volume::{sample_nearest, sample_trilinear, Boundary};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INTENSITY_RANGE: (f64, f64) = (0.85, 1.15);
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.2);

/// One sampled augmentation; the identity leaves volumes bit-unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Multiplicative intensity factor.
    pub intensity: f64,
    /// Rotation angles in degrees about the z, y and x axes.
    pub angles_deg: [f64; 3],
    /// Isotropic zoom factor (>1 magnifies, then crops back).
    pub zoom: f64,
    /// Translation in voxels along z, y, x (crop / padding placement).
    pub shift: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            intensity: 1.0,
            angles_deg: [0.0; 3],
            zoom: 1.0,
            shift: [0.0; 3],
        }
    }

    /// Draw one augmentation.  The shift range per axis is the slack left
    /// by the zoom, `extent·|zoom − 1| / 2` either way, so content never
    /// moves further than the crop/pad placement allows.  The draw order
    /// (intensity, angles, zoom, shifts) is part of the reproducibility
    /// contract.
    pub fn sample(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let intensity = rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1);
        let mut angles_deg = [0.0; 3];
        for a in &mut angles_deg {
            *a = rng.random_range(-MAX_ROTATION_DEG..MAX_ROTATION_DEG);
        }
        let zoom = rng.random_range(ZOOM_RANGE.0..ZOOM_RANGE.1);
        let mut shift = [0.0; 3];
        for (s, &e) in shift.iter_mut().zip(&shape) {
            let half = e as f64 * (zoom - 1.0).abs() / 2.0;
            if half > 0.0 {
                *s = rng.random_range(-half..half);
            }
        }
        AugmentParams {
            intensity,
            angles_deg,
            zoom,
            shift,
        }
    }

    fn is_identity_geometry(&self) -> bool {
        self.angles_deg == [0.0; 3] && self.zoom == 1.0 && self.shift == [0.0; 3]
    }
}

/// Rotation matrix Rz·Ry·Rx acting on centred (z, y, x) coordinates.
fn rotation_matrix(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [az, ay, ax] = angles_deg.map(f64::to_radians);
    let (cz, sz) = (az.cos(), az.sin());
    let (cy, sy) = (ay.cos(), ay.sin());
    let (cx, sx) = (ax.cos(), ax.sin());
    // Elemental rotations: about z mixes (y,x); about y mixes (z,x);
    // about x mixes (z,y).  Coordinates are ordered (z, y, x).
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    let ry = [[cy, 0.0, -sy], [0.0, 1.0, 0.0], [sy, 0.0, cy]];
    let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&rz, &ry), &rx)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Source coordinate for each output voxel: invert `p = ζ·R·q + t` as
/// `q = Rᵀ·(p − t)/ζ` in coordinates centred on the volume.
struct InverseMap {
    r_t: [[f64; 3]; 3],
    inv_zoom: f64,
    shift: [f64; 3],
    center: [f64; 3],
}

impl InverseMap {
    fn new(shape: [usize; 3], p: &AugmentParams) -> Self {
        let r = rotation_matrix(p.angles_deg);
        let mut r_t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r_t[i][j] = r[j][i];
            }
        }
        InverseMap {
            r_t,
            inv_zoom: 1.0 / p.zoom,
            shift: p.shift,
            center: shape.map(|e| (e as f64 - 1.0) / 2.0),
        }
    }

    fn source(&self, out_idx: [usize; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for a in 0..3 {
            v[a] = (out_idx[a] as f64 - self.center[a] - self.shift[a]) * self.inv_zoom;
        }
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = self.r_t[a][0] * v[0] + self.r_t[a][1] * v[1] + self.r_t[a][2] * v[2]
                + self.center[a];
        }
        q
    }
}

/// Augment an intensity volume (row-major z,y,x data).
pub fn augment_volume(data: &[f32], shape: [usize; 3], p: &AugmentParams) -> Result<Vec<f32>> {
    crate::volume::check_len(data.len(), shape, "augment_volume")?;
    let scale = p.intensity as f32;
    if p.is_identity_geometry() {
        return Ok(data.iter().map(|&v| v * scale).collect());
    }
    let map = InverseMap::new(shape, p);
    let [nz, ny, nx] = shape;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let [qz, qy, qx] = map.source([z, y, x]);
                out.push(sample_trilinear(data, shape, qz, qy, qx, Boundary::Zero) * scale);
            }
        }
    }
    Ok(out)
}

/// Augment a label mask with the same geometry (nearest-neighbour, zero
/// fill); intensity scaling does not apply to labels.
pub fn augment_mask(mask: &[u8], shape: [usize; 3], p: &AugmentParams) -> Result<Vec<u8>> {
    crate::volume::check_len(mask.len(), shape, "augment_mask")?;
    if p.is_identity_geometry() {
        return Ok(mask.to_vec());
    }
    let map = InverseMap::new(shape, p);
    let [nz, ny, nx] = shape;
    let mut out = Vec::with_capacity(mask.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let [qz, qy, qx] = map.source([z, y, x]);
                out.push(sample_nearest(mask, shape, qz, qy, qx));
            }
        }
    }
    Ok(out)
}

/// Augment an image/mask pair with one shared geometry.
pub fn augment_pair(
    data: &[f32],
    mask: &[u8],
    shape: [usize; 3],
    p: &AugmentParams,
) -> Result<(Vec<f32>, Vec<u8>)> {
    Ok((augment_volume(data, shape, p)?, augment_mask(mask, shape, p)?))
}
