//! Synthetic chest-like phantoms and the pseudo-real style transform.
//!
//! Phantoms are unions of ellipsoids with additive attenuation, voxelized by
//! testing each voxel center for membership. Attenuation is in mm⁻¹, so a
//! 250 mm chord through soft tissue gives a line integral of about 5.

mod phantom;
mod style;

pub use phantom::{
    generate_phantom, Ellipsoid, GridSpec, LabelSet, LabelTask, Lesion, PhantomSpec, BODY_MU,
    BONE_DELTA, LESION_DELTA, LUNG_DELTA,
};
pub use style::{pseudo_real_transform, DomainStyle};

use crate::error::{Error, Result};

/// Minimum voxel count along any axis.
pub const MIN_DIM: usize = 8;

/// A 3D attenuation grid. Voxel `(i, j, k)` has its center at
/// `origin + (i, j, k) * spacing` (mm, relative to the isocenter).
/// Data is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f32>,
}

impl VoxelVolume {
    /// A zero-filled volume centered on the isocenter.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = centered_origin(dims, spacing);
        let len = dims.iter().product();
        let vol = VoxelVolume {
            dims,
            spacing,
            origin,
            data: vec![0.0; len],
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < MIN_DIM) {
            return Err(Error::InvalidVolume(format!(
                "dimensions {:?} below minimum {MIN_DIM}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("origin must be finite".into()));
        }
        let expected: usize = self.dims.iter().product();
        if self.data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        if let Some(v) = self.data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "attenuation {v} is negative or non-finite"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Physical center of voxel `(i, j, k)` in mm.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Axis-aligned bounding box `(lo, hi)` covering every voxel fully.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - 0.5 * self.spacing[a];
            hi[a] = lo[a] + self.dims[a] as f64 * self.spacing[a];
        }
        (lo, hi)
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Order-sensitive FNV-1a hash over the raw bytes; used for
    /// determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Origin that puts the grid center on the isocenter.
pub fn centered_origin(dims: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [
        -0.5 * (dims[0] as f64 - 1.0) * spacing[0],
        -0.5 * (dims[1] as f64 - 1.0) * spacing[1],
        -0.5 * (dims[2] as f64 - 1.0) * spacing[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_dims() {
        assert!(VoxelVolume::zeros([4, 8, 8], [1.0; 3]).is_err());
        assert!(VoxelVolume::zeros([8, 8, 8], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn bounds_cover_voxels() {
        let v = VoxelVolume::zeros([8, 8, 8], [2.0; 3]).unwrap();
        let (lo, hi) = v.bounds();
        assert_eq!(lo, [-8.0; 3]);
        assert_eq!(hi, [8.0; 3]);
        assert_eq!(v.voxel_center(0, 0, 0), [-7.0; 3]);
    }

    #[test]
    fn negative_values_invalid() {
        let mut v = VoxelVolume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        v.data[3] = -1.0;
        assert!(v.validate().is_err());
    }
}
