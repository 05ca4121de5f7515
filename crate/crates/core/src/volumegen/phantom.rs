use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{centered_origin, VoxelVolume};
use crate::error::{Error, Result};

/// Soft-tissue attenuation of the body ellipsoid (mm⁻¹).
pub const BODY_MU: f64 = 0.02;
/// Added attenuation of a bone-like shell.
pub const BONE_DELTA: f64 = 0.03;
/// Attenuation change inside the lungs.
pub const LUNG_DELTA: f64 = -0.015;
/// Attenuation added by a lesion.
pub const LESION_DELTA: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for GridSpec {
    /// 64³ voxels at 4 mm, a 25.6 cm cube.
    fn default() -> Self {
        GridSpec {
            dims: [64; 3],
            spacing: [4.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub attenuation: f64,
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.normalized_radius_sq(p) <= 1.0
    }

    #[inline]
    fn normalized_radius_sq(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.semi_axes[a];
                d * d
            })
            .sum()
    }

    /// Conservative test that a sphere lies strictly inside.
    fn contains_sphere(&self, center: [f64; 3], radius: f64) -> bool {
        let min_axis = self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        self.normalized_radius_sq(center).sqrt() + radius / min_axis < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    pub delta: f64,
    pub class: u8,
}

impl Lesion {
    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub grid: GridSpec,
    pub body: Option<Ellipsoid>,
    pub organs: Vec<Ellipsoid>,
    pub lesions: Vec<Lesion>,
}

/// Binary downstream labels for one phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub lesion_present: bool,
    pub multiple_lesions: bool,
    /// Largest lesion sits at `x > 0` (patient left).
    pub largest_on_left: bool,
}

impl LabelSet {
    pub fn from_spec(spec: &PhantomSpec) -> Self {
        let largest = spec
            .lesions
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.radius.total_cmp(&b.radius).then(ib.cmp(ia)));
        LabelSet {
            lesion_present: !spec.lesions.is_empty(),
            multiple_lesions: spec.lesions.len() >= 2,
            largest_on_left: largest.is_some_and(|(_, l)| l.center[0] > 0.0),
        }
    }

    pub fn get(&self, task: LabelTask) -> bool {
        match task {
            LabelTask::LesionPresent => self.lesion_present,
            LabelTask::MultipleLesions => self.multiple_lesions,
            LabelTask::Laterality => self.largest_on_left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTask {
    LesionPresent,
    MultipleLesions,
    Laterality,
}

impl LabelTask {
    pub const ALL: [LabelTask; 3] = [
        LabelTask::LesionPresent,
        LabelTask::MultipleLesions,
        LabelTask::Laterality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LabelTask::LesionPresent => "lesion_present",
            LabelTask::MultipleLesions => "lesion_count_ge2",
            LabelTask::Laterality => "laterality",
        }
    }
}

impl PhantomSpec {
    pub fn empty(seed: u64, grid: GridSpec) -> Self {
        PhantomSpec {
            seed,
            grid,
            body: None,
            organs: Vec::new(),
            lesions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.dims.iter().any(|&n| n < super::MIN_DIM) {
            return Err(Error::InvalidPhantom(format!(
                "grid dims {:?} below minimum",
                self.grid.dims
            )));
        }
        if self.grid.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidPhantom("grid spacing must be positive".into()));
        }
        let shapes = self.body.iter().chain(self.organs.iter());
        for e in shapes {
            if e.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::InvalidPhantom(format!(
                    "ellipsoid semi-axes {:?} must be positive",
                    e.semi_axes
                )));
            }
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if !(l.radius > 0.0) {
                return Err(Error::InvalidPhantom(format!("lesion {i} has radius {}", l.radius)));
            }
            match &self.body {
                Some(body) if body.contains_sphere(l.center, l.radius) => {}
                _ => {
                    return Err(Error::InvalidPhantom(format!(
                        "lesion {i} at {:?} (r = {}) is not strictly inside the body",
                        l.center, l.radius
                    )))
                }
            }
        }
        Ok(())
    }

    /// A randomized chest-like phantom: body, ribcage shell, two lungs,
    /// heart, spine, and `n_lesions` lesions placed inside the lungs.
    pub fn random_with_lesions(seed: u64, grid: GridSpec, n_lesions: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half: Vec<f64> = (0..3)
            .map(|a| 0.5 * grid.dims[a] as f64 * grid.spacing[a])
            .collect();
        let mut jitter = |scale: f64| 1.0 + scale * (2.0 * rng.random::<f64>() - 1.0);

        let body_axes = [
            0.86 * half[0] * jitter(0.05),
            0.66 * half[1] * jitter(0.05),
            0.92 * half[2],
        ];
        let body = Ellipsoid {
            center: [0.0; 3],
            semi_axes: body_axes,
            attenuation: BODY_MU,
        };
        let mut organs = Vec::new();
        // Ribcage shell: outer +bone, inner -bone.
        let shell = 0.07 * body_axes[0];
        organs.push(Ellipsoid {
            center: [0.0; 3],
            semi_axes: [body_axes[0] - shell, body_axes[1] - shell, 0.8 * body_axes[2]],
            attenuation: BONE_DELTA,
        });
        organs.push(Ellipsoid {
            center: [0.0; 3],
            semi_axes: [
                body_axes[0] - 2.0 * shell,
                body_axes[1] - 2.0 * shell,
                0.8 * body_axes[2] - shell,
            ],
            attenuation: -BONE_DELTA,
        });
        let lung_axes = [
            0.36 * body_axes[0] * jitter(0.08),
            0.62 * body_axes[1] * jitter(0.08),
            0.62 * body_axes[2] * jitter(0.08),
        ];
        let lung_x = 0.48 * body_axes[0];
        let lungs = [
            Ellipsoid {
                center: [-lung_x, 0.0, 0.05 * half[2]],
                semi_axes: lung_axes,
                attenuation: LUNG_DELTA,
            },
            Ellipsoid {
                center: [lung_x, 0.0, 0.05 * half[2]],
                semi_axes: lung_axes,
                attenuation: LUNG_DELTA,
            },
        ];
        organs.extend_from_slice(&lungs);
        organs.push(Ellipsoid {
            center: [0.12 * body_axes[0], -0.25 * body_axes[1], -0.2 * half[2]],
            semi_axes: [
                0.3 * body_axes[0] * jitter(0.1),
                0.32 * body_axes[1] * jitter(0.1),
                0.28 * body_axes[2],
            ],
            attenuation: 0.004,
        });
        organs.push(Ellipsoid {
            center: [0.0, 0.72 * body_axes[1], 0.0],
            semi_axes: [0.1 * body_axes[0], 0.14 * body_axes[1], 0.9 * body_axes[2]],
            attenuation: BONE_DELTA,
        });

        let mut lesions = Vec::with_capacity(n_lesions);
        let min_r = 1.5 * grid.spacing[0];
        let max_r = (3.5 * grid.spacing[0]).min(0.45 * lung_axes[0]);
        for _ in 0..n_lesions {
            let lung = &lungs[rng.random_range(0..2)];
            let mut radius = min_r + (max_r - min_r).max(0.0) * rng.random::<f64>();
            // Rejection sample a center well inside the lung and the body,
            // shrinking the lesion if nothing fits.
            let mut attempts = 0;
            let center = loop {
                attempts += 1;
                if attempts % 200 == 0 {
                    radius *= 0.5;
                }
                let p: Vec<f64> = (0..3)
                    .map(|a| lung.center[a] + lung.semi_axes[a] * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                let p = [p[0], p[1], p[2]];
                let shrunk = Ellipsoid {
                    semi_axes: [
                        (lung.semi_axes[0] - radius).max(1e-3),
                        (lung.semi_axes[1] - radius).max(1e-3),
                        (lung.semi_axes[2] - radius).max(1e-3),
                    ],
                    ..*lung
                };
                if shrunk.contains(p) && body.contains_sphere(p, radius) {
                    break p;
                }
            };
            lesions.push(Lesion {
                center,
                radius,
                delta: LESION_DELTA,
                class: 1,
            });
        }
        PhantomSpec {
            seed,
            grid,
            body: Some(body),
            organs,
            lesions,
        }
    }

    /// Random phantom whose lesion count is drawn from {0, 1, 2, 3}.
    pub fn random(seed: u64, grid: GridSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = rng.random_range(0..4usize);
        Self::random_with_lesions(seed, grid, n)
    }
}

/// Voxelizes a phantom. Each voxel holds the sum of the attenuations of
/// every shape containing its center, clamped at zero.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(VoxelVolume, LabelSet)> {
    spec.validate()?;
    let dims = spec.grid.dims;
    let spacing = spec.grid.spacing;
    let origin = centered_origin(dims, spacing);
    let slice = dims[0] * dims[1];
    let mut data = vec![0.0f32; slice * dims[2]];
    data.par_chunks_mut(slice).enumerate().for_each(|(k, plane)| {
        let z = origin[2] + k as f64 * spacing[2];
        for j in 0..dims[1] {
            let y = origin[1] + j as f64 * spacing[1];
            for i in 0..dims[0] {
                let p = [origin[0] + i as f64 * spacing[0], y, z];
                let mut mu = 0.0f64;
                for e in spec.body.iter().chain(spec.organs.iter()) {
                    if e.contains(p) {
                        mu += e.attenuation;
                    }
                }
                for l in &spec.lesions {
                    if l.contains(p) {
                        mu += l.delta;
                    }
                }
                plane[i + dims[0] * j] = mu.max(0.0) as f32;
            }
        }
    });
    let volume = VoxelVolume {
        dims,
        spacing,
        origin,
        data,
    };
    Ok((volume, LabelSet::from_spec(spec)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1mm() -> GridSpec {
        GridSpec {
            dims: [48; 3],
            spacing: [1.0; 3],
        }
    }

    #[test]
    fn empty_spec_gives_zero_volume() {
        let (vol, labels) = generate_phantom(&PhantomSpec::empty(0, grid1mm())).unwrap();
        assert!(vol.data.iter().all(|&v| v == 0.0));
        assert_eq!(
            labels,
            LabelSet {
                lesion_present: false,
                multiple_lesions: false,
                largest_on_left: false
            }
        );
    }

    #[test]
    fn centered_sphere_membership() {
        // 49 voxels per side put a voxel center exactly on the isocenter.
        let grid = GridSpec {
            dims: [49; 3],
            spacing: [1.0; 3],
        };
        let mut spec = PhantomSpec::empty(0, grid);
        spec.organs.push(Ellipsoid {
            center: [0.0; 3],
            semi_axes: [10.0; 3],
            attenuation: 0.02,
        });
        let (vol, _) = generate_phantom(&spec).unwrap();
        assert_eq!(vol.get(24, 24, 24), 0.02f32);
        assert_eq!(vol.get(44, 24, 24), 0.0);
    }

    #[test]
    fn lesion_outside_body_rejected() {
        let mut spec = PhantomSpec::empty(0, grid1mm());
        spec.body = Some(Ellipsoid {
            center: [0.0; 3],
            semi_axes: [10.0; 3],
            attenuation: 0.02,
        });
        spec.lesions.push(Lesion {
            center: [9.0, 0.0, 0.0],
            radius: 2.0,
            delta: 0.015,
            class: 1,
        });
        assert!(matches!(generate_phantom(&spec), Err(Error::InvalidPhantom(_))));
        spec.body = None;
        spec.lesions[0].center = [0.0; 3];
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn seeded_phantom_is_reproducible() {
        let spec = PhantomSpec::random(42, GridSpec::default());
        let (a, _) = generate_phantom(&spec).unwrap();
        let (b, _) = generate_phantom(&PhantomSpec::random(42, GridSpec::default())).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn labels_follow_lesions() {
        for n in 0..4 {
            let spec = PhantomSpec::random_with_lesions(7 + n as u64, GridSpec::default(), n);
            spec.validate().unwrap();
            let labels = LabelSet::from_spec(&spec);
            assert_eq!(labels.lesion_present, n > 0);
            assert_eq!(labels.multiple_lesions, n >= 2);
        }
    }

    #[test]
    fn random_phantom_is_nonnegative_and_in_range() {
        let (vol, _) = generate_phantom(&PhantomSpec::random(3, GridSpec::default())).unwrap();
        vol.validate().unwrap();
        let max = vol.data.iter().cloned().fold(0.0f32, f32::max);
        assert!(max > 0.04 && max < 0.1, "max attenuation {max}");
    }
}
