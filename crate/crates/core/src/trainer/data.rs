use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use crate::error::Result;
use crate::io::{load_projection, save_projection};
use crate::projector::{default_step, render_drr, to_display, ConeBeamGeometry, ProjectionImage};
use crate::volumegen::{
    generate_phantom, pseudo_real_transform, DomainStyle, LabelSet, PhantomSpec, VoxelVolume,
};

/// Lowest and highest source angle a context view plus an action can reach.
pub const BETA_MIN: f64 = -90.0;
pub const BETA_MAX: f64 = 180.0;

/// One simulated training volume with its projections on the angle grid.
#[derive(Debug, Clone)]
pub struct SimVolume {
    pub seed: u64,
    pub volume: VoxelVolume,
    pub labels: LabelSet,
    /// Display-range projections keyed by grid index `round((β − β_min)/Δφ)`.
    pub views: BTreeMap<i32, Vec<f64>>,
}

/// One image of the real-domain pool.
#[derive(Debug, Clone)]
pub struct RealImage {
    pub seed: u64,
    pub labels: LabelSet,
    pub pixels: Vec<f64>,
}

/// Training data: simulated volumes with cached projections, plus a
/// disjoint pool of restyled "real" radiographs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sim: Vec<SimVolume>,
    pub real: Vec<RealImage>,
    pub rig: ConeBeamGeometry,
    pub delta_phi: f64,
}

/// Display image of `vol` seen from `geom`.
pub fn render_display(vol: &VoxelVolume, geom: &ConeBeamGeometry) -> Result<ProjectionImage> {
    let raw = render_drr(vol, geom, default_step(vol))?;
    Ok(to_display(&raw))
}

/// A restyled display image: frontal or lateral render of a fresh phantom
/// passed through the pseudo-real transform with its own style seed.
pub fn render_real(spec: &PhantomSpec, rig: &ConeBeamGeometry, beta: f64, style_seed: u64) -> Result<(ProjectionImage, LabelSet)> {
    let (vol, labels) = generate_phantom(spec)?;
    let img = render_display(&vol, &rig.with_beta(beta))?;
    Ok((pseudo_real_transform(&img, &DomainStyle::pseudo_real(style_seed)), labels))
}

fn grid_count(delta_phi: f64) -> i32 {
    ((BETA_MAX - BETA_MIN) / delta_phi).round() as i32
}

impl Dataset {
    /// Grid index of a source angle.
    pub fn angle_index(&self, beta: f64) -> i32 {
        ((beta - BETA_MIN) / self.delta_phi).round() as i32
    }

    pub fn beta_of(&self, index: i32) -> f64 {
        BETA_MIN + index as f64 * self.delta_phi
    }

    /// Builds the phantoms and renders every grid angle, reading and writing
    /// the on-disk cache when `data.cache_dir` is set.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let d = &cfg.data;
        let dphi = cfg.train.delta_phi;
        let cache = (!d.cache_dir.is_empty()).then(|| PathBuf::from(&d.cache_dir));
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir)?;
        }
        let tag = cache_tag(cfg);
        let mut sim = Vec::with_capacity(d.n_phantoms);
        for i in 0..d.n_phantoms {
            let seed = d.phantom_seed + i as u64;
            let (volume, labels) = generate_phantom(&PhantomSpec::random(seed, d.grid))?;
            let mut views = BTreeMap::new();
            for idx in 0..=grid_count(dphi) {
                let beta = BETA_MIN + idx as f64 * dphi;
                let geom = d.rig.with_beta(beta);
                let img = match &cache {
                    Some(dir) => {
                        let path = dir.join(format!("{tag}-{seed}-{idx}.xwp"));
                        cached(&path, || render_display(&volume, &geom))?
                    }
                    None => render_display(&volume, &geom)?,
                };
                views.insert(idx, img.to_f64());
            }
            sim.push(SimVolume {
                seed,
                volume,
                labels,
                views,
            });
        }
        let mut real = Vec::with_capacity(2 * d.n_real);
        for i in 0..d.n_real {
            let seed = d.real_seed + i as u64;
            let spec = PhantomSpec::random(seed, d.grid);
            for (v, beta) in [0.0, 90.0].into_iter().enumerate() {
                let style_seed = seed.wrapping_mul(2).wrapping_add(v as u64);
                let (img, labels) = render_real(&spec, &d.rig, beta, style_seed)?;
                real.push(RealImage {
                    seed,
                    labels,
                    pixels: img.to_f64(),
                });
            }
        }
        Ok(Dataset {
            sim,
            real,
            rig: d.rig.clone(),
            delta_phi: dphi,
        })
    }

    /// Cached projection of volume `v` at source angle `beta`.
    pub fn view(&self, v: usize, beta: f64) -> &[f64] {
        let idx = self.angle_index(beta);
        self.sim[v]
            .views
            .get(&idx)
            .unwrap_or_else(|| panic!("angle {beta} outside the cached grid"))
    }

    /// Renders volume `v` from an arbitrary pose, bypassing the cache.
    pub fn render(&self, v: usize, geom: &ConeBeamGeometry) -> Result<Vec<f64>> {
        Ok(render_display(&self.sim[v].volume, geom)?.to_f64())
    }
}

fn cached(path: &Path, render: impl FnOnce() -> Result<ProjectionImage>) -> Result<ProjectionImage> {
    if path.exists() {
        return load_projection(path);
    }
    let img = render()?;
    save_projection(path, &img)?;
    Ok(img)
}

/// Short hash of everything that determines a cached image, so caches from
/// different rigs or grids never collide.
fn cache_tag(cfg: &TrainConfig) -> String {
    let d = &cfg.data;
    let text = format!(
        "{:?}|{:?}|{}|{}|{}|{}|{}|{}",
        d.grid.dims, d.grid.spacing, d.rig.sod, d.rig.sdd, d.rig.nu, d.rig.nv, d.rig.pitch, cfg.train.delta_phi
    );
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}
