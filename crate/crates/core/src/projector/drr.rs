use rayon::prelude::*;

use super::geometry::{dot, normalize, sub, Vec3};
use super::{ConeBeamGeometry, ProjectionImage};
use crate::error::{Error, Result};
use crate::volumegen::VoxelVolume;

/// Parametric entry and exit of the ray `origin + t·dir` (t ≥ 0) through the
/// box, or `None` on a miss.
pub(crate) fn clip_ray(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t1 > t0).then_some((t0, t1))
}

fn check_source_outside(vol: &VoxelVolume, geom: &ConeBeamGeometry) -> Result<()> {
    geom.validate()?;
    let (lo, hi) = vol.bounds();
    let s = geom.rig().source;
    if (0..3).all(|a| s[a] >= lo[a] && s[a] <= hi[a]) {
        return Err(Error::InvalidGeometry(format!(
            "source {s:?} lies inside the volume box"
        )));
    }
    Ok(())
}

/// Trilinear sample at a world point inside the box. Indices are clamped to
/// the grid, so the outer half-voxel shell takes the edge voxel's value.
#[inline]
fn trilinear(vol: &VoxelVolume, p: Vec3) -> f64 {
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let f = (p[a] - vol.origin[a]) / vol.spacing[a];
        let fl = f.floor();
        let n = vol.dims[a] as isize;
        let i0 = fl as isize;
        base[a] = i0.clamp(0, n - 1) as usize;
        next[a] = (i0 + 1).clamp(0, n - 1) as usize;
        w[a] = f - fl;
    }
    let nx = vol.dims[0];
    let nxy = nx * vol.dims[1];
    let d = &vol.data;
    let at = |i: usize, j: usize, k: usize| d[i + nx * j + nxy * k] as f64;
    let c00 = at(base[0], base[1], base[2]) * (1.0 - w[0]) + at(next[0], base[1], base[2]) * w[0];
    let c10 = at(base[0], next[1], base[2]) * (1.0 - w[0]) + at(next[0], next[1], base[2]) * w[0];
    let c01 = at(base[0], base[1], next[2]) * (1.0 - w[0]) + at(next[0], base[1], next[2]) * w[0];
    let c11 = at(base[0], next[1], next[2]) * (1.0 - w[0]) + at(next[0], next[1], next[2]) * w[0];
    let c0 = c00 * (1.0 - w[1]) + c10 * w[1];
    let c1 = c01 * (1.0 - w[1]) + c11 * w[1];
    c0 * (1.0 - w[2]) + c1 * w[2]
}

/// Midpoint-rule line integral of the trilinear field along `origin + t·dir`,
/// t ≥ 0. The clipped chord is split into `ceil(len / step)` equal pieces.
pub fn ray_integral_sampled(vol: &VoxelVolume, origin: Vec3, dir: Vec3, step: f64) -> f64 {
    let dir = normalize(dir);
    let (lo, hi) = vol.bounds();
    let Some((t0, t1)) = clip_ray(origin, dir, lo, hi) else {
        return 0.0;
    };
    let len = t1 - t0;
    let n = (len / step).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let mut acc = 0.0;
    for m in 0..n {
        let t = t0 + (m as f64 + 0.5) * h;
        let p = [
            origin[0] + t * dir[0],
            origin[1] + t * dir[1],
            origin[2] + t * dir[2],
        ];
        acc += trilinear(vol, p);
    }
    acc * h
}

/// Exact line integral of the piecewise-constant voxel field: every voxel
/// the ray crosses contributes its value times the chord length inside it.
pub fn ray_integral_exact(vol: &VoxelVolume, origin: Vec3, dir: Vec3) -> f64 {
    let dir = normalize(dir);
    let (lo, hi) = vol.bounds();
    let Some((t0, t1)) = clip_ray(origin, dir, lo, hi) else {
        return 0.0;
    };
    let mut ts = Vec::with_capacity(vol.dims.iter().sum::<usize>() + 4);
    ts.push(t0);
    ts.push(t1);
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            continue;
        }
        for m in 0..=vol.dims[a] {
            let plane = lo[a] + m as f64 * vol.spacing[a];
            let t = (plane - origin[a]) / dir[a];
            if t > t0 && t < t1 {
                ts.push(t);
            }
        }
    }
    ts.sort_unstable_by(f64::total_cmp);
    let mut acc = 0.0;
    for w in ts.windows(2) {
        let chord = w[1] - w[0];
        if chord <= 0.0 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let p = origin[a] + tm * dir[a];
            let f = ((p - lo[a]) / vol.spacing[a]).floor() as isize;
            idx[a] = f.clamp(0, vol.dims[a] as isize - 1) as usize;
        }
        acc += vol.get(idx[0], idx[1], idx[2]) as f64 * chord;
    }
    acc
}

fn render_with<F>(geom: &ConeBeamGeometry, per_ray: F) -> ProjectionImage
where
    F: Fn(Vec3, Vec3) -> f64 + Sync,
{
    let rig = geom.rig();
    let mut data = vec![0.0f32; geom.nu * geom.nv];
    data.par_chunks_mut(geom.nu).enumerate().for_each(|(j, row)| {
        for (i, px) in row.iter_mut().enumerate() {
            let target = geom.pixel_position(&rig, i, j);
            let dir = sub(target, rig.source);
            *px = per_ray(rig.source, dir) as f32;
        }
    });
    ProjectionImage {
        nu: geom.nu,
        nv: geom.nv,
        pitch: geom.pitch,
        data,
        geometry: Some(geom.clone()),
    }
}

/// Ray-marched DRR: trilinear sampling with a midpoint rule at `step_mm`.
pub fn render_drr(
    vol: &VoxelVolume,
    geom: &ConeBeamGeometry,
    step_mm: f64,
) -> Result<ProjectionImage> {
    if !(step_mm > 0.0) {
        return Err(Error::InvalidGeometry(format!("step {step_mm} must be positive")));
    }
    check_source_outside(vol, geom)?;
    Ok(render_with(geom, |o, d| ray_integral_sampled(vol, o, d, step_mm)))
}

/// Exact voxel-traversal DRR. Serves as the reference for `render_drr`.
pub fn render_drr_exact(vol: &VoxelVolume, geom: &ConeBeamGeometry) -> Result<ProjectionImage> {
    check_source_outside(vol, geom)?;
    Ok(render_with(geom, |o, d| ray_integral_exact(vol, o, d)))
}

/// Half the smallest voxel spacing, the default marching step.
pub fn default_step(vol: &VoxelVolume) -> f64 {
    0.5 * vol.min_spacing()
}

#[allow(dead_code)]
pub(crate) fn ray_length_in_box(vol: &VoxelVolume, origin: Vec3, dir: Vec3) -> f64 {
    let dir = normalize(dir);
    let (lo, hi) = vol.bounds();
    clip_ray(origin, dir, lo, hi).map_or(0.0, |(a, b)| (b - a) * dot(dir, dir).sqrt())
}
