use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::projector::{ConeBeamGeometry, ProjectionImage};
use crate::volumegen::{GridSpec, VoxelVolume};

/// Band-limited ramp kernel tap `h[n]` for detector spacing `pitch`.
pub fn ramp_tap(n: i64, pitch: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * pitch * pitch)
    } else if n % 2 == 0 {
        0.0
    } else {
        let d = std::f64::consts::PI * n as f64 * pitch;
        -1.0 / (d * d)
    }
}

/// Linear convolution of `row` with the ramp kernel, evaluated at the row's
/// own samples. Equivalent to filtering a copy zero-padded to twice its
/// length.
pub fn ramp_filter(row: &[f64], pitch: f64) -> Vec<f64> {
    let n = row.len() as i64;
    let taps: Vec<f64> = (-(n - 1)..n).map(|k| ramp_tap(k, pitch)).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| row[j as usize] * taps[(i - j + n - 1) as usize])
                .sum()
        })
        .collect()
}

/// [`ramp_filter`] by circular convolution on a zero-padded power-of-two
/// length of at least twice the row.
pub fn ramp_filter_fft(row: &[f64], pitch: f64) -> Vec<f64> {
    let n = row.len();
    if n == 0 {
        return Vec::new();
    }
    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    for k in 0..n as i64 {
        kernel[k as usize].re = ramp_tap(k, pitch);
        if k > 0 {
            kernel[len - k as usize].re = ramp_tap(-k, pitch);
        }
    }
    let mut data: Vec<Complex<f64>> = (0..len)
        .map(|i| Complex::new(if i < n { row[i] } else { 0.0 }, 0.0))
        .collect();
    fwd.process(&mut kernel);
    fwd.process(&mut data);
    for (d, k) in data.iter_mut().zip(&kernel) {
        *d *= k;
    }
    inv.process(&mut data);
    data[..n].iter().map(|c| c.re / len as f64).collect()
}

/// Full-scan fan angle: the detector's angular width seen from the source.
pub fn fan_angle(geom: &ConeBeamGeometry) -> f64 {
    let half = 0.5 * geom.nu as f64 * geom.pitch;
    2.0 * (half / geom.sdd).atan().to_degrees()
}

/// Sorted `(angle in [0, 360), original index)` pairs and the angular
/// weight of each in radians: half the gap to each neighbour on the circle.
fn angular_weights(betas: &[f64]) -> Vec<(f64, usize, f64)> {
    let mut order: Vec<(f64, usize)> = betas
        .iter()
        .enumerate()
        .map(|(i, b)| (b.rem_euclid(360.0), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = order.len();
    (0..n)
        .map(|k| {
            let prev = order[(k + n - 1) % n].0;
            let next = order[(k + 1) % n].0;
            let a = order[k].0;
            let gap_prev = if n == 1 { 0.0 } else { (a - prev).rem_euclid(360.0) };
            let gap_next = if n == 1 { 0.0 } else { (next - a).rem_euclid(360.0) };
            (a, order[k].1, 0.5 * (gap_prev + gap_next).to_radians())
        })
        .collect()
}

/// Largest empty arc between consecutive source angles, in degrees.
pub fn max_gap(betas: &[f64]) -> f64 {
    let mut a: Vec<f64> = betas.iter().map(|b| b.rem_euclid(360.0)).collect();
    a.sort_by(f64::total_cmp);
    let mut gap: f64 = 360.0 - (a[a.len() - 1] - a[0]);
    for w in a.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap
}

struct Filtered {
    geom: ConeBeamGeometry,
    source: [f64; 3],
    e_u: [f64; 3],
    e_v: [f64; 3],
    dir: [f64; 3],
    weight: f64,
    q: Vec<f64>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn bilinear(img: &[f64], nu: usize, nv: usize, x: f64, y: f64) -> f64 {
    if !(x > -1.0 && y > -1.0 && x < nu as f64 && y < nv as f64) {
        return 0.0;
    }
    let i0 = x.floor() as i64;
    let j0 = y.floor() as i64;
    let fx = x - i0 as f64;
    let fy = y - j0 as f64;
    let at = |i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= nu as i64 || j >= nv as i64 {
            0.0
        } else {
            img[i as usize + nu * j as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(i0, j0) + fx * at(i0 + 1, j0))
        + fy * ((1.0 - fx) * at(i0, j0 + 1) + fx * at(i0 + 1, j0 + 1))
}

/// Feldkamp filtered backprojection on a circular orbit.
///
/// Each projection is cosine weighted, ramp filtered along detector rows at
/// the isocenter-scaled pitch and backprojected with the squared distance
/// weight. Every voxel accumulates views in ascending angle order, so the
/// result does not depend on the order of `projections`. Voxels that fall
/// off the detector in any view lie outside the field of view and are set
/// to zero, as are negative values.
pub fn fdk_reconstruct(
    projections: &[ProjectionImage],
    geometries: &[ConeBeamGeometry],
    grid: GridSpec,
) -> Result<VoxelVolume> {
    if projections.is_empty() || projections.len() != geometries.len() {
        return Err(Error::Reconstruction(format!(
            "{} projections for {} geometries",
            projections.len(),
            geometries.len()
        )));
    }
    let g0 = &geometries[0];
    for (p, g) in projections.iter().zip(geometries) {
        g.validate()?;
        if p.nu != g.nu || p.nv != g.nv || p.data.len() != g.nu * g.nv {
            return Err(Error::Reconstruction("projection size differs from its geometry".into()));
        }
        if g.pitch_angle != 0.0 || g.roll_angle != 0.0 {
            return Err(Error::Reconstruction("views must lie on a circular orbit".into()));
        }
        if g.sod != g0.sod || g.sdd != g0.sdd || g.nu != g0.nu || g.nv != g0.nv || g.pitch != g0.pitch {
            return Err(Error::Reconstruction("views must share one rig".into()));
        }
    }
    let betas: Vec<f64> = geometries.iter().map(|g| g.beta).collect();
    let coverage = 360.0 - max_gap(&betas);
    if coverage < 180.0 {
        return Err(Error::Reconstruction(format!(
            "angular coverage {coverage:.1}° is below 180°"
        )));
    }

    let (nu, nv, pitch, sod, sdd) = (g0.nu, g0.nv, g0.pitch, g0.sod, g0.sdd);
    let iso_pitch = pitch * sod / sdd;
    let filtered: Vec<Filtered> = angular_weights(&betas)
        .into_iter()
        .map(|(_, idx, weight)| {
            let p = &projections[idx];
            let geom = &geometries[idx];
            let mut q = vec![0.0; nu * nv];
            for j in 0..nv {
                let row: Vec<f64> = (0..nu)
                    .map(|i| {
                        let (u, v) = geom.pixel_uv(i, j);
                        p.data[i + nu * j] as f64 * sdd / (sdd * sdd + u * u + v * v).sqrt()
                    })
                    .collect();
                let f = ramp_filter(&row, iso_pitch);
                for i in 0..nu {
                    q[i + nu * j] = f[i] * iso_pitch;
                }
            }
            let rig = geom.rig();
            let c = rig.detector_center;
            let s = rig.source;
            let d = [c[0] - s[0], c[1] - s[1], c[2] - s[2]];
            let len = dot(d, d).sqrt();
            Filtered {
                geom: geom.clone(),
                source: s,
                e_u: rig.e_u,
                e_v: rig.e_v,
                dir: [d[0] / len, d[1] / len, d[2] / len],
                weight,
                q,
            }
        })
        .collect();

    let mut vol = VoxelVolume::zeros(grid.dims, grid.spacing)?;
    let [nx, ny, _] = grid.dims;
    let origin = vol.origin;
    let spacing = vol.spacing;
    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, plane)| {
            let z = origin[2] + k as f64 * spacing[2];
            for j in 0..ny {
                let y = origin[1] + j as f64 * spacing[1];
                for i in 0..nx {
                    let x = [origin[0] + i as f64 * spacing[0], y, z];
                    let mut acc = 0.0;
                    let mut inside = true;
                    for f in &filtered {
                        let rel = [x[0] - f.source[0], x[1] - f.source[1], x[2] - f.source[2]];
                        let l = dot(rel, f.dir);
                        let mag = sdd / l;
                        let u = dot(x, f.e_u) * mag;
                        let v = dot(x, f.e_v) * mag;
                        let pi = u / f.geom.pitch + 0.5 * (nu as f64 - 1.0);
                        let pj = v / f.geom.pitch + 0.5 * (nv as f64 - 1.0);
                        inside &= pi >= -0.5 && pj >= -0.5 && pi <= nu as f64 - 0.5 && pj <= nv as f64 - 0.5;
                        let w = sod / l;
                        acc += f.weight * w * w * bilinear(&f.q, nu, nv, pi, pj);
                    }
                    plane[i + nx * j] = if inside { (0.5 * acc).max(0.0) as f32 } else { 0.0 };
                }
            }
        });
    Ok(vol)
}
