use crate::error::{Error, Result};
use crate::volumegen::VoxelVolume;

/// Value reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `max − min` of a reference signal.
pub fn data_range(reference: &[f64]) -> f64 {
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], range: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Evaluation(format!("psnr of lengths {} and {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity of two `width × height` images over every
/// fully contained 7×7 uniform window. `range` sets the stabilizing
/// constants.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, range: f64) -> Result<f64> {
    if a.len() != width * height || b.len() != a.len() {
        return Err(Error::Evaluation("ssim inputs do not match the image size".into()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Evaluation(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels"
        )));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let p = a[x + width * y];
                    let q = b[x + width * y];
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Voxel values of the central `fraction` of each axis.
pub fn central_region(vol: &VoxelVolume, fraction: f64) -> (Vec<f64>, [usize; 3]) {
    let mut lo = [0; 3];
    let mut n = [0; 3];
    for a in 0..3 {
        let d = vol.dims[a];
        n[a] = ((d as f64 * fraction).round() as usize).clamp(1, d);
        lo[a] = (d - n[a]) / 2;
    }
    let mut out = Vec::with_capacity(n[0] * n[1] * n[2]);
    for k in lo[2]..lo[2] + n[2] {
        for j in lo[1]..lo[1] + n[1] {
            for i in lo[0]..lo[0] + n[0] {
                out.push(vol.get(i, j, k) as f64);
            }
        }
    }
    (out, n)
}

/// Volume fidelity on the central region: PSNR over all voxels and SSIM
/// averaged over axial slices, both with the reference's data range.
pub fn volume_metrics(reference: &VoxelVolume, test: &VoxelVolume, fraction: f64) -> Result<(f64, f64)> {
    if reference.dims != test.dims {
        return Err(Error::Evaluation(format!(
            "volume dims {:?} and {:?} differ",
            reference.dims, test.dims
        )));
    }
    let (r, n) = central_region(reference, fraction);
    let (t, _) = central_region(test, fraction);
    let range = data_range(&r);
    let p = psnr(&r, &t, range)?;
    let slice = n[0] * n[1];
    let mut s = 0.0;
    for k in 0..n[2] {
        let sl = k * slice..(k + 1) * slice;
        s += ssim(&r[sl.clone()], &t[sl], n[0], n[1], range)?;
    }
    Ok((p, s / n[2] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = vec![0.0, 1.0, 0.5, 0.25];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let w = 9;
        let sign = |i: usize| if (i / w + i % w) % 2 == 0 { 1.0 } else { -1.0 };
        let a: Vec<f64> = (0..w * w).map(|i| 1.0 + sign(i)).collect();
        assert!((ssim(&a, &a, w, w, 2.0).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = (0..w * w).map(|i| 1.0 - sign(i)).collect();
        assert!(ssim(&a, &anti, w, w, 2.0).unwrap() < 0.0);
        assert!(ssim(&a[..36], &a[..36], 6, 6, 1.0).is_err());
    }
}
