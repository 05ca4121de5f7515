use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::ProjectionImage;

/// Parameters of the simulated-to-"real" appearance shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Amplitude of the multiplicative low-frequency bias field.
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle {
            blur_sigma: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            seed: 0,
        }
    }

    /// The style used for the desk-scale "real" stream.
    pub fn pseudo_real(seed: u64) -> Self {
        DomainStyle {
            blur_sigma: 0.8,
            gamma: 0.7,
            noise_sigma: 0.02,
            bias_amplitude: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0) || !(self.gamma > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("invalid domain style {self:?}")));
        }
        Ok(())
    }
}

/// Blur, gamma, bias field, then additive noise; output clamped at zero.
pub fn pseudo_real_transform(img: &ProjectionImage, style: &DomainStyle) -> ProjectionImage {
    let (nu, nv) = (img.nu, img.nv);
    let mut px: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);

    if style.blur_sigma > 0.0 {
        px = gaussian_blur(&px, nu, nv, style.blur_sigma);
    }
    if style.gamma != 1.0 {
        for v in px.iter_mut() {
            *v = v.max(0.0).powf(style.gamma);
        }
    }
    if style.bias_amplitude != 0.0 {
        // Sum of three random cosines, at most one cycle across the image.
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let fu = rng.random::<f64>() / nu as f64;
                let fv = rng.random::<f64>() / nv as f64;
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                (fu, fv, phase)
            })
            .collect();
        for j in 0..nv {
            for i in 0..nu {
                let field: f64 = waves
                    .iter()
                    .map(|&(fu, fv, ph)| {
                        (std::f64::consts::TAU * (fu * i as f64 + fv * j as f64) + ph).cos()
                    })
                    .sum::<f64>()
                    / waves.len() as f64;
                px[i + nu * j] *= 1.0 + style.bias_amplitude * field;
            }
        }
    }
    if style.noise_sigma > 0.0 {
        for v in px.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += style.noise_sigma * n;
        }
    }
    ProjectionImage {
        nu,
        nv,
        pitch: img.pitch,
        data: px.into_iter().map(|v| v.max(0.0) as f32).collect(),
        geometry: img.geometry.clone(),
    }
}

fn gaussian_blur(src: &[f64], nu: usize, nv: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let clampi = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for j in 0..nv {
        for i in 0..nu {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = clampi(i as isize + t as isize - radius, nu);
                acc += k * src[ii + nu * j];
            }
            tmp[i + nu * j] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for j in 0..nv {
        for i in 0..nu {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = clampi(j as isize + t as isize - radius, nv);
                acc += k * tmp[i + nu * jj];
            }
            out[i + nu * j] = acc;
        }
    }
    out
}
