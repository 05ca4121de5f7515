//! Latent-to-image decoding with a vector-quantized bottleneck, filtered
//! backprojection, and image fidelity metrics.

mod decoder;
mod fdk;
mod metrics;
mod vq;

use std::fmt::Write as _;

use serde::Serialize;

pub use decoder::{
    decode, decode_tokens, init_decoder, latent_tokens, render_latent_projection, train_decoder, Decoded,
    DecoderConfig, DecoderSample, DecoderTrainReport, RENDER_BOUND,
};
pub use fdk::{fan_angle, fdk_reconstruct, max_gap, ramp_filter, ramp_filter_fft, ramp_tap};
pub use metrics::{
    central_region, data_range, psnr, ssim, volume_metrics, PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_WINDOW,
};
pub use vq::{codebook_usage, nearest_codes, vq_quantize, VqOut};

use crate::error::Result;
use crate::nn::{ModelConfig, ParamStore};
use crate::projector::{render_drr, render_drr_exact, to_display, ConeBeamGeometry, ProjectionImage};
use crate::volumegen::{GridSpec, VoxelVolume};

/// Fraction of each axis kept when scoring reconstructions.
pub const CENTRAL_FRACTION: f64 = 0.8;

/// A solid cylinder of attenuation `mu` about the rotation axis.
pub fn uniform_cylinder(grid: GridSpec, radius: f64, half_height: f64, mu: f32) -> Result<VoxelVolume> {
    let mut vol = VoxelVolume::zeros(grid.dims, grid.spacing)?;
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let [x, y, z] = vol.voxel_center(i, j, k);
                if x * x + y * y <= radius * radius && z.abs() <= half_height {
                    let idx = vol.index(i, j, k);
                    vol.data[idx] = mu;
                }
            }
        }
    }
    Ok(vol)
}

/// `n` source angles evenly spaced over the full circle, starting at 0°.
pub fn full_circle(rig: &ConeBeamGeometry, n: usize) -> Vec<ConeBeamGeometry> {
    (0..n).map(|i| rig.with_beta(360.0 * i as f64 / n as f64)).collect()
}

/// Exact line-integral projections of `vol` at each geometry.
pub fn ground_truth_views(vol: &VoxelVolume, geoms: &[ConeBeamGeometry]) -> Result<Vec<ProjectionImage>> {
    geoms.iter().map(|g| render_drr_exact(vol, g)).collect()
}

/// Rotation from the frontal context view to reach `beta`, in (−180, 180].
pub fn relative_angle(beta: f64) -> f64 {
    let a = beta.rem_euclid(360.0);
    if a > 180.0 {
        a - 360.0
    } else {
        a
    }
}

/// Decoder outputs for each geometry, from the frontal display view of a
/// volume through the frozen encoder and view predictor.
pub fn latent_views(
    stack: &ParamStore,
    model: &ModelConfig,
    decoder: &ParamStore,
    cfg: &DecoderConfig,
    context: &[f64],
    geoms: &[ConeBeamGeometry],
) -> Vec<(ProjectionImage, Vec<usize>)> {
    geoms
        .iter()
        .map(|g| {
            let tokens = latent_tokens(stack, model, context, relative_angle(g.beta));
            let (img, idx) = decode_tokens(model, cfg, decoder, &tokens);
            let p = ProjectionImage {
                nu: g.nu,
                nv: g.nv,
                pitch: g.pitch,
                data: img.iter().map(|&v| v as f32).collect(),
                geometry: Some(g.clone()),
            };
            (p, idx)
        })
        .collect()
}

/// Frontal display view, the context every latent rendering starts from.
pub fn frontal_context(vol: &VoxelVolume, rig: &ConeBeamGeometry) -> Result<Vec<f64>> {
    let raw = render_drr(vol, &rig.with_beta(0.0), crate::projector::default_step(vol))?;
    Ok(to_display(&raw).to_f64())
}

/// Latent/image pairs for every volume at every geometry.
pub fn decoder_training_set(
    stack: &ParamStore,
    model: &ModelConfig,
    volumes: &[VoxelVolume],
    geoms: &[ConeBeamGeometry],
) -> Result<Vec<DecoderSample>> {
    let mut out = Vec::new();
    for vol in volumes {
        let ctx = frontal_context(vol, &geoms[0])?;
        for g in geoms {
            let img = render_drr(vol, g, crate::projector::default_step(vol))?;
            out.push(DecoderSample {
                tokens: latent_tokens(stack, model, &ctx, relative_angle(g.beta)),
                image: img.to_f64(),
            });
        }
    }
    Ok(out)
}

/// Per-view and per-volume fidelity of a reconstruction experiment.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReconRecord {
    View { beta: f64, psnr: f64, ssim: f64 },
    Volume { psnr: f64, ssim: f64, views: usize, source: String },
}

/// PSNR and SSIM of a rendered view against its ground truth, with the
/// ground truth's range.
pub fn view_metrics(truth: &ProjectionImage, test: &ProjectionImage) -> Result<(f64, f64)> {
    let a = truth.to_f64();
    let b = test.to_f64();
    let r = data_range(&a);
    Ok((psnr(&a, &b, r)?, ssim(&a, &b, truth.nu, truth.nv, r)?))
}

/// One row of the codebook sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodebookRow {
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub usage: f64,
    pub proj_psnr: f64,
    pub proj_ssim: f64,
    pub ct_psnr: f64,
    pub ct_ssim: f64,
}

pub const CODEBOOK_CSV_HEADER: &str = "codebook_size,codebook_dim,usage,proj_psnr,proj_ssim,ct_psnr,ct_ssim";

pub fn codebook_csv(rows: &[CodebookRow]) -> String {
    let mut s = format!("{CODEBOOK_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.codebook_size, r.codebook_dim, r.usage, r.proj_psnr, r.proj_ssim, r.ct_psnr, r.ct_ssim
        );
    }
    s
}

/// Inputs shared by every configuration of a codebook sweep.
pub struct SweepData<'a> {
    pub stack: &'a ParamStore,
    pub model: &'a ModelConfig,
    pub train: &'a [DecoderSample],
    pub eval_volume: &'a VoxelVolume,
    pub eval_context: &'a [f64],
    pub geoms: &'a [ConeBeamGeometry],
    pub truth: &'a [ProjectionImage],
}

/// Trains one decoder per `(size, dim)` and scores usage, rendered views and
/// the volume reconstructed from them on a held-out volume.
pub fn codebook_sweep(
    data: &SweepData,
    base: &DecoderConfig,
    grid: &[(usize, usize)],
    steps: usize,
) -> Result<Vec<CodebookRow>> {
    let mut rows = Vec::new();
    for &(k, d) in grid {
        let cfg = DecoderConfig {
            codebook_size: k,
            codebook_dim: d,
            ..base.clone()
        };
        let (dec, _) = train_decoder(data.model, &cfg, data.train, steps)?;
        let views = latent_views(data.stack, data.model, &dec, &cfg, data.eval_context, data.geoms);
        let indices: Vec<usize> = views.iter().flat_map(|(_, i)| i.iter().copied()).collect();
        let usage = codebook_usage(&indices, k)?;
        let (mut ps, mut ss) = (0.0, 0.0);
        for ((img, _), t) in views.iter().zip(data.truth) {
            let (p, s) = view_metrics(t, img)?;
            ps += p;
            ss += s;
        }
        let n = views.len() as f64;
        let imgs: Vec<ProjectionImage> = views.into_iter().map(|(p, _)| p).collect();
        let grid_spec = GridSpec {
            dims: data.eval_volume.dims,
            spacing: data.eval_volume.spacing,
        };
        let vol = fdk_reconstruct(&imgs, data.geoms, grid_spec)?;
        let (cp, cs) = volume_metrics(data.eval_volume, &vol, CENTRAL_FRACTION)?;
        rows.push(CodebookRow {
            codebook_size: k,
            codebook_dim: d,
            usage,
            proj_psnr: ps / n,
            proj_ssim: ss / n,
            ct_psnr: cp,
            ct_ssim: cs,
        });
    }
    Ok(rows)
}
