use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vq::{vq_quantize, VqOut};
use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{
    encode_image, linear, patchify, predict_view, sinusoidal_pe, transformer_block, unpatchify, AdamW,
    ModelConfig, ParamStore, Params,
};
use crate::projector::{Action, BaseView, ConeBeamGeometry, ProjectionImage};

/// Widest rotation the decoder is asked to render, in degrees.
pub const RENDER_BOUND: f64 = 180.0;

/// Vector-quantized decoder settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub commitment: f64,
    /// Steps without use after which a code counts as dead.
    pub dead_window: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            codebook_size: 1024,
            codebook_dim: 128,
            depth: 1,
            num_heads: 4,
            mlp_ratio: 2,
            lr: 1e-3,
            batch_size: 4,
            commitment: 0.25,
            dead_window: 1000,
            seed: 0,
        }
    }
}

/// Fresh decoder parameters for latents of width `model.embed_dim`.
pub fn init_decoder(model: &ModelConfig, cfg: &DecoderConfig) -> Result<ParamStore> {
    let d = cfg.codebook_dim;
    if cfg.codebook_size == 0 || d == 0 || d % cfg.num_heads != 0 {
        return Err(Error::Config(format!(
            "codebook {}×{d} with {} heads is not usable",
            cfg.codebook_size, cfg.num_heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = ParamStore::new();
    s.linear("decoder.proj", model.embed_dim, d, &mut rng);
    s.insert(
        "decoder.codebook",
        Tensor::randn(cfg.codebook_size, d, 1.0 / (d as f64).sqrt(), &mut rng),
    );
    for i in 0..cfg.depth {
        s.block(&format!("decoder.blocks.{i}"), d, d * cfg.mlp_ratio, &mut rng);
    }
    s.norm("decoder.norm", d);
    s.linear("decoder.out", d, model.patch_size * model.patch_size, &mut rng);
    Ok(s)
}

/// Graph outputs of one decode.
pub struct Decoded {
    pub vq: VqOut,
    /// Pre-quantization tokens.
    pub latent: NodeId,
    /// One row of pixels per patch.
    pub patches: NodeId,
}

/// Projects latent tokens to the codebook width, quantizes, and maps the
/// quantized tokens to image patches.
pub fn decode(g: &mut Graph, p: &Params, model: &ModelConfig, cfg: &DecoderConfig, tokens: NodeId) -> Decoded {
    let latent = linear(g, p, "decoder.proj", tokens);
    let cb = p.get(g, "decoder.codebook");
    let vq = vq_quantize(g, latent, cb);
    let pe = g.constant(sinusoidal_pe(model.num_tokens(), cfg.codebook_dim));
    let mut x = g.add(vq.quantized, pe);
    for i in 0..cfg.depth {
        x = transformer_block(g, p, &format!("decoder.blocks.{i}"), x, cfg.num_heads);
    }
    let gamma = p.get(g, "decoder.norm.gamma");
    let beta = p.get(g, "decoder.norm.beta");
    let x = g.layer_norm(x, Some(gamma), Some(beta));
    let patches = linear(g, p, "decoder.out", x);
    Decoded { vq, latent, patches }
}

/// Predicted tokens for `angle` degrees away from the context view, from a
/// frozen encoder and view predictor.
pub fn latent_tokens(stack: &ParamStore, model: &ModelConfig, context: &[f64], angle: f64) -> Tensor {
    let mut g = Graph::new();
    let p = Params::frozen(stack, "x");
    let ctx = encode_image(&mut g, &p, model, context);
    let mut row = vec![0.0; model.action_dim];
    row[0] = angle.to_radians();
    let a = g.constant(Tensor::row(row));
    let z = predict_view(&mut g, &p, model, ctx, a);
    g.value(z).clone()
}

/// A latent-to-image training pair. Images hold line integrals, so decoded
/// views can feed filtered backprojection directly.
#[derive(Debug, Clone)]
pub struct DecoderSample {
    pub tokens: Tensor,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct DecoderTrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Pixel MSE per step.
    pub pixel_mse: Vec<f64>,
    /// Number of times dead codes were re-initialized.
    pub reinit_events: usize,
}

/// Trains decoder parameters on fixed latent/image pairs with pixel MSE plus
/// the codebook and weighted commitment terms. The frozen stack that made
/// the latents is not touched.
pub fn train_decoder(
    model: &ModelConfig,
    cfg: &DecoderConfig,
    samples: &[DecoderSample],
    steps: usize,
) -> Result<(ParamStore, DecoderTrainReport)> {
    if samples.is_empty() {
        return Err(Error::Config("decoder training needs at least one sample".into()));
    }
    let mut params = init_decoder(model, cfg)?;
    let mut opt = AdamW::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0de);
    let k = cfg.codebook_size;
    let mut last_used = vec![0usize; k];
    let mut report = DecoderTrainReport::default();
    let batch = cfg.batch_size.min(samples.len()).max(1);
    for step in 0..steps {
        let picks: Vec<usize> = if batch == samples.len() {
            (0..batch).collect()
        } else {
            (0..batch).map(|_| rng.random_range(0..samples.len())).collect()
        };
        let mut g = Graph::new();
        let p = Params::trainable(&params, "d");
        let mut terms = Vec::new();
        let mut pix = Vec::new();
        let mut latents = Vec::new();
        for &i in &picks {
            let s = &samples[i];
            let tokens = g.constant(s.tokens.clone());
            let out = decode(&mut g, &p, model, cfg, tokens);
            let target = g.constant(patchify(&s.image, model.image_size, model.patch_size));
            let d = g.sub(out.patches, target);
            let sq = g.square(d);
            let mse = g.mean_all(sq);
            let commit = g.scale(out.vq.commitment_loss, cfg.commitment);
            terms.push(g.add_scalars(&[mse, out.vq.codebook_loss, commit]));
            pix.push(mse);
            for &c in &out.vq.indices {
                last_used[c] = step + 1;
            }
            latents.push(out.latent);
        }
        let total = g.add_scalars(&terms);
        let loss = g.scale(total, 1.0 / picks.len() as f64);
        let mse_sum = g.add_scalars(&pix);
        report.losses.push(g.value(loss).item());
        report.pixel_mse.push(g.value(mse_sum).item() / picks.len() as f64);
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("decoder loss at step {step}")));
        }
        let grads = g.backward(loss).params(&g, "d/");
        let pool: Vec<Vec<f64>> = latents
            .iter()
            .flat_map(|&l| {
                let v = g.value(l);
                (0..v.rows).map(|r| v.row_slice(r).to_vec()).collect::<Vec<_>>()
            })
            .collect();
        drop(g);
        opt.step(&mut params, &grads, cfg.lr, 0.0);

        if (step + 1) % cfg.dead_window == 0 {
            let cutoff = step + 1 - cfg.dead_window;
            let dead: Vec<usize> = (0..k).filter(|&c| last_used[c] <= cutoff).collect();
            if 2 * dead.len() > k {
                log::warn!(
                    "{} of {k} codes unused for {} steps; re-initializing them",
                    dead.len(),
                    cfg.dead_window
                );
                let cb = params.get_mut("decoder.codebook");
                for &c in &dead {
                    let src = &pool[rng.random_range(0..pool.len())];
                    for (j, v) in src.iter().enumerate() {
                        *cb.at_mut(c, j) = v + 0.01 * (rng.random::<f64>() - 0.5);
                    }
                }
                report.reinit_events += 1;
            }
        }
    }
    Ok((params, report))
}

/// Decoder output for precomputed latent tokens, as a line-integral image,
/// with the code indices used.
pub fn decode_tokens(
    model: &ModelConfig,
    cfg: &DecoderConfig,
    decoder: &ParamStore,
    tokens: &Tensor,
) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::new();
    let p = Params::frozen(decoder, "d");
    let t = g.constant(tokens.clone());
    let out = decode(&mut g, &p, model, cfg, t);
    let img = unpatchify(g.value(out.patches), model.image_size, model.patch_size);
    (img, out.vq.indices)
}

/// Encodes the context view, predicts the view `action` away, quantizes and
/// decodes it to a line-integral image on the detector of `rig`.
pub fn render_latent_projection(
    stack: &ParamStore,
    model: &ModelConfig,
    decoder: &ParamStore,
    cfg: &DecoderConfig,
    context: &[f64],
    base: BaseView,
    action: &Action,
    rig: &ConeBeamGeometry,
) -> Result<ProjectionImage> {
    action.check_bound(RENDER_BOUND)?;
    if rig.nu != model.image_size || rig.nv != model.image_size {
        return Err(Error::Config(format!(
            "detector {}×{} does not match image size {}",
            rig.nu, rig.nv, model.image_size
        )));
    }
    let tokens = latent_tokens(stack, model, context, action.angle());
    let (img, _) = decode_tokens(model, cfg, decoder, &tokens);
    Ok(ProjectionImage {
        nu: rig.nu,
        nv: rig.nv,
        pitch: rig.pitch,
        data: img.iter().map(|&v| v as f32).collect(),
        geometry: Some(rig.with_beta(base.beta() + action.angle())),
    })
}
