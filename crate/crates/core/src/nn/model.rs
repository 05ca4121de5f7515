use super::layers::{attention_heads, linear, norm, patchify, sinusoidal_pe, transformer_block};
use super::{ModelConfig, Params};
use crate::autograd::{Graph, NodeId};
use crate::masking::MaskSpec;

/// Classifier output clamp, keeping both log terms of the losses finite.
pub const PROB_CLAMP: f64 = 1e-7;

/// Patch tokens of an `image_size²` row-major image: linear projection of
/// each patch plus the sinusoidal table.
pub fn patch_embed(g: &mut Graph, p: &Params, cfg: &ModelConfig, img: &[f64]) -> NodeId {
    let patches = g.constant(patchify(img, cfg.image_size, cfg.patch_size));
    let tokens = linear(g, p, "encoder.patch_embed", patches);
    let pe = g.constant(sinusoidal_pe(cfg.num_tokens(), cfg.embed_dim));
    g.add(tokens, pe)
}

/// Encoder blocks and final norm over an arbitrary token subset.
pub fn encode(g: &mut Graph, p: &Params, cfg: &ModelConfig, tokens: NodeId) -> NodeId {
    let mut x = tokens;
    for i in 0..cfg.encoder_depth {
        x = transformer_block(g, p, &format!("encoder.blocks.{i}"), x, cfg.num_heads);
    }
    norm(g, p, "encoder.norm", x)
}

pub fn encode_image(g: &mut Graph, p: &Params, cfg: &ModelConfig, img: &[f64]) -> NodeId {
    let t = patch_embed(g, p, cfg, img);
    encode(g, p, cfg, t)
}

/// Attention probabilities of one block's heads, for inspection.
pub fn attention_probs(
    g: &mut Graph,
    p: &Params,
    block: &str,
    x: NodeId,
    heads: usize,
) -> Vec<NodeId> {
    let h = norm(g, p, &format!("{block}.ln1"), x);
    let q = linear(g, p, &format!("{block}.attn.wq"), h);
    let k = linear(g, p, &format!("{block}.attn.wk"), h);
    let v = linear(g, p, &format!("{block}.attn.wv"), h);
    attention_heads(g, q, k, v, heads).0
}

/// Predicted target-view tokens from context tokens and an action row
/// (`1 × action_dim`, radians).
///
/// The action is embedded as one extra token placed in front of the
/// context; it is dropped again before the output projection, so the
/// result has one token per context token.
pub fn predict_view(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    ctx: NodeId,
    action: NodeId,
) -> NodeId {
    let n = g.value(ctx).rows;
    let pe = g.constant(sinusoidal_pe(n, cfg.embed_dim));
    let x = g.add(ctx, pe);
    let x = linear(g, p, "view_predictor.embed", x);
    let a = linear(g, p, "view_predictor.action", action);
    let mut x = g.concat_rows(&[a, x]);
    for i in 0..cfg.predictor_depth {
        x = transformer_block(g, p, &format!("view_predictor.blocks.{i}"), x, cfg.num_heads);
    }
    let x = norm(g, p, "view_predictor.norm", x);
    let x = g.slice_rows(x, 1, n);
    linear(g, p, "view_predictor.out", x)
}

/// Predicted tokens at the masked grid cells of `mask`, in `mask.masked`
/// order. `visible` holds the encoded visible tokens in `mask.visible` order.
pub fn predict_mask(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    visible: NodeId,
    mask: &MaskSpec,
) -> NodeId {
    predict_mask_at(g, p, cfg, visible, &mask.visible, &mask.masked)
}

/// [`predict_mask`] with explicit grid positions for the visible rows and
/// for the requested outputs.
pub fn predict_mask_at(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    visible: NodeId,
    visible_pos: &[usize],
    masked_pos: &[usize],
) -> NodeId {
    assert_eq!(g.value(visible).rows, visible_pos.len(), "visible token count");
    let m = masked_pos.len();
    if m == 0 {
        return g.constant(crate::autograd::Tensor::zeros(0, cfg.embed_dim));
    }
    let x = linear(g, p, "mask_predictor.embed", visible);
    let token = p.get(g, "mask_predictor.mask_token");
    let masks = g.repeat_rows(token, m);
    let x = g.concat_rows(&[x, masks]);
    let order: Vec<usize> = visible_pos.iter().chain(masked_pos).copied().collect();
    let table = sinusoidal_pe(cfg.num_tokens(), cfg.predictor_dim).select_rows(&order);
    let pe = g.constant(table);
    let mut x = g.add(x, pe);
    for i in 0..cfg.predictor_depth {
        x = transformer_block(g, p, &format!("mask_predictor.blocks.{i}"), x, cfg.num_heads);
    }
    let x = norm(g, p, "mask_predictor.norm", x);
    let x = g.slice_rows(x, visible_pos.len(), m);
    linear(g, p, "mask_predictor.out", x)
}

/// Probability (1 × 1) that a token set comes from the real domain.
pub fn classify_domain(g: &mut Graph, p: &Params, cfg: &ModelConfig, tokens: NodeId) -> NodeId {
    let mut x = tokens;
    for i in 0..cfg.classifier_depth {
        x = transformer_block(g, p, &format!("classifier.blocks.{i}"), x, cfg.num_heads);
    }
    let pooled = g.mean_rows(x);
    let logit = linear(g, p, "classifier.head", pooled);
    let prob = g.sigmoid(logit);
    g.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn global_avg_pool(g: &mut Graph, tokens: NodeId) -> NodeId {
    g.mean_rows(tokens)
}
