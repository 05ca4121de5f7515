use super::Params;
use crate::autograd::{Graph, NodeId, Tensor};

/// `x·W + b` with `W` stored as `{name}.weight` (in × out) and `b` as
/// `{name}.bias` (1 × out).
pub fn linear(g: &mut Graph, p: &Params, name: &str, x: NodeId) -> NodeId {
    let w = p.get(g, &format!("{name}.weight"));
    let b = p.get(g, &format!("{name}.bias"));
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

pub(crate) fn norm(g: &mut Graph, p: &Params, name: &str, x: NodeId) -> NodeId {
    let gamma = p.get(g, &format!("{name}.gamma"));
    let beta = p.get(g, &format!("{name}.beta"));
    g.layer_norm(x, Some(gamma), Some(beta))
}

/// Per-head attention probabilities and the concatenated head outputs.
pub(crate) fn attention_heads(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> (Vec<NodeId>, NodeId) {
    let dim = g.value(q).cols;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        probs.push(a);
        outs.push(g.matmul(a, vh));
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (probs, out)
}

fn attention(g: &mut Graph, p: &Params, name: &str, x: NodeId, heads: usize) -> NodeId {
    let q = linear(g, p, &format!("{name}.wq"), x);
    let k = linear(g, p, &format!("{name}.wk"), x);
    let v = linear(g, p, &format!("{name}.wv"), x);
    let (_, out) = attention_heads(g, q, k, v, heads);
    linear(g, p, &format!("{name}.wo"), out)
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn transformer_block(g: &mut Graph, p: &Params, name: &str, x: NodeId, heads: usize) -> NodeId {
    let h = norm(g, p, &format!("{name}.ln1"), x);
    let a = attention(g, p, &format!("{name}.attn"), h, heads);
    let x = g.add(x, a);
    let h = norm(g, p, &format!("{name}.ln2"), x);
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h);
    g.add(x, h)
}

/// Sinusoidal position table: column `2i` holds `sin(pos / 10000^(2i/dim))`,
/// column `2i + 1` the matching cosine.
pub fn sinusoidal_pe(n_tokens: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(n_tokens, dim);
    for pos in 0..n_tokens {
        for i in 0..dim.div_ceil(2) {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            *t.at_mut(pos, 2 * i) = angle.sin();
            if 2 * i + 1 < dim {
                *t.at_mut(pos, 2 * i + 1) = angle.cos();
            }
        }
    }
    t
}

/// Splits an `n × n` image (row-major) into non-overlapping `p × p` patches,
/// one patch per row, patches in row-major grid order.
pub fn patchify(img: &[f64], n: usize, p: usize) -> Tensor {
    assert_eq!(img.len(), n * n, "patchify expects a square image");
    assert_eq!(n % p, 0, "image size not divisible by patch size");
    let grid = n / p;
    let mut t = Tensor::zeros(grid * grid, p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for y in 0..p {
                for x in 0..p {
                    *t.at_mut(row, y * p + x) = img[(gy * p + y) * n + gx * p + x];
                }
            }
        }
    }
    t
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, n: usize, p: usize) -> Vec<f64> {
    let grid = n / p;
    assert_eq!(patches.shape(), (grid * grid, p * p), "unpatchify shape");
    let mut img = vec![0.0; n * n];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for y in 0..p {
                for x in 0..p {
                    img[(gy * p + y) * n + gx * p + x] = patches.at(row, y * p + x);
                }
            }
        }
    }
    img
}
