//! Training losses, as plain functions on values and as graph builders.
//!
//! The value functions mirror the graph builders one to one and serve as
//! their reference in tests; training only uses the builders.

use std::str::FromStr;

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Per-sample reduction of the masked-token regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimReduction {
    /// Mean over all masked elements.
    ElementMean,
    /// Mean over masked tokens of the squared L2 norm of each token's error.
    TokenSum,
}

impl FromStr for MimReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element_mean" => Ok(MimReduction::ElementMean),
            "token_sum" => Ok(MimReduction::TokenSum),
            _ => Err(Error::Config(format!("unknown mim_reduction {s:?}"))),
        }
    }
}

impl MimReduction {
    pub fn name(self) -> &'static str {
        match self {
            MimReduction::ElementMean => "element_mean",
            MimReduction::TokenSum => "token_sum",
        }
    }
}

/// Loss weights and switches.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_affinity: f64,
    pub lambda_mim: f64,
    pub lambda_domain: f64,
    pub lambda_cls: f64,
    pub tau_init: f64,
    pub tau_affinity_init: f64,
    pub normalize_sim: bool,
    pub mim_reduction: MimReduction,
    pub mim_target_norm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_affinity: 0.4,
            lambda_mim: 1.0,
            lambda_domain: 0.6,
            lambda_cls: 1.0,
            tau_init: 0.07,
            tau_affinity_init: 0.07,
            normalize_sim: true,
            mim_reduction: MimReduction::ElementMean,
            mim_target_norm: true,
        }
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub infonce: f64,
    pub affinity: f64,
    pub align: f64,
    pub mim: f64,
    pub cls: f64,
    pub domain: f64,
    pub total: f64,
}

impl LossReport {
    /// Assembles a report from the component losses.
    pub fn combine(cfg: &LossConfig, infonce: f64, affinity: f64, mim: f64, cls: f64, domain: f64) -> Self {
        let align = align_value(infonce, affinity, cfg.lambda_affinity);
        LossReport {
            infonce,
            affinity,
            align,
            mim,
            cls,
            domain,
            total: overall_value(cfg, align, mim, cls, domain),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.infonce,
            self.affinity,
            self.align,
            self.mim,
            self.cls,
            self.domain,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---- value functions -------------------------------------------------------

fn normalize_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let n = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for c in 0..x.cols {
            *out.at_mut(r, c) /= n;
        }
    }
    out
}

/// `S_ij = z_i · t_j`, on unit-normalized rows when `normalize` is set.
pub fn similarity_matrix(z: &Tensor, t: &Tensor, normalize: bool) -> Tensor {
    assert_eq!(z.shape(), t.shape(), "similarity operands differ in shape");
    if normalize {
        crate::autograd::matmul(&normalize_rows(z), false, &normalize_rows(t), true)
    } else {
        crate::autograd::matmul(z, false, t, true)
    }
}

/// Row softmax of `S / tau` with row-max subtraction.
pub fn softmax_rows(s: &Tensor, tau: f64) -> Tensor {
    let mut p = s.map(|v| v / tau);
    for r in 0..p.rows {
        let m = p.row_slice(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..p.cols {
            let e = (p.at(r, c) - m).exp();
            *p.at_mut(r, c) = e;
            sum += e;
        }
        for c in 0..p.cols {
            *p.at_mut(r, c) /= sum;
        }
    }
    p
}

/// `−(1/N) Σ_i log P_ii`.
pub fn infonce(p: &Tensor) -> f64 {
    let n = p.rows;
    -(0..n).map(|i| p.at(i, i).ln()).sum::<f64>() / n as f64
}

/// Row softmax of the target self-similarity at temperature `tau`.
pub fn affinity(t: &Tensor, tau: f64, normalize: bool) -> Tensor {
    softmax_rows(&similarity_matrix(t, t, normalize), tau)
}

/// `−(1/N) Σ_ij A_ij log P_ij`. Entries with `A_ij = 0` contribute nothing.
pub fn affinity_loss(a: &Tensor, p: &Tensor) -> f64 {
    assert_eq!(a.shape(), p.shape());
    let mut acc = 0.0;
    for (aij, pij) in a.data.iter().zip(&p.data) {
        if *aij != 0.0 {
            acc += aij * pij.ln();
        }
    }
    -acc / a.rows as f64
}

pub fn align_value(infonce: f64, affinity: f64, lambda_affinity: f64) -> f64 {
    infonce + lambda_affinity * affinity
}

/// Contrastive alignment of pooled predictions `z` against pooled targets `t`.
pub fn align_loss(z: &Tensor, t: &Tensor, tau: f64, tau_affinity: f64, cfg: &LossConfig) -> f64 {
    let p = softmax_rows(&similarity_matrix(z, t, cfg.normalize_sim), tau);
    let a = affinity(t, tau_affinity, cfg.normalize_sim);
    align_value(infonce(&p), affinity_loss(&a, &p), cfg.lambda_affinity)
}

fn sample_mim(pred: &Tensor, tgt: &Tensor, reduction: MimReduction) -> f64 {
    assert_eq!(pred.shape(), tgt.shape(), "masked prediction and target differ");
    if pred.is_empty() {
        return 0.0;
    }
    let sq: f64 = pred.data.iter().zip(&tgt.data).map(|(a, b)| (a - b).powi(2)).sum();
    match reduction {
        MimReduction::ElementMean => sq / pred.len() as f64,
        MimReduction::TokenSum => sq / pred.rows as f64,
    }
}

fn stream_mim(pairs: &[(Tensor, Tensor)], reduction: MimReduction) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(p, t)| sample_mim(p, t, reduction)).sum::<f64>() / pairs.len() as f64
}

/// Masked-token regression, summed over the real and simulated streams.
/// Each pair is `(prediction, target)` for one sample's masked tokens.
pub fn mim_loss(real: &[(Tensor, Tensor)], sim: &[(Tensor, Tensor)], reduction: MimReduction) -> f64 {
    stream_mim(real, reduction) + stream_mim(sim, reduction)
}

const P_CLAMP: f64 = 1e-7;

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Domain classifier cross-entropy: real samples labeled 1, simulated 0.
pub fn cls_loss(p_real: &[f64], p_sim: &[f64]) -> f64 {
    let real = p_real.iter().map(|&p| clamp_p(p).ln()).sum::<f64>() / p_real.len().max(1) as f64;
    let sim = p_sim.iter().map(|&p| (1.0 - clamp_p(p)).ln()).sum::<f64>() / p_sim.len().max(1) as f64;
    -(real + sim)
}

/// Consistency with targets plus the fool-the-classifier term.
pub fn domain_loss(z: &[Tensor], t: &[Tensor], p_pred: &[f64]) -> f64 {
    let n = z.len() as f64;
    let mse: f64 = z
        .iter()
        .zip(t)
        .map(|(a, b)| {
            a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        })
        .sum::<f64>()
        / n;
    let adv = -p_pred.iter().map(|&p| clamp_p(p).ln()).sum::<f64>() / p_pred.len() as f64;
    mse + adv
}

pub fn overall_value(cfg: &LossConfig, align: f64, mim: f64, cls: f64, domain: f64) -> f64 {
    align + cfg.lambda_mim * mim + cfg.lambda_domain * domain + cfg.lambda_cls * cls
}

// ---- graph builders --------------------------------------------------------

/// Similarity logits `S / τ` where `log_tau` is a 1 × 1 node.
pub fn logits_node(g: &mut Graph, z: NodeId, t: NodeId, log_tau: NodeId, normalize: bool) -> NodeId {
    let (z, t) = if normalize {
        (g.l2_normalize_rows(z), g.l2_normalize_rows(t))
    } else {
        (z, t)
    };
    let tt = g.transpose(t);
    let s = g.matmul(z, tt);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    g.mul_scalar(s, inv_tau)
}

/// `−(1/N) Σ_i log P_ii` from row log-probabilities.
pub fn infonce_node(g: &mut Graph, log_p: NodeId) -> NodeId {
    let n = g.value(log_p).rows;
    let eye = g.constant(Tensor::identity(n));
    affinity_loss_node(g, eye, log_p)
}

/// `−(1/N) Σ_ij A_ij log P_ij`; `a` is expected to be a constant node.
pub fn affinity_loss_node(g: &mut Graph, a: NodeId, log_p: NodeId) -> NodeId {
    let n = g.value(log_p).rows as f64;
    let w = g.mul(a, log_p);
    let s = g.sum_all(w);
    g.scale(s, -1.0 / n)
}

/// Alignment terms `(L_InfoNCE, L_affinity)` for pooled predictions `z`
/// and pooled targets `t` (N × D). The affinity matrix is built from the
/// values of `t` and enters as a constant.
pub fn align_nodes(
    g: &mut Graph,
    z: NodeId,
    t: NodeId,
    log_tau: NodeId,
    tau_affinity: f64,
    normalize: bool,
) -> (NodeId, NodeId) {
    let a = affinity(g.value(t), tau_affinity, normalize);
    align_nodes_with(g, z, t, log_tau, a, normalize)
}

/// [`align_nodes`] with a precomputed affinity matrix.
pub fn align_nodes_with(
    g: &mut Graph,
    z: NodeId,
    t: NodeId,
    log_tau: NodeId,
    affinity: Tensor,
    normalize: bool,
) -> (NodeId, NodeId) {
    let logits = logits_node(g, z, t, log_tau, normalize);
    let log_p = g.log_softmax_rows(logits);
    let a = g.constant(affinity);
    (infonce_node(g, log_p), affinity_loss_node(g, a, log_p))
}

fn sample_mim_node(g: &mut Graph, pred: NodeId, tgt: NodeId, reduction: MimReduction) -> Option<NodeId> {
    let (rows, cols) = g.value(pred).shape();
    if rows == 0 {
        return None;
    }
    let d = g.sub(pred, tgt);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    let denom = match reduction {
        MimReduction::ElementMean => (rows * cols) as f64,
        MimReduction::TokenSum => rows as f64,
    };
    Some(g.scale(s, 1.0 / denom))
}

/// Mean over samples of the per-sample masked regression. Targets are
/// detached here, whatever their origin.
pub fn mim_stream_node(g: &mut Graph, pairs: &[(NodeId, NodeId)], reduction: MimReduction) -> NodeId {
    let mut terms = Vec::new();
    for &(p, t) in pairs {
        let t = g.detach(t);
        if let Some(n) = sample_mim_node(g, p, t, reduction) {
            terms.push(n);
        }
    }
    if terms.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let s = g.add_scalars(&terms);
    g.scale(s, 1.0 / pairs.len() as f64)
}

/// Mean of `log p` (or of `log(1 − p)` when `complement`) over 1 × 1 nodes.
fn mean_log(g: &mut Graph, probs: &[NodeId], complement: bool) -> NodeId {
    let logs: Vec<NodeId> = probs
        .iter()
        .map(|&p| {
            let p = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
            let q = if complement {
                let neg = g.scale(p, -1.0);
                let one = g.constant(Tensor::scalar(1.0));
                g.add(one, neg)
            } else {
                p
            };
            g.log(q)
        })
        .collect();
    let s = g.add_scalars(&logs);
    g.scale(s, 1.0 / probs.len() as f64)
}

/// Classifier cross-entropy over real (label 1) and simulated (label 0)
/// probabilities.
pub fn cls_node(g: &mut Graph, p_real: &[NodeId], p_sim: &[NodeId]) -> NodeId {
    let a = mean_log(g, p_real, false);
    let b = mean_log(g, p_sim, true);
    let s = g.add(a, b);
    g.scale(s, -1.0)
}

/// `mean_i MSE(z_i, sg(t_i)) − mean_i log p_i`.
pub fn domain_node(g: &mut Graph, z: &[NodeId], t: &[NodeId], p_pred: &[NodeId]) -> NodeId {
    let mut terms = Vec::with_capacity(z.len());
    for (&zi, &ti) in z.iter().zip(t) {
        let ti = g.detach(ti);
        terms.push(sample_mim_node(g, zi, ti, MimReduction::ElementMean).expect("empty token set"));
    }
    let s = g.add_scalars(&terms);
    let mse = g.scale(s, 1.0 / z.len() as f64);
    let adv = mean_log(g, p_pred, false);
    g.sub(mse, adv)
}

/// Weighted total from component nodes.
pub fn overall_node(
    g: &mut Graph,
    cfg: &LossConfig,
    infonce: NodeId,
    affinity: NodeId,
    mim: NodeId,
    cls: NodeId,
    domain: NodeId,
) -> (NodeId, NodeId) {
    let aff = g.scale(affinity, cfg.lambda_affinity);
    let align = g.add(infonce, aff);
    let m = g.scale(mim, cfg.lambda_mim);
    let d = g.scale(domain, cfg.lambda_domain);
    let c = g.scale(cls, cfg.lambda_cls);
    let total = g.add_scalars(&[align, m, d, c]);
    (align, total)
}
