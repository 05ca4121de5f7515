//! Vision-transformer stack: patch embedding, encoder, view predictor, mask
//! predictor and domain classifier, built on [`crate::autograd`].
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Forward
//! functions take a [`Params`] binding that decides whether the store's
//! tensors enter the graph as trainable leaves or as constants.

mod layers;
mod model;
mod optim;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, Tensor, GRAD_NORM_FLOOR};
use crate::error::{Error, Result};

pub use layers::{linear, patchify, sinusoidal_pe, transformer_block, unpatchify};
pub use model::{
    attention_probs, classify_domain, encode, encode_image, global_avg_pool, patch_embed,
    predict_mask, predict_mask_at, predict_view, PROB_CLAMP,
};
pub use optim::{ema_update, AdamW};

/// Shape hyperparameters of the model stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub predictor_dim: usize,
    pub predictor_depth: usize,
    pub classifier_depth: usize,
    /// 1 for yaw-only actions, 3 for yaw/pitch/roll.
    pub action_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            encoder_depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            predictor_dim: 64,
            predictor_depth: 2,
            classifier_depth: 2,
            action_dim: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.predictor_dim % self.num_heads != 0 {
            return bad(format!(
                "predictor_dim {} is not divisible by num_heads {}",
                self.predictor_dim, self.num_heads
            ));
        }
        if self.embed_dim == 0 || self.predictor_dim == 0 || self.mlp_ratio == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.action_dim != 1 && self.action_dim != 3 {
            return bad(format!("action_dim must be 1 or 3, got {}", self.action_dim));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Named tensors. Iteration order is the lexical order of names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

const LOG_TAU_INIT: f64 = -2.659_260_036_932_778_4; // ln 0.07

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh student parameters: Xavier-normal weights, zero biases, unit
    /// layer-norm scales, temperatures at 0.07.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.embed_dim;
        let pd = cfg.predictor_dim;
        let hidden = |dim: usize| dim * cfg.mlp_ratio;
        let p2 = cfg.patch_size * cfg.patch_size;

        s.linear("encoder.patch_embed", p2, d, &mut rng);
        for i in 0..cfg.encoder_depth {
            s.block(&format!("encoder.blocks.{i}"), d, hidden(d), &mut rng);
        }
        s.norm("encoder.norm", d);

        s.linear("view_predictor.embed", d, pd, &mut rng);
        s.linear("view_predictor.action", cfg.action_dim, pd, &mut rng);
        for i in 0..cfg.predictor_depth {
            s.block(&format!("view_predictor.blocks.{i}"), pd, hidden(pd), &mut rng);
        }
        s.norm("view_predictor.norm", pd);
        s.linear("view_predictor.out", pd, d, &mut rng);

        s.linear("mask_predictor.embed", d, pd, &mut rng);
        s.insert("mask_predictor.mask_token", Tensor::randn(1, pd, 0.02, &mut rng));
        for i in 0..cfg.predictor_depth {
            s.block(&format!("mask_predictor.blocks.{i}"), pd, hidden(pd), &mut rng);
        }
        s.norm("mask_predictor.norm", pd);
        s.linear("mask_predictor.out", pd, d, &mut rng);

        for i in 0..cfg.classifier_depth {
            s.block(&format!("classifier.blocks.{i}"), d, hidden(d), &mut rng);
        }
        s.linear("classifier.head", d, 1, &mut rng);

        s.insert("loss.log_tau", Tensor::scalar(LOG_TAU_INIT));
        s.insert("loss.log_tau_affinity", Tensor::scalar(LOG_TAU_INIT));
        Ok(s)
    }

    pub(crate) fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(&format!("{name}.weight"), Tensor::randn(fan_in, fan_out, std, rng));
        self.insert(&format!("{name}.bias"), Tensor::zeros(1, fan_out));
    }

    pub(crate) fn norm(&mut self, name: &str, dim: usize) {
        self.insert(&format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        self.insert(&format!("{name}.beta"), Tensor::zeros(1, dim));
    }

    pub(crate) fn block(&mut self, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) {
        self.norm(&format!("{name}.ln1"), dim);
        for w in ["wq", "wk", "wv", "wo"] {
            self.linear(&format!("{name}.attn.{w}"), dim, dim, rng);
        }
        self.norm(&format!("{name}.ln2"), dim);
        self.linear(&format!("{name}.mlp.fc1"), dim, hidden, rng);
        self.linear(&format!("{name}.mlp.fc2"), hidden, dim, rng);
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copy of every tensor whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Teacher parameters: a copy of the encoder.
    pub fn teacher_from(student: &ParamStore) -> ParamStore {
        student.subset("encoder.")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// FNV-1a over names and the bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (k, v) in &self.tensors {
            eat(k.as_bytes());
            for x in &v.data {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// How a store's tensors enter a graph.
///
/// Each binding has a key under which leaves are cached in the graph, so the
/// same store may be bound twice (for example once trainable and once
/// frozen) without the two bindings sharing nodes.
#[derive(Debug, Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub key: &'a str,
    pub trainable: bool,
}

impl<'a> Params<'a> {
    pub fn trainable(store: &'a ParamStore, key: &'a str) -> Self {
        Params {
            store,
            key,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore, key: &'a str) -> Self {
        Params {
            store,
            key,
            trainable: false,
        }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> NodeId {
        g.param(&format!("{}/{}", self.key, name), self.store.get(name), self.trainable)
    }

    /// Graph-key prefix of this binding, for gradient lookups.
    pub fn prefix(&self) -> String {
        format!("{}/", self.key)
    }
}


/// Largest per-tensor relative error between the analytic gradient of a
/// scalar built from `store` and central differences with step `h`.
///
/// `build` receives the graph and a binding of `store` and returns the
/// scalar. Every element of every tensor in `store` is perturbed.
pub fn param_grad_check<F>(store: &ParamStore, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &Params) -> NodeId,
{
    let mut g = Graph::new();
    let binding = Params::trainable(store, "p");
    let loss = build(&mut g, &binding);
    let grads = g.backward(loss).params(&g, "p/");

    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let loss = build(&mut g, &Params::frozen(s, "p"));
        g.value(loss).item()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (name, t) in &store.tensors {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
        let mut numeric = Tensor::zeros(t.rows, t.cols);
        for e in 0..t.len() {
            let x0 = t.data[e];
            work.get_mut(name).data[e] = x0 + h;
            let fp = eval(&work);
            work.get_mut(name).data[e] = x0 - h;
            let fm = eval(&work);
            work.get_mut(name).data[e] = x0;
            numeric.data[e] = (fp - fm) / (2.0 * h);
        }
        let diff = analytic
            .data
            .iter()
            .zip(&numeric.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm().max(numeric.norm()).max(GRAD_NORM_FLOOR);
        worst = worst.max(diff / scale);
    }
    worst
}
