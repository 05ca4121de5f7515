use std::fmt::Write as _;
use std::path::Path;

use super::{EncoderChoice, FinetuneConfig, ProbeConfig};
use crate::error::{Error, Result};
use crate::recon::DecoderConfig;
use crate::trainer::{parse, TrainConfig};

/// Evaluation image sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Lesion-free and lesion-bearing phantoms each.
    pub n_per_class: usize,
    /// First phantom seed of the downstream set.
    pub seed: u64,
    /// Source angle of the downstream radiographs.
    pub beta: f64,
    pub max_lesions: usize,
    /// Held-out phantoms for the sim/real cluster comparison.
    pub domain_phantoms: usize,
    pub domain_seed: u64,
    pub encoder: EncoderChoice,
    pub finetune_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_per_class: 200,
            seed: 5000,
            beta: 0.0,
            max_lesions: 3,
            domain_phantoms: 16,
            domain_seed: 3000,
            encoder: EncoderChoice::Teacher,
            finetune_k: 16,
        }
    }
}

/// Everything a command line run can configure: training plus evaluation,
/// probing, fine-tuning and decoder settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub decoder: DecoderConfig,
    pub decoder_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            decoder: DecoderConfig::default(),
            decoder_steps: 2000,
        }
    }
}

fn seeds(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

impl RunConfig {
    /// Keys handled here rather than by [`TrainConfig`].
    pub const KEYS: &'static [&'static str] = &[
        "eval.n_per_class",
        "eval.seed",
        "eval.beta",
        "eval.max_lesions",
        "eval.domain_phantoms",
        "eval.domain_seed",
        "eval.encoder",
        "eval.finetune_k",
        "probe.lr",
        "probe.max_iter",
        "probe.tolerance",
        "probe.train_fraction",
        "probe.n_seeds",
        "finetune.steps",
        "finetune.lr",
        "finetune.weight_decay",
        "finetune.n_seeds",
        "decoder.codebook_size",
        "decoder.codebook_dim",
        "decoder.depth",
        "decoder.num_heads",
        "decoder.mlp_ratio",
        "decoder.lr",
        "decoder.batch_size",
        "decoder.commitment",
        "decoder.dead_window",
        "decoder.seed",
        "decoder.steps",
    ];

    /// The small preset used for desk-scale runs.
    pub fn tiny() -> Self {
        let mut c = RunConfig {
            train: TrainConfig::tiny(),
            ..Default::default()
        };
        c.decoder.codebook_dim = 32;
        c.decoder.num_heads = 2;
        c
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let e = &mut self.eval;
        let p = &mut self.probe;
        let f = &mut self.finetune;
        let d = &mut self.decoder;
        match key {
            "eval.n_per_class" => e.n_per_class = parse(key, v)?,
            "eval.seed" => e.seed = parse(key, v)?,
            "eval.beta" => e.beta = parse(key, v)?,
            "eval.max_lesions" => e.max_lesions = parse(key, v)?,
            "eval.domain_phantoms" => e.domain_phantoms = parse(key, v)?,
            "eval.domain_seed" => e.domain_seed = parse(key, v)?,
            "eval.encoder" => e.encoder = v.parse()?,
            "eval.finetune_k" => e.finetune_k = parse(key, v)?,
            "probe.lr" => p.lr = parse(key, v)?,
            "probe.max_iter" => p.max_iter = parse(key, v)?,
            "probe.tolerance" => p.tolerance = parse(key, v)?,
            "probe.train_fraction" => p.train_fraction = parse(key, v)?,
            "probe.n_seeds" => p.seeds = seeds(parse(key, v)?),
            "finetune.steps" => f.steps = parse(key, v)?,
            "finetune.lr" => f.lr = parse(key, v)?,
            "finetune.weight_decay" => f.weight_decay = parse(key, v)?,
            "finetune.n_seeds" => f.seeds = seeds(parse(key, v)?),
            "decoder.codebook_size" => d.codebook_size = parse(key, v)?,
            "decoder.codebook_dim" => d.codebook_dim = parse(key, v)?,
            "decoder.depth" => d.depth = parse(key, v)?,
            "decoder.num_heads" => d.num_heads = parse(key, v)?,
            "decoder.mlp_ratio" => d.mlp_ratio = parse(key, v)?,
            "decoder.lr" => d.lr = parse(key, v)?,
            "decoder.batch_size" => d.batch_size = parse(key, v)?,
            "decoder.commitment" => d.commitment = parse(key, v)?,
            "decoder.dead_window" => d.dead_window = parse(key, v)?,
            "decoder.seed" => d.seed = parse(key, v)?,
            "decoder.steps" => self.decoder_steps = parse(key, v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let e = &self.eval;
        let p = &self.probe;
        let f = &self.finetune;
        let d = &self.decoder;
        Ok(match key {
            "eval.n_per_class" => e.n_per_class.to_string(),
            "eval.seed" => e.seed.to_string(),
            "eval.beta" => e.beta.to_string(),
            "eval.max_lesions" => e.max_lesions.to_string(),
            "eval.domain_phantoms" => e.domain_phantoms.to_string(),
            "eval.domain_seed" => e.domain_seed.to_string(),
            "eval.encoder" => match e.encoder {
                EncoderChoice::Teacher => "teacher".into(),
                EncoderChoice::Student => "student".into(),
            },
            "eval.finetune_k" => e.finetune_k.to_string(),
            "probe.lr" => p.lr.to_string(),
            "probe.max_iter" => p.max_iter.to_string(),
            "probe.tolerance" => p.tolerance.to_string(),
            "probe.train_fraction" => p.train_fraction.to_string(),
            "probe.n_seeds" => p.seeds.len().to_string(),
            "finetune.steps" => f.steps.to_string(),
            "finetune.lr" => f.lr.to_string(),
            "finetune.weight_decay" => f.weight_decay.to_string(),
            "finetune.n_seeds" => f.seeds.len().to_string(),
            "decoder.codebook_size" => d.codebook_size.to_string(),
            "decoder.codebook_dim" => d.codebook_dim.to_string(),
            "decoder.depth" => d.depth.to_string(),
            "decoder.num_heads" => d.num_heads.to_string(),
            "decoder.mlp_ratio" => d.mlp_ratio.to_string(),
            "decoder.lr" => d.lr.to_string(),
            "decoder.batch_size" => d.batch_size.to_string(),
            "decoder.commitment" => d.commitment.to_string(),
            "decoder.dead_window" => d.dead_window.to_string(),
            "decoder.seed" => d.seed.to_string(),
            "decoder.steps" => self.decoder_steps.to_string(),
            _ => self.train.get(key)?,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Reads a config file over the defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Checks the training settings, the probe and decoder settings, and
    /// that evaluation phantoms do not overlap the training phantoms.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.probe.lr > 0.0) || self.probe.max_iter == 0 || self.probe.seeds.is_empty() {
            return bad("probe.lr, probe.max_iter and probe.n_seeds must be positive".into());
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return bad(format!("probe.train_fraction {} is not in (0, 1)", self.probe.train_fraction));
        }
        if self.finetune.seeds.is_empty() || !(self.finetune.lr > 0.0) {
            return bad("finetune.lr and finetune.n_seeds must be positive".into());
        }
        if self.eval.n_per_class < 2 || self.eval.max_lesions == 0 {
            return bad("eval.n_per_class must be at least 2 and eval.max_lesions positive".into());
        }
        let d = &self.decoder;
        if d.codebook_size == 0 || d.codebook_dim == 0 || d.num_heads == 0 || d.codebook_dim % d.num_heads != 0 {
            return bad(format!(
                "decoder codebook {}×{} with {} heads is not usable",
                d.codebook_size, d.codebook_dim, d.num_heads
            ));
        }
        let data = &self.train.data;
        let ranges = [
            ("data.phantom_seed", data.phantom_seed, data.n_phantoms as u64),
            ("data.real_seed", data.real_seed, data.n_real as u64),
            ("eval.seed", self.eval.seed, 2 * self.eval.n_per_class as u64),
            ("eval.domain_seed", self.eval.domain_seed, self.eval.domain_phantoms as u64),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.1 < b.1 + b.2 && b.1 < a.1 + a.2 {
                    return bad(format!("phantom seed ranges of {} and {} overlap", a.0, b.0));
                }
            }
        }
        Ok(())
    }
}
