use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskParams;
use crate::nn::ModelConfig;
use crate::objectives::{LossConfig, MimReduction};
use crate::projector::ConeBeamGeometry;
use crate::volumegen::GridSpec;

/// How the view predictor is conditioned on the source rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// One predictor call with the full yaw angle.
    DirectYaw,
    /// `|k|` predictor calls of one `Δφ` step each.
    StepwiseYaw,
    /// Yaw plus random pitch and roll, fed as a three-vector.
    Euler3,
}

impl FromStr for ActionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct_yaw" => Ok(ActionMode::DirectYaw),
            "stepwise_yaw" => Ok(ActionMode::StepwiseYaw),
            "euler3" => Ok(ActionMode::Euler3),
            _ => Err(Error::Config(format!("unknown action_mode {s:?}"))),
        }
    }
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::DirectYaw => "direct_yaw",
            ActionMode::StepwiseYaw => "stepwise_yaw",
            ActionMode::Euler3 => "euler3",
        }
    }
}

/// Optimization schedule and sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub n_views: usize,
    pub delta_phi: f64,
    pub action_bound: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub action_mode: ActionMode,
    /// Half-range in degrees of the pitch and roll drawn in `euler3` mode.
    pub euler_range: f64,
    pub seed: u64,
    pub debug_grad_checks: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            n_views: 8,
            delta_phi: 3.0,
            action_bound: 90.0,
            batch_size: 4,
            epochs: 100,
            iters_per_epoch: 50,
            lr_start: 5e-4,
            lr_end: 1e-5,
            wd_start: 0.04,
            wd_end: 0.4,
            momentum_start: 0.994,
            momentum_end: 1.0,
            action_mode: ActionMode::DirectYaw,
            euler_range: 15.0,
            seed: 0,
            debug_grad_checks: false,
        }
    }
}

/// Phantom sets and the rendering rig.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Simulated training phantoms.
    pub n_phantoms: usize,
    /// Phantoms rendered and restyled to form the "real" pool.
    pub n_real: usize,
    pub grid: GridSpec,
    pub rig: ConeBeamGeometry,
    pub phantom_seed: u64,
    pub real_seed: u64,
    /// Directory for rendered projections; empty disables the disk cache.
    pub cache_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_phantoms: 8,
            n_real: 8,
            grid: GridSpec::default(),
            rig: ConeBeamGeometry::default(),
            phantom_seed: 1000,
            real_seed: 2000,
            cache_dir: String::new(),
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mask: MaskParams,
    pub train: TrainParams,
    pub data: DataConfig,
}

pub(crate) fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {v:?} for {key}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {v:?} as a boolean for {key}"))),
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: &'static [&'static str] = &[
        "model.image_size",
        "model.patch_size",
        "model.embed_dim",
        "model.encoder_depth",
        "model.num_heads",
        "model.mlp_ratio",
        "model.predictor_dim",
        "model.predictor_depth",
        "model.classifier_depth",
        "loss.lambda_affinity",
        "loss.lambda_mim",
        "loss.lambda_domain",
        "loss.lambda_cls",
        "loss.tau_init",
        "loss.tau_affinity_init",
        "loss.normalize_sim",
        "loss.mim_reduction",
        "loss.mim_target_norm",
        "mask.n_blocks",
        "mask.scale_min",
        "mask.scale_max",
        "mask.aspect_min",
        "mask.aspect_max",
        "mask.r_min",
        "mask.r_max",
        "train.n_views",
        "train.delta_phi",
        "train.action_bound",
        "train.batch_size",
        "train.epochs",
        "train.iters_per_epoch",
        "train.lr_start",
        "train.lr_end",
        "train.wd_start",
        "train.wd_end",
        "train.momentum_start",
        "train.momentum_end",
        "train.action_mode",
        "train.euler_range",
        "train.seed",
        "train.debug_grad_checks",
        "data.n_phantoms",
        "data.n_real",
        "data.grid",
        "data.spacing",
        "data.detector",
        "data.pitch",
        "data.sod",
        "data.sdd",
        "data.phantom_seed",
        "data.real_seed",
        "data.cache_dir",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        let l = &mut self.loss;
        let k = &mut self.mask;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.encoder_depth" => m.encoder_depth = parse(key, v)?,
            "model.num_heads" => m.num_heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.predictor_dim" => m.predictor_dim = parse(key, v)?,
            "model.predictor_depth" => m.predictor_depth = parse(key, v)?,
            "model.classifier_depth" => m.classifier_depth = parse(key, v)?,
            "loss.lambda_affinity" => l.lambda_affinity = parse(key, v)?,
            "loss.lambda_mim" => l.lambda_mim = parse(key, v)?,
            "loss.lambda_domain" => l.lambda_domain = parse(key, v)?,
            "loss.lambda_cls" => l.lambda_cls = parse(key, v)?,
            "loss.tau_init" => l.tau_init = parse(key, v)?,
            "loss.tau_affinity_init" => l.tau_affinity_init = parse(key, v)?,
            "loss.normalize_sim" => l.normalize_sim = parse_bool(key, v)?,
            "loss.mim_reduction" => l.mim_reduction = MimReduction::from_str(v)?,
            "loss.mim_target_norm" => l.mim_target_norm = parse_bool(key, v)?,
            "mask.n_blocks" => k.n_blocks = parse(key, v)?,
            "mask.scale_min" => k.scale.0 = parse(key, v)?,
            "mask.scale_max" => k.scale.1 = parse(key, v)?,
            "mask.aspect_min" => k.aspect.0 = parse(key, v)?,
            "mask.aspect_max" => k.aspect.1 = parse(key, v)?,
            "mask.r_min" => k.r_min = parse(key, v)?,
            "mask.r_max" => k.r_max = parse(key, v)?,
            "train.n_views" => t.n_views = parse(key, v)?,
            "train.delta_phi" => t.delta_phi = parse(key, v)?,
            "train.action_bound" => t.action_bound = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.iters_per_epoch" => t.iters_per_epoch = parse(key, v)?,
            "train.lr_start" => t.lr_start = parse(key, v)?,
            "train.lr_end" => t.lr_end = parse(key, v)?,
            "train.wd_start" => t.wd_start = parse(key, v)?,
            "train.wd_end" => t.wd_end = parse(key, v)?,
            "train.momentum_start" => t.momentum_start = parse(key, v)?,
            "train.momentum_end" => t.momentum_end = parse(key, v)?,
            "train.action_mode" => t.action_mode = ActionMode::from_str(v)?,
            "train.euler_range" => t.euler_range = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.debug_grad_checks" => t.debug_grad_checks = parse_bool(key, v)?,
            "data.n_phantoms" => d.n_phantoms = parse(key, v)?,
            "data.n_real" => d.n_real = parse(key, v)?,
            "data.grid" => d.grid.dims = [parse(key, v)?; 3],
            "data.spacing" => d.grid.spacing = [parse(key, v)?; 3],
            "data.detector" => {
                let n: usize = parse(key, v)?;
                d.rig.nu = n;
                d.rig.nv = n;
            }
            "data.pitch" => d.rig.pitch = parse(key, v)?,
            "data.sod" => d.rig.sod = parse(key, v)?,
            "data.sdd" => d.rig.sdd = parse(key, v)?,
            "data.phantom_seed" => d.phantom_seed = parse(key, v)?,
            "data.real_seed" => d.real_seed = parse(key, v)?,
            "data.cache_dir" => d.cache_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.model.action_dim = if self.train.action_mode == ActionMode::Euler3 { 3 } else { 1 };
        Ok(())
    }

    /// Textual value of one key, in the form [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let l = &self.loss;
        let k = &self.mask;
        let t = &self.train;
        let d = &self.data;
        Ok(match key {
            "model.image_size" => m.image_size.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.embed_dim" => m.embed_dim.to_string(),
            "model.encoder_depth" => m.encoder_depth.to_string(),
            "model.num_heads" => m.num_heads.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.predictor_dim" => m.predictor_dim.to_string(),
            "model.predictor_depth" => m.predictor_depth.to_string(),
            "model.classifier_depth" => m.classifier_depth.to_string(),
            "loss.lambda_affinity" => l.lambda_affinity.to_string(),
            "loss.lambda_mim" => l.lambda_mim.to_string(),
            "loss.lambda_domain" => l.lambda_domain.to_string(),
            "loss.lambda_cls" => l.lambda_cls.to_string(),
            "loss.tau_init" => l.tau_init.to_string(),
            "loss.tau_affinity_init" => l.tau_affinity_init.to_string(),
            "loss.normalize_sim" => l.normalize_sim.to_string(),
            "loss.mim_reduction" => l.mim_reduction.name().to_string(),
            "loss.mim_target_norm" => l.mim_target_norm.to_string(),
            "mask.n_blocks" => k.n_blocks.to_string(),
            "mask.scale_min" => k.scale.0.to_string(),
            "mask.scale_max" => k.scale.1.to_string(),
            "mask.aspect_min" => k.aspect.0.to_string(),
            "mask.aspect_max" => k.aspect.1.to_string(),
            "mask.r_min" => k.r_min.to_string(),
            "mask.r_max" => k.r_max.to_string(),
            "train.n_views" => t.n_views.to_string(),
            "train.delta_phi" => t.delta_phi.to_string(),
            "train.action_bound" => t.action_bound.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.iters_per_epoch" => t.iters_per_epoch.to_string(),
            "train.lr_start" => t.lr_start.to_string(),
            "train.lr_end" => t.lr_end.to_string(),
            "train.wd_start" => t.wd_start.to_string(),
            "train.wd_end" => t.wd_end.to_string(),
            "train.momentum_start" => t.momentum_start.to_string(),
            "train.momentum_end" => t.momentum_end.to_string(),
            "train.action_mode" => t.action_mode.name().to_string(),
            "train.euler_range" => t.euler_range.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.debug_grad_checks" => t.debug_grad_checks.to_string(),
            "data.n_phantoms" => d.n_phantoms.to_string(),
            "data.n_real" => d.n_real.to_string(),
            "data.grid" => d.grid.dims[0].to_string(),
            "data.spacing" => d.grid.spacing[0].to_string(),
            "data.detector" => d.rig.nu.to_string(),
            "data.pitch" => d.rig.pitch.to_string(),
            "data.sod" => d.rig.sod.to_string(),
            "data.sdd" => d.rig.sdd.to_string(),
            "data.phantom_seed" => d.phantom_seed.to_string(),
            "data.real_seed" => d.real_seed.to_string(),
            "data.cache_dir" => d.cache_dir.clone(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
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

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// All keys with their values, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn total_steps(&self) -> u64 {
        (self.train.epochs * self.train.iters_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.n_views < 2 {
            return bad(format!("train.n_views must be at least 2, got {}", t.n_views));
        }
        if !(t.delta_phi > 0.0) || !(t.action_bound > 0.0) {
            return bad("train.delta_phi and train.action_bound must be positive".into());
        }
        let steps = t.action_bound / t.delta_phi;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad(format!(
                "train.delta_phi {} does not divide train.action_bound {}",
                t.delta_phi, t.action_bound
            ));
        }
        if 2 * (steps.round() as usize) + 1 < t.n_views {
            return bad(format!(
                "{} candidate angles cannot supply {} distinct views",
                2 * steps.round() as usize + 1,
                t.n_views
            ));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.iters_per_epoch == 0 {
            return bad("batch size, epochs and iterations must be positive".into());
        }
        if self.data.n_phantoms == 0 || self.data.n_real == 0 {
            return bad("data.n_phantoms and data.n_real must be positive".into());
        }
        if self.data.rig.nu != self.model.image_size || self.data.rig.nv != self.model.image_size {
            return bad(format!(
                "detector {}×{} must match model.image_size {}",
                self.data.rig.nu, self.data.rig.nv, self.model.image_size
            ));
        }
        self.data.rig.validate()?;
        let mode_dim = if t.action_mode == ActionMode::Euler3 { 3 } else { 1 };
        if self.model.action_dim != mode_dim {
            return bad("model.action_dim does not match train.action_mode".into());
        }
        Ok(())
    }
}
