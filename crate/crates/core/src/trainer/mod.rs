//! Training loop: batch assembly, the joint loss step, schedules,
//! checkpoints and metrics.

mod checkpoint;
mod config;
mod data;
mod step;

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ActionMode, DataConfig, TrainConfig, TrainParams};
pub(crate) use config::parse;
pub use data::{render_display, render_real, Dataset, RealImage, SimVolume, BETA_MAX, BETA_MIN};
pub use step::{
    action_row, assemble_batch, context_base, cosine_schedule, forward, predict_action, run,
    sample_actions, stepwise_predict, stream_seed, train_step, volume_for_slot, Batch, LossNodes,
    RunningLoss, Schedules, StepReport, StopGradNorms, TrainState, VolumeSample,
};

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_align,loss_infonce,loss_affinity,loss_mim,loss_cls,loss_domain,lr,momentum";

/// One metrics CSV row, without the trailing newline.
pub fn metrics_row(r: &StepReport) -> String {
    let l = &r.loss;
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{}",
        r.step, l.total, l.align, l.infonce, l.affinity, l.mim, l.cls, l.domain, r.sched.lr, r.sched.momentum
    );
    s
}

/// Appends rows to a metrics CSV, writing the header when the file is new.
pub fn append_metrics(path: impl AsRef<Path>, rows: &[StepReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", metrics_row(r))?;
    }
    Ok(())
}

impl TrainConfig {
    /// A small configuration that trains in seconds per hundred steps on
    /// one core: 32² images in 16 tokens, 32-wide embeddings, 32³ phantoms.
    pub fn tiny() -> Self {
        let mut c = TrainConfig::default();
        for (k, v) in [
            ("model.image_size", "32"),
            ("model.patch_size", "8"),
            ("model.embed_dim", "32"),
            ("model.encoder_depth", "2"),
            ("model.num_heads", "2"),
            ("model.mlp_ratio", "2"),
            ("model.predictor_dim", "32"),
            ("model.predictor_depth", "1"),
            ("data.grid", "32"),
            ("data.spacing", "8"),
            ("data.detector", "32"),
            ("data.pitch", "8"),
            ("data.n_phantoms", "8"),
            ("data.n_real", "8"),
            ("train.batch_size", "2"),
            ("train.epochs", "4"),
            ("train.iters_per_epoch", "50"),
        ] {
            c.set(k, v).expect("preset key");
        }
        c
    }
}
