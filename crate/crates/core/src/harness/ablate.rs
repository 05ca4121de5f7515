use std::fmt::Write as _;

use serde::Serialize;

use super::{
    domain_images, eval_images, extract_features, pooled_features, probe_over_seeds, select_encoder,
    domain_similarity, LabelMode, RunConfig,
};
use crate::error::Result;
use crate::trainer::{run, Dataset, TrainState};
use crate::volumegen::LabelTask;

pub const ABLATION_CSV_HEADER: &str =
    "key,value,steps,align_first_quarter,align_last_quarter,loss_total_last_quarter,domain_cosine,domain_l2,probe_auroc";

/// Outcome of one training run in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub key: String,
    pub value: String,
    pub steps: u64,
    pub align_first_quarter: f64,
    pub align_last_quarter: f64,
    pub loss_total_last_quarter: f64,
    pub domain_cosine: f64,
    pub domain_l2: f64,
    /// Mean lesion-present probe AUROC over the probe seeds.
    pub probe_auroc: f64,
}

/// Means of the first and last `⌊n/4⌋` values, at least one each.
pub fn quarter_means(values: &[f64]) -> (f64, f64) {
    let q = (values.len() / 4).max(1).min(values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&values[..q]), mean(&values[values.len() - q..]))
}

/// Trains one model per value of `key` for `steps` steps from `base` and
/// scores each on loss trend, domain gap and lesion-present probing.
pub fn ablation_sweep(
    base: &RunConfig,
    key: &str,
    values: &[String],
    steps: u64,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.set(key, v)?;
        cfg.validate()?;
        let data = Dataset::build(&cfg.train)?;
        let mut state = TrainState::new(&cfg.train)?;
        let reports = run(&cfg.train, &data, &mut state, steps, |_| {})?;
        let align: Vec<f64> = reports.iter().map(|r| r.loss.align).collect();
        let total: Vec<f64> = reports.iter().map(|r| r.loss.total).collect();
        let (a0, a1) = quarter_means(&align);
        let (_, t1) = quarter_means(&total);

        let enc = select_encoder(&state, cfg.eval.encoder);
        let model = &cfg.train.model;
        let (sim, real) = domain_images(&cfg.train.data, cfg.eval.domain_phantoms, cfg.eval.domain_seed)?;
        let (cos, l2) = domain_similarity(&pooled_features(enc, model, &sim), &pooled_features(enc, model, &real))?;
        let table = extract_features(enc, model, &eval_images(&cfg.eval, &cfg.train.data)?);
        let probe = probe_over_seeds(&table, LabelTask::LesionPresent, &cfg.probe, LabelMode::True)?;

        let row = AblationRow {
            key: key.to_string(),
            value: v.clone(),
            steps,
            align_first_quarter: a0,
            align_last_quarter: a1,
            loss_total_last_quarter: t1,
            domain_cosine: cos,
            domain_l2: l2,
            probe_auroc: probe.mean_auroc,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.key,
            r.value,
            r.steps,
            r.align_first_quarter,
            r.align_last_quarter,
            r.loss_total_last_quarter,
            r.domain_cosine,
            r.domain_l2,
            r.probe_auroc
        );
    }
    s
}
