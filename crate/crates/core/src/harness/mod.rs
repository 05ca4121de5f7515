//! Downstream evaluation: pooled encoder features, linear probes, few-shot
//! fine-tuning, AUROC, domain-gap measures and patch correspondence.

mod ablate;
mod config;
mod probe;

#[cfg(test)]
mod tests;

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

pub use ablate::{ablation_csv, ablation_sweep, quarter_means, AblationRow, ABLATION_CSV_HEADER};
pub use config::{EvalConfig, RunConfig};
pub use probe::{
    few_shot_finetune, fit_logistic, linear_probe, probe_over_seeds, split_indices, stratified_shots,
    task_indices, FinetuneConfig, LabelMode, LogisticModel, ProbeConfig,
};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{encode_image, ModelConfig, ParamStore, Params};
use crate::projector::ProjectionImage;
use crate::trainer::{render_display, DataConfig, TrainState};
use crate::volumegen::{
    generate_phantom, pseudo_real_transform, DomainStyle, LabelSet, LabelTask, PhantomSpec,
};

/// Which encoder of a training state features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncoderChoice {
    /// The moving-average encoder.
    #[default]
    Teacher,
    Student,
}

impl FromStr for EncoderChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(EncoderChoice::Teacher),
            "student" => Ok(EncoderChoice::Student),
            _ => Err(Error::Config(format!("unknown encoder {s:?}; expected teacher or student"))),
        }
    }
}

pub fn select_encoder(state: &TrainState, which: EncoderChoice) -> &ParamStore {
    match which {
        EncoderChoice::Teacher => &state.teacher,
        EncoderChoice::Student => &state.student,
    }
}

/// One labelled evaluation radiograph.
#[derive(Debug, Clone)]
pub struct EvalImage {
    /// Seed of the phantom it was rendered from.
    pub id: u64,
    pub labels: LabelSet,
    pub pixels: Vec<f64>,
}

/// Pooled features of a set of images with their labels.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<LabelSet>,
    pub ids: Vec<u64>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            dim: self.dim,
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn task_labels(&self, task: LabelTask) -> Vec<bool> {
        self.labels.iter().map(|l| l.get(task)).collect()
    }
}

/// Errors if any image id appears in both tables.
pub fn check_disjoint(a: &FeatureTable, b: &FeatureTable) -> Result<()> {
    let seen: std::collections::HashSet<u64> = a.ids.iter().copied().collect();
    match b.ids.iter().find(|id| seen.contains(id)) {
        Some(id) => Err(Error::Evaluation(format!("image {id} is in both splits"))),
        None => Ok(()),
    }
}

/// Global average of the final encoder tokens of each image.
pub fn pooled_features(encoder: &ParamStore, model: &ModelConfig, images: &[Vec<f64>]) -> Vec<Vec<f64>> {
    images
        .par_iter()
        .map(|px| {
            let mut g = Graph::new();
            let p = Params::frozen(encoder, "e");
            let tokens = encode_image(&mut g, &p, model, px);
            let pooled = g.mean_rows(tokens);
            g.value(pooled).data.clone()
        })
        .collect()
}

pub fn extract_features(encoder: &ParamStore, model: &ModelConfig, images: &[EvalImage]) -> FeatureTable {
    let px: Vec<Vec<f64>> = images.iter().map(|i| i.pixels.clone()).collect();
    FeatureTable {
        dim: model.embed_dim,
        features: pooled_features(encoder, model, &px),
        labels: images.iter().map(|i| i.labels).collect(),
        ids: images.iter().map(|i| i.id).collect(),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `U / (n_pos · n_neg)`, with tied pairs counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over runs of equal scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn mean_vector(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Evaluation("empty feature set".into()))?;
    let mut m = vec![0.0; first.len()];
    for r in rows {
        if r.len() != m.len() {
            return Err(Error::Evaluation("feature widths differ".into()));
        }
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    Ok(m.into_iter().map(|v| v / n).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity and Euclidean distance between the cluster centers of
/// two feature sets.
pub fn domain_similarity(sim: &[Vec<f64>], real: &[Vec<f64>]) -> Result<(f64, f64)> {
    let a = mean_vector(sim)?;
    let b = mean_vector(real)?;
    if a.len() != b.len() {
        return Err(Error::Evaluation("feature widths differ".into()));
    }
    let cos = cosine(&a, &b).ok_or_else(|| Error::Evaluation("zero cluster center".into()))?;
    let l2 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok((cos, l2))
}

/// Per-cell similarities on the token grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub grid: usize,
    /// Row-major, `grid²` values.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Cell with the highest value, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Cosine similarity between token `landmark` of the simulated image and
/// every token of the real image.
pub fn patch_correspondence(
    encoder: &ParamStore,
    model: &ModelConfig,
    sim: &[f64],
    real: &[f64],
    landmark: usize,
) -> Result<Heatmap> {
    let n = model.num_tokens();
    if landmark >= n {
        return Err(Error::Evaluation(format!("landmark {landmark} outside {n} tokens")));
    }
    let mut g = Graph::new();
    let p = Params::frozen(encoder, "e");
    let s = encode_image(&mut g, &p, model, sim);
    let r = encode_image(&mut g, &p, model, real);
    let query = g.value(s).row_slice(landmark).to_vec();
    let rt = g.value(r);
    let values = (0..n)
        .map(|i| cosine(&query, rt.row_slice(i)).unwrap_or(0.0))
        .collect();
    Ok(Heatmap {
        grid: model.grid(),
        values,
    })
}

/// AUROCs of one evaluation protocol over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub method: String,
    /// Shots per class, for few-shot runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    pub auroc: Vec<f64>,
    pub mean_auroc: f64,
}

impl EvalReport {
    pub fn new(task: LabelTask, method: &str, k: Option<usize>, seeds: Vec<u64>, auroc: Vec<f64>) -> Self {
        let mean_auroc = auroc.iter().sum::<f64>() / auroc.len().max(1) as f64;
        EvalReport {
            task: task.name().to_string(),
            method: method.to_string(),
            k,
            seeds,
            auroc,
            mean_auroc,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn lesion_count(cfg: &EvalConfig, i: usize) -> usize {
    if i % 2 == 0 {
        0
    } else {
        1 + (i / 2) % cfg.max_lesions.max(1)
    }
}

/// Balanced evaluation radiographs: alternating lesion-free and
/// lesion-bearing phantoms, rendered at `cfg.beta` and restyled into the
/// pseudo-real domain.
pub fn eval_images(cfg: &EvalConfig, data: &DataConfig) -> Result<Vec<EvalImage>> {
    (0..2 * cfg.n_per_class)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i as u64;
            let spec = PhantomSpec::random_with_lesions(seed, data.grid, lesion_count(cfg, i));
            let (vol, labels) = generate_phantom(&spec)?;
            let img = render_display(&vol, &data.rig.with_beta(cfg.beta))?;
            let styled = pseudo_real_transform(&img, &DomainStyle::pseudo_real(seed ^ STYLE_SALT));
            Ok(EvalImage {
                id: seed,
                labels,
                pixels: styled.to_f64(),
            })
        })
        .collect()
}

const STYLE_SALT: u64 = 0x5eed_0f_57e1e;

/// Paired simulated and pseudo-real views of `n` phantoms: frontal and
/// lateral display renders, and the same renders restyled.
pub fn domain_images(data: &DataConfig, n: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let pairs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed + i as u64;
            let (vol, _) = generate_phantom(&PhantomSpec::random(s, data.grid))?;
            [0.0, 90.0]
                .into_iter()
                .enumerate()
                .map(|(v, beta)| {
                    let img = render_display(&vol, &data.rig.with_beta(beta))?;
                    let style = DomainStyle::pseudo_real((s ^ STYLE_SALT).wrapping_mul(2) + v as u64);
                    Ok((img.to_f64(), restyle(&img, &style)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().flatten().unzip())
}

fn restyle(img: &ProjectionImage, style: &DomainStyle) -> Vec<f64> {
    pseudo_real_transform(img, style).to_f64()
}
