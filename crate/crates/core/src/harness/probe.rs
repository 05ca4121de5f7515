use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{auroc, EvalImage, EvalReport, FeatureTable};
use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::{encode_image, linear, AdamW, ModelConfig, ParamStore, Params, PROB_CLAMP};
use crate::volumegen::{LabelSet, LabelTask};

/// Logistic-regression probe settings. Full-batch gradient descent, no line
/// search, stopping when the loss changes by less than `tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    /// Share of each class placed in the training split.
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.1,
            max_iter: 5000,
            tolerance: 1e-6,
            train_fraction: 0.5,
            seeds: (0..5).collect(),
        }
    }
}

/// Whether probe labels are the true ones or a seeded permutation of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    True,
    Permuted,
}

/// Indices of the images a task is defined on. Laterality only applies to
/// images with a lesion.
pub fn task_indices(labels: &[LabelSet], task: LabelTask) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| task != LabelTask::Laterality || labels[i].lesion_present)
        .collect()
}

/// Stratified split of `idx`: each class is shuffled and its first
/// `round(fraction · n)` members go to training. Both splits keep at least
/// one member of each class.
pub fn split_indices(labels: &[bool], idx: &[usize], seed: u64, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Evaluation(format!(
                "class {class} has {} members; a split needs two",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n]);
        test.extend_from_slice(&members[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Exactly `k` indices of each class, drawn without replacement.
pub fn stratified_shots(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * k);
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if k > members.len() {
            return Err(Error::Evaluation(format!(
                "{k} shots requested but class {class} has {} members",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..k]);
    }
    Ok(out)
}

/// A fitted probe on z-scored features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub loss: f64,
}

impl LogisticModel {
    /// Logit of one raw feature vector.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut s = self.bias;
        for j in 0..x.len() {
            s += self.weights[j] * (x[j] - self.mean[j]) / self.std[j];
        }
        s
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fits logistic regression by full-batch gradient descent on the mean
/// cross-entropy. Features are standardized with the training statistics.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], cfg: &ProbeConfig) -> Result<LogisticModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Evaluation(format!("{} feature rows for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for j in 0..d {
            mean[j] += r[j] / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in x {
        for j in 0..d {
            std[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut prev = f64::INFINITY;
    let mut loss = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        loss = 0.0;
        for (r, &label) in z.iter().zip(y) {
            let s = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let t = if label { 1.0 } else { 0.0 };
            loss += softplus(s) - t * s;
            let e = sigmoid(s) - t;
            for j in 0..d {
                gw[j] += e * r[j];
            }
            gb += e;
        }
        loss /= n;
        iterations = it + 1;
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;
        for j in 0..d {
            w[j] -= cfg.lr * gw[j] / n;
        }
        b -= cfg.lr * gb / n;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("probe loss".into()));
    }
    Ok(LogisticModel {
        mean,
        std,
        weights: w,
        bias: b,
        iterations,
        loss,
    })
}

fn probe_auroc(train_x: &[Vec<f64>], train_y: &[bool], test_x: &[Vec<f64>], test_y: &[bool], cfg: &ProbeConfig) -> Result<f64> {
    let m = fit_logistic(train_x, train_y, cfg)?;
    let scores: Vec<f64> = test_x.iter().map(|x| m.score(x)).collect();
    auroc(&scores, test_y)
}

/// Fits a probe for `task` on the training table and returns its test AUROC.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, task: LabelTask, cfg: &ProbeConfig) -> Result<f64> {
    super::check_disjoint(train, test)?;
    probe_auroc(
        &train.features,
        &train.task_labels(task),
        &test.features,
        &test.task_labels(task),
        cfg,
    )
}

/// One probe per seed, each on its own stratified split of `table`. In
/// permuted mode the task labels are shuffled with the seed before
/// splitting, giving the chance baseline.
pub fn probe_over_seeds(table: &FeatureTable, task: LabelTask, cfg: &ProbeConfig, mode: LabelMode) -> Result<EvalReport> {
    let idx = task_indices(&table.labels, task);
    let mut scores = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut labels = table.task_labels(task);
        if mode == LabelMode::Permuted {
            let mut vals: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_ab1e));
            for (&i, v) in idx.iter().zip(vals) {
                labels[i] = v;
            }
        }
        let (tr, te) = split_indices(&labels, &idx, seed, cfg.train_fraction)?;
        let pick = |s: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
            (
                s.iter().map(|&i| table.features[i].clone()).collect(),
                s.iter().map(|&i| labels[i]).collect(),
            )
        };
        let (xa, ya) = pick(&tr);
        let (xb, yb) = pick(&te);
        scores.push(probe_auroc(&xa, &ya, &xb, &yb, cfg)?);
    }
    let method = match mode {
        LabelMode::True => "linear_probe",
        LabelMode::Permuted => "linear_probe_permuted",
    };
    Ok(EvalReport::new(task, method, None, cfg.seeds.clone(), scores))
}

/// Few-shot fine-tuning settings: the whole encoder plus a linear head,
/// trained full-batch with AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 100,
            lr: 1e-4,
            weight_decay: 0.0,
            seeds: (0..5).collect(),
        }
    }
}

fn head_logit(g: &mut Graph, p: &Params, model: &ModelConfig, img: &[f64]) -> crate::autograd::NodeId {
    let tokens = encode_image(g, p, model, img);
    let pooled = g.mean_rows(tokens);
    linear(g, p, "probe_head", pooled)
}

/// For each seed: draws `k` images per class from `pool`, fine-tunes a copy
/// of the encoder with a fresh linear head on them, and scores `test`.
/// The input encoder is not modified.
pub fn few_shot_finetune(
    encoder: &ParamStore,
    model: &ModelConfig,
    pool: &[EvalImage],
    test: &[EvalImage],
    task: LabelTask,
    k: usize,
    cfg: &FinetuneConfig,
) -> Result<EvalReport> {
    let pool_labels: Vec<LabelSet> = pool.iter().map(|i| i.labels).collect();
    let pool_idx = task_indices(&pool_labels, task);
    let pool_y: Vec<bool> = pool_idx.iter().map(|&i| pool[i].labels.get(task)).collect();
    let test_labels: Vec<LabelSet> = test.iter().map(|i| i.labels).collect();
    let test_idx = task_indices(&test_labels, task);
    let test_y: Vec<bool> = test_idx.iter().map(|&i| test[i].labels.get(task)).collect();

    let mut scores = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let shots: Vec<usize> = stratified_shots(&pool_y, k, seed)?
            .into_iter()
            .map(|i| pool_idx[i])
            .collect();
        let mut store = encoder.subset("encoder.");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        store.linear("probe_head", model.embed_dim, 1, &mut rng);
        let mut opt = AdamW::new();
        for step in 0..cfg.steps {
            let mut g = Graph::new();
            let p = Params::trainable(&store, "f");
            let one = g.constant(Tensor::scalar(1.0));
            let mut terms = Vec::with_capacity(shots.len());
            for &i in &shots {
                let logit = head_logit(&mut g, &p, model, &pool[i].pixels);
                let prob = g.sigmoid(logit);
                let prob = g.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
                let q = if pool[i].labels.get(task) { prob } else { g.sub(one, prob) };
                let lq = g.log(q);
                terms.push(g.scale(lq, -1.0));
            }
            let sum = g.add_scalars(&terms);
            let loss = g.scale(sum, 1.0 / shots.len() as f64);
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("fine-tune loss at step {step}, seed {seed}")));
            }
            let grads = g.backward(loss).params(&g, "f/");
            drop(g);
            opt.step(&mut store, &grads, cfg.lr, cfg.weight_decay);
        }
        let s: Vec<f64> = test_idx
            .iter()
            .map(|&i| {
                let mut g = Graph::new();
                let p = Params::frozen(&store, "f");
                let l = head_logit(&mut g, &p, model, &test[i].pixels);
                g.value(l).item()
            })
            .collect();
        scores.push(auroc(&s, &test_y)?);
    }
    Ok(EvalReport::new(task, "finetune", Some(k), cfg.seeds.clone(), scores))
}
