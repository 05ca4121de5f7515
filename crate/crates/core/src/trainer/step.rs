use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ActionMode, TrainConfig, TrainParams};
use super::data::Dataset;
use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::masking::{sample_multiblock, MaskSpec};
use crate::nn::{
    classify_domain, ema_update, encode, encode_image, patch_embed, predict_mask, predict_view, AdamW,
    ModelConfig, ParamStore, Params,
};
use crate::objectives::{
    align_nodes, cls_node, domain_node, mim_stream_node, overall_node, LossConfig, LossReport,
};
use crate::projector::{pose_from_action_bounded, Action, BaseView};

/// `end + (start − end)·(1 + cos(π·step/total))/2`, held at `end` past `total`.
pub fn cosine_schedule(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 || step >= total {
        return end;
    }
    if step == 0 {
        return start;
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    end + (start - end) * (1.0 + c) / 2.0
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of an independent stream identified by `parts`.
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7cc1_b727_220a, |h, &p| splitmix(h ^ splitmix(p)))
}

/// `n_views` actions with distinct yaw steps drawn uniformly from
/// `−bound/Δφ ..= bound/Δφ`. In `euler3` mode each action also carries a
/// pitch and roll drawn uniformly from `±euler_range`.
pub fn sample_actions(t: &TrainParams, seed: u64) -> Result<Vec<Action>> {
    let kmax = (t.action_bound / t.delta_phi).round() as i32;
    let candidates: Vec<i32> = (-kmax..=kmax).collect();
    if candidates.len() < t.n_views {
        return Err(Error::Config(format!(
            "{} candidate angles cannot supply {} distinct views",
            candidates.len(),
            t.n_views
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<i32> = candidates.choose_multiple(&mut rng, t.n_views).copied().collect();
    Ok(ks
        .into_iter()
        .map(|k| {
            let mut a = Action::yaw(k, t.delta_phi);
            if t.action_mode == ActionMode::Euler3 {
                a.pitch = rng.random_range(-t.euler_range..=t.euler_range);
                a.roll = rng.random_range(-t.euler_range..=t.euler_range);
            }
            a
        })
        .collect())
}

/// Predictor input row for one action, in radians.
pub fn action_row(a: &Action, mode: ActionMode) -> Tensor {
    match mode {
        ActionMode::Euler3 => Tensor::row(vec![a.radians(), a.pitch.to_radians(), a.roll.to_radians()]),
        _ => Tensor::row(vec![a.radians()]),
    }
}

/// `|k|` chained view predictions of one `Δφ` step each, every output fed
/// back as the next context. `k = 0` returns `ctx` itself.
pub fn stepwise_predict(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    ctx: NodeId,
    k: i32,
    delta_phi: f64,
) -> NodeId {
    let step = Tensor::row(vec![(k.signum() as f64 * delta_phi).to_radians()]);
    let mut x = ctx;
    for _ in 0..k.unsigned_abs() {
        let a = g.constant(step.clone());
        x = predict_view(g, p, cfg, x, a);
    }
    x
}

/// Predicted target tokens for one action under the configured mode.
pub fn predict_action(
    g: &mut Graph,
    p: &Params,
    cfg: &ModelConfig,
    ctx: NodeId,
    a: &Action,
    mode: ActionMode,
) -> NodeId {
    match mode {
        ActionMode::StepwiseYaw => stepwise_predict(g, p, cfg, ctx, a.k, a.delta_phi),
        _ => {
            let row = g.constant(action_row(a, mode));
            predict_view(g, p, cfg, ctx, row)
        }
    }
}

/// Everything one volume contributes to a step.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub volume: usize,
    pub base: BaseView,
    pub context: Vec<f64>,
    pub actions: Vec<Action>,
    pub targets: Vec<Vec<f64>>,
    /// Indices into the real pool, one per target.
    pub real: Vec<usize>,
    pub real_pixels: Vec<Vec<f64>>,
    pub real_masks: Vec<MaskSpec>,
    pub sim_masks: Vec<MaskSpec>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub samples: Vec<VolumeSample>,
}

impl Batch {
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .samples
            .iter()
            .map(|s| format!("volume {} real {:?}", s.volume, s.real))
            .collect();
        format!("step {}: {}", self.step, parts.join("; "))
    }
}

/// Volume visited in batch slot `slot` of `step`. Slots run through
/// successive random permutations of the volume set.
pub fn volume_for_slot(seed: u64, step: u64, batch_size: usize, n: usize, slot: usize) -> usize {
    let j = step * batch_size as u64 + slot as u64;
    let pass = j / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 1, pass])));
    perm[(j % n as u64) as usize]
}

/// Context view of a volume for an epoch, frontal or lateral with equal odds.
pub fn context_base(seed: u64, epoch: u64, volume: usize) -> BaseView {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 2, epoch, volume as u64]));
    if rng.random_bool(0.5) {
        BaseView::Frontal
    } else {
        BaseView::Lateral
    }
}

/// Assembles the batch of `step`. A pure function of the config, the data
/// and the step index, so a resumed run sees the same batches.
pub fn assemble_batch(cfg: &TrainConfig, data: &Dataset, step: u64) -> Result<Batch> {
    let t = &cfg.train;
    let seed = t.seed;
    let epoch = step / t.iters_per_epoch as u64;
    let grid = cfg.model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 3, step]));
    let mut samples = Vec::with_capacity(t.batch_size);
    for slot in 0..t.batch_size {
        let volume = volume_for_slot(seed, step, t.batch_size, data.sim.len(), slot);
        let base = context_base(seed, epoch, volume);
        let actions = sample_actions(t, rng.random())?;
        let mut targets = Vec::with_capacity(actions.len());
        for a in &actions {
            let geom = pose_from_action_bounded(base, a, &data.rig, t.action_bound)?;
            if t.action_mode == ActionMode::Euler3 {
                targets.push(data.render(volume, &geom)?);
            } else {
                targets.push(data.view(volume, geom.beta).to_vec());
            }
        }
        let pool: Vec<usize> = (0..data.real.len()).collect();
        let real: Vec<usize> = if pool.len() >= t.n_views {
            pool.choose_multiple(&mut rng, t.n_views).copied().collect()
        } else {
            (0..t.n_views).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let masks = |rng: &mut ChaCha8Rng| -> Result<Vec<MaskSpec>> {
            (0..t.n_views)
                .map(|_| sample_multiblock(grid, grid, &cfg.mask, rng.random()))
                .collect()
        };
        let real_masks = masks(&mut rng)?;
        let sim_masks = masks(&mut rng)?;
        samples.push(VolumeSample {
            volume,
            base,
            context: data.view(volume, base.beta()).to_vec(),
            actions,
            targets,
            real_pixels: real.iter().map(|&i| data.real[i].pixels.clone()).collect(),
            real,
            real_masks,
            sim_masks,
        });
    }
    Ok(Batch { step, samples })
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub infonce: NodeId,
    pub affinity: NodeId,
    pub align: NodeId,
    pub mim: NodeId,
    pub cls: NodeId,
    pub domain: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |n: NodeId| g.value(n).item();
        LossReport {
            infonce: v(self.infonce),
            affinity: v(self.affinity),
            align: v(self.align),
            mim: v(self.mim),
            cls: v(self.cls),
            domain: v(self.domain),
            total: v(self.total),
        }
    }
}

/// Row `i` of the result is grid cell `i`, given rows ordered as
/// `visible ++ masked`.
fn to_grid_order(g: &mut Graph, visible: NodeId, masked: NodeId, mask: &MaskSpec) -> NodeId {
    let all = g.concat_rows(&[visible, masked]);
    let mut inv = vec![0; mask.num_tokens()];
    for (row, &cell) in mask.visible.iter().chain(&mask.masked).enumerate() {
        inv[cell] = row;
    }
    g.gather_rows(all, &inv)
}

struct MimOut {
    pred: NodeId,
    target: NodeId,
    tokens: NodeId,
}

/// Student encoding of the visible cells, mask-predictor output at the
/// masked cells, and teacher targets at those cells.
fn mim_branch(
    g: &mut Graph,
    s: &Params,
    cfg: &ModelConfig,
    loss: &LossConfig,
    img: &[f64],
    teacher_tokens: NodeId,
    mask: &MaskSpec,
) -> MimOut {
    let tokens = patch_embed(g, s, cfg, img);
    let vis = g.gather_rows(tokens, &mask.visible);
    let enc = encode(g, s, cfg, vis);
    let pred = predict_mask(g, s, cfg, enc, mask);
    let tgt = g.gather_rows(teacher_tokens, &mask.masked);
    let target = if loss.mim_target_norm {
        g.layer_norm(tgt, None, None)
    } else {
        tgt
    };
    let full = to_grid_order(g, enc, pred, mask);
    MimOut {
        pred,
        target,
        tokens: g.detach(full),
    }
}

fn mean_of(g: &mut Graph, parts: &[NodeId]) -> NodeId {
    let s = g.add_scalars(parts);
    g.scale(s, 1.0 / parts.len() as f64)
}

/// Builds every loss of a step. The student is bound as `s`, the frozen
/// classifier copy used by the domain term as `f`, and the teacher as `t`
/// (trainable only when `teacher_trainable`, so that leaks are observable).
pub fn forward(
    g: &mut Graph,
    cfg: &TrainConfig,
    student: &ParamStore,
    teacher: &ParamStore,
    batch: &Batch,
    teacher_trainable: bool,
) -> LossNodes {
    let m = &cfg.model;
    let lc = &cfg.loss;
    let mode = cfg.train.action_mode;
    let s = Params::trainable(student, "s");
    let f = Params::frozen(student, "f");
    let t = Params {
        store: teacher,
        key: "t",
        trainable: teacher_trainable,
    };
    let log_tau = s.get(g, "loss.log_tau");
    let tau_aff = student.get("loss.log_tau_affinity").item().exp();

    let (mut inf, mut aff, mut mim, mut cls, mut dom) = (vec![], vec![], vec![], vec![], vec![]);
    for sample in &batch.samples {
        let t_tokens: Vec<NodeId> = sample
            .targets
            .iter()
            .map(|u| {
                let x = encode_image(g, &t, m, u);
                g.detach(x)
            })
            .collect();
        let ctx = encode_image(g, &s, m, &sample.context);
        let z_tokens: Vec<NodeId> = sample
            .actions
            .iter()
            .map(|a| predict_action(g, &s, m, ctx, a, mode))
            .collect();

        let z_pool: Vec<NodeId> = z_tokens.iter().map(|&z| g.mean_rows(z)).collect();
        let t_pool: Vec<NodeId> = t_tokens.iter().map(|&x| g.mean_rows(x)).collect();
        let z_pool = g.concat_rows(&z_pool);
        let t_pool = g.concat_rows(&t_pool);
        let (i, a) = align_nodes(g, z_pool, t_pool, log_tau, tau_aff, lc.normalize_sim);
        inf.push(i);
        aff.push(a);

        let mut real_pairs = Vec::new();
        let mut p_real = Vec::new();
        for (img, mask) in sample.real_pixels.iter().zip(&sample.real_masks) {
            let tt = encode_image(g, &t, m, img);
            let tt = g.detach(tt);
            let out = mim_branch(g, &s, m, lc, img, tt, mask);
            real_pairs.push((out.pred, out.target));
            p_real.push(classify_domain(g, &s, m, out.tokens));
        }
        let mut sim_pairs = Vec::new();
        let mut p_sim = Vec::new();
        for ((img, mask), &tt) in sample.targets.iter().zip(&sample.sim_masks).zip(&t_tokens) {
            let out = mim_branch(g, &s, m, lc, img, tt, mask);
            sim_pairs.push((out.pred, out.target));
            p_sim.push(classify_domain(g, &s, m, out.tokens));
        }
        let mr = mim_stream_node(g, &real_pairs, lc.mim_reduction);
        let ms = mim_stream_node(g, &sim_pairs, lc.mim_reduction);
        mim.push(g.add(mr, ms));
        cls.push(cls_node(g, &p_real, &p_sim));

        let p_pred: Vec<NodeId> = z_tokens.iter().map(|&z| classify_domain(g, &f, m, z)).collect();
        dom.push(domain_node(g, &z_tokens, &t_tokens, &p_pred));
    }
    let infonce = mean_of(g, &inf);
    let affinity = mean_of(g, &aff);
    let mim = mean_of(g, &mim);
    let cls = mean_of(g, &cls);
    let domain = mean_of(g, &dom);
    let (align, total) = overall_node(g, lc, infonce, affinity, mim, cls, domain);
    LossNodes {
        infonce,
        affinity,
        align,
        mim,
        cls,
        domain,
        total,
    }
}

/// Gradient norms that must vanish, measured in debug mode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StopGradNorms {
    /// Teacher, under the total and under every component.
    pub teacher: f64,
    /// Classifier under the domain term.
    pub classifier_from_domain: f64,
    /// Classifier under the alignment and masked-modeling terms.
    pub classifier_from_other: f64,
    /// Encoder, predictors and temperatures under the classifier loss.
    pub student_from_cls: f64,
}

impl StopGradNorms {
    pub fn all_zero(&self) -> bool {
        self.teacher == 0.0
            && self.classifier_from_domain == 0.0
            && self.classifier_from_other == 0.0
            && self.student_from_cls == 0.0
    }
}

fn stop_grad_norms(g: &Graph, n: &LossNodes) -> StopGradNorms {
    let teacher = [n.total, n.align, n.mim, n.cls, n.domain]
        .iter()
        .map(|&l| g.backward(l).norm_of(g, &["t/"]))
        .fold(0.0, f64::max);
    let classifier_from_domain = g.backward(n.domain).norm_of(g, &["s/classifier."]);
    let classifier_from_other = [n.align, n.mim]
        .iter()
        .map(|&l| g.backward(l).norm_of(g, &["s/classifier."]))
        .fold(0.0, f64::max);
    let student_from_cls = g.backward(n.cls).norm_of(
        g,
        &["s/encoder.", "s/view_predictor.", "s/mask_predictor.", "s/loss."],
    );
    StopGradNorms {
        teacher,
        classifier_from_domain,
        classifier_from_other,
        student_from_cls,
    }
}

/// Mean of the reports seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningLoss {
    pub count: u64,
    pub sum: LossReport,
}

impl RunningLoss {
    pub fn push(&mut self, r: &LossReport) {
        self.count += 1;
        let s = &mut self.sum;
        s.infonce += r.infonce;
        s.affinity += r.affinity;
        s.align += r.align;
        s.mim += r.mim;
        s.cls += r.cls;
        s.domain += r.domain;
        s.total += r.total;
    }

    pub fn mean(&self) -> LossReport {
        let n = self.count.max(1) as f64;
        let s = &self.sum;
        LossReport {
            infonce: s.infonce / n,
            affinity: s.affinity / n,
            align: s.align / n,
            mim: s.mim / n,
            cls: s.cls / n,
            domain: s.domain / n,
            total: s.total / n,
        }
    }
}

/// Student, teacher and optimizer state. Random streams are derived from
/// the seed and the step counter, so the counter is the whole stream state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub running: RunningLoss,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = ParamStore::init(&cfg.model, cfg.train.seed)?;
        let teacher = ParamStore::teacher_from(&student);
        Ok(TrainState {
            student,
            teacher,
            opt: AdamW::new(),
            step: 0,
            running: RunningLoss::default(),
        })
    }
}

/// Scheduled hyperparameters of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Schedules {
    pub fn at(cfg: &TrainConfig, step: u64) -> Self {
        let t = &cfg.train;
        let total = cfg.total_steps();
        Schedules {
            lr: cosine_schedule(step, total, t.lr_start, t.lr_end),
            weight_decay: cosine_schedule(step, total, t.wd_start, t.wd_end),
            momentum: cosine_schedule(step, total, t.momentum_start, t.momentum_end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
    pub sched: Schedules,
    pub stop_grad: Option<StopGradNorms>,
}

/// One optimization step: forward, a single backward of the total, the
/// adaptive-moment update, then the teacher moving average.
pub fn train_step(cfg: &TrainConfig, state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    if batch.step != state.step {
        return Err(Error::Config(format!(
            "batch for step {} given to state at step {}",
            batch.step, state.step
        )));
    }
    let debug = cfg.train.debug_grad_checks;
    let mut g = Graph::new();
    let nodes = forward(&mut g, cfg, &state.student, &state.teacher, batch, debug);
    let loss = nodes.report(&g);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss:?} at {}", batch.describe())));
    }
    let stop_grad = if debug {
        let n = stop_grad_norms(&g, &nodes);
        if !n.all_zero() {
            return Err(Error::StopGradient(format!("{n:?} at step {}", batch.step)));
        }
        Some(n)
    } else {
        None
    };
    let grads = g.backward(nodes.total).params(&g, "s/");
    let sched = Schedules::at(cfg, state.step);
    state.opt.step(&mut state.student, &grads, sched.lr, sched.weight_decay);
    if !state.student.is_finite() {
        return Err(Error::NonFinite(format!("parameters after update at {}", batch.describe())));
    }
    ema_update(&mut state.teacher, &state.student, sched.momentum);
    state.running.push(&loss);
    state.step += 1;
    Ok(StepReport {
        step: batch.step,
        loss,
        sched,
        stop_grad,
    })
}

/// Runs `steps` further steps, calling `on_step` after each.
pub fn run(
    cfg: &TrainConfig,
    data: &Dataset,
    state: &mut TrainState,
    steps: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = assemble_batch(cfg, data, state.step)?;
        let r = train_step(cfg, state, &batch)?;
        on_step(&r);
        out.push(r);
    }
    Ok(out)
}
