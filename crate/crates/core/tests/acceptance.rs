//! End-to-end acceptance checks. Each criterion prints one line; the process
//! exits nonzero if any of them fails. `XWIN_ACCEPTANCE=1,7` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xwin::autograd::{grad_check, Graph, NodeId, Tensor};
use xwin::harness::{
    auroc, domain_images, domain_similarity, eval_images, extract_features, pooled_features, probe_over_seeds,
    FeatureTable, LabelMode, ProbeConfig, RunConfig,
};
use xwin::masking::MaskSpec;
use xwin::nn::{classify_domain, encode, encode_image, global_avg_pool, param_grad_check, predict_mask, predict_view};
use xwin::nn::{ModelConfig, ParamStore, Params};
use xwin::objectives::{
    affinity, affinity_loss, align_nodes_with, cls_node, domain_node, infonce, mim_stream_node, overall_node,
    softmax_rows, LossConfig, MimReduction,
};
use xwin::projector::{default_step, render_drr, render_drr_exact, ConeBeamGeometry, ProjectionImage};
use xwin::recon::{
    codebook_csv, codebook_sweep, codebook_usage, decoder_training_set, fdk_reconstruct, frontal_context, full_circle,
    ground_truth_views, nearest_codes, train_decoder, uniform_cylinder, volume_metrics, vq_quantize, DecoderConfig,
    DecoderSample, SweepData, CENTRAL_FRACTION, CODEBOOK_CSV_HEADER,
};
use xwin::recon::latent_tokens;
use xwin::trainer::{load_checkpoint, run, save_checkpoint, Dataset, TrainConfig, TrainState};
use xwin::volumegen::{generate_phantom, GridSpec, LabelTask, PhantomSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rand_t(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

fn weighted(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let (r, c) = g.value(x).shape();
    let w = g.constant(Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(x, w);
    g.sum_all(p)
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> RunConfig {
    RunConfig::load(repo_root().join("configs/desk.conf")).expect("configs/desk.conf")
}

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

// ---- 1 ---------------------------------------------------------------------

fn projector_oracle() -> Verdict {
    let grid = GridSpec::default();
    let rig = ConeBeamGeometry::default();
    let mut worst: f64 = 0.0;
    let (mut checked, mut within) = (0usize, 0usize);
    for p in 0..5u64 {
        let (vol, _) = generate_phantom(&PhantomSpec::random(100 + p, grid)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + p);
        for _ in 0..20 {
            let geom = ConeBeamGeometry {
                beta: rng.random_range(0.0..360.0),
                pitch_angle: rng.random_range(-15.0..15.0),
                roll_angle: rng.random_range(-15.0..15.0),
                ..rig.clone()
            };
            let sampled = render_drr(&vol, &geom, default_step(&vol)).unwrap();
            let exact = render_drr_exact(&vol, &geom).unwrap();
            for (s, e) in sampled.data.iter().zip(&exact.data) {
                let (s, e) = (*s as f64, *e as f64);
                if e > 0.01 {
                    let rel = (s - e).abs() / e;
                    worst = worst.max(rel);
                    checked += 1;
                    within += (rel < 0.01) as usize;
                }
            }
        }
    }
    verdict(
        worst < 0.01,
        format!(
            "max relative error {worst:.4} (bound 0.01); {within}/{checked} pixels within 1%"
        ),
    )
}

// ---- 2 ---------------------------------------------------------------------

type OpBuild = fn(&mut Graph, &[NodeId]) -> NodeId;

struct OpCase {
    name: &'static str,
    /// Input shapes from `(rows, cols, inner)`.
    shapes: fn(usize, usize, usize) -> Vec<(usize, usize)>,
    positive: bool,
    build: OpBuild,
}

fn same(r: usize, c: usize, _: usize) -> Vec<(usize, usize)> {
    vec![(r, c)]
}

fn pair(r: usize, c: usize, _: usize) -> Vec<(usize, usize)> {
    vec![(r, c), (r, c)]
}

fn op_cases() -> Vec<OpCase> {
    fn w(g: &mut Graph, x: NodeId) -> NodeId {
        weighted(g, x, 77)
    }
    vec![
        OpCase { name: "matmul", shapes: |r, c, k| vec![(r, k), (k, c)], positive: false, build: |g, x| { let y = g.matmul(x[0], x[1]); w(g, y) } },
        OpCase { name: "transpose", shapes: same, positive: false, build: |g, x| { let y = g.transpose(x[0]); w(g, y) } },
        OpCase { name: "add", shapes: pair, positive: false, build: |g, x| { let y = g.add(x[0], x[1]); w(g, y) } },
        OpCase { name: "sub", shapes: pair, positive: false, build: |g, x| { let y = g.sub(x[0], x[1]); w(g, y) } },
        OpCase { name: "mul", shapes: pair, positive: false, build: |g, x| { let y = g.mul(x[0], x[1]); w(g, y) } },
        OpCase { name: "add_row", shapes: |r, c, _| vec![(r, c), (1, c)], positive: false, build: |g, x| { let y = g.add_row(x[0], x[1]); w(g, y) } },
        OpCase { name: "mul_scalar", shapes: |r, c, _| vec![(r, c), (1, 1)], positive: false, build: |g, x| { let y = g.mul_scalar(x[0], x[1]); w(g, y) } },
        OpCase { name: "scale", shapes: same, positive: false, build: |g, x| { let y = g.scale(x[0], -1.7); w(g, y) } },
        OpCase { name: "exp", shapes: same, positive: false, build: |g, x| { let y = g.exp(x[0]); w(g, y) } },
        OpCase { name: "log", shapes: same, positive: true, build: |g, x| { let y = g.log(x[0]); w(g, y) } },
        OpCase { name: "sigmoid", shapes: same, positive: false, build: |g, x| { let y = g.sigmoid(x[0]); w(g, y) } },
        OpCase { name: "gelu", shapes: same, positive: false, build: |g, x| { let y = g.gelu(x[0]); w(g, y) } },
        OpCase { name: "square", shapes: same, positive: false, build: |g, x| { let y = g.square(x[0]); w(g, y) } },
        OpCase { name: "clamp", shapes: same, positive: false, build: |g, x| { let y = g.clamp(x[0], -0.5, 0.5); w(g, y) } },
        OpCase { name: "softmax_rows", shapes: same, positive: false, build: |g, x| { let y = g.softmax_rows(x[0]); w(g, y) } },
        OpCase { name: "log_softmax_rows", shapes: same, positive: false, build: |g, x| { let y = g.log_softmax_rows(x[0]); w(g, y) } },
        OpCase { name: "layer_norm_affine", shapes: |r, c, _| vec![(r, c), (1, c), (1, c)], positive: false, build: |g, x| { let y = g.layer_norm(x[0], Some(x[1]), Some(x[2])); w(g, y) } },
        OpCase { name: "layer_norm_plain", shapes: same, positive: false, build: |g, x| { let y = g.layer_norm(x[0], None, None); w(g, y) } },
        OpCase { name: "l2_normalize_rows", shapes: same, positive: false, build: |g, x| { let y = g.l2_normalize_rows(x[0]); w(g, y) } },
        OpCase { name: "concat_rows", shapes: |r, c, k| vec![(r, c), (k, c)], positive: false, build: |g, x| { let y = g.concat_rows(&[x[0], x[1]]); w(g, y) } },
        OpCase { name: "concat_cols", shapes: |r, c, k| vec![(r, c), (r, k)], positive: false, build: |g, x| { let y = g.concat_cols(&[x[0], x[1]]); w(g, y) } },
        OpCase { name: "slice_rows", shapes: same, positive: false, build: |g, x| { let y = g.slice_rows(x[0], 1, 1); w(g, y) } },
        OpCase { name: "slice_cols", shapes: same, positive: false, build: |g, x| { let y = g.slice_cols(x[0], 1, 1); w(g, y) } },
        OpCase { name: "gather_rows", shapes: same, positive: false, build: |g, x| { let y = g.gather_rows(x[0], &[1, 0, 1]); w(g, y) } },
        OpCase { name: "repeat_rows", shapes: |_, c, _| vec![(1, c)], positive: false, build: |g, x| { let y = g.repeat_rows(x[0], 3); w(g, y) } },
        OpCase { name: "mean_rows", shapes: same, positive: false, build: |g, x| { let y = g.mean_rows(x[0]); w(g, y) } },
        OpCase { name: "mean_all", shapes: same, positive: false, build: |g, x| { let y = g.mean_all(x[0]); let s = g.square(y); g.sum_all(s) } },
        OpCase { name: "sum_all", shapes: same, positive: false, build: |g, x| { let y = g.sum_all(x[0]); let s = g.square(y); g.sum_all(s) } },
        OpCase { name: "add_scalars", shapes: |_, _, _| vec![(1, 1), (1, 1), (1, 1)], positive: false, build: |g, x| { let y = g.add_scalars(x); let s = g.square(y); g.mul(s, x[0]) } },
    ]
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let patch = [2usize, 4][rng.random_range(0..2)];
    let heads = [1usize, 2][rng.random_range(0..2)];
    let dim = heads * rng.random_range(2..4);
    ModelConfig {
        image_size: 2 * patch,
        patch_size: patch,
        embed_dim: dim,
        encoder_depth: rng.random_range(0..2),
        num_heads: heads,
        mlp_ratio: rng.random_range(1..3),
        predictor_dim: dim,
        predictor_depth: 1,
        classifier_depth: rng.random_range(0..2),
        action_dim: 1,
    }
}

fn gradient_suite() -> Verdict {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };

    for case in op_cases() {
        for s in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
            let (r, c, k) = (rng.random_range(2..5), rng.random_range(2..6), rng.random_range(1..4));
            let inputs: Vec<Tensor> = (case.shapes)(r, c, k)
                .into_iter()
                .map(|(a, b)| {
                    let t = rand_t(a, b, &mut rng);
                    if case.positive {
                        t.map(|v| 0.5 + v.abs())
                    } else {
                        t
                    }
                })
                .collect();
            note(case.name, grad_check(&inputs, FD_STEP, case.build).max_rel_error);
        }
    }

    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + s);
        let cfg = random_model(&mut rng);
        let store = ParamStore::init(&cfg, s).unwrap();
        let n = cfg.image_size * cfg.image_size;
        let img: Vec<f64> = rand_t(1, n, &mut rng).data;
        let flags: Vec<bool> = (0..cfg.num_tokens()).map(|i| i % 2 == 1).collect();
        let mask = MaskSpec::from_masked(cfg.grid(), cfg.grid(), &flags);
        let angle = rng.random_range(-1.0..1.0);
        let e = param_grad_check(&store, FD_STEP, |g, p| {
            let ctx = encode_image(g, p, &cfg, &img);
            let a = g.constant(Tensor::scalar(angle));
            let z = predict_view(g, p, &cfg, ctx, a);
            let vis = g.gather_rows(ctx, &mask.visible);
            let pm = predict_mask(g, p, &cfg, vis, &mask);
            let prob = classify_domain(g, p, &cfg, z);
            let lp = g.log(prob);
            let pooled = global_avg_pool(g, ctx);
            let a = weighted(g, z, 1);
            let b = weighted(g, pm, 2);
            let c = weighted(g, pooled, 3);
            g.add_scalars(&[a, b, c, lp])
        });
        note("model parameters", e);

        let tokens = rand_t(cfg.num_tokens(), cfg.embed_dim, &mut rng);
        let e = grad_check(&[tokens.clone(), Tensor::scalar(angle)], FD_STEP, |g, x| {
            let p = Params::frozen(&store, "s");
            let h = encode(g, &p, &cfg, x[0]);
            let z = predict_view(g, &p, &cfg, h, x[1]);
            let prob = classify_domain(g, &p, &cfg, x[0]);
            let lp = g.log(prob);
            let a = weighted(g, z, 4);
            g.add(a, lp)
        });
        note("model inputs", e.max_rel_error);
    }

    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + s);
        let (n, d) = (rng.random_range(2..7), rng.random_range(2..6));
        for normalize in [true, false] {
            let a = affinity(&rand_t(n, d, &mut rng), rng.random_range(0.05..1.0), normalize);
            let inputs = [rand_t(n, d, &mut rng), rand_t(n, d, &mut rng), Tensor::scalar(rng.random_range(-2.0..0.0))];
            let e = grad_check(&inputs, FD_STEP, |g, x| {
                let (i, a) = align_nodes_with(g, x[0], x[1], x[2], a.clone(), normalize);
                let a = g.scale(a, 0.4);
                g.add(i, a)
            });
            note("alignment (infonce + affinity)", e.max_rel_error);
        }
        for reduction in [MimReduction::ElementMean, MimReduction::TokenSum] {
            // Targets pass through a stop-gradient, so only predictions vary.
            let inputs = [rand_t(n, d, &mut rng), rand_t(n + 1, d, &mut rng)];
            let targets = [rand_t(n, d, &mut rng), rand_t(n + 1, d, &mut rng)];
            let e = grad_check(&inputs, FD_STEP, |g, x| {
                let t0 = g.constant(targets[0].clone());
                let t1 = g.constant(targets[1].clone());
                mim_stream_node(g, &[(x[0], t0), (x[1], t1)], reduction)
            });
            note("masked modeling", e.max_rel_error);
        }
        let probs: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(rng.random_range(0.05..0.95))).collect();
        let e = grad_check(&probs, FD_STEP, |g, x| cls_node(g, &x[..2], &x[2..]));
        note("domain classifier", e.max_rel_error);
        let inputs = [rand_t(n, d, &mut rng), Tensor::scalar(rng.random_range(0.05..0.95))];
        let target = rand_t(n, d, &mut rng);
        let e = grad_check(&inputs, FD_STEP, |g, x| {
            let t = g.constant(target.clone());
            domain_node(g, &[x[0]], &[t], &[x[1]])
        });
        note("domain adaptation", e.max_rel_error);
        let cfg = LossConfig::default();
        let parts: Vec<Tensor> = (0..5).map(|_| Tensor::scalar(rng.random_range(0.0..3.0))).collect();
        let e = grad_check(&parts, FD_STEP, |g, x| {
            let (align, total) = overall_node(g, &cfg, x[0], x[1], x[2], x[3], x[4]);
            let sq = g.square(total);
            g.add(sq, align)
        });
        note("overall", e.max_rel_error);
    }

    let failed: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < FD_TOL))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    verdict(
        failed.is_empty(),
        format!(
            "{} checks × {INSTANCES} instances, worst relative error {max:.2e}{}",
            worst.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn micro() -> TrainConfig {
    let mut c = TrainConfig::default();
    for kv in [
        "model.image_size=16",
        "model.patch_size=4",
        "model.embed_dim=8",
        "model.encoder_depth=1",
        "model.num_heads=2",
        "model.mlp_ratio=2",
        "model.predictor_dim=8",
        "model.predictor_depth=1",
        "data.grid=16",
        "data.spacing=16",
        "data.detector=16",
        "data.pitch=16",
        "data.n_phantoms=2",
        "data.n_real=2",
        "train.n_views=4",
        "train.batch_size=2",
        "train.epochs=2",
        "train.iters_per_epoch=5",
    ] {
        c.set_override(kv).unwrap();
    }
    c.validate().unwrap();
    c
}

fn loss_identities() -> Verdict {
    let mut problems = Vec::new();
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + s);
        let n = rng.random_range(2..9);
        let p = softmax_rows(&rand_t(n, n, &mut rng), rng.random_range(0.1..2.0));
        if affinity_loss(&Tensor::identity(n), &p) != infonce(&p) {
            problems.push(format!("identity affinity differs from infonce at n = {n}"));
        }
    }
    for n in [2usize, 4, 8] {
        let u = Tensor::filled(n, n, 1.0 / n as f64);
        let err = (infonce(&u) - (n as f64).ln()).abs();
        if !(err < 1e-6) {
            problems.push(format!("uniform infonce off by {err:e} at n = {n}"));
        }
    }
    let mut min_diag: f64 = 1.0;
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
        let t = rand_t(8, 8, &mut rng);
        let a = affinity(&t, 1e-3, true);
        for k in 0..8 {
            min_diag = min_diag.min(a.at(k, k));
        }
    }
    if !(min_diag > 0.99) {
        problems.push(format!("affinity diagonal mass {min_diag}"));
    }

    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    let reports = run(&cfg, &data, &mut st, 10, |_| {}).unwrap();
    let l = &cfg.loss;
    let mut worst: f64 = 0.0;
    for r in &reports {
        let x = &r.loss;
        let align = x.infonce + l.lambda_affinity * x.affinity;
        let total = align + l.lambda_mim * x.mim + l.lambda_domain * x.domain + l.lambda_cls * x.cls;
        worst = worst.max((align - x.align).abs()).max((total - x.total).abs());
    }
    if !(worst < 1e-6) {
        problems.push(format!("decomposition off by {worst:e}"));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("min diagonal affinity {min_diag:.6}, decomposition residual {worst:.1e}")
        } else {
            problems.join("; ")
        },
    )
}

// ---- 4 ---------------------------------------------------------------------

fn stop_gradients() -> Verdict {
    let mut cfg = micro();
    cfg.train.debug_grad_checks = true;
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    let reports = run(&cfg, &data, &mut st, 10, |_| {}).unwrap();
    let bad: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            let n = r.stop_grad.expect("debug norms");
            (!n.all_zero()).then(|| format!("step {}: {n:?}", r.step))
        })
        .collect();
    verdict(
        bad.is_empty() && reports.len() == 10,
        if bad.is_empty() { "10 steps, all blocked gradient norms exactly 0".into() } else { bad.join("; ") },
    )
}

// ---- 5 ---------------------------------------------------------------------

fn determinism() -> Verdict {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let ra = run(&cfg, &data, &mut a, 10, |_| {}).unwrap();
    let rb = run(&cfg, &data, &mut b, 10, |_| {}).unwrap();
    let reruns = ra == rb && a == b;

    let mut part = TrainState::new(&cfg).unwrap();
    run(&cfg, &data, &mut part, 5, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &cfg, &part).unwrap();
    let (cfg2, mut resumed) = load_checkpoint(&path).unwrap();
    let tail = run(&cfg2, &data, &mut resumed, 5, |_| {}).unwrap();
    let resume = cfg2 == cfg && ra[5..] == tail[..] && resumed == a;
    verdict(
        reruns && resume,
        format!("reruns identical: {reruns}; resume at step 5 identical: {resume}"),
    )
}

// ---- 6 ---------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_smoke() -> Verdict {
    let cfg = desk_config();
    let t = &cfg.train;
    let weights = t.loss.lambda_affinity == 0.4 && t.loss.lambda_domain == 0.6;
    let data = Dataset::build(t).unwrap();
    let mut st = TrainState::new(t).unwrap();
    let reports = run(t, &data, &mut st, 200, |_| {}).unwrap();
    let align: Vec<f64> = reports.iter().map(|r| r.loss.align).collect();
    let (first, last) = (mean(&align[..50]), mean(&align[150..]));
    verdict(
        weights && t.data.n_phantoms == 8 && last < first,
        format!(
            "λ_affinity {} λ_domain {} from configs/desk.conf; align first quarter {first:.4}, last quarter {last:.4}",
            t.loss.lambda_affinity, t.loss.lambda_domain
        ),
    )
}

// ---- 7 ---------------------------------------------------------------------

fn fdk_quantitative() -> Verdict {
    let grid = GridSpec::default();
    let rig = ConeBeamGeometry::default();
    let vol = uniform_cylinder(grid, 60.0, 50.0, 0.02).unwrap();
    let geoms = full_circle(&rig, 120);
    let views = ground_truth_views(&vol, &geoms).unwrap();
    let rec = fdk_reconstruct(&views, &geoms, grid).unwrap();
    let (psnr, ssim) = volume_metrics(&vol, &rec, CENTRAL_FRACTION).unwrap();

    let scaled = |k: f32| -> Vec<ProjectionImage> {
        views
            .iter()
            .map(|v| ProjectionImage {
                data: v.data.iter().map(|x| k * x).collect(),
                ..v.clone()
            })
            .collect()
    };
    let linear = [2.0f32, 0.5].iter().all(|&k| {
        let r = fdk_reconstruct(&scaled(k), &geoms, grid).unwrap();
        r.data.iter().zip(&rec.data).all(|(a, b)| *a == k * b)
    });
    let zero = fdk_reconstruct(&scaled(0.0), &geoms, grid).unwrap().data.iter().all(|&v| v == 0.0);
    verdict(
        psnr >= 25.0 && linear && zero,
        format!("central PSNR {psnr:.2} dB (bound 25), SSIM {ssim:.4}; scaling exact: {linear}; zero input exact: {zero}"),
    )
}

// ---- 8, 9 ------------------------------------------------------------------

struct Pretrained {
    on: TrainState,
    off: TrainState,
    cfg: RunConfig,
}

fn pretrain() -> Pretrained {
    let mut cfg = desk_config();
    cfg.set("train.epochs", "40").unwrap();
    let steps = 2000;
    let train = |lambda: Option<&str>| {
        let mut c = cfg.clone();
        if let Some(v) = lambda {
            c.set("loss.lambda_domain", v).unwrap();
        }
        let data = Dataset::build(&c.train).unwrap();
        let mut st = TrainState::new(&c.train).unwrap();
        run(&c.train, &data, &mut st, steps, |_| {}).unwrap();
        st
    };
    Pretrained {
        on: train(None),
        off: train(Some("0")),
        cfg,
    }
}

fn domain_ab(p: &Pretrained) -> Verdict {
    let c = &p.cfg;
    let (sim, real) = domain_images(&c.train.data, c.eval.domain_phantoms, c.eval.domain_seed).unwrap();
    let cos = |st: &TrainState| {
        let m = &c.train.model;
        domain_similarity(&pooled_features(&st.teacher, m, &sim), &pooled_features(&st.teacher, m, &real)).unwrap()
    };
    let (on, on_l2) = cos(&p.on);
    let (off, off_l2) = cos(&p.off);
    verdict(
        on > off,
        format!("cluster-center cosine {on:.4} with the domain term vs {off:.4} without (L2 {on_l2:.4} vs {off_l2:.4})"),
    )
}

fn downstream(p: &Pretrained) -> Verdict {
    let c = &p.cfg;
    let images = eval_images(&c.eval, &c.train.data).unwrap();
    let m = &c.train.model;
    let pretrained = extract_features(&p.on.teacher, m, &images);
    let random = extract_features(&TrainState::new(&c.train).unwrap().teacher, m, &images);
    let probe = |t: &FeatureTable, cfg: &ProbeConfig, mode| probe_over_seeds(t, LabelTask::LesionPresent, cfg, mode).unwrap();
    let a = probe(&pretrained, &c.probe, LabelMode::True).mean_auroc;
    let b = probe(&random, &c.probe, LabelMode::True).mean_auroc;
    let permuted_cfg = ProbeConfig {
        seeds: (0..20).collect(),
        ..c.probe.clone()
    };
    let perm = probe(&pretrained, &permuted_cfg, LabelMode::Permuted).mean_auroc;
    verdict(
        a - b > 0.05 && (perm - 0.5).abs() <= 0.1,
        format!("lesion-present AUROC pretrained {a:.4} vs random init {b:.4} (gap {:.4}, bound 0.05); permuted {perm:.4}", a - b),
    )
}

// ---- 10 --------------------------------------------------------------------

fn codebook() -> Verdict {
    let mut problems = Vec::new();

    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + s);
        let cb = rand_t(rng.random_range(2..40), 6, &mut rng);
        let x = rand_t(30, 6, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let c = g.constant(cb);
        let first = vq_quantize(&mut g, xn, c);
        let again = vq_quantize(&mut g, first.quantized, c);
        if first.indices != again.indices || g.value(first.quantized) != g.value(again.quantized) {
            problems.push(format!("quantization not idempotent on instance {s}"));
        }
    }
    let cb = Tensor::from_vec(3, 2, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]);
    let x = Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
    if nearest_codes(&x, &cb) != vec![0, 0] {
        problems.push("ties do not go to the lowest index".into());
    }

    let ones = codebook_usage(&vec![7; 500], 1024).unwrap() == 1.0 / 1024.0;
    let all: Vec<usize> = (0..2048).rev().collect();
    let full = codebook_usage(&all, 2048).unwrap() == 1.0;
    if !(ones && full) {
        problems.push(format!("usage cases 1/K {ones} full {full}"));
    }

    let cfg = desk_config();
    let model = &cfg.train.model;
    let rig = &cfg.train.data.rig;
    let stack = ParamStore::init(model, 0).unwrap();
    let (vol, _) = generate_phantom(&PhantomSpec::random(cfg.eval.domain_seed, cfg.train.data.grid)).unwrap();
    let ctx = frontal_context(&vol, rig).unwrap();
    let target = render_drr(&vol, &rig.with_beta(30.0), default_step(&vol)).unwrap();
    let one = DecoderSample {
        tokens: latent_tokens(&stack, model, &ctx, 30.0),
        image: target.to_f64(),
    };
    let dec = DecoderConfig {
        batch_size: 1,
        ..cfg.decoder.clone()
    };
    let (_, rep) = train_decoder(model, &dec, &[one], 6000).unwrap();
    let mse = *rep.pixel_mse.last().unwrap();
    if !(mse < 1e-3) {
        problems.push(format!("overfit-one pixel MSE {mse:.2e}"));
    }

    let volumes: Vec<_> = (0..2)
        .map(|i| generate_phantom(&PhantomSpec::random(cfg.eval.domain_seed + 1 + i, cfg.train.data.grid)).unwrap().0)
        .collect();
    let geoms = full_circle(rig, 24);
    let train = decoder_training_set(&stack, model, &volumes, &geoms).unwrap();
    let truth = ground_truth_views(&vol, &geoms).unwrap();
    let data = SweepData {
        stack: &stack,
        model,
        train: &train,
        eval_volume: &vol,
        eval_context: &ctx,
        geoms: &geoms,
        truth: &truth,
    };
    let grid = [(1024, 128), (1024, 256), (2048, 128), (2048, 256)];
    let rows = codebook_sweep(&data, &cfg.decoder, &grid, 20).unwrap();
    let csv = codebook_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let shaped = lines.len() == 5
        && lines[0] == CODEBOOK_CSV_HEADER
        && rows.iter().zip(grid).all(|(r, (k, d))| r.codebook_size == k && r.codebook_dim == d && r.usage > 0.0);
    if !shaped {
        problems.push("sweep CSV malformed".into());
    }
    let out = std::env::temp_dir().join("xwin_codebook_sweep.csv");
    std::fs::write(&out, &csv).unwrap();

    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("overfit-one MSE {mse:.2e}; sweep of {} configs written to {}", rows.len(), out.display())
        } else {
            problems.join("; ")
        },
    )
}

// ---- 11 --------------------------------------------------------------------

fn auroc_metric() -> Verdict {
    let labels = [false, false, true, true];
    let perfect = auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap();
    let reversed = auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
    let tied = auroc(&[0.3; 4], &labels).unwrap();
    let mut invariant = true;
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + s);
        let n = rng.random_range(4..40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) * 0.3 - 1.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let base = auroc(&scores, &y).unwrap();
        let exp: Vec<f64> = scores.iter().map(|v| v.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|v| 3.0 * v + 7.0).collect();
        invariant &= auroc(&exp, &y).unwrap() == base && auroc(&affine, &y).unwrap() == base;
    }
    verdict(
        perfect == 1.0 && reversed == 0.0 && tied == 0.5 && invariant,
        format!("perfect {perfect}, reversed {reversed}, all tied {tied}; exp and affine invariant: {invariant}"),
    )
}

// ---- driver ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("XWIN_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let mut failures = 0;
    let mut report = |n: usize, name: &str, budget: Option<f64>, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let mut v = guarded(f);
        let secs = t0.elapsed().as_secs_f64();
        if let Some(limit) = budget {
            if secs >= limit {
                v.pass = false;
                v.detail.push_str(&format!("; over the {limit:.0} s budget"));
            }
        }
        failures += !v.pass as usize;
        println!(
            "criterion {n:>2} {name}: {} ({}; {secs:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };

    report(1, "projector oracle", Some(60.0), &mut projector_oracle);
    report(2, "gradient suite", None, &mut gradient_suite);
    report(3, "loss identities", None, &mut loss_identities);
    report(4, "stop gradients", None, &mut stop_gradients);
    report(5, "determinism and resume", None, &mut determinism);
    report(6, "training smoke", Some(900.0), &mut training_smoke);
    report(7, "fdk reconstruction", Some(300.0), &mut fdk_quantitative);
    let pre = (wanted(8) || wanted(9)).then(|| catch_unwind(pretrain).ok()).flatten();
    let missing = || verdict(false, "pretraining failed");
    report(8, "domain adaptation a/b", None, &mut || pre.as_ref().map_or_else(missing, domain_ab));
    report(9, "downstream probe", None, &mut || pre.as_ref().map_or_else(missing, downstream));
    report(10, "vq and codebook", None, &mut codebook);
    report(11, "auroc metric", None, &mut auroc_metric);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
