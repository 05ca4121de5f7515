use super::*;
use crate::autograd::Graph;
use crate::error::Error;
use crate::nn::{encode_image, predict_view, ParamStore, Params};
use crate::autograd::Tensor;

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

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_schedule(0, 100, 0.994, 1.0), 0.994);
    assert_eq!(cosine_schedule(100, 100, 0.994, 1.0), 1.0);
    assert!((cosine_schedule(50, 100, 2.0, 4.0) - 3.0).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let v = cosine_schedule(s, 100, 5e-4, 1e-5);
        assert!(v <= prev);
        prev = v;
    }
}

#[test]
fn actions_are_distinct_and_bounded() {
    let t = TrainParams::default();
    let a = sample_actions(&t, 3).unwrap();
    assert_eq!(a.len(), 8);
    let mut ks: Vec<i32> = a.iter().map(|x| x.k).collect();
    ks.sort_unstable();
    ks.dedup();
    assert_eq!(ks.len(), 8);
    assert!(a.iter().all(|x| x.angle().abs() <= 90.0));
    assert_eq!(a, sample_actions(&t, 3).unwrap());
    let all = TrainParams {
        n_views: 61,
        ..t.clone()
    };
    let mut ks: Vec<i32> = sample_actions(&all, 0).unwrap().iter().map(|x| x.k).collect();
    ks.sort_unstable();
    assert_eq!(ks, (-30..=30).collect::<Vec<_>>());
    let too_many = TrainParams { n_views: 62, ..t };
    assert!(sample_actions(&too_many, 0).is_err());
}

#[test]
fn euler_actions_stay_in_range() {
    let t = TrainParams {
        action_mode: ActionMode::Euler3,
        ..Default::default()
    };
    for seed in 0..20 {
        for a in sample_actions(&t, seed).unwrap() {
            assert!(a.pitch.abs() <= 15.0 && a.roll.abs() <= 15.0);
            assert_eq!(action_row(&a, ActionMode::Euler3).cols, 3);
        }
    }
}

#[test]
fn stepwise_contract() {
    let cfg = micro().model;
    let store = ParamStore::init(&cfg, 4).unwrap();
    let img: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut g = Graph::new();
    let p = Params::frozen(&store, "p");
    let ctx = encode_image(&mut g, &p, &cfg, &img);
    let same = stepwise_predict(&mut g, &p, &cfg, ctx, 0, 3.0);
    assert_eq!(same, ctx);
    let one = stepwise_predict(&mut g, &p, &cfg, ctx, 1, 3.0);
    let a = g.constant(Tensor::row(vec![3f64.to_radians()]));
    let direct = predict_view(&mut g, &p, &cfg, ctx, a);
    assert_eq!(g.value(one), g.value(direct));
    let back = stepwise_predict(&mut g, &p, &cfg, ctx, -5, 3.0);
    assert_eq!(g.value(back).shape(), g.value(ctx).shape());
}

#[test]
fn cache_matches_fresh_render_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro();
    cfg.data.n_phantoms = 1;
    cfg.data.cache_dir = dir.path().to_string_lossy().into_owned();
    let first = Dataset::build(&cfg).unwrap();
    let second = Dataset::build(&cfg).unwrap();
    assert_eq!(first.sim[0].views.len(), 91);
    for beta in [-90.0, 0.0, 42.0, 90.0, 180.0] {
        let idx = first.angle_index(beta);
        let fresh = first.render(0, &first.rig.with_beta(first.beta_of(idx))).unwrap();
        assert_eq!(first.view(0, beta), &fresh[..]);
        assert_eq!(second.view(0, beta), &fresh[..]);
    }
}

#[test]
fn runs_are_bit_identical() {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let ra = run(&cfg, &data, &mut a, 3, |_| {}).unwrap();
    let rb = run(&cfg, &data, &mut b, 3, |_| {}).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!(ra.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn resume_reproduces_trajectory() {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut whole = TrainState::new(&cfg).unwrap();
    let full = run(&cfg, &data, &mut whole, 4, |_| {}).unwrap();

    let mut part = TrainState::new(&cfg).unwrap();
    run(&cfg, &data, &mut part, 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &cfg, &part).unwrap();
    let (cfg2, mut resumed) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    let tail = run(&cfg2, &data, &mut resumed, 2, |_| {}).unwrap();
    assert_eq!(&full[2..], &tail[..]);
    assert_eq!(whole, resumed);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    run(&cfg, &data, &mut st, 1, |_| {}).unwrap();
    let bytes = encode_checkpoint(&cfg, &st);
    let (c2, s2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&c2, &s2), bytes);

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let listed: Vec<&str> = text.lines().filter(|l| l.starts_with("tensor student ")).collect();
    assert_eq!(listed.len(), st.student.len());

    let mut short = bytes.clone();
    short.pop();
    assert!(matches!(decode_checkpoint(&short), Err(Error::Checkpoint(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(Error::Checkpoint(_))));
    assert!(decode_checkpoint(b"XWINCKPT2 0 0\n").is_err());
}

#[test]
fn teacher_follows_moving_average() {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    run(&cfg, &data, &mut st, 1, |_| {}).unwrap();
    let before = st.teacher.clone();
    let r = run(&cfg, &data, &mut st, 1, |_| {}).unwrap();
    let m = r[0].sched.momentum;
    for (k, t) in &st.teacher.tensors {
        let prev = before.get(k);
        let s = st.student.get(k);
        for i in 0..t.len() {
            assert_eq!(t.data[i], m * prev.data[i] + (1.0 - m) * s.data[i]);
        }
    }
}

#[test]
fn stop_gradients_hold_in_debug_mode() {
    let mut cfg = micro();
    cfg.train.debug_grad_checks = true;
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    let r = run(&cfg, &data, &mut st, 2, |_| {}).unwrap();
    for x in r {
        assert!(x.stop_grad.unwrap().all_zero());
    }
}

#[test]
fn mim_alone_is_positive_at_init() {
    let mut cfg = micro();
    for k in ["loss.lambda_affinity", "loss.lambda_domain", "loss.lambda_cls"] {
        cfg.set(k, "0").unwrap();
    }
    let data = Dataset::build(&cfg).unwrap();
    let st = TrainState::new(&cfg).unwrap();
    let batch = assemble_batch(&cfg, &data, 0).unwrap();
    let mut g = Graph::new();
    let n = forward(&mut g, &cfg, &st.student, &st.teacher, &batch, false);
    let rep = n.report(&g);
    assert!(rep.mim > 0.0);
}

#[test]
fn non_finite_parameters_abort_with_batch() {
    let cfg = micro();
    let data = Dataset::build(&cfg).unwrap();
    let mut st = TrainState::new(&cfg).unwrap();
    st.student.get_mut("encoder.norm.gamma").data[0] = f64::NAN;
    let e = run(&cfg, &data, &mut st, 1, |_| {}).unwrap_err();
    match e {
        Error::NonFinite(m) => assert!(m.contains("volume"), "{m}"),
        other => panic!("{other}"),
    }
}

#[test]
fn all_action_modes_train() {
    for mode in ["stepwise_yaw", "euler3"] {
        let mut cfg = micro();
        cfg.set("train.action_mode", mode).unwrap();
        cfg.set("train.delta_phi", "30").unwrap();
        cfg.set("train.batch_size", "1").unwrap();
        let data = Dataset::build(&cfg).unwrap();
        let mut st = TrainState::new(&cfg).unwrap();
        let r = run(&cfg, &data, &mut st, 1, |_| {}).unwrap();
        assert!(r[0].loss.is_finite(), "{mode}");
    }
}

#[test]
fn metrics_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let r = StepReport {
        step: 3,
        loss: Default::default(),
        sched: Schedules {
            lr: 1e-4,
            weight_decay: 0.1,
            momentum: 0.99,
        },
        stop_grad: None,
    };
    append_metrics(&path, &[r]).unwrap();
    append_metrics(&path, &[r]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1].split(',').count(), 10);
}

#[test]
fn volumes_cycle_through_permutations() {
    let mut seen = vec![0; 5];
    for step in 0..5 {
        for slot in 0..2 {
            seen[volume_for_slot(9, step, 2, 5, slot)] += 1;
        }
    }
    assert_eq!(seen, vec![2; 5]);
}
