use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::ParamStore;

fn micro() -> RunConfig {
    let mut c = RunConfig::tiny();
    for kv in [
        "model.image_size=16",
        "model.patch_size=4",
        "model.embed_dim=8",
        "model.encoder_depth=1",
        "model.num_heads=2",
        "model.predictor_dim=8",
        "data.grid=16",
        "data.spacing=16",
        "data.detector=16",
        "data.pitch=16",
        "eval.n_per_class=12",
    ] {
        c.set_override(kv).unwrap();
    }
    c.validate().unwrap();
    c
}

#[test]
fn auroc_constructed_cases() {
    let labels = [false, false, true, true];
    assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
    assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
    // Two pairs won, one tied, one lost.
    assert_eq!(auroc(&[0.1, 0.3, 0.3, 0.2], &labels).unwrap(), 0.625);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(auroc(&[0.1], &[true, false]).is_err());
    assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn auroc_in_unit_interval_and_rank_invariant(
        pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| (p.0 * 4.0).round() / 4.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let aff: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        prop_assert_eq!(auroc(&e, &labels).unwrap(), a);
        prop_assert_eq!(auroc(&aff, &labels).unwrap(), a);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn domain_similarity_cases() {
    let a = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
    let (c, d) = domain_similarity(&a, &a).unwrap();
    assert!((c - 1.0).abs() < 1e-12 && d == 0.0);
    let x = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
    let y = vec![vec![0.0, 2.0]];
    let (c, d) = domain_similarity(&x, &y).unwrap();
    assert_eq!(c, 0.0);
    assert!((d - 8f64.sqrt()).abs() < 1e-12);
    assert!(domain_similarity(&[], &y).is_err());
    assert!(domain_similarity(&[vec![0.0, 0.0]], &y).is_err());
}

fn random_image(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn patch_correspondence_on_itself_peaks_at_the_landmark() {
    let cfg = micro();
    let m = &cfg.train.model;
    let enc = ParamStore::init(m, 3).unwrap();
    let img = random_image(m.image_size, 9);
    for landmark in 0..m.num_tokens() {
        let h = patch_correspondence(&enc, m, &img, &img, landmark).unwrap();
        assert_eq!(h.grid, m.grid());
        assert_eq!(h.values.len(), m.grid() * m.grid());
        assert_eq!(h.argmax(), landmark);
        assert!(h.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let other = random_image(m.image_size, 10);
    let h = patch_correspondence(&enc, m, &img, &other, 0).unwrap();
    assert!(h.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(patch_correspondence(&enc, m, &img, &img, m.num_tokens()).is_err());
}

#[test]
fn features_match_images() {
    let cfg = micro();
    let m = &cfg.train.model;
    let enc = ParamStore::init(m, 1).unwrap();
    let img = random_image(m.image_size, 4);
    let images: Vec<EvalImage> = (0..3)
        .map(|i| EvalImage {
            id: i,
            labels: crate::volumegen::LabelSet {
                lesion_present: i > 0,
                multiple_lesions: false,
                largest_on_left: false,
            },
            pixels: if i < 2 { img.clone() } else { random_image(m.image_size, 5) },
        })
        .collect();
    let t = extract_features(&enc, m, &images);
    assert_eq!(t.len(), 3);
    assert!(t.features.iter().all(|f| f.len() == m.embed_dim));
    assert_eq!(t.features[0], t.features[1]);
    assert_ne!(t.features[0], t.features[2]);
    assert!(check_disjoint(&t.select(&[0]), &t.select(&[1, 2])).is_ok());
    assert!(check_disjoint(&t.select(&[0, 1]), &t.select(&[1])).is_err());
}

fn toy_table(n: usize, d: usize, separable: bool, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = FeatureTable {
        dim: d,
        ..Default::default()
    };
    for i in 0..n {
        let y = i % 2 == 1;
        let mut f: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        if separable {
            f[0] = if y { 1.0 + f[0] } else { -1.0 + f[0] };
        }
        t.features.push(f);
        t.labels.push(crate::volumegen::LabelSet {
            lesion_present: y,
            multiple_lesions: false,
            largest_on_left: false,
        });
        t.ids.push(i as u64);
    }
    t
}

#[test]
fn separable_probe_is_perfect_and_deterministic() {
    let t = toy_table(60, 4, true, 1);
    let cfg = ProbeConfig::default();
    let r = probe_over_seeds(&t, LabelTask::LesionPresent, &cfg, LabelMode::True).unwrap();
    assert_eq!(r.auroc, vec![1.0; 5]);
    assert_eq!(r.seeds, vec![0, 1, 2, 3, 4]);
    let again = probe_over_seeds(&t, LabelTask::LesionPresent, &cfg, LabelMode::True).unwrap();
    assert_eq!(r, again);
    let line = r.to_json_line();
    assert!(line.starts_with("{\"task\":\"lesion_present\",\"method\":\"linear_probe\""));
}

#[test]
fn permuted_probe_is_at_chance() {
    let t = toy_table(200, 8, true, 2);
    let cfg = ProbeConfig {
        seeds: (0..20).collect(),
        ..Default::default()
    };
    let r = probe_over_seeds(&t, LabelTask::LesionPresent, &cfg, LabelMode::Permuted).unwrap();
    assert_eq!(r.auroc.len(), 20);
    assert!((r.mean_auroc - 0.5).abs() <= 0.1, "{}", r.mean_auroc);
}

#[test]
fn logistic_fit_converges_and_stops_on_tolerance() {
    let t = toy_table(40, 3, false, 3);
    let y = t.task_labels(LabelTask::LesionPresent);
    let cfg = ProbeConfig::default();
    let m = fit_logistic(&t.features, &y, &cfg).unwrap();
    assert!(m.iterations < cfg.max_iter);
    assert!(m.loss <= std::f64::consts::LN_2 + 1e-12);
    let capped = fit_logistic(&t.features, &y, &ProbeConfig { max_iter: 3, ..cfg }).unwrap();
    assert_eq!(capped.iterations, 3);
}

#[test]
fn splits_are_stratified_and_disjoint() {
    let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
    let idx: Vec<usize> = (0..30).collect();
    let (a, b) = split_indices(&labels, &idx, 7, 0.5).unwrap();
    assert_eq!(a.len() + b.len(), 30);
    assert!(a.iter().all(|i| !b.contains(i)));
    assert_eq!(a.iter().filter(|&&i| labels[i]).count(), 5);
    let shots = stratified_shots(&labels, 4, 1).unwrap();
    assert_eq!(shots.iter().filter(|&&i| labels[i]).count(), 4);
    assert_eq!(shots.iter().filter(|&&i| !labels[i]).count(), 4);
    assert!(stratified_shots(&labels, 11, 1).is_err());
}

#[test]
fn laterality_uses_lesion_images_only() {
    let cfg = micro();
    let imgs = eval_images(&cfg.eval, &cfg.train.data).unwrap();
    assert_eq!(imgs.len(), 24);
    let present = imgs.iter().filter(|i| i.labels.lesion_present).count();
    assert_eq!(present, 12);
    let labels: Vec<_> = imgs.iter().map(|i| i.labels).collect();
    assert_eq!(task_indices(&labels, LabelTask::Laterality).len(), 12);
    assert_eq!(task_indices(&labels, LabelTask::MultipleLesions).len(), 24);
}

#[test]
fn probing_and_finetuning_leave_the_encoder_alone() {
    let cfg = micro();
    let m = &cfg.train.model;
    let enc = ParamStore::init(m, 4).unwrap();
    let before = enc.fingerprint();
    let imgs = eval_images(&cfg.eval, &cfg.train.data).unwrap();
    let table = extract_features(&enc, m, &imgs);
    let r = probe_over_seeds(&table, LabelTask::LesionPresent, &cfg.probe, LabelMode::True).unwrap();
    assert!(r.auroc.iter().all(|a| (0.0..=1.0).contains(a)));

    let (pool, test) = imgs.split_at(12);
    let ft = FinetuneConfig {
        steps: 2,
        ..Default::default()
    };
    let rep = few_shot_finetune(&enc, m, pool, test, LabelTask::LesionPresent, 3, &ft).unwrap();
    assert_eq!(rep.auroc.len(), 5);
    assert_eq!(rep.seeds.len(), 5);
    assert_eq!(rep.k, Some(3));
    assert!(few_shot_finetune(&enc, m, pool, test, LabelTask::LesionPresent, 7, &ft).is_err());
    assert_eq!(enc.fingerprint(), before);
}

#[test]
fn domain_images_pair_up() {
    let cfg = micro();
    let (sim, real) = domain_images(&cfg.train.data, 2, 3000).unwrap();
    assert_eq!((sim.len(), real.len()), (4, 4));
    assert_ne!(sim[0], real[0]);
}

#[test]
fn run_config_round_trips_and_rejects_overlaps() {
    let mut c = micro();
    c.set("probe.n_seeds", "3").unwrap();
    c.set("decoder.steps", "17").unwrap();
    c.set("eval.encoder", "student").unwrap();
    let mut back = RunConfig::default();
    back.apply_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert!(c.set("eval.encoder", "other").is_err());
    assert!(c.set("nope.key", "1").is_err());
    let mut bad = micro();
    bad.set("eval.seed", "1001").unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn quarter_means_and_csv() {
    let v: Vec<f64> = (1..=8).map(f64::from).collect();
    assert_eq!(quarter_means(&v), (1.5, 7.5));
    assert_eq!(quarter_means(&[2.0]), (2.0, 2.0));
    let row = AblationRow {
        key: "loss.lambda_domain".into(),
        value: "0.6".into(),
        steps: 10,
        align_first_quarter: 2.0,
        align_last_quarter: 1.5,
        loss_total_last_quarter: 3.0,
        domain_cosine: 0.9,
        domain_l2: 0.5,
        probe_auroc: 0.7,
    };
    let csv = ablation_csv(&[row]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_CSV_HEADER);
    assert_eq!(lines[1], "loss.lambda_domain,0.6,10,2,1.5,3,0.9,0.5,0.7");
}

#[test]
fn tiny_sweep_runs() {
    let mut cfg = micro();
    cfg.set("data.n_phantoms", "2").unwrap();
    cfg.set("data.n_real", "2").unwrap();
    cfg.set("train.n_views", "4").unwrap();
    cfg.set("train.batch_size", "1").unwrap();
    cfg.set("eval.domain_phantoms", "2").unwrap();
    cfg.set("probe.n_seeds", "1").unwrap();
    let rows = ablation_sweep(&cfg, "loss.lambda_domain", &["0".into(), "0.6".into()], 2, |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.domain_cosine.is_finite() && (0.0..=1.0).contains(&r.probe_auroc)));
}
