use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use xwin::harness::{
    ablation_csv, ablation_sweep, eval_images, extract_features, few_shot_finetune, probe_over_seeds,
    select_encoder, split_indices, EvalImage, LabelMode, RunConfig,
};
use xwin::io::{load_projection, load_volume, save_projection, save_volume};
use xwin::nn::ParamStore;
use xwin::projector::{pose_from_action, render_drr, to_display, Action, BaseView};
use xwin::recon::{
    decoder_training_set, fdk_reconstruct, frontal_context, full_circle, ground_truth_views, latent_views,
    train_decoder, view_metrics, volume_metrics, ReconRecord, CENTRAL_FRACTION,
};
use xwin::trainer::{
    append_metrics, load_checkpoint, run, save_checkpoint, Dataset, TrainConfig, TrainState,
};
use xwin::volumegen::{generate_phantom, GridSpec, LabelTask, PhantomSpec};
use xwin::{Error, Result};

#[derive(Parser)]
#[command(name = "xwin", version, about = "Chest X-ray world model at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small preset instead of the full defaults.
    #[arg(long)]
    tiny: bool,
    /// Run seed. Sets `train.seed`; for `phantom` and `render` it picks the phantom.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = if self.tiny { RunConfig::tiny() } else { RunConfig::default() };
        if let Some(p) = &self.config {
            c.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for kv in &self.set {
            c.set_override(kv)?;
        }
        if let Some(s) = self.seed {
            c.train.train.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    Frontal,
    Lateral,
}

impl From<Base> for BaseView {
    fn from(b: Base) -> Self {
        match b {
            Base::Frontal => BaseView::Frontal,
            Base::Lateral => BaseView::Lateral,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Source {
    Groundtruth,
    Latent,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom volume and print its labels.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "phantom.xwv")]
        output: PathBuf,
        /// Fixed lesion count instead of a random one.
        #[arg(long)]
        lesions: Option<usize>,
    },
    /// Render views `k·Δφ` for `k = 0..N` away from a base view.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 3.0)]
        delta_phi: f64,
        #[arg(long, value_enum, default_value = "frontal")]
        base: Base,
        /// Volume to render; a generated phantom when absent.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value = "views")]
        out_dir: PathBuf,
        /// Write display-range images instead of line integrals.
        #[arg(long)]
        display: bool,
    },
    /// Pretrain the encoder, predictors and classifier.
    Train {
        #[command(flatten)]
        common: Common,
        /// Steps to run; the full schedule when absent.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "xwin.ckpt")]
        output: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Append per-step losses to this CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Linear probes on the downstream tasks, as JSON lines.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; a randomly initialized encoder when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also report the permuted-label baseline.
        #[arg(long)]
        permuted: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Few-shot fine-tuning of the whole encoder, as JSON lines.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Shots per class; `eval.finetune_k` when absent.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Filtered backprojection from ground-truth or decoded views; metrics
    /// go to stdout as JSON lines.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "groundtruth")]
        source: Source,
        #[arg(long, default_value_t = 120)]
        views: usize,
        #[arg(long, default_value = "recon.xwv")]
        output: PathBuf,
        /// Reference volume; a held-out phantom when absent.
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Pretrained checkpoint, required for latent views.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// PSNR and SSIM between two volumes or two projections.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Train once per value of one config key and write a CSV row per run.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Phantom { common, output, lesions } => phantom(&common, &output, lesions),
        Cmd::Render {
            common,
            views,
            delta_phi,
            base,
            volume,
            out_dir,
            display,
        } => render(&common, views, delta_phi, base.into(), volume.as_deref(), &out_dir, display),
        Cmd::Train {
            common,
            steps,
            output,
            resume,
            metrics,
            log_every,
        } => train(&common, steps, &output, resume.as_deref(), metrics.as_deref(), log_every),
        Cmd::Probe {
            common,
            checkpoint,
            permuted,
            output,
        } => probe(&common, checkpoint.as_deref(), permuted, output.as_deref()),
        Cmd::Finetune {
            common,
            checkpoint,
            k,
            output,
        } => finetune(&common, checkpoint.as_deref(), k, output.as_deref()),
        Cmd::Reconstruct {
            common,
            source,
            views,
            output,
            volume,
            checkpoint,
        } => reconstruct(&common, source, views, &output, volume.as_deref(), checkpoint.as_deref()),
        Cmd::Metrics { common, reference, test } => metrics(&common, &reference, &test),
        Cmd::Ablate {
            common,
            key,
            values,
            steps,
            output,
        } => ablate(&common, &key, &values, steps, output.as_deref()),
    }
}

/// Stdout, or a file when a path is given.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn phantom_seed(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.unwrap_or(cfg.train.data.phantom_seed)
}

fn phantom(common: &Common, output: &Path, lesions: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let seed = phantom_seed(common, &cfg);
    let grid = cfg.train.data.grid;
    let spec = match lesions {
        Some(n) => PhantomSpec::random_with_lesions(seed, grid, n),
        None => PhantomSpec::random(seed, grid),
    };
    let (vol, labels) = generate_phantom(&spec)?;
    save_volume(output, &vol)?;
    println!(
        "{}",
        json!({"seed": seed, "path": output, "dims": vol.dims, "lesions": spec.lesions.len(), "labels": labels})
    );
    Ok(())
}

fn render(
    common: &Common,
    views: usize,
    delta_phi: f64,
    base: BaseView,
    volume: Option<&Path>,
    out_dir: &Path,
    display: bool,
) -> Result<()> {
    let cfg = common.load()?;
    let vol = match volume {
        Some(p) => load_volume(p)?,
        None => generate_phantom(&PhantomSpec::random(phantom_seed(common, &cfg), cfg.train.data.grid))?.0,
    };
    std::fs::create_dir_all(out_dir)?;
    let step = xwin::projector::default_step(&vol);
    for k in 0..views as i32 {
        let action = Action::yaw(k, delta_phi);
        let geom = pose_from_action(base, &action, &cfg.train.data.rig)?;
        let raw = render_drr(&vol, &geom, step)?;
        let img = if display { to_display(&raw) } else { raw };
        let path = out_dir.join(format!("view_{k:03}.xwp"));
        save_projection(&path, &img)?;
        println!("{}", json!({"k": k, "beta": geom.beta, "path": path}));
    }
    Ok(())
}

fn train(
    common: &Common,
    steps: Option<u64>,
    output: &Path,
    resume: Option<&Path>,
    metrics: Option<&Path>,
    log_every: u64,
) -> Result<()> {
    let (cfg, mut state) = match resume {
        Some(p) => {
            let (c, s) = load_checkpoint(p)?;
            log::info!("resuming from {} at step {}", p.display(), s.step);
            (c, s)
        }
        None => {
            let c = common.load()?.train;
            let s = TrainState::new(&c)?;
            (c, s)
        }
    };
    let steps = steps.unwrap_or_else(|| cfg.total_steps().saturating_sub(state.step));
    let data = Dataset::build(&cfg)?;
    let every = log_every.max(1);
    let reports = run(&cfg, &data, &mut state, steps, |r| {
        if (r.step + 1) % every == 0 {
            log::info!(
                "step {} total {:.4} align {:.4} mim {:.4} cls {:.4} domain {:.4} lr {:.2e}",
                r.step + 1,
                r.loss.total,
                r.loss.align,
                r.loss.mim,
                r.loss.cls,
                r.loss.domain,
                r.sched.lr
            );
        }
    })?;
    if let Some(m) = metrics {
        append_metrics(m, &reports)?;
    }
    save_checkpoint(output, &cfg, &state)?;
    log::info!("saved {} at step {}", output.display(), state.step);
    Ok(())
}

/// Encoder for evaluation: the selected encoder of a checkpoint, or a
/// random initialization from the run seed.
fn load_encoder(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(TrainConfig, ParamStore, &'static str)> {
    match checkpoint {
        Some(p) => {
            let (tc, state) = load_checkpoint(p)?;
            let enc = select_encoder(&state, cfg.eval.encoder).clone();
            Ok((tc, enc, "pretrained"))
        }
        None => Ok((
            cfg.train.clone(),
            ParamStore::init(&cfg.train.model, cfg.train.train.seed)?,
            "random_init",
        )),
    }
}

fn probe(common: &Common, checkpoint: Option<&Path>, permuted: bool, output: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let (tc, enc, origin) = load_encoder(&cfg, checkpoint)?;
    let images = eval_images(&cfg.eval, &tc.data)?;
    let table = extract_features(&enc, &tc.model, &images);
    let mut out = sink(output)?;
    for task in LabelTask::ALL {
        let mut modes = vec![LabelMode::True];
        if permuted {
            modes.push(LabelMode::Permuted);
        }
        for mode in modes {
            let mut r = probe_over_seeds(&table, task, &cfg.probe, mode)?;
            r.method = format!("{}:{origin}", r.method);
            writeln!(out, "{}", r.to_json_line())?;
        }
    }
    Ok(())
}

fn finetune(common: &Common, checkpoint: Option<&Path>, k: Option<usize>, output: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let (tc, enc, origin) = load_encoder(&cfg, checkpoint)?;
    let images = eval_images(&cfg.eval, &tc.data)?;
    let labels: Vec<bool> = images.iter().map(|i| i.labels.lesion_present).collect();
    let all: Vec<usize> = (0..images.len()).collect();
    let (a, b) = split_indices(&labels, &all, cfg.train.train.seed, 0.5)?;
    let pick = |s: &[usize]| -> Vec<EvalImage> { s.iter().map(|&i| images[i].clone()).collect() };
    let (pool, test) = (pick(&a), pick(&b));
    let k = k.unwrap_or(cfg.eval.finetune_k);
    let mut out = sink(output)?;
    for task in LabelTask::ALL {
        let mut r = few_shot_finetune(&enc, &tc.model, &pool, &test, task, k, &cfg.finetune)?;
        r.method = format!("{}:{origin}", r.method);
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

fn reconstruct(
    common: &Common,
    source: Source,
    views: usize,
    output: &Path,
    volume: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let cfg = common.load()?;
    let reference = match volume {
        Some(p) => load_volume(p)?,
        None => generate_phantom(&PhantomSpec::random(cfg.eval.domain_seed, cfg.train.data.grid))?.0,
    };
    let grid = GridSpec {
        dims: reference.dims,
        spacing: reference.spacing,
    };
    let mut out = std::io::stdout();
    let name = match source {
        Source::Groundtruth => "groundtruth",
        Source::Latent => "latent",
    };
    let (images, geoms) = match source {
        Source::Groundtruth => {
            let geoms = full_circle(&cfg.train.data.rig, views);
            (ground_truth_views(&reference, &geoms)?, geoms)
        }
        Source::Latent => {
            let ckpt = checkpoint.ok_or_else(|| Error::Config("--source latent needs --checkpoint".into()))?;
            let (tc, state) = load_checkpoint(ckpt)?;
            let geoms = full_circle(&tc.data.rig, views);
            let data = Dataset::build(&tc)?;
            let vols: Vec<_> = data.sim.iter().map(|s| s.volume.clone()).collect();
            let samples = decoder_training_set(&state.student, &tc.model, &vols, &geoms)?;
            log::info!("training decoder on {} latent/image pairs", samples.len());
            let (dec, rep) = train_decoder(&tc.model, &cfg.decoder, &samples, cfg.decoder_steps)?;
            log::info!(
                "decoder pixel mse {:.3e}, {} codebook re-initializations",
                rep.pixel_mse.last().copied().unwrap_or(f64::NAN),
                rep.reinit_events
            );
            let ctx = frontal_context(&reference, &tc.data.rig)?;
            let decoded = latent_views(&state.student, &tc.model, &dec, &cfg.decoder, &ctx, &geoms);
            let step = xwin::projector::default_step(&reference);
            let mut imgs = Vec::with_capacity(decoded.len());
            for ((img, _), g) in decoded.into_iter().zip(&geoms) {
                let truth = render_drr(&reference, g, step)?;
                let (psnr, ssim) = view_metrics(&truth, &img)?;
                let rec = ReconRecord::View { beta: g.beta, psnr, ssim };
                writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                imgs.push(img);
            }
            (imgs, geoms)
        }
    };
    let vol = fdk_reconstruct(&images, &geoms, grid)?;
    save_volume(output, &vol)?;
    let (psnr, ssim) = volume_metrics(&reference, &vol, CENTRAL_FRACTION)?;
    let rec = ReconRecord::Volume {
        psnr,
        ssim,
        views,
        source: name.into(),
    };
    writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    Ok(())
}

fn metrics(common: &Common, reference: &Path, test: &Path) -> Result<()> {
    common.load()?;
    let is_volume = |p: &Path| p.extension().is_some_and(|e| e == "xwv");
    let (psnr, ssim, kind) = if is_volume(reference) && is_volume(test) {
        let (p, s) = volume_metrics(&load_volume(reference)?, &load_volume(test)?, CENTRAL_FRACTION)?;
        (p, s, "volume")
    } else {
        let (p, s) = view_metrics(&load_projection(reference)?, &load_projection(test)?)?;
        (p, s, "projection")
    };
    println!("{}", json!({"kind": kind, "psnr": psnr, "ssim": ssim}));
    Ok(())
}

fn ablate(common: &Common, key: &str, values: &[String], steps: u64, output: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    if values.is_empty() {
        return Err(Error::Config("--values needs at least one value".into()));
    }
    let rows = ablation_sweep(&cfg, key, values, steps, |r| {
        log::info!(
            "{key} = {}: align {:.4} -> {:.4}, domain cosine {:.4}, probe {:.3}",
            r.value,
            r.align_first_quarter,
            r.align_last_quarter,
            r.domain_cosine,
            r.probe_auroc
        );
    })?;
    sink(output)?.write_all(ablation_csv(&rows).as_bytes())?;
    Ok(())
}
