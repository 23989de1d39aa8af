//! `bimot`: the full pipeline behind one binary.
//!
//! Subcommands cover corpus generation, VAE / stage / evaluator training,
//! text-to-motion sampling, captioning, motion prediction, the metric
//! table, SVG chart rendering, and a VAE reconstruction report. Every
//! subcommand honors `--seed`; human-readable results go to stdout and
//! machine artifacts to files under the data root. Exit codes: 0 success,
//! 1 contract error, 2 configuration/argument error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use bimot_core::config::Config;
use bimot_core::corpus::{self, CorpusStats};
use bimot_core::error::{Error, ErrorKind, Result};
use bimot_core::evalsuite::{
    cfg_fid_sweep, eval_m2t, eval_t2m, generate_caption, generate_motion_clip,
    generate_prediction, train_evaluator, write_metrics_csv, write_svg_chart, EvaluatorEmbedder,
    MetricRow, Series,
};
use bimot_core::train::{run_stage, Model};
use bimot_core::vae::{decode_to_motion, motion_tensor, per_class_mse, train_vae, MotionVae};

// ── Argument surface ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "bimot",
    version,
    about = "Desk-scale bimodal motion-language model",
    propagate_version = true
)]
struct Cli {
    /// Data root holding corpus/, checkpoints/, reports/, and runs/.
    #[arg(long, global = true, env = "BIMOT_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// JSON model/training config; omitted fields keep built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed (default: the config's seed for the subcommand).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic motion-caption corpus.
    GenData {
        /// Total records across the train/val/test splits.
        #[arg(long, default_value_t = 1000)]
        records: usize,
    },
    /// Train the motion VAE on the corpus train split.
    TrainVae,
    /// Train one backbone stage (0 = text-only pretrain, then 1 → 2 → 3).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        stage: u8,
    },
    /// Train the contrastive text-motion evaluator used by `eval`.
    TrainEvaluator,
    /// Sample a motion clip from a caption.
    Sample {
        /// Caption text, e.g. "a person walks forward slowly".
        caption: String,
        /// Diffusion sampling steps (default: the config's sample_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance weight ω.
        #[arg(long)]
        cfg_omega: Option<f64>,
        /// Clip length in frames.
        #[arg(long, default_value_t = 48)]
        frames: usize,
        /// Append <som> instead of requiring the model to emit it.
        #[arg(long)]
        force_som: bool,
        /// Model checkpoint (default: newest stage checkpoint).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output clip file (corpus JSONL record minus class/params).
        #[arg(long, default_value = "clip.jsonl")]
        out: PathBuf,
    },
    /// Caption the clip(s) in a JSONL file, one caption per line.
    Caption {
        clip: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Predict a full clip from the first half of the input clip.
    Predict {
        clip: PathBuf,
        #[arg(long)]
        cfg_omega: Option<f64>,
        #[arg(long)]
        force_som: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "predicted.jsonl")]
        out: PathBuf,
    },
    /// Score the model on a split and write the metric table.
    Eval {
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        cfg_omega: Option<f64>,
        /// Repetitions behind each mean ± CI (default: the config's reps).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        force_som: bool,
        /// Also sweep guidance ω ∈ {1, 3, 5, 10} and report FID per ω.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Metrics CSV path (default: reports/metrics_<split>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV (first column = x) to an SVG line chart.
    Plot {
        csv: PathBuf,
        /// Output SVG path (default: the CSV path with .svg).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// VAE reconstruction report: val MSE, per-class MSE, per-joint L2.
    VaeReport {
        #[arg(long, default_value = "val")]
        split: String,
        /// Report CSV path (default: reports/vae_report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ── Plumbing ─────────────────────────────────────────────────────────────

/// One generated or corpus clip on disk; corpus records parse into this by
/// ignoring their extra fields, so tools compose.
#[derive(serde::Serialize, serde::Deserialize)]
struct ClipRecord {
    id: String,
    caption: String,
    fps: u32,
    motion: Vec<Vec<f64>>,
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    config_path: String,
    data_dir: String,
    seed: u64,
    version: String,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: Option<u64>,
}

struct Env {
    data_dir: PathBuf,
    cfg: Config,
    config_path: String,
    seed: Option<u64>,
}

impl Env {
    fn corpus_dir(&self) -> PathBuf {
        self.data_dir.join("corpus")
    }
    fn ckpt(&self, name: &str) -> PathBuf {
        self.data_dir.join("checkpoints").join(name)
    }
    fn report(&self, name: &str) -> PathBuf {
        self.data_dir.join("reports").join(name)
    }
    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }

    /// Write the manifest before the work starts; returns its path so the
    /// finish time can be stamped on success.
    fn manifest(&self, command: &str, seed: u64, outputs: &[&Path]) -> Result<(PathBuf, RunManifest)> {
        let started =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let m = RunManifest {
            command: command.to_string(),
            config_path: self.config_path.clone(),
            data_dir: self.data_dir.display().to_string(),
            seed,
            version: format!("bimot-v{}", env!("CARGO_PKG_VERSION")),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: started,
            finished_unix: None,
        };
        let dir = self.data_dir.join("runs");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{command}-{started}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
        Ok((path, m))
    }
}

fn finish_manifest(path: &Path, mut m: RunManifest) -> Result<()> {
    m.finished_unix =
        Some(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
    std::fs::write(path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(Config, String)> {
    match path {
        None => Ok((Config::default(), "builtin-defaults".to_string())),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg: Config = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("bad config {}: {e}", p.display())))?;
            Ok((cfg, p.display().to_string()))
        }
    }
}

/// Friendly existence check producing an actionable config error.
fn need(path: PathBuf, what: &str, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::config(format!("no {what} at {}; run `{hint}` first", path.display())))
    }
}

fn resolve_model(env: &Env, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return need(p.to_path_buf(), "model checkpoint", "bimot train --stage 1");
    }
    for stage in (1..=3u8).rev() {
        let p = env.ckpt(&format!("stage{stage}.bin"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::config(format!(
        "no stage checkpoint under {}; run `bimot train --stage 0` through `--stage 2` first",
        env.data_dir.join("checkpoints").display()
    )))
}

fn load_split_checked(env: &Env, split: &str) -> Result<Vec<corpus::CorpusRecord>> {
    if !["train", "val", "test"].contains(&split) {
        return Err(Error::config(format!(
            "unknown split {split:?}: expected train, val, or test"
        )));
    }
    need(env.corpus_dir().join(format!("{split}.jsonl")), "corpus split", "bimot gen-data")?;
    corpus::load_split(&env.corpus_dir(), split)
}

fn read_clips(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read clip file {}: {e}", path.display())))?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(line).map_err(|e| {
            Error::config(format!("bad clip record on line {} of {}: {e}", i + 1, path.display()))
        })?;
        clips.push(rec);
    }
    if clips.is_empty() {
        return Err(Error::config(format!("{} holds no clip records", path.display())));
    }
    Ok(clips)
}

fn write_clip(path: &Path, clip: &ClipRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, format!("{}\n", serde_json::to_string(clip)?))?;
    Ok(())
}

fn print_rows(rows: &[MetricRow]) {
    for r in rows {
        if r.n_rep > 1 {
            println!("  {:<14} {:>10.4} ± {:.4}  (n={})", r.metric, r.value, r.ci95, r.n_rep);
        } else {
            println!("  {:<14} {:>10.4}", r.metric, r.value);
        }
    }
}

// ── Subcommands ──────────────────────────────────────────────────────────

fn cmd_gen_data(env: &Env, records: usize) -> Result<()> {
    let seed = env.seed_or(env.cfg.train.seed);
    let dir = env.corpus_dir();
    let (mpath, m) = env.manifest("gen-data", seed, &[&dir])?;
    let summary = corpus::generate_corpus(&dir, records, seed)?;
    println!(
        "corpus at {}: {} train / {} val / {} test records, {} vocabulary words",
        dir.display(),
        summary.n_train,
        summary.n_val,
        summary.n_test,
        summary.vocab_size
    );
    finish_manifest(&mpath, m)
}

fn cmd_train_vae(env: &Env) -> Result<()> {
    let seed = env.seed_or(env.cfg.train.seed);
    need(env.corpus_dir().join("train.jsonl"), "corpus", "bimot gen-data")?;
    let out = env.ckpt("vae.bin");
    std::fs::create_dir_all(out.parent().unwrap())?;
    let (mpath, m) = env.manifest("train-vae", seed, &[&out])?;
    let report = train_vae::<f32>(&env.corpus_dir(), &out, &env.cfg.vae, seed, true)?;
    println!(
        "vae: {} steps, final loss {:.4}, val mse {:.4} -> {}",
        report.steps,
        report.final_loss,
        report.val_mse,
        out.display()
    );
    finish_manifest(&mpath, m)
}

fn cmd_train(env: &Env, stage: u8) -> Result<()> {
    let mut cfg = env.cfg.clone();
    cfg.train.seed = env.seed_or(cfg.train.seed);
    need(env.corpus_dir().join("train.jsonl"), "corpus", "bimot gen-data")?;
    let vae = env.ckpt("vae.bin");
    let vae_path = vae.exists().then_some(vae.as_path());
    let prev = env.ckpt(&format!("stage{}.bin", stage.wrapping_sub(1)));
    let prev_path = (stage > 0 && prev.exists()).then_some(prev.as_path());
    let out = env.ckpt(&format!("stage{stage}.bin"));
    std::fs::create_dir_all(out.parent().unwrap())?;
    let metrics = env.report(&format!("stage{stage}_metrics.csv"));
    let (mpath, m) = env.manifest(&format!("train-stage{stage}"), cfg.train.seed, &[&out, &metrics])?;
    let report = run_stage::<f32>(
        stage,
        &env.corpus_dir(),
        vae_path,
        prev_path,
        &out,
        &metrics,
        &cfg,
        true,
    )?;
    println!(
        "stage {}: {} steps, final loss {:.4}, best val {:.4} -> {}",
        report.stage,
        report.steps,
        report.final_loss,
        report.best_val,
        out.display()
    );
    finish_manifest(&mpath, m)
}

fn cmd_train_evaluator(env: &Env) -> Result<()> {
    let seed = env.seed_or(env.cfg.eval.seed);
    need(env.corpus_dir().join("train.jsonl"), "corpus", "bimot gen-data")?;
    let out = env.ckpt("evaluator.bin");
    std::fs::create_dir_all(out.parent().unwrap())?;
    let (mpath, m) = env.manifest("train-evaluator", seed, &[&out])?;
    let report = train_evaluator::<f32>(&env.corpus_dir(), &out, &env.cfg.eval, seed, true)?;
    println!(
        "evaluator: {} steps, final loss {:.4}, val margin {:.3} -> {}",
        report.steps,
        report.final_loss,
        report.margin,
        out.display()
    );
    finish_manifest(&mpath, m)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    env: &Env,
    caption: &str,
    steps: Option<usize>,
    omega: Option<f64>,
    frames: usize,
    force_som: bool,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let seed = env.seed_or(env.cfg.train.seed);
    let (vae, stats) =
        MotionVae::<f32>::load(&need(env.ckpt("vae.bin"), "VAE checkpoint", "bimot train-vae")?)?;
    if !(vae.cfg.min_frames..=vae.cfg.max_frames).contains(&frames) {
        return Err(Error::config(format!(
            "--frames {frames} outside the supported range [{}, {}]",
            vae.cfg.min_frames, vae.cfg.max_frames
        )));
    }
    let (mut model, _) = Model::<f32>::load(&resolve_model(env, model)?)?;
    if let Some(s) = steps {
        if s == 0 {
            return Err(Error::config("--steps must be positive".to_string()));
        }
        model.head.cfg.sample_steps = s;
    }
    let omega = omega.unwrap_or(env.cfg.diffusion.guidance);
    let motion =
        generate_motion_clip(&model, &vae, &stats, caption, frames, omega, seed, force_som)?;
    let clip = ClipRecord {
        id: format!("sample-{seed}"),
        caption: caption.to_string(),
        fps: corpus::FPS,
        motion,
    };
    write_clip(out, &clip)?;
    println!("wrote {} ({} frames, omega {omega}, seed {seed})", out.display(), frames);
    Ok(())
}

fn cmd_caption(env: &Env, clip_path: &Path, model: Option<&Path>) -> Result<()> {
    let (vae, stats) =
        MotionVae::<f32>::load(&need(env.ckpt("vae.bin"), "VAE checkpoint", "bimot train-vae")?)?;
    let (model, _) = Model::<f32>::load(&resolve_model(env, model)?)?;
    for clip in read_clips(clip_path)? {
        println!("{}", generate_caption(&model, &vae, &stats, &clip.motion)?);
    }
    Ok(())
}

fn cmd_predict(
    env: &Env,
    clip_path: &Path,
    omega: Option<f64>,
    force_som: bool,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let seed = env.seed_or(env.cfg.train.seed);
    let (vae, stats) =
        MotionVae::<f32>::load(&need(env.ckpt("vae.bin"), "VAE checkpoint", "bimot train-vae")?)?;
    let (model, _) = Model::<f32>::load(&resolve_model(env, model)?)?;
    let omega = omega.unwrap_or(env.cfg.diffusion.guidance);
    let input = &read_clips(clip_path)?[0];
    let motion =
        generate_prediction(&model, &vae, &stats, &input.motion, omega, seed, force_som)?;
    let clip = ClipRecord {
        id: format!("{}-predicted", input.id),
        caption: input.caption.clone(),
        fps: input.fps,
        motion,
    };
    write_clip(out, &clip)?;
    println!("wrote {} ({} frames from a {}-frame prefix)", out.display(), clip.motion.len(), input.motion.len() / 2);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    env: &Env,
    split: &str,
    omega: Option<f64>,
    reps: Option<usize>,
    force_som: bool,
    sweep: bool,
    model: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let seed = env.seed_or(env.cfg.eval.seed);
    let records = load_split_checked(env, split)?;
    let (vae, stats) =
        MotionVae::<f32>::load(&need(env.ckpt("vae.bin"), "VAE checkpoint", "bimot train-vae")?)?;
    let evaluator = EvaluatorEmbedder::<f32>::load(&need(
        env.ckpt("evaluator.bin"),
        "trained evaluator",
        "bimot train-evaluator",
    )?)?;
    let model_path = resolve_model(env, model)?;
    let (model, stage) = Model::<f32>::load(&model_path)?;
    let omega = omega.unwrap_or(env.cfg.diffusion.guidance);
    let reps = reps.unwrap_or(env.cfg.eval.reps);
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| env.report(&format!("metrics_{split}.csv")));
    let (mpath, m) = env.manifest("eval", seed, &[&out])?;

    println!(
        "evaluating {} (stage {stage}) on {} {split} records, omega {omega}, {reps} reps",
        model_path.display(),
        records.len()
    );
    let t2m = eval_t2m(
        &model, &vae, &stats, &evaluator, &records, &env.cfg.eval, omega, seed, reps, force_som,
    )?;
    let m2t = eval_m2t(&model, &vae, &stats, &records)?;
    let mut rows = t2m.rows;
    rows.extend(m2t.rows);

    if sweep {
        let omegas = [1.0, 3.0, 5.0, 10.0];
        let sw = cfg_fid_sweep(
            &model, &vae, &stats, &evaluator, &records, &omegas, seed, records.len(), force_som,
        )?;
        for (w, f) in sw {
            rows.push(MetricRow::from_reps(format!("FID@omega={w}"), &[f]));
        }
    }

    write_metrics_csv(&out, &rows)?;
    println!("text-to-motion / captioning metrics ({split}):");
    print_rows(&rows);
    println!("table -> {}", out.display());
    finish_manifest(&mpath, m)
}

fn cmd_plot(csv: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(csv)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", csv.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::config("the CSV is empty".to_string()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 {
        return Err(Error::config("the CSV needs an x column plus at least one series".to_string()));
    }
    let mut series: Vec<Series> = cols[1..]
        .iter()
        .map(|c| Series { name: c.to_string(), points: Vec::new() })
        .collect();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::config(format!(
                "row {} has {} cells, expected {}",
                i + 2,
                cells.len(),
                cols.len()
            )));
        }
        let x: f64 = cells[0].parse().map_err(|_| {
            Error::config(format!("row {}: x value {:?} is not numeric", i + 2, cells[0]))
        })?;
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            if cell.is_empty() {
                continue;
            }
            let y: f64 = cell.parse().map_err(|_| {
                Error::config(format!("row {}: value {cell:?} is not numeric", i + 2))
            })?;
            s.points.push((x, y));
        }
    }
    series.retain(|s| !s.points.is_empty());
    if series.is_empty() {
        return Err(Error::config("the CSV holds no numeric series to chart".to_string()));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| csv.with_extension("svg"));
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_svg_chart(&out, &title, &series)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_vae_report(env: &Env, split: &str, out: Option<&Path>) -> Result<()> {
    let records = load_split_checked(env, split)?;
    let (vae, stats) =
        MotionVae::<f32>::load(&need(env.ckpt("vae.bin"), "VAE checkpoint", "bimot train-vae")?)?;

    // Overall + per-class MSE in standardized units, then per-joint mean L2
    // in raw units so the numbers mean something physically.
    let mse = bimot_core::vae::reconstruction_mse(&vae, &stats, &records)?;
    let per_class = per_class_mse(&vae, &stats, &records)?;
    let joints = ["root", "left_hand", "right_hand", "left_foot", "right_foot"];
    let mut joint_sum = vec![0.0f64; joints.len()];
    let mut frames_total = 0usize;
    for r in &records {
        let x = motion_tensor::<f32>(r, &stats);
        let (mu, _) = bimot_core::tensor::no_grad(|| vae.encode(&x))?;
        let recon = decode_to_motion(&vae, &stats, &mu, r.frames())?;
        for (rf, tf) in recon.iter().zip(&r.motion) {
            for (j, s) in joint_sum.iter_mut().enumerate() {
                let d2: f64 =
                    (0..3).map(|k| (rf[j * 3 + k] - tf[j * 3 + k]).powi(2)).sum();
                *s += d2.sqrt();
            }
        }
        frames_total += r.frames();
    }

    let mut rows = vec![MetricRow::from_reps(format!("mse_{split}"), &[mse])];
    for (class, m, n) in &per_class {
        rows.push(MetricRow { metric: format!("mse_{class}"), value: *m, ci95: 0.0, n_rep: *n });
    }
    for (j, name) in joints.iter().enumerate() {
        rows.push(MetricRow::from_reps(
            format!("l2_raw_{name}"),
            &[joint_sum[j] / frames_total.max(1) as f64],
        ));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| env.report("vae_report.csv"));
    write_metrics_csv(&out, &rows)?;
    println!("vae reconstruction on {split} ({} records):", records.len());
    print_rows(&rows);
    println!("table -> {}", out.display());
    Ok(())
}

// ── Dispatch ─────────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<()> {
    let (cfg, config_path) = load_config(cli.config.as_deref())?;
    let env = Env { data_dir: cli.data_dir, cfg, config_path, seed: cli.seed };
    match cli.cmd {
        Cmd::GenData { records } => cmd_gen_data(&env, records),
        Cmd::TrainVae => cmd_train_vae(&env),
        Cmd::Train { stage } => cmd_train(&env, stage),
        Cmd::TrainEvaluator => cmd_train_evaluator(&env),
        Cmd::Sample { caption, steps, cfg_omega, frames, force_som, model, out } => cmd_sample(
            &env,
            &caption,
            steps,
            cfg_omega,
            frames,
            force_som,
            model.as_deref(),
            &out,
        ),
        Cmd::Caption { clip, model } => cmd_caption(&env, &clip, model.as_deref()),
        Cmd::Predict { clip, cfg_omega, force_som, model, out } => {
            cmd_predict(&env, &clip, cfg_omega, force_som, model.as_deref(), &out)
        }
        Cmd::Eval { split, cfg_omega, reps, force_som, sweep, model, out } => cmd_eval(
            &env,
            &split,
            cfg_omega,
            reps,
            force_som,
            sweep,
            model.as_deref(),
            out.as_deref(),
        ),
        Cmd::Plot { csv, out } => cmd_plot(&csv, out.as_deref()),
        Cmd::VaeReport { split, out } => cmd_vae_report(&env, &split, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e.kind {
                ErrorKind::Contract => ExitCode::from(1),
                ErrorKind::Config => ExitCode::from(2),
            }
        }
    }
}
