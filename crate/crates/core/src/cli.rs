//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (non-finite loss or a failed gradient check).

use crate::checkpoint::Checkpoint;
use crate::dataset::{parse_manifest_file, resample, write_manifest};
use crate::error::Error;
use crate::fixtures::{generate, label_distribution, FixtureSpec};
use crate::model::{Model, ModelConfig};
use crate::objective::{format_report, DEFAULT_THRESHOLD};
use crate::trainer::{
    ensemble_vote, evaluate, format_history, format_predictions, make_folds, predict_records,
    train, FoldSplit, Prediction, TrainData, TrainSchedule, ENSEMBLE_SIZE,
};
use crate::{AU_NAMES, NUM_AU};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// On-disk run configuration: model and schedule sections, both optional
/// field-by-field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

#[derive(Parser, Debug)]
#[command(
    name = "aunet",
    version,
    about = "Facial action unit detection: training, evaluation, and verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest and write the best checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-AU F1 table.
    Eval(EvalArgs),
    /// Write per-frame probabilities and decisions as CSV.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print per-AU label counts and the resampling summary.
    SampleStats(SampleStatsArgs),
    /// Generate the synthetic dataset.
    MakeFixtures(MakeFixturesArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config (model + schedule sections).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the manifest's raster paths are relative to.
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for checkpoint.auck, history.jsonl, and the
    /// train/val sub-manifests.
    #[arg(long)]
    out: PathBuf,
    /// Which split to train: official, fold-1 .. fold-4.
    #[arg(long, default_value = "official")]
    fold: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Single-model checkpoint (exclusive with --ensemble).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Exactly five comma-separated checkpoints for majority voting.
    #[arg(long, value_delimiter = ',')]
    ensemble: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Append the learned per-AU fusion weights as extra columns.
    #[arg(long, default_value_t = false)]
    emit_weights: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SampleStatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct MakeFixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 200)]
    frames: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_hw: usize,
    #[arg(long, default_value_t = 0.01)]
    mask_rate: f64,
}

/// Parse and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    let result = match cli.cmd {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::SampleStats(args) => cmd_sample_stats(args),
        Command::MakeFixtures(args) => cmd_make_fixtures(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

fn read_run_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!(
        "{}: {e}",
        path.display()
    )))
}

fn select_fold<'a>(splits: &'a [FoldSplit], name: &str) -> Result<&'a FoldSplit, Error> {
    splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let names: Vec<&str> = splits.iter().map(|s| s.name.as_str()).collect();
            Error::Config(format!("unknown fold `{name}`; available: {names:?}"))
        })
}

fn cmd_train(args: TrainArgs) -> Result<i32, Error> {
    let run_cfg = read_run_config(&args.config)?;
    run_cfg.model.validate()?;
    run_cfg.schedule.validate()?;
    let records = parse_manifest_file(&args.manifest)?;
    let splits = make_folds(&records, 4, run_cfg.model.seed)?;
    let split = select_fold(&splits, &args.fold)?;
    let (train_refs, val_refs) = split.partition(&records);
    let train_records: Vec<_> = train_refs.into_iter().cloned().collect();
    let val_records: Vec<_> = val_refs.into_iter().cloned().collect();
    let plan = resample(&train_records);
    println!(
        "split {}: {} train frames -> {} sampled ({} base, {} rare), {} val frames",
        split.name,
        train_records.len(),
        plan.selected.len(),
        plan.base_count,
        plan.rare_count,
        val_records.len()
    );

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for (name, recs) in [("train_manifest.tsv", &train_records), ("val_manifest.tsv", &val_records)] {
        let mut buf = Vec::new();
        write_manifest(&mut buf, recs)?;
        let path = args.out.join(name);
        std::fs::write(&path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    }

    let mut model = Model::<f32>::build(run_cfg.model.clone())?;
    let data = TrainData {
        train_records: &train_records,
        plan: &plan,
        val_records: &val_records,
        data_dir: &args.data_dir,
    };
    let outcome = train(&mut model, &run_cfg.schedule, &data)?;

    let ckpt_path = args.out.join("checkpoint.auck");
    outcome.best.save(&ckpt_path)?;
    let history_path = args.out.join("history.jsonl");
    std::fs::write(&history_path, format_history(&outcome.history))
        .map_err(|e| Error::io(history_path.display().to_string(), e))?;

    for h in &outcome.history {
        let f1 = h
            .macro_f1
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  lr {:<9.6}  bce {:.4}  circle {:.4}  total {:.4}  macro-f1 {f1}",
            h.epoch, h.lr, h.bce, h.circle, h.total
        );
    }
    println!(
        "best macro-f1 {:.4} after {} steps; checkpoint at {}",
        outcome.best_macro_f1,
        outcome.steps_run,
        ckpt_path.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, Error> {
    let model: Model<f32> = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let records = parse_manifest_file(&args.manifest)?;
    let report = evaluate(&model, &records, &args.data_dir, args.threshold)?;
    print!("{}", format_report(&report));
    Ok(EXIT_OK)
}

fn cmd_predict(args: PredictArgs) -> Result<i32, Error> {
    let records = parse_manifest_file(&args.manifest)?;
    let preds = if args.ensemble.is_empty() {
        let path = args.checkpoint.as_ref().ok_or_else(|| {
            Error::Config("predict needs --checkpoint or --ensemble".into())
        })?;
        let model: Model<f32> = Checkpoint::load(path)?.into_model()?;
        predict_records(&model, &records, &args.data_dir, DEFAULT_THRESHOLD)?
    } else {
        if args.checkpoint.is_some() {
            return Err(Error::Config(
                "--checkpoint and --ensemble are mutually exclusive".into(),
            ));
        }
        if args.ensemble.len() != ENSEMBLE_SIZE {
            return Err(Error::Config(format!(
                "--ensemble needs exactly {ENSEMBLE_SIZE} checkpoints, got {}",
                args.ensemble.len()
            )));
        }
        let mut all_probs: Vec<Vec<[f64; NUM_AU]>> = Vec::with_capacity(ENSEMBLE_SIZE);
        for path in &args.ensemble {
            let model: Model<f32> = Checkpoint::load(path)?.into_model()?;
            let preds = predict_records(&model, &records, &args.data_dir, DEFAULT_THRESHOLD)?;
            all_probs.push(preds.into_iter().map(|p| p.probs).collect());
        }
        let votes = ensemble_vote(&all_probs)?;
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                // report the across-model mean probability alongside the vote
                let mut mean = [0.0f64; NUM_AU];
                for model_probs in &all_probs {
                    for (m, v) in mean.iter_mut().zip(&model_probs[i]) {
                        *m += v / ENSEMBLE_SIZE as f64;
                    }
                }
                Prediction {
                    video_id: r.video_id.clone(),
                    frame_index: r.frame_index,
                    probs: mean,
                    binary: votes[i],
                    fusion_weights: None,
                }
            })
            .collect()
    };
    std::fs::write(&args.out, format_predictions(&preds, args.emit_weights))
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, Error> {
    let checks = crate::verify::run_full_suite(args.seed)?;
    let mut all_ok = true;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<24} points {:>3}  max rel err {:.3e}",
            c.name, c.points, c.max_rel_err
        );
        all_ok &= c.passed();
    }
    if all_ok {
        println!("gradcheck: all {} checks within 1e-4", checks.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("gradcheck: tolerance exceeded");
        Ok(EXIT_NUMERIC)
    }
}

fn cmd_sample_stats(args: SampleStatsArgs) -> Result<i32, Error> {
    let records = parse_manifest_file(&args.manifest)?;
    let dist = label_distribution(&records);
    println!("{:<6} {:>9} {:>9} {:>9}", "class", "positive", "negative", "masked");
    for (i, name) in AU_NAMES.iter().enumerate() {
        println!(
            "{:<6} {:>9} {:>9} {:>9}",
            name, dist[i].0, dist[i].1, dist[i].2
        );
    }
    let plan = resample(&records);
    if plan.selected.is_empty() {
        eprintln!("warning: empty manifest, empty plan");
    }
    println!(
        "plan: {} of {} frames selected ({} base stride-10, {} rare stride-5) across {} videos",
        plan.selected.len(),
        records.len(),
        plan.base_count,
        plan.rare_count,
        plan.videos
    );
    Ok(EXIT_OK)
}

fn cmd_make_fixtures(args: MakeFixturesArgs) -> Result<i32, Error> {
    let spec = FixtureSpec {
        videos: args.videos,
        frames_per_video: args.frames,
        image_hw: args.image_hw,
        seed: args.seed,
        mask_rate: args.mask_rate,
    };
    let records = generate(&spec, &args.out)?;
    println!(
        "wrote {} frames across {} videos under {}",
        records.len(),
        args.videos,
        args.out.display()
    );
    Ok(EXIT_OK)
}
