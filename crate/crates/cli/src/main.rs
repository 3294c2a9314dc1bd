use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use starpose::bench::{bench_attention, to_csv, BenchConfig, BenchKernel};
use starpose::config::{RunConfig, SEED_ENV};
use starpose::selftest;
use starpose::synth::{generate_dataset, load_split, SynthConfig};
use starpose::train::{
    ablation_csv, evaluate_checkpoint, load_pose_head, log_csv, prepare_samples, pretrain_pose, run_ablation,
    save_pose_head, save_sr, train_sr, AblationAxis, PosePretrainConfig,
};

#[derive(Parser)]
#[command(
    name = "starpose",
    version,
    about = "Pose-aware video super-resolution at desk scale"
)]
struct Cli {
    /// Root directory for datasets, checkpoints and reports.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// `key = value` config file applied on top of the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the full reference model instead of the desk preset.
    #[arg(long)]
    reference: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = if self.reference {
            RunConfig::default()
        } else {
            RunConfig::desk()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            run.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override {kv:?} is not key=value"))?;
            run.set(k.trim(), v.trim())?;
        }
        run.apply_env()?;
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic stick-figure dataset.
    Synth {
        /// Training clips.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Validation clips.
        #[arg(long, default_value_t = 50)]
        val_count: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Dataset root; defaults to `<workdir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the pose head on HR frames, freeze it and save it.
    PretrainPose {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<workdir>/pose_head.stck`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the super-resolution network with the compound loss.
    TrainSr {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Defaults to `<workdir>/sr.stck`; the log goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and the bicubic baseline on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Validation clips to use; 0 uses all.
        #[arg(long, default_value_t = 0)]
        clips: usize,
        /// CSV report; defaults to `<workdir>/eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time linear against softmax attention.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dh: usize,
        #[arg(long, default_value_t = 11)]
        reps: usize,
        /// Kernels to run; defaults to all.
        #[arg(long, value_delimiter = ',')]
        kernels: Vec<String>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Train a base and an ablated variant with identical seeds and budgets.
    Ablate {
        /// a: temporal context, b: feature map, c: CNN branch, d: compound loss.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Defaults to `<workdir>/ablation_<axis>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle, gradient and invariant checks; nonzero exit on failure.
    Selftest {
        /// Skip the wall-clock benchmark.
        #[arg(long)]
        no_timing: bool,
    },
}

fn under(workdir: &Path, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| workdir.join(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    let wd = &cli.workdir;
    match cli.command {
        Command::Synth {
            count,
            val_count,
            seed,
            out,
        } => {
            let root = under(wd, &out, "data");
            generate_dataset(&root, &SynthConfig::default(), count, val_count, seed)?;
            println!("wrote {count} train and {val_count} val clips under {}", root.display());
        }
        Command::PretrainPose { data, steps, seed, out } => {
            let clips = load_split(&under(wd, &data, "data"), "train")?;
            let cfg = PosePretrainConfig {
                steps,
                seed,
                ..PosePretrainConfig::default()
            };
            let (head, store, losses) = pretrain_pose(&clips, &cfg)?;
            let path = under(wd, &out, "pose_head.stck");
            save_pose_head(&path, &head, &store)?;
            let tail = &losses[losses.len().saturating_sub(100)..];
            let last = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!("pose head saved to {} (heatmap mse {last:.5})", path.display());
        }
        Command::TrainSr { run, data, pose, out } => {
            let cfg = run.resolve()?;
            let root = under(wd, &data, "data");
            let (head, head_store) = load_pose_head(&under(wd, &pose, "pose_head.stck"))?;
            let mut clips = load_split(&root, "train")?;
            clips.truncate(cfg.schedule.train_clips);
            let samples = prepare_samples(&clips, cfg.model.scale)?;
            drop(clips);
            let outcome = train_sr(&cfg, &head, &head_store, &samples)?;
            let path = under(wd, &out, "sr.stck");
            save_sr(&path, &outcome)?;
            write(&path.with_extension("log.csv"), &log_csv(&outcome.log))?;
            println!(
                "checkpoint {}; probe loss {:.5} -> {:.5}",
                path.display(),
                outcome.probe_initial,
                outcome.probe_final
            );
        }
        Command::Eval {
            checkpoint,
            data,
            pose,
            scale,
            clips,
            out,
        } => {
            let (head, head_store) = load_pose_head(&under(wd, &pose, "pose_head.stck"))?;
            let mut val = load_split(&under(wd, &data, "data"), "val")?;
            if clips > 0 {
                val.truncate(clips);
            }
            let report = evaluate_checkpoint(&under(wd, &checkpoint, "sr.stck"), &val, scale, &head, &head_store)?;
            let csv = report.to_csv();
            write(&under(wd, &out, "eval.csv"), &csv)?;
            print!("{csv}");
        }
        Command::BenchAttn {
            n,
            dh,
            reps,
            kernels,
            out,
        } => {
            let kernels = if kernels.is_empty() {
                BenchKernel::ALL.to_vec()
            } else {
                kernels
                    .iter()
                    .map(|k| BenchKernel::parse(k).with_context(|| format!("unknown kernel {k:?}")))
                    .collect::<Result<_>>()?
            };
            let records = bench_attention(&BenchConfig {
                ns: n,
                d_h: dh,
                reps,
                kernels,
                ..BenchConfig::default()
            })?;
            let csv = to_csv(&records);
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Ablate {
            axis,
            run,
            data,
            pose,
            out,
        } => {
            let axis_id = AblationAxis::parse(&axis)?;
            let cfg = run.resolve()?;
            let root = under(wd, &data, "data");
            let (head, head_store) = load_pose_head(&under(wd, &pose, "pose_head.stck"))?;
            let mut train = load_split(&root, "train")?;
            train.truncate(cfg.schedule.train_clips);
            let train = prepare_samples(&train, cfg.model.scale)?;
            let mut val = load_split(&root, "val")?;
            val.truncate(cfg.schedule.val_clips);
            let val = prepare_samples(&val, cfg.model.scale)?;
            let results = run_ablation(axis_id, &cfg, &head, &head_store, &train, &val)?;
            let csv = ablation_csv(&results);
            write(&under(wd, &out, &format!("ablation_{axis}.csv")), &csv)?;
            print!("{csv}");
        }
        Command::Selftest { no_timing } => {
            let checks = selftest::run_all(!no_timing);
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
