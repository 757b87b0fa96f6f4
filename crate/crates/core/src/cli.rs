//! Command-line front end.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{mae_layer_embedder, rollout_of_trace, rsv, RolloutMatrix, RsvProfile};
use crate::config::{ExperimentConfig, StrategyKind};
use crate::dataio::format::{load_dataset, read_split, write_dataset, write_split, MANIFEST_FILE};
use crate::encoder::{load_trace, save_trace};
use crate::error::{Error, Result};
use crate::evalprobe::{EvalReport, Task};
use crate::pipeline::{self, Pretrained, SplitWindows};
use crate::plot::{heatmap_svg, loss_svg, read_loss_csv, rsv_svg, write_loss_csv, DEFAULT_CAP};

#[derive(Parser, Debug)]
#[command(name = "physio-mae", version, about = "Multimodal masked-autoencoder pretraining for physiological signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.dim=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretraining strategy whose model is evaluated (defaults to pretrain.strategy).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Task to run; every configured task when absent.
    #[arg(long)]
    pub task: Option<String>,
    /// Checkpoint to load instead of `<out>/<strategy>/model.pmck`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Permute training and validation labels (null baseline).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Rollout,
    Rsv,
    Loss,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset to data.raw_dir.
    GenerateData(Common),
    /// Band-pass and decimate data.raw_dir into data.dir.
    Preprocess(Common),
    /// Assign patients to pretrain/train/validation/test.
    Split(Common),
    /// Pretrain an encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// mae, mae-moddrop, simclr, clip-pair or clip-loo.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Linear probe on the frozen encoder.
    Probe(ProbeArgs),
    /// Finetune encoder and head together.
    Finetune(ProbeArgs),
    /// Probe every task and, for MAE models, measure dropped-modality reconstruction.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Save the attention trace and rollout of one test window.
    AnalyzeAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the test windows (defaults to analysis.window).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Relative source variance of every encoder unit.
    AnalyzeRsv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render an artifact as SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Upper colour limit of the rollout heatmap.
        #[arg(long, default_value_t = DEFAULT_CAP, conflicts_with = "no_cap")]
        cap: f64,
        #[arg(long)]
        no_cap: bool,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn strategy_of(cfg: &ExperimentConfig, flag: &Option<String>) -> Result<StrategyKind> {
    match flag {
        Some(s) => StrategyKind::parse(s),
        None => cfg.strategy(),
    }
}

fn hash_comment(cfg: &ExperimentConfig) -> Vec<String> {
    vec![format!("config_hash={}", cfg.hash()), format!("seed={}", cfg.get("seed"))]
}

fn meta(cfg: &ExperimentConfig, kind: StrategyKind) -> String {
    format!("config_hash={};strategy={}", cfg.hash(), kind.name())
}

fn strategy_dir(cfg: &ExperimentConfig, kind: StrategyKind) -> PathBuf {
    cfg.output_dir().join(kind.name())
}

fn split_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir().join("split.csv")
}

/// Windows by role, using the saved split when there is one.
fn load_windows(cfg: &ExperimentConfig) -> Result<SplitWindows> {
    let records = load_dataset(&cfg.data_dir().join(MANIFEST_FILE))?;
    let path = split_path(cfg);
    let split = if path.exists() { read_split(&path)? } else { pipeline::split_records(&records, cfg)? };
    pipeline::partition(&records, &split)
}

fn load_model(cfg: &ExperimentConfig, kind: StrategyKind, checkpoint: &Option<PathBuf>) -> Result<Pretrained> {
    let path = checkpoint.clone().unwrap_or_else(|| strategy_dir(cfg, kind).join("model.pmck"));
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    Pretrained::load(cfg, kind, &path)
}

/// One row per command in `<out>/runs.csv`; never rewritten.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub start_unix: u64,
    pub end_unix: u64,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub const HEADER: &'static str = "command,config_hash,seed,start_unix,end_unix,artifacts";

    pub fn append(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", Self::HEADER)?;
        }
        let artifacts: Vec<String> = self.artifacts.iter().map(|p| p.display().to_string()).collect();
        writeln!(
            f,
            "{},{},{},{},{},\"{}\"",
            self.command,
            self.config_hash,
            self.seed,
            self.start_unix,
            self.end_unix,
            artifacts.join(";").replace('"', "\"\"")
        )?;
        Ok(())
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn record_run(cfg: &ExperimentConfig, command: &str, start: u64, artifacts: Vec<PathBuf>) -> Result<()> {
    for a in &artifacts {
        println!("wrote {}", a.display());
    }
    RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed()?,
        start_unix: start,
        end_unix: now(),
        artifacts,
    }
    .append(&cfg.output_dir().join("runs.csv"))
}

fn tasks_of(cfg: &ExperimentConfig, flag: &Option<String>) -> Result<Vec<Task>> {
    match flag {
        Some(t) => Ok(vec![Task::parse(t)?]),
        None => cfg.tasks(),
    }
}

fn run_probe(args: ProbeArgs, finetune: bool) -> Result<()> {
    let start = now();
    let cfg = load_config(&args.common)?;
    let kind = strategy_of(&cfg, &args.strategy)?;
    let data = load_windows(&cfg)?;
    let model = load_model(&cfg, kind, &args.checkpoint)?;
    let tasks = tasks_of(&cfg, &args.task)?;
    let label = if args.shuffle_labels { format!("{}-shuffled", kind.name()) } else { kind.name().to_string() };
    let report = pipeline::probe_report(&cfg, &label, &model, &data, &tasks, finetune, args.shuffle_labels)?;
    print_report(&report);
    let stem = if finetune { "finetune" } else { "probe" };
    let name = match (&args.task, args.shuffle_labels) {
        (Some(t), false) => format!("{stem}_{t}.csv"),
        (Some(t), true) => format!("{stem}_{t}_shuffled.csv"),
        (None, false) => format!("{stem}.csv"),
        (None, true) => format!("{stem}_shuffled.csv"),
    };
    let path = strategy_dir(&cfg, kind).join(name);
    report.write_csv(&path)?;
    record_run(&cfg, stem, start, vec![path])
}

fn print_report(report: &EvalReport) {
    for s in &report.tasks {
        println!(
            "{} {}: balanced accuracy {:.3} ± {:.3} over {} seeds",
            report.label,
            s.task.name(),
            s.balanced_accuracy.0,
            s.balanced_accuracy.1,
            s.seeds.len()
        );
    }
    if let Ok(a) = report.aggregate() {
        println!("{} aggregate {a:.3}", report.label);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(c) => {
            let start = now();
            let cfg = load_config(&c)?;
            let records = pipeline::generate(&cfg)?;
            let path = write_dataset(&cfg.raw_dir(), &records, &hash_comment(&cfg))?;
            record_run(&cfg, "generate-data", start, vec![path])
        }
        Command::Preprocess(c) => {
            let start = now();
            let cfg = load_config(&c)?;
            let raw = load_dataset(&cfg.raw_dir().join(MANIFEST_FILE))?;
            let records = pipeline::preprocess_all(&raw, &cfg)?;
            let path = write_dataset(&cfg.data_dir(), &records, &hash_comment(&cfg))?;
            record_run(&cfg, "preprocess", start, vec![path])
        }
        Command::Split(c) => {
            let start = now();
            let cfg = load_config(&c)?;
            let records = load_dataset(&cfg.data_dir().join(MANIFEST_FILE))?;
            let split = pipeline::split_records(&records, &cfg)?;
            let path = split_path(&cfg);
            write_split(&path, &split, &hash_comment(&cfg))?;
            println!(
                "pretrain {} / train {} / validation {} / test {} patients",
                split.pretrain.len(),
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
            record_run(&cfg, "split", start, vec![path])
        }
        Command::Pretrain { common, strategy } => {
            let start = now();
            let cfg = load_config(&common)?;
            let kind = strategy_of(&cfg, &strategy)?;
            let data = load_windows(&cfg)?;
            let dir = strategy_dir(&cfg, kind);
            let m = meta(&cfg, kind);
            let run = pipeline::pretrain(&cfg, kind, &data, Some(dir.join("checkpoints")), &m)?;
            for l in &run.logs {
                let val = l.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
                println!("epoch {:>4} lr {:.2e} train {:.5} val {val}", l.epoch, l.lr, l.train_loss);
            }
            let model_path = dir.join("model.pmck");
            run.pretrained.save(&model_path, &format!("{m};selected_epoch={:?}", run.selected_epoch))?;
            let loss_path = dir.join("loss.csv");
            write_loss_csv(&loss_path, &run.logs, &hash_comment(&cfg))?;
            let mut artifacts = vec![model_path, loss_path];
            artifacts.extend(run.checkpoints);
            record_run(&cfg, "pretrain", start, artifacts)
        }
        Command::Probe(a) => run_probe(a, false),
        Command::Finetune(a) => run_probe(a, true),
        Command::Evaluate { common, strategy, checkpoint } => {
            let start = now();
            let cfg = load_config(&common)?;
            let kind = strategy_of(&cfg, &strategy)?;
            let data = load_windows(&cfg)?;
            let model = load_model(&cfg, kind, &checkpoint)?;
            let report = pipeline::probe_report(&cfg, kind.name(), &model, &data, &cfg.tasks()?, false, false)?;
            print_report(&report);
            let dir = strategy_dir(&cfg, kind);
            let eval_path = dir.join("eval.csv");
            report.write_csv(&eval_path)?;
            let mut artifacts = vec![eval_path];
            if matches!(model, Pretrained::Mae { .. }) {
                let r = pipeline::reconstruction_report(&cfg, &model, &data)?;
                let path = dir.join("recon.csv");
                let mut w = crate::dataio::format::csv_writer(&path, &hash_comment(&cfg))?;
                let err = |e| crate::dataio::format::csv_err(&path, e);
                w.write_record(["modality", "dropped_mse", "oracle_mse"]).map_err(err)?;
                for m in crate::dataio::Modality::ALL {
                    let i = m.index();
                    w.write_record([
                        m.name().to_string(),
                        format!("{:.6}", r.dropped_mse[i]),
                        format!("{:.6}", r.dropped_oracle_mse[i]),
                    ])
                    .map_err(err)?;
                }
                w.write_record([
                    "mean".to_string(),
                    format!("{:.6}", r.mean_dropped_mse),
                    format!("{:.6}", r.mean_oracle_mse),
                ])
                .map_err(err)?;
                w.flush()?;
                println!("dropped-modality MSE {:.4} vs mean predictor {:.4}", r.mean_dropped_mse, r.mean_oracle_mse);
                artifacts.push(path);
            }
            record_run(&cfg, "evaluate", start, artifacts)
        }
        Command::AnalyzeAttention { common, strategy, checkpoint, window } => {
            let start = now();
            let cfg = load_config(&common)?;
            let kind = strategy_of(&cfg, &strategy)?;
            let data = load_windows(&cfg)?;
            let model = load_model(&cfg, kind, &checkpoint)?;
            let idx = match window {
                Some(i) => i,
                None => cfg.usize("analysis.window")?,
            };
            let w = data.test.get(idx).ok_or_else(|| {
                Error::OutOfRange(format!("window {idx} of {} test windows", data.test.len()))
            })?;
            let trace = pipeline::attention_trace(&model, w)?;
            let m = meta(&cfg, kind);
            let dir = strategy_dir(&cfg, kind);
            let trace_path = dir.join("trace.pmtr");
            save_trace(&trace_path, &trace, &m)?;
            let rollout = rollout_of_trace(&trace)?;
            let rollout_path = dir.join("rollout.pmtr");
            rollout.save(&rollout_path, &m)?;
            println!("rollout over {} tokens, max row-sum error {:.2e}", rollout.n(), rollout.max_row_sum_error());
            record_run(&cfg, "analyze-attention", start, vec![trace_path, rollout_path])
        }
        Command::AnalyzeRsv { common, strategy, checkpoint } => {
            let start = now();
            let cfg = load_config(&common)?;
            let kind = strategy_of(&cfg, &strategy)?;
            let data = load_windows(&cfg)?;
            let model = load_model(&cfg, kind, &checkpoint)?;
            let Pretrained::Mae { model, store } = &model else {
                return Err(Error::Config("RSV analysis needs the fused MAE encoder".into()));
            };
            let embed = mae_layer_embedder(model, store, cfg.usize("probe.batch_size")?)?;
            let profile = rsv(&embed, &data.test, &cfg.rsv()?)?;
            for (l, layer) in profile.layers.iter().enumerate() {
                println!(
                    "layer {l}: eeg {:.3} emg {:.3} eog {:.3} ecg {:.3}",
                    layer.mean[0], layer.mean[1], layer.mean[2], layer.mean[3]
                );
            }
            let path = strategy_dir(&cfg, kind).join("rsv.csv");
            profile.write_csv(&path, &hash_comment(&cfg))?;
            record_run(&cfg, "analyze-rsv", start, vec![path])
        }
        Command::Plot { kind, input, output, cap, no_cap } => {
            if !input.exists() {
                return Err(Error::MissingFile(input));
            }
            let svg = match kind {
                PlotKind::Rollout => {
                    let file = load_trace(&input)?;
                    let comment = file.meta.clone();
                    let r = RolloutMatrix::from_trace_file(&file)?;
                    heatmap_svg(&r, (!no_cap).then_some(cap), &comment)?
                }
                PlotKind::Rsv => {
                    let p = RsvProfile::read_csv(&input)?;
                    rsv_svg(&p, &first_comment(&input)?)?
                }
                PlotKind::Loss => loss_svg(&read_loss_csv(&input)?, &first_comment(&input)?)?,
            };
            if let Some(d) = output.parent() {
                fs::create_dir_all(d)?;
            }
            fs::write(&output, svg)?;
            println!("wrote {}", output.display());
            Ok(())
        }
    }
}

/// The leading `# config_hash=...` line of a CSV artifact, if present.
fn first_comment(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().next().and_then(|l| l.strip_prefix("# ")).unwrap_or("").to_string())
}
