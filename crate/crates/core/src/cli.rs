//! The `mmtm` command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiment::{
    ablate, parse_variants, run, sweep, write_ablation_csv, write_sweep_csv, ExperimentConfig,
    EXAMPLE_CONFIG,
};
use crate::gradcheck::{check_network, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::streams::{build, FusionPlan};
use crate::synth::Dataset;
use crate::train::{evaluate, load_checkpoint, save_checkpoint};
use crate::zoo::FusionKind;

/// Output root used when `--out` is not given.
pub const OUT_ENV: &str = "MMTM_OUT";

#[derive(Debug, Parser)]
#[command(name = "mmtm", about = "Multimodal transfer module experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (the task seed for `gen-data`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$MMTM_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured fusion variant once.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/../train/checkpoint.mmck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare fusion variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated variant names, overriding the config.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Accuracy against the number of MMTMs on the last block boundaries.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and MAC counts per component.
    CountCosts {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every applicable fusion variant.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::GenData { .. } => "gen-data",
            Command::CountCosts { .. } => "count-costs",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sweep { common, .. }
            | Command::GenData { common }
            | Command::CountCosts { common }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn out_dir(cmd: &Command) -> PathBuf {
    match &cmd.common().out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(cmd.name()),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let Some(path) = &common.config else {
        return Err(Error::Usage(format!(
            "--config is required. Example config:\n\n{EXAMPLE_CONFIG}"
        )));
    };
    if !path.exists() {
        return Err(Error::Usage(format!(
            "config file {} not found. Example config:\n\n{EXAMPLE_CONFIG}",
            path.display()
        )));
    }
    ExperimentConfig::load(path)
}

fn dataset(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = Dataset::load(p)?;
            if ds.spec.shapes != cfg.task.shapes || ds.spec.num_classes != cfg.task.num_classes {
                return Err(Error::Config(format!(
                    "dataset {} does not match the config's task shapes or classes",
                    p.display()
                )));
            }
            Ok(ds)
        }
        None => cfg.dataset(),
    }
}

fn run_seed(cfg: &ExperimentConfig, common: &Common) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

/// Runs one parsed command, writing results under its output directory.
/// Returns the lines it would print.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    let cmd = &cli.command;
    let common = cmd.common();
    let mut cfg = load_config(common)?;
    let out = out_dir(cmd);
    std::fs::create_dir_all(&out)?;
    let mut lines = Vec::new();
    match cmd {
        Command::GenData { .. } => {
            if let Some(seed) = common.seed {
                cfg.task.seed = seed;
            }
            let ds = cfg.dataset()?;
            let path = out.join("dataset.mmfz");
            ds.save(&path)?;
            lines.push(format!(
                "wrote {} ({} train, {} val, {} test)",
                path.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            ));
        }
        Command::Train { data, .. } => {
            let seed = run_seed(&cfg, common);
            let ds = dataset(&cfg, data)?;
            let outcome = run(&cfg, &ds, cfg.fusion.kind, seed)?;
            std::fs::write(out.join("run.jsonl"), outcome.record.to_json_lines()?)?;
            let ckpt = out.join("checkpoint.mmck");
            save_checkpoint(&outcome.net.store, &outcome.record.config, &ckpt)?;
            lines.push(format!(
                "{} seed {seed}: test accuracy {:.6} (best epoch {}), checkpoint {}",
                cfg.fusion.kind,
                outcome.record.test_accuracy,
                outcome.record.best_epoch,
                ckpt.display()
            ));
        }
        Command::Eval {
            data, checkpoint, ..
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| {
                out.parent()
                    .unwrap_or(Path::new("."))
                    .join("train")
                    .join("checkpoint.mmck")
            });
            let echo = read_checkpoint_echo(&ckpt)?;
            let run_cfg: ExperimentConfig = serde_json::from_value(echo["experiment"].clone())?;
            let plan: FusionPlan = serde_json::from_value(echo["plan"].clone())?;
            let seed = run_cfg.training.seed;
            let mut net = build(&run_cfg.stream_specs(), run_cfg.task.num_classes, &plan, seed)?;
            load_checkpoint(&ckpt, &mut net.store)?;
            let ds = dataset(&cfg, data)?;
            let m = evaluate(&net, &ds.test)?;
            let result = serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "test_accuracy": m.accuracy,
                "test_loss": m.loss,
            });
            std::fs::write(out.join("eval.json"), format!("{result}\n"))?;
            lines.push(format!("test accuracy {:.6}, loss {:.6}", m.accuracy, m.loss));
        }
        Command::Ablate { data, variants, .. } => {
            let kinds = match variants {
                Some(v) => parse_variants(v)?,
                None => cfg.fusion.variants.clone(),
            };
            let seeds = common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let ds = dataset(&cfg, data)?;
            let mut log = String::new();
            let rows = ablate(&cfg, &ds, &kinds, &seeds, |kind, seed, rec| {
                log.push_str(&run_line(kind.name(), seed, rec.test_accuracy));
            })?;
            std::fs::write(out.join("runs.jsonl"), log)?;
            let mut csv = Vec::new();
            write_ablation_csv(&rows, &mut csv)?;
            std::fs::write(out.join("ablation.csv"), &csv)?;
            lines.extend(String::from_utf8_lossy(&csv).lines().map(str::to_string));
        }
        Command::Sweep {
            data, max_points, ..
        } => {
            let j = max_points.unwrap_or(cfg.fusion.sweep_max);
            let seeds = common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let ds = dataset(&cfg, data)?;
            let mut log = String::new();
            let rows = sweep(&cfg, &ds, j, &seeds, |j, seed, rec| {
                log.push_str(&run_line(&format!("j={j}"), seed, rec.test_accuracy));
            })?;
            std::fs::write(out.join("runs.jsonl"), log)?;
            let mut csv = Vec::new();
            write_sweep_csv(&rows, &mut csv)?;
            std::fs::write(out.join("sweep.csv"), &csv)?;
            lines.extend(String::from_utf8_lossy(&csv).lines().map(str::to_string));
        }
        Command::CountCosts { .. } => {
            let seed = run_seed(&cfg, common);
            let report = crate::experiment::cost_report(&cfg, seed)?;
            report.write_csv(&out.join("costs.csv"))?;
            lines.extend(report.to_csv().lines().map(str::to_string));
        }
        Command::Gradcheck { variants, .. } => {
            let kinds = match variants {
                Some(v) => parse_variants(v)?,
                None => FusionKind::ALL.to_vec(),
            };
            let seed = run_seed(&cfg, common);
            let ds = cfg.dataset()?;
            let sample = &ds.train[0];
            let mut csv = String::from("variant,max_rel_error,worst,checked,skipped,pass\n");
            let mut failed = Vec::new();
            for kind in kinds {
                let plan = cfg.plan(kind)?;
                let net = match cfg.build(&plan, seed) {
                    Err(Error::UnalignedSpatial(m)) => {
                        lines.push(format!("{kind}: skipped, {m}"));
                        continue;
                    }
                    other => other?,
                };
                let r = check_network(
                    &net,
                    &sample.inputs,
                    sample.label,
                    cfg.training.excitation_decay,
                    DEFAULT_EPS,
                )?;
                let pass = r.passes(DEFAULT_TOLERANCE);
                if !pass {
                    failed.push(kind.name());
                }
                csv.push_str(&format!(
                    "{kind},{:e},{},{},{},{pass}\n",
                    r.max_rel_error, r.worst, r.checked, r.skipped
                ));
                lines.push(format!(
                    "{kind}: max relative error {:.3e} over {} entries ({} skipped) {}",
                    r.max_rel_error,
                    r.checked,
                    r.skipped,
                    if pass { "ok" } else { "FAIL" }
                ));
            }
            std::fs::write(out.join("gradcheck.csv"), csv)?;
            if !failed.is_empty() {
                return Err(Error::Usage(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(lines)
}

fn run_line(name: &str, seed: u64, acc: f64) -> String {
    format!("{}\n", serde_json::json!({"variant": name, "seed": seed, "test_accuracy": acc}))
}

fn read_checkpoint_echo(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    let (_, mut header) = crate::format::Reader::open(&bytes, crate::train::CHECKPOINT_MAGIC)?;
    Ok(header["config"].take())
}

/// Parses `std::env::args`, runs, prints, and maps errors to exit codes:
/// 2 for usage and config errors, 1 otherwise.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(lines) => {
            let mut stdout = std::io::stdout().lock();
            for l in lines {
                let _ = writeln!(stdout, "{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
