use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use upet_core::checkpoint;
use upet_core::data::{self, Example};
use upet_core::selftrain::{self, EvalMetrics, SelectionMode};

use crate::config::{self, Config, DataSource, LossName};
use crate::runner::{self, Manifest};
use crate::sweep;

#[derive(Debug, Parser)]
#[command(
    name = "upet",
    version,
    about = "Uncertainty-aware parameter-efficient self-training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run self-training over the configured seeds.
    Train(TrainArgs),
    /// Run one experiment per point of a parameter grid.
    Sweep(SweepArgs),
    /// Score a checkpoint on a labeled file or the configured test split.
    Eval(EvalArgs),
    /// Write the synthetic benchmark to JSONL files.
    SynthGen(SynthGenArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig(ConfigArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Phce,
}

#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any key, e.g. `--set uncertainty.alpha=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Comma-separated seed list (`run.seeds`).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Self-training iterations (`selftrain.iterations`).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Threads for the scoring pass (`uncertainty.workers`).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (`run.out_dir`, else $UPET_OUT_DIR, else ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Experiment name, the subdirectory of the output directory (`run.name`).
    #[arg(long)]
    pub name: Option<String>,
    /// Use every pseudo-labeled example (`uncertainty.selection = "all"`).
    #[arg(long)]
    pub no_selection: bool,
    /// Confidence only (`uncertainty.alpha = 1`).
    #[arg(long, conflicts_with = "no_confidence")]
    pub no_certainty: bool,
    /// Certainty only (`uncertainty.alpha = 0`).
    #[arg(long)]
    pub no_confidence: bool,
    /// Student loss (`losses.kind`).
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Drop the contrastive regularizer (`losses.lambda = 0`).
    #[arg(long)]
    pub no_contrastive: bool,
}

impl ConfigArgs {
    /// File, then `--set` overrides, then dedicated flags.
    pub fn resolve(&self) -> Result<Config> {
        let base = match &self.config {
            Some(p) => Config::from_path(p)?,
            None => Config::default(),
        };
        self.apply(base)
    }

    pub fn apply(&self, mut cfg: Config) -> Result<Config> {
        for s in &self.sets {
            cfg.set(s)?;
        }
        if let Some(s) = &self.seeds {
            cfg.run.seeds = config::parse_seeds(s)?;
        }
        if let Some(n) = self.iterations {
            cfg.selftrain.iterations = n;
        }
        if let Some(n) = self.workers {
            cfg.uncertainty.workers = n;
        }
        if let Some(p) = &self.out {
            cfg.run.out_dir = Some(p.clone());
        }
        if let Some(n) = &self.name {
            cfg.run.name = n.clone();
        }
        if self.no_selection {
            cfg.uncertainty.selection = SelectionMode::All;
        }
        if self.no_certainty {
            cfg.uncertainty.alpha = 1.0;
        }
        if self.no_confidence {
            cfg.uncertainty.alpha = 0.0;
        }
        if let Some(l) = self.loss {
            cfg.losses.kind = match l {
                LossArg::Ce => LossName::Ce,
                LossArg::Phce => LossName::Phce,
            };
        }
        if self.no_contrastive {
            cfg.losses.lambda = 0.0;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Re-run the configuration recorded in a manifest; other flags still
    /// apply on top.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Grid axis `key=v1,v2,...`; repeatable. Adds to `[sweep.grid]`.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled JSONL/CSV file; defaults to the configured test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed selecting the synthetic test split.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory receiving train.jsonl and test.jsonl.
    #[arg(long = "to")]
    pub to: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::SynthGen(a) => synth_gen(&a),
        Command::ShowConfig(a) => {
            print!("{}", a.resolve()?.to_toml()?);
            Ok(())
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.manifest {
        Some(p) => a.cfg.apply(Manifest::load(p)?.config)?,
        None => a.cfg.resolve()?,
    };
    let report = runner::run_experiment(&cfg)?;
    let s = &report.summary;
    println!(
        "{}: teacher {} -> final {} (macro-F1 {}) over {} seed(s); artifacts in {}",
        s.name,
        runner::pm(s.teacher_acc_mean, s.teacher_acc_std),
        runner::pm(s.final_acc_mean, s.final_acc_std),
        runner::pm(s.final_f1_mean, s.final_f1_std),
        s.n_seeds,
        report.dir.display()
    );
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    for axis in &a.grid {
        let (k, v) = config::parse_axis(axis)?;
        cfg.sweep.grid.insert(k, v);
    }
    let report = sweep::run_sweep(&cfg)?;
    let failed = report.points.iter().filter(|p| p.result.is_err()).count();
    println!(
        "{} point(s), {failed} failed; table in {}",
        report.points.len(),
        report.csv.display()
    );
    Ok(())
}

pub fn eval_metrics(a: &EvalArgs) -> Result<EvalMetrics> {
    let cfg = a.cfg.resolve()?;
    let model = checkpoint::load(&a.checkpoint, None)?;
    let test: Vec<Example> = match &a.data {
        Some(path) => {
            let mut spec = runner::dataset_spec(&cfg);
            spec.features = model.dims.features;
            let format = cfg
                .data
                .format
                .or_else(|| data::Format::from_path(path))
                .with_context(|| format!("cannot tell the format of {}", path.display()))?;
            data::load(path, format, &spec, 0)?
        }
        None => {
            let seed = a
                .seed
                .or_else(|| cfg.run.seeds.first().copied())
                .unwrap_or(0);
            runner::load_splits(&cfg, seed)?.test
        }
    };
    if let Some(e) = test
        .iter()
        .find(|e| e.features.len() != model.dims.features)
    {
        bail!(
            "example {} has {} features but the checkpoint expects {}",
            e.id,
            e.features.len(),
            model.dims.features
        );
    }
    Ok(selftrain::evaluate(&model, &test)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let m = eval_metrics(a)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

#[derive(Serialize)]
struct Row<'a> {
    features: &'a [f64],
    label: &'a str,
}

fn write_rows(path: &Path, rows: &[Example], names: &[String]) -> Result<()> {
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for e in rows {
        let label = e.gold_label.map_or("", |y| names[y].as_str());
        serde_json::to_writer(
            &mut w,
            &Row {
                features: &e.features,
                label,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if cfg.data.source != DataSource::Synth {
        bail!("synth-gen needs data.source = \"synth\"");
    }
    let seed = a
        .seed
        .or_else(|| cfg.run.seeds.first().copied())
        .unwrap_or(0);
    let s = data::synth(&runner::synth_params(&cfg, seed))?;
    let names = runner::synth_label_names(cfg.data.classes);
    fs::create_dir_all(&a.to)?;
    write_rows(&a.to.join("train.jsonl"), &s.noisy_train, &names)?;
    write_rows(&a.to.join("test.jsonl"), &s.test, &names)?;
    println!(
        "wrote {} train and {} test examples to {}\n\n[data]\nsource = \"files\"\ntrain = {:?}\ntest = {:?}\nlabel_names = {:?}\nfeatures = {}",
        s.noisy_train.len(),
        s.test.len(),
        a.to.display(),
        a.to.join("train.jsonl"),
        a.to.join("test.jsonl"),
        names,
        cfg.data.dim
    );
    Ok(())
}
