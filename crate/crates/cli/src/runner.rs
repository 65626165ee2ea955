//! Runs a configuration over its seed list and writes the artifacts.
//!
//! Layout under `<out>/<name>/`:
//!
//! ```text
//! manifest.json
//! summary.json
//! summary.csv
//! seed-<s>/metrics.jsonl   one IterationRecord per line
//! seed-<s>/scores.jsonl    one ScoreRecord per line
//! seed-<s>/curves.json     teacher and per-iteration student loss curves
//! seed-<s>/checkpoint.json final teacher
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use upet_core::checkpoint;
use upet_core::data::{self, DatasetSpec, Example, Format, SynthParams};
use upet_core::model::trainable_param_count;
use upet_core::numeric::Rng;
use upet_core::selftrain::{self, EvalMetrics, IterationRecord};

use crate::config::{Config, DataSource};

pub const MANIFEST_FORMAT: &str = "upet-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Version of the metrics JSONL and summary CSV layouts.
pub const METRICS_SCHEMA: u32 = 1;

/// Offsets keeping ids of separately loaded files disjoint.
const UNLABELED_ID_BASE: u64 = 1 << 40;
const TEST_ID_BASE: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: DataSource,
    pub label_names: Vec<String>,
    pub features: usize,
    pub classes: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub test: Vec<Example>,
    pub info: DatasetInfo,
}

pub fn synth_params(cfg: &Config, seed: u64) -> SynthParams {
    let d = &cfg.data;
    SynthParams {
        classes: d.classes,
        per_class: d.per_class,
        dim: d.dim,
        sep: d.sep,
        noise_rate: d.label_noise,
        seed: d.seed.unwrap_or(seed),
    }
}

pub fn synth_label_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("c{c}")).collect()
}

/// Label names and feature width used to read data files.
pub fn dataset_spec(cfg: &Config) -> DatasetSpec {
    match cfg.data.source {
        DataSource::Synth => DatasetSpec {
            label_names: synth_label_names(cfg.data.classes),
            features: cfg.data.dim,
        },
        DataSource::Files => DatasetSpec {
            label_names: cfg.data.label_names.clone(),
            features: cfg.data.features,
        },
    }
}

fn read(path: &Path, cfg: &Config, spec: &DatasetSpec, first_id: u64) -> Result<Vec<Example>> {
    let format = cfg
        .data
        .format
        .or_else(|| Format::from_path(path))
        .with_context(|| {
            format!(
                "cannot tell the format of {}; set data.format",
                path.display()
            )
        })?;
    data::load(path, format, spec, first_id).with_context(|| format!("loading {}", path.display()))
}

/// Labeled, unlabeled and test splits for one seed.
pub fn load_splits(cfg: &Config, seed: u64) -> Result<Splits> {
    let spec = dataset_spec(cfg);
    let classes = spec.classes();
    let split_seed = cfg.data.seed.unwrap_or(seed);
    let (pool, extra_unlabeled, test) = match cfg.data.source {
        DataSource::Synth => {
            let s = data::synth(&synth_params(cfg, seed))?;
            (s.noisy_train, None, s.test)
        }
        DataSource::Files => {
            let train = read(cfg.data.train.as_deref().expect("validated"), cfg, &spec, 0)?;
            let unlabeled = match &cfg.data.unlabeled {
                Some(p) => Some(read(p, cfg, &spec, UNLABELED_ID_BASE)?),
                None => None,
            };
            let test = read(
                cfg.data.test.as_deref().expect("validated"),
                cfg,
                &spec,
                TEST_ID_BASE,
            )?;
            (train, unlabeled, test)
        }
    };
    let (labeled, remainder) = match cfg.data.shots {
        Some(k) => data::few_shot_split(&pool, k, classes, split_seed)?,
        None => (pool, Vec::new()),
    };
    let mut unlabeled = extra_unlabeled.unwrap_or(remainder);
    if let Some(limit) = cfg.data.unlabeled_limit {
        if limit < unlabeled.len() {
            Rng::derive(split_seed, &[0x11]).shuffle(&mut unlabeled);
            unlabeled.truncate(limit);
            unlabeled.sort_by_key(|e| e.id);
        }
    }
    if test.iter().any(|e| e.gold_label.is_none()) {
        bail!("every test example needs a label");
    }
    let info = DatasetInfo {
        source: cfg.data.source,
        label_names: spec.label_names.clone(),
        features: spec.features,
        classes,
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
        n_test: test.len(),
    };
    Ok(Splits {
        labeled,
        unlabeled,
        test,
        info,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub metrics_schema: u32,
    pub revision: String,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub dataset: Option<DatasetInfo>,
    pub started_at: u64,
    pub ended_at: Option<u64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!("{} is not a run manifest", path.display());
        }
        if m.version > MANIFEST_VERSION {
            bail!(
                "manifest version {} is newer than supported {MANIFEST_VERSION}",
                m.version
            );
        }
        Ok(m)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Crate version plus the git commit when one can be found.
pub fn revision() -> String {
    let version = env!("CARGO_PKG_VERSION");
    let commit = option_env!("UPET_REVISION").map(str::to_owned).or_else(|| {
        std::process::Command::new("git")
            .args(["rev-parse", "--short", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
    });
    match commit {
        Some(c) if !c.is_empty() => format!("{version}+{c}"),
        _ => version.to_owned(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher: EvalMetrics,
    #[serde(rename = "final")]
    pub final_metrics: EvalMetrics,
    pub iterations_run: usize,
}

/// Aggregates over the seed list. Standard deviations use the `n - 1`
/// denominator and are 0 for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub pel: String,
    pub trainable_params: usize,
    pub n_seeds: usize,
    pub teacher_acc_mean: f64,
    pub teacher_acc_std: f64,
    pub final_acc_mean: f64,
    pub final_acc_std: f64,
    pub final_f1_mean: f64,
    pub final_f1_std: f64,
    pub gain_mean: f64,
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "name",
    "pel",
    "trainable_params",
    "n_seeds",
    "teacher_acc_mean",
    "teacher_acc_std",
    "final_acc_mean",
    "final_acc_std",
    "final_f1_mean",
    "final_f1_std",
    "gain_mean",
];

impl SummaryRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.pel.clone(),
            self.trainable_params.to_string(),
            self.n_seeds.to_string(),
            self.teacher_acc_mean.to_string(),
            self.teacher_acc_std.to_string(),
            self.final_acc_mean.to_string(),
            self.final_acc_std.to_string(),
            self.final_f1_mean.to_string(),
            self.final_f1_std.to_string(),
            self.gain_mean.to_string(),
        ]
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `81.25 ± 1.10` in percent.
pub fn pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

pub fn summarize(
    cfg: &Config,
    features: usize,
    classes: usize,
    seeds: &[SeedResult],
) -> SummaryRow {
    let pel = cfg.pel();
    let col = |f: &dyn Fn(&SeedResult) -> f64| seeds.iter().map(f).collect::<Vec<f64>>();
    let (ta, ts) = mean_std(&col(&|s| s.teacher.accuracy));
    let (fa, fs) = mean_std(&col(&|s| s.final_metrics.accuracy));
    let (f1, f1s) = mean_std(&col(&|s| s.final_metrics.macro_f1));
    SummaryRow {
        name: cfg.run.name.clone(),
        pel: pel.label(),
        trainable_params: trainable_param_count(&pel, features, cfg.model.hidden, classes),
        n_seeds: seeds.len(),
        teacher_acc_mean: ta,
        teacher_acc_std: ts,
        final_acc_mean: fa,
        final_acc_std: fs,
        final_f1_mean: f1,
        final_f1_std: f1s,
        gain_mean: fa - ta,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub metrics_schema: u32,
    pub row: SummaryRow,
    pub teacher_acc: String,
    pub final_acc: String,
    pub final_f1: String,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub dir: PathBuf,
    pub seeds: Vec<SeedResult>,
    pub summary: SummaryRow,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of `cfg` and writes the artifacts under
/// `<out_dir>/<run.name>`.
pub fn run_experiment(cfg: &Config) -> Result<Report> {
    cfg.validate()?;
    let dir = cfg.out_dir().join(&cfg.run.name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        metrics_schema: METRICS_SCHEMA,
        revision: revision(),
        config: cfg.clone(),
        seeds: cfg.run.seeds.clone(),
        dataset: None,
        started_at: unix_now(),
        ended_at: None,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let mut results = Vec::new();
    let mut shape = (0, 0);
    for &seed in &cfg.run.seeds {
        let splits =
            load_splits(cfg, seed).with_context(|| format!("seed {seed}: preparing data"))?;
        if manifest.dataset.is_none() {
            manifest.dataset = Some(splits.info.clone());
        }
        shape = (splits.info.features, splits.info.classes);
        let seed_dir = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let metrics_path = seed_dir.join("metrics.jsonl");
        let mut metrics = BufWriter::new(File::create(&metrics_path)?);
        let st = cfg.selftrain(seed);
        let outcome = selftrain::run_with(
            &st,
            &splits.labeled,
            &splits.unlabeled,
            &splits.test,
            |r: &IterationRecord| {
                let line = serde_json::to_string(r)
                    .map_err(|e| upet_core::Error::Procedure(e.to_string()))?;
                writeln!(metrics, "{line}")?;
                metrics.flush()?;
                Ok(())
            },
        )
        .with_context(|| format!("seed {seed}"))?;
        drop(metrics);
        write_jsonl(&seed_dir.join("scores.jsonl"), &outcome.scores)?;
        write_json(
            &seed_dir.join("curves.json"),
            &serde_json::json!({ "teacher": outcome.teacher_curve, "students": outcome.student_curves }),
        )?;
        checkpoint::save(&outcome.teacher, &seed_dir.join("checkpoint.json"))?;
        results.push(SeedResult {
            seed,
            teacher: outcome.baseline,
            final_metrics: outcome.final_metrics,
            iterations_run: outcome.records.len(),
        });
    }

    let summary = summarize(cfg, shape.0, shape.1, &results);
    let doc = SummaryDoc {
        metrics_schema: METRICS_SCHEMA,
        row: summary.clone(),
        teacher_acc: pm(summary.teacher_acc_mean, summary.teacher_acc_std),
        final_acc: pm(summary.final_acc_mean, summary.final_acc_std),
        final_f1: pm(summary.final_f1_mean, summary.final_f1_std),
        seeds: results.clone(),
    };
    write_json(&dir.join("summary.json"), &doc)?;
    let mut csv = csv::Writer::from_path(dir.join("summary.csv"))?;
    csv.write_record(SUMMARY_HEADER)?;
    csv.write_record(summary.fields())?;
    csv.flush()?;

    manifest.ended_at = Some(unix_now());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(Report {
        dir,
        seeds: results,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(pm(0.8125, 0.011), "81.25 ± 1.10");
    }
}
