//! Experiment configuration: a TOML document with one table per module.
//!
//! Every command-line flag maps onto a key here; `--set section.key=value`
//! reaches the rest. The fully resolved document is what manifests record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use upet_core::data::Format;
use upet_core::losses::{ContrastiveForm, LossConfig, LossKind};
use upet_core::model::{Paradigm, PelConfig, PelVariant};
use upet_core::selftrain::{ReliableSize, SelectionMode, SelfTrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "UPET_OUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub uncertainty: UncertaintySection,
    pub losses: LossesSection,
    pub selftrain: SelfTrainSection,
    pub run: RunSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Labeled examples drawn per class; unset uses the whole training file
    /// as labeled data.
    pub shots: Option<usize>,
    /// Cap on the unlabeled pool after the split.
    pub unlabeled_limit: Option<usize>,
    /// Seed for data generation and splitting; unset follows the run seed.
    pub seed: Option<u64>,

    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sep: f64,
    pub label_noise: f64,

    pub train: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Option<Format>,
    pub label_names: Vec<String>,
    pub features: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            shots: Some(16),
            unlabeled_limit: None,
            seed: None,
            classes: 4,
            per_class: 645,
            dim: 16,
            sep: 3.0,
            label_noise: 0.0,
            train: None,
            unlabeled: None,
            test: None,
            format: None,
            label_names: Vec::new(),
            features: 4096,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Full,
    Adapter,
    Prefix,
    Ptuning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantName,
    pub paradigm: Paradigm,
    pub bottleneck: usize,
    pub count: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub verbalizer_temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: VariantName::Adapter,
            paradigm: Paradigm::Head,
            bottleneck: 8,
            count: 4,
            hidden: 64,
            dropout: 0.1,
            verbalizer_temperature: 1.0,
        }
    }
}

impl ModelSection {
    pub fn pel(&self) -> PelConfig {
        let variant = match self.variant {
            VariantName::Full => PelVariant::Full,
            VariantName::Adapter => PelVariant::Adapter {
                bottleneck: self.bottleneck,
            },
            VariantName::Prefix => PelVariant::Prefix { count: self.count },
            VariantName::Ptuning => PelVariant::Ptuning { count: self.count },
        };
        PelConfig {
            variant,
            paradigm: self.paradigm,
            dropout_rate: self.dropout,
            verbalizer_temperature: self.verbalizer_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub alpha: f64,
    pub mc_samples: usize,
    pub selection: SelectionMode,
    pub workers: usize,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            mc_samples: 10,
            selection: SelectionMode::Uncertainty,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Ce,
    Phce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesSection {
    pub kind: LossName,
    pub tau: f64,
    pub lambda: f64,
    pub negatives: usize,
    pub temperature: f64,
    pub form: ContrastiveForm,
}

impl Default for LossesSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            kind: LossName::Phce,
            tau: 10.0,
            lambda: d.lambda,
            negatives: d.negatives,
            temperature: d.g_temperature,
            form: d.form,
        }
    }
}

impl LossesSection {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            kind: match self.kind {
                LossName::Ce => LossKind::Ce,
                LossName::Phce => LossKind::Phce { tau: self.tau },
            },
            lambda: self.lambda,
            negatives: self.negatives,
            g_temperature: self.temperature,
            form: self.form,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainSection {
    pub iterations: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    /// Reliable-set size as a share of the scored subset.
    pub reliable_fraction: f64,
    /// Absolute reliable-set size; overrides the fraction when set.
    pub reliable_count: Option<usize>,
    pub subset_size: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub early_stop: bool,
    pub pseudo_label_noise: f64,
    pub record_wall_time: bool,
}

impl Default for SelfTrainSection {
    fn default() -> Self {
        let d = SelfTrainConfig::default();
        Self {
            iterations: d.iterations,
            teacher_epochs: d.teacher_epochs,
            student_epochs: d.student_epochs,
            reliable_fraction: 0.5,
            reliable_count: None,
            subset_size: d.subset_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            early_stop: d.early_stop,
            pseudo_label_noise: d.pseudo_label_noise,
            record_wall_time: d.record_wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Unset falls back to `$UPET_OUT_DIR`, then `runs`.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![12, 21, 42, 87, 100],
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted key → values; the sweep runs the Cartesian product.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
        self.set_value(key.trim(), parse_literal(raw.trim()))
    }

    pub fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self)?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts
            .split_last()
            .ok_or_else(|| anyhow!("empty override key"))?;
        let mut node = &mut doc;
        for p in path {
            let table = node
                .as_table_mut()
                .ok_or_else(|| anyhow!("{key}: {p} is not a table"))?;
            node = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("{key}: parent is not a table"))?;
        table.insert(last.to_string(), value);
        *self = doc
            .try_into()
            .with_context(|| format!("applying override {key}"))?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn pel(&self) -> PelConfig {
        self.model.pel()
    }

    /// Core configuration for one seed.
    pub fn selftrain(&self, seed: u64) -> SelfTrainConfig {
        let st = &self.selftrain;
        SelfTrainConfig {
            iterations: st.iterations,
            teacher_epochs: st.teacher_epochs,
            student_epochs: st.student_epochs,
            hidden: self.model.hidden,
            pel: self.pel(),
            loss: self.losses.loss(),
            alpha: self.uncertainty.alpha,
            mc_samples: self.uncertainty.mc_samples,
            selection: self.uncertainty.selection,
            reliable: match st.reliable_count {
                Some(n) => ReliableSize::Count(n),
                None => ReliableSize::Fraction(st.reliable_fraction),
            },
            subset_size: st.subset_size,
            lr: st.lr,
            weight_decay: st.weight_decay,
            batch_size: st.batch_size,
            seed,
            workers: self.uncertainty.workers,
            early_stop: st.early_stop,
            pseudo_label_noise: st.pseudo_label_noise,
            record_wall_time: st.record_wall_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            bail!("run.seeds is empty");
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            bail!("run.name must be a plain directory name");
        }
        if self.uncertainty.workers == 0 {
            bail!("uncertainty.workers must be at least 1");
        }
        if self.data.source == DataSource::Files {
            if self.data.train.is_none() || self.data.test.is_none() {
                bail!("data.train and data.test are required when data.source = \"files\"");
            }
            if self.data.shots.is_none() && self.data.unlabeled.is_none() {
                bail!("without data.shots the unlabeled pool must come from data.unlabeled");
            }
        }
        self.selftrain(self.run.seeds[0]).validate()?;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Parses `1,2,3`.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {s:?}"))
        })
        .collect()
}

/// Parses `key=v1,v2,...` into a grid axis.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<toml::Value>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("grid axis {spec:?} is not of the form key=v1,v2"))?;
    let values: Vec<toml::Value> = values.split(',').map(|v| parse_literal(v.trim())).collect();
    if values.is_empty() {
        bail!("grid axis {key} has no values");
    }
    Ok((key.trim().to_owned(), values))
}
