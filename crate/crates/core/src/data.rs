//! Examples, loading, feature hashing, few-shot splits and synthetic blobs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::uncertainty::SelectionScores;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<SelectionScores>,
}

impl Example {
    pub fn new(id: u64, features: Vec<f64>, gold_label: Option<usize>) -> Self {
        Self {
            id,
            text: None,
            features,
            gold_label,
            pseudo_label: None,
            scores: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub label_names: Vec<String>,
    /// Feature dimension; a power of two when text is hashed.
    pub features: usize,
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_names.len() < 2 {
            return Err(Error::Config("at least two labels are needed".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.label_names {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate label name {name:?}")));
            }
        }
        if self.features < 2 {
            return Err(Error::Config("feature dimension must be at least 2".into()));
        }
        Ok(())
    }

    fn label_index(&self) -> HashMap<&str, usize> {
        self.label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: Option<String>,
    features: Option<Vec<f64>>,
    label: Option<String>,
}

/// Reads a JSONL or CSV file. Ids follow file order, starting at
/// `first_id`. JSONL records carry either `text` (hashed into
/// `spec.features` buckets) or a raw `features` array.
pub fn load(
    path: &Path,
    format: Format,
    spec: &DatasetSpec,
    first_id: u64,
) -> Result<Vec<Example>> {
    spec.validate()?;
    let labels = spec.label_index();
    let resolve = |label: Option<String>, line: usize| -> Result<Option<usize>> {
        match label.filter(|l| !l.is_empty()) {
            None => Ok(None),
            Some(l) => labels
                .get(l.as_str())
                .copied()
                .map(Some)
                .ok_or_else(|| Error::Data(format!("unknown label {l:?} at line {line}"))),
        }
    };
    let mut out = Vec::new();
    match format {
        Format::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line_no = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                let features = match (&rec.text, rec.features) {
                    (_, Some(f)) if f.len() == spec.features => f,
                    (_, Some(f)) => {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("{} features, expected {}", f.len(), spec.features),
                        })
                    }
                    (Some(t), None) => featurize(t, spec.features)?,
                    (None, None) => {
                        return Err(Error::Parse {
                            line: line_no,
                            message: "record has neither \"text\" nor \"features\"".into(),
                        })
                    }
                };
                let gold_label = resolve(rec.label, line_no)?;
                out.push(Example {
                    id: first_id + out.len() as u64,
                    text: rec.text,
                    features,
                    gold_label,
                    pseudo_label: None,
                    scores: None,
                });
            }
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_path(path)
                .map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?;
            let headers = reader
                .headers()
                .map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let text_col =
                headers
                    .iter()
                    .position(|h| h == "text")
                    .ok_or_else(|| Error::Parse {
                        line: 1,
                        message: "CSV header must contain a \"text\" column".into(),
                    })?;
            let label_col = headers.iter().position(|h| h == "label");
            for record in reader.records() {
                let record = record.map_err(|e| Error::Parse {
                    line: e.position().map_or(0, |p| p.line() as usize),
                    message: e.to_string(),
                })?;
                let line_no = record.position().map_or(0, |p| p.line() as usize);
                let text = record.get(text_col).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: "missing text field".into(),
                })?;
                let label = label_col.and_then(|c| record.get(c)).map(str::to_owned);
                out.push(Example {
                    id: first_id + out.len() as u64,
                    text: Some(text.to_owned()),
                    features: featurize(text, spec.features)?,
                    gold_label: resolve(label, line_no)?,
                    pseudo_label: None,
                    scores: None,
                });
            }
        }
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Signed feature hashing. Text is lowercased and split on every
/// non-alphanumeric character; each token's FNV-1a hash picks the bucket
/// from its low bits and the sign from its top bit. The bucket vector is
/// L2-normalized, and text without tokens maps to the zero vector.
pub fn featurize(text: &str, features: usize) -> Result<Vec<f64>> {
    if features < 2 || !features.is_power_of_two() {
        return Err(Error::Config(format!(
            "hashed feature dimension must be a power of two >= 2, got {features}"
        )));
    }
    let mut v = vec![0.0; features];
    let lower = text.to_lowercase();
    for token in lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = fnv1a(token.as_bytes());
        let bucket = (h & (features as u64 - 1)) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

/// Draws exactly `per_class` labelled examples of every class, uniformly
/// without replacement. Returns `(labeled, remainder)`; the remainder keeps
/// its gold labels for diagnostics and keeps pool order.
pub fn few_shot_split(
    pool: &[Example],
    per_class: usize,
    classes: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ex) in pool.iter().enumerate() {
        match ex.gold_label {
            Some(y) if y < classes => by_class[y].push(i),
            Some(y) => {
                return Err(Error::Data(format!(
                    "label {y} outside 0..{classes} for example {}",
                    ex.id
                )))
            }
            None => return Err(Error::Data(format!("example {} has no gold label", ex.id))),
        }
    }
    if by_class.iter().any(|members| members.len() < per_class) {
        let counts: Vec<String> = by_class
            .iter()
            .enumerate()
            .map(|(c, m)| format!("class {c}: {}", m.len()))
            .collect();
        return Err(Error::Data(format!(
            "need {per_class} examples per class, have [{}]",
            counts.join(", ")
        )));
    }
    let mut chosen = vec![false; pool.len()];
    let mut labeled = Vec::with_capacity(per_class * classes);
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = Rng::derive(seed, &[0x5e1, c as u64]);
        rng.shuffle(members);
        for &i in members.iter().take(per_class) {
            chosen[i] = true;
            labeled.push(pool[i].clone());
        }
    }
    let remainder = pool
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(e, _)| e.clone())
        .collect();
    Ok((labeled, remainder))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: usize,
    /// Examples generated per class before the train/test split.
    pub per_class: usize,
    pub dim: usize,
    /// Distance between every pair of class means.
    pub sep: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// `train` with symmetric label noise applied.
    pub noisy_train: Vec<Example>,
    pub means: Vec<Vec<f64>>,
}

/// Class means on a regular simplex with pairwise distance `sep`, centered
/// at the origin.
pub fn simplex_means(classes: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    let scale = sep / std::f64::consts::SQRT_2;
    let centroid = scale / classes as f64;
    (0..classes)
        .map(|c| {
            (0..dim)
                .map(|j| {
                    let base = if j < classes { -centroid } else { 0.0 };
                    if j == c {
                        base + scale
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect()
}

/// Unit-variance Gaussian blobs, split 80/20 per class into train and test.
pub fn synth(p: &SynthParams) -> Result<SynthData> {
    if p.classes < 2 {
        return Err(Error::Config(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    if p.dim < p.classes {
        return Err(Error::Config(format!(
            "dimension {} cannot hold a simplex of {} classes",
            p.dim, p.classes
        )));
    }
    if !(p.sep > 0.0) {
        return Err(Error::Config("class separation must be positive".into()));
    }
    if !(0.0..1.0).contains(&p.noise_rate) {
        return Err(Error::Config("noise rate must lie in [0, 1)".into()));
    }
    if p.per_class < 2 {
        return Err(Error::Config("need at least 2 examples per class".into()));
    }
    let means = simplex_means(p.classes, p.dim, p.sep);
    let mut rng = Rng::derive(p.seed, &[0x5717]);
    let n_train = (p.per_class * 4).div_ceil(5).min(p.per_class - 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        let mut pts: Vec<Vec<f64>> = (0..p.per_class)
            .map(|_| mean.iter().map(|m| m + rng.normal()).collect())
            .collect();
        rng.shuffle(&mut pts);
        for (k, x) in pts.into_iter().enumerate() {
            let dest = if k < n_train { &mut train } else { &mut test };
            dest.push((c, x));
        }
    }
    // interleave classes so that file order carries no label information
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    let to_examples = |rows: Vec<(usize, Vec<f64>)>, first: u64| -> Vec<Example> {
        rows.into_iter()
            .enumerate()
            .map(|(i, (c, x))| Example::new(first + i as u64, x, Some(c)))
            .collect()
    };
    let train = to_examples(train, 0);
    let test = to_examples(test, train.len() as u64);
    let mut noise_rng = Rng::derive(p.seed, &[0x2015e]);
    let noisy_train = inject_label_noise(&train, p.classes, p.noise_rate, &mut noise_rng);
    Ok(SynthData {
        train,
        test,
        noisy_train,
        means,
    })
}

/// Copy of `examples` where each gold label is, with probability `rate`,
/// replaced by a uniformly chosen different class.
pub fn inject_label_noise(
    examples: &[Example],
    classes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Vec<Example> {
    examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let flip = rng.uniform() < rate;
            let offset = 1 + rng.below(classes - 1);
            if let (true, Some(y)) = (flip, e.gold_label) {
                e.gold_label = Some((y + offset) % classes);
            }
            e
        })
        .collect()
}
