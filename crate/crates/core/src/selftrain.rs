//! Teacher-student self-training with uncertainty-aware selection.
//!
//! One iteration: pseudo-label the unlabeled subset with the teacher, score
//! every example by Monte Carlo dropout, draw a reliable set by the fused
//! weights (the rest is the hard set), train a freshly initialized student
//! on the reliable set with the robust loss and easy-hard contrastive
//! regularizer, then promote the student to teacher.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{
    self, Batch, BatchInput, Mask, ModelParams, OptState, PelConfig, Target, TrainScope, Triple,
};
use crate::numeric::{self, Rng};
use crate::uncertainty::{self, SelectionScores};

const TAG_INIT: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_PAIR: u64 = 4;
const TAG_SUBSET: u64 = 5;
const TAG_MC: u64 = 6;
const TAG_SELECT: u64 = 7;
const TAG_NOISE: u64 = 8;

/// Phase keys for stream derivation; the teacher uses iteration 0.
const PHASE_TEACHER: u64 = 0;
const PHASE_STUDENT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Weighted by fused confidence and certainty.
    Uncertainty,
    /// Uniform weights, same stratified draw.
    Random,
    /// Every pseudo-labelled example is reliable; the hard set is empty.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliableSize {
    Fraction(f64),
    Count(usize),
}

impl ReliableSize {
    pub fn resolve(self, pool: usize) -> Result<usize> {
        match self {
            ReliableSize::Fraction(rho) if rho > 0.0 && rho <= 1.0 => {
                Ok(((rho * pool as f64).round() as usize).clamp(1, pool.max(1)))
            }
            ReliableSize::Fraction(rho) => Err(Error::Config(format!(
                "reliable fraction {rho} outside (0, 1]"
            ))),
            ReliableSize::Count(n) if n <= pool => Ok(n),
            ReliableSize::Count(n) => Err(Error::Config(format!(
                "cannot select {n} reliable examples from a pool of {pool}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub iterations: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub hidden: usize,
    pub pel: PelConfig,
    pub loss: LossConfig,
    pub alpha: f64,
    pub mc_samples: usize,
    pub selection: SelectionMode,
    pub reliable: ReliableSize,
    /// Size of the unlabeled subset scored per iteration; `None` uses all.
    pub subset_size: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    /// Stop when student accuracy falls two iterations in a row.
    pub early_stop: bool,
    /// Symmetric noise injected into the reliable set's pseudo labels.
    pub pseudo_label_noise: f64,
    /// Fill `wall_ms` in iteration records. Off keeps records reproducible.
    pub record_wall_time: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            teacher_epochs: 100,
            student_epochs: 100,
            hidden: 64,
            pel: PelConfig::new(
                model::PelVariant::Adapter { bottleneck: 8 },
                model::Paradigm::Head,
            ),
            loss: LossConfig::default(),
            alpha: 0.4,
            mc_samples: 10,
            selection: SelectionMode::Uncertainty,
            reliable: ReliableSize::Fraction(0.5),
            subset_size: None,
            lr: 1e-2,
            weight_decay: 1e-2,
            batch_size: 32,
            seed: 42,
            workers: 1,
            early_stop: true,
            pseudo_label_noise: 0.0,
            record_wall_time: false,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pel.validate(self.hidden)?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config(
                "at least one Monte Carlo sample is needed".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and weight decay nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.pseudo_label_noise) {
            return Err(Error::Config(
                "pseudo-label noise must lie in [0, 1)".into(),
            ));
        }
        if let ReliableSize::Fraction(rho) = self.reliable {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!(
                    "reliable fraction {rho} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Accuracy and macro-F1. Classes absent from both gold and predictions are
/// left out of the macro average; a class present in only one scores 0.
pub fn evaluate(model: &ModelParams, test: &[Example]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut pairs = Vec::with_capacity(test.len());
    for e in test {
        let gold = e
            .gold_label
            .ok_or_else(|| Error::Data(format!("evaluation example {} has no gold label", e.id)))?;
        pairs.push((gold, model.predict(&e.features)?));
    }
    Ok(score_predictions(&pairs, model.dims.classes))
}

/// Metrics from `(gold, predicted)` pairs.
pub fn score_predictions(pairs: &[(usize, usize)], classes: usize) -> EvalMetrics {
    let mut tp = vec![0usize; classes];
    let mut gold_n = vec![0usize; classes];
    let mut pred_n = vec![0usize; classes];
    for &(g, p) in pairs {
        gold_n[g] += 1;
        pred_n[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut f1_sum = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        if gold_n[c] == 0 && pred_n[c] == 0 {
            continue;
        }
        counted += 1;
        if tp[c] > 0 {
            f1_sum += 2.0 * tp[c] as f64 / (gold_n[c] + pred_n[c]) as f64;
        }
    }
    EvalMetrics {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1: if counted > 0 {
            f1_sum / counted as f64
        } else {
            0.0
        },
        n: pairs.len(),
    }
}

/// Teacher argmax labels (dropout-free, lowest class on ties).
pub fn pseudo_annotate(teacher: &ModelParams, pool: &[Example]) -> Result<Vec<usize>> {
    pool.iter().map(|e| teacher.predict(&e.features)).collect()
}

/// A training example: id, features and target class.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub id: u64,
    pub features: &'a [f64],
    pub label: usize,
}

/// Optimization settings for [`fit`].
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Distinguishes the random streams of separate fits under one seed.
    pub stream: [u64; 2],
}

/// Minibatch AdamW over `items` for `opts.epochs` epochs. When the loss has
/// a regularizer, each item is paired every epoch with a same-label positive
/// from `items` and `loss.negatives` same-label negatives from `hard`.
/// Returns the mean loss of each epoch.
pub fn fit<'a>(
    model: &mut ModelParams,
    scope: TrainScope,
    items: &[TrainItem<'a>],
    hard: &[TrainItem<'a>],
    loss: &LossConfig,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Procedure("no training examples".into()));
    }
    let mut opt = OptState::new(model, opts.lr, opts.weight_decay);
    let rate = model.pel.dropout_rate;
    let hidden = model.dims.hidden;
    let [s0, s1] = opts.stream;
    let regularized = loss.lambda > 0.0;

    let mut easy_by_label: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut hard_by_label: HashMap<usize, Vec<usize>> = HashMap::new();
    if regularized {
        for (i, it) in items.iter().enumerate() {
            easy_by_label.entry(it.label).or_default().push(i);
        }
        for (i, it) in hard.iter().enumerate() {
            hard_by_label.entry(it.label).or_default().push(i);
        }
    }

    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs as u64 {
        let mut order: Vec<usize> = (0..items.len()).collect();
        Rng::derive(opts.seed, &[TAG_ORDER, s0, s1, epoch]).shuffle(&mut order);
        let mut mask_rng = Rng::derive(opts.seed, &[TAG_DROPOUT, s0, s1, epoch]);
        let pairing = if regularized {
            let mut rng = Rng::derive(opts.seed, &[TAG_PAIR, s0, s1, epoch]);
            Some(draw_pairing(
                items,
                &easy_by_label,
                &hard_by_label,
                loss.negatives,
                &mut rng,
            ))
        } else {
            None
        };

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let mut batch: Batch<'a> = Batch::default();
            // (from_hard, index) -> input slot
            let mut slots: HashMap<(bool, usize), usize> = HashMap::new();
            let mut slot = |batch: &mut Batch<'a>, hard_side: bool, i: usize| -> usize {
                *slots.entry((hard_side, i)).or_insert_with(|| {
                    let it = if hard_side { &hard[i] } else { &items[i] };
                    batch.inputs.push(BatchInput {
                        id: it.id,
                        features: it.features,
                    });
                    batch.inputs.len() - 1
                })
            };
            for &i in chunk {
                let input = slot(&mut batch, false, i);
                let mask = (rate > 0.0).then(|| Mask::draw(hidden, rate, &mut mask_rng));
                batch.targets.push(Target {
                    input,
                    label: items[i].label,
                    mask,
                });
            }
            if let Some(pairs) = &pairing {
                for &i in chunk {
                    if let Some((pos, negs)) = &pairs[i] {
                        let anchor = slot(&mut batch, false, i);
                        let positive = slot(&mut batch, false, *pos);
                        let negatives = negs.iter().map(|&k| slot(&mut batch, true, k)).collect();
                        batch.triples.push(Triple {
                            anchor,
                            positive,
                            negatives,
                        });
                    }
                }
            }
            let lg = model::grad(model, scope, &batch, loss)?;
            model::adamw_step(model, &mut opt, &lg.grads, scope)?;
            epoch_loss += lg.loss;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

type Pairing = Vec<Option<(usize, Vec<usize>)>>;

fn draw_pairing(
    items: &[TrainItem<'_>],
    easy_by_label: &HashMap<usize, Vec<usize>>,
    hard_by_label: &HashMap<usize, Vec<usize>>,
    negatives: usize,
    rng: &mut Rng,
) -> Pairing {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let easy = &easy_by_label[&it.label];
            let hard = hard_by_label.get(&it.label)?;
            if easy.len() < 2 || hard.is_empty() {
                return None;
            }
            // uniform over the other members of the class
            let mut k = rng.below(easy.len() - 1);
            if easy[k] == i {
                k = easy.len() - 1;
            }
            let negs = (0..negatives)
                .map(|_| hard[rng.below(hard.len())])
                .collect();
            Some((easy[k], negs))
        })
        .collect()
}

fn teacher_items(labeled: &[Example], classes: usize) -> Result<Vec<TrainItem<'_>>> {
    let mut seen = vec![false; classes];
    let items = labeled
        .iter()
        .map(|e| {
            let label = e.gold_label.ok_or_else(|| {
                Error::Data(format!("labeled example {} has no gold label", e.id))
            })?;
            if label >= classes {
                return Err(Error::Data(format!("label {label} outside 0..{classes}")));
            }
            seen[label] = true;
            Ok(TrainItem {
                id: e.id,
                features: &e.features,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "class {missing} is absent from the labeled set"
        )));
    }
    Ok(items)
}

/// Initial parameters shared by the teacher and every student. Under the
/// prompt paradigm the label embeddings are fitted on the labeled set here.
pub fn initial_model(
    cfg: &SelfTrainConfig,
    labeled: &[Example],
    features: usize,
    classes: usize,
) -> Result<ModelParams> {
    let mut w0 = ModelParams::init(
        cfg.pel,
        features,
        cfg.hidden,
        classes,
        numeric_seed(cfg.seed, TAG_INIT),
    )?;
    if cfg.pel.paradigm == model::Paradigm::Prompt {
        let items = teacher_items(labeled, classes)?;
        w0.fit_verbalizer(items.iter().map(|i| (i.features, i.label)))?;
    }
    Ok(w0)
}

fn numeric_seed(seed: u64, tag: u64) -> u64 {
    Rng::derive(seed, &[tag]).next_u64()
}

/// Trains every parameter of `w0` with cross-entropy on the labeled set.
pub fn fine_tune_teacher(
    w0: &ModelParams,
    labeled: &[Example],
    cfg: &SelfTrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    let items = teacher_items(labeled, w0.dims.classes)?;
    let mut teacher = w0.clone();
    if cfg.teacher_epochs == 0 {
        return Ok((teacher, Vec::new()));
    }
    let opts = FitOptions {
        epochs: cfg.teacher_epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        stream: [PHASE_TEACHER, 0],
    };
    let curve = fit(
        &mut teacher,
        TrainScope::All,
        &items,
        &[],
        &LossConfig::plain_ce(),
        &opts,
    )?;
    Ok((teacher, curve))
}

/// Reliable/hard partition of a pool, as indices into the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub reliable: Vec<usize>,
    pub hard: Vec<usize>,
    /// Present when the selection was uncertainty-weighted.
    pub scores: Option<Vec<SelectionScores>>,
}

/// Draws the reliable set from `pool` (already pseudo-labelled) and returns
/// it with the complementary hard set.
///
/// The draw is stratified: the reliable budget is split evenly over the
/// predicted classes (the remainder going to the largest classes), each
/// class is sampled by weight, and any shortfall from small classes is
/// filled by a global weighted draw over what is left.
pub fn select_reliable(
    teacher: &ModelParams,
    pool: &[Example],
    pseudo: &[usize],
    cfg: &SelfTrainConfig,
    iteration: u64,
) -> Result<Selection> {
    if pool.len() != pseudo.len() {
        return Err(Error::Dimension(
            "pool and pseudo labels differ in length".into(),
        ));
    }
    let budget = cfg.reliable.resolve(pool.len())?;
    if cfg.selection == SelectionMode::All || budget == pool.len() {
        let scores = if cfg.selection == SelectionMode::Uncertainty {
            Some(score(teacher, pool, pseudo, cfg, iteration)?)
        } else {
            None
        };
        return Ok(Selection {
            reliable: (0..pool.len()).collect(),
            hard: Vec::new(),
            scores: if cfg.selection == SelectionMode::All {
                None
            } else {
                scores
            },
        });
    }
    let (weights, scores) = match cfg.selection {
        SelectionMode::Uncertainty => {
            let s = score(teacher, pool, pseudo, cfg, iteration)?;
            (s.iter().map(|s| s.weight).collect(), Some(s))
        }
        _ => (vec![1.0; pool.len()], None),
    };
    let reliable = stratified_draw(
        &weights,
        pseudo,
        teacher.dims.classes,
        budget,
        cfg.seed,
        iteration,
    )?;
    let mut chosen = vec![false; pool.len()];
    reliable.iter().for_each(|&i| chosen[i] = true);
    let hard = (0..pool.len()).filter(|&i| !chosen[i]).collect();
    Ok(Selection {
        reliable,
        hard,
        scores,
    })
}

fn score(
    teacher: &ModelParams,
    pool: &[Example],
    pseudo: &[usize],
    cfg: &SelfTrainConfig,
    iteration: u64,
) -> Result<Vec<SelectionScores>> {
    let mut rng = Rng::derive(cfg.seed, &[TAG_MC, iteration]);
    let masks = uncertainty::draw_masks(
        teacher.dims.hidden,
        cfg.mc_samples,
        teacher.pel.dropout_rate,
        &mut rng,
    )?;
    let inputs: Vec<&[f64]> = pool.iter().map(|e| e.features.as_slice()).collect();
    uncertainty::score_pool(teacher, &inputs, pseudo, &masks, cfg.alpha, cfg.workers)
}

/// Stratified weighted sampling without replacement; indices ascending.
pub fn stratified_draw(
    weights: &[f64],
    labels: &[usize],
    classes: usize,
    budget: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    let mut present: Vec<usize> = (0..classes).filter(|&c| !groups[c].is_empty()).collect();
    if present.is_empty() {
        return Ok(Vec::new());
    }
    let share = budget / present.len();
    let extra = budget % present.len();
    present.sort_by(|&a, &b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(&b)));

    let mut chosen = vec![false; weights.len()];
    let mut shortfall = 0;
    for (rank, &c) in present.iter().enumerate() {
        let quota = share + usize::from(rank < extra);
        let members = &groups[c];
        let w: Vec<f64> = members.iter().map(|&i| weights[i]).collect();
        let positive = w.iter().filter(|&&v| v > 0.0).count();
        let take = quota.min(positive);
        shortfall += quota - take;
        let mut rng = Rng::derive(seed, &[TAG_SELECT, iteration, c as u64]);
        for k in numeric::weighted_sample_without_replacement(&w, take, &mut rng)? {
            chosen[members[k]] = true;
        }
    }
    if shortfall > 0 {
        let rest: Vec<f64> = weights
            .iter()
            .zip(&chosen)
            .map(|(&w, &c)| if c { 0.0 } else { w })
            .collect();
        let mut rng = Rng::derive(seed, &[TAG_SELECT, iteration, u64::MAX]);
        for i in numeric::weighted_sample_without_replacement(&rest, shortfall, &mut rng)? {
            chosen[i] = true;
        }
    }
    Ok((0..weights.len()).filter(|&i| chosen[i]).collect())
}

/// Trains a fresh copy of `w0` on the reliable set with the student
/// objective, tuning only the parameter-efficient blocks.
pub fn train_student(
    w0: &ModelParams,
    reliable: &[TrainItem<'_>],
    hard: &[TrainItem<'_>],
    cfg: &SelfTrainConfig,
    iteration: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    if reliable.is_empty() {
        return Err(Error::Procedure("reliable set is empty".into()));
    }
    let mut student = w0.clone();
    let opts = FitOptions {
        epochs: cfg.student_epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        stream: [PHASE_STUDENT, iteration],
    };
    let curve = fit(
        &mut student,
        TrainScope::Efficient,
        reliable,
        hard,
        &cfg.loss,
        &opts,
    )?;
    Ok((student, curve))
}

/// One line of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub teacher_acc: f64,
    pub student_acc: f64,
    pub macro_f1: f64,
    pub n_selected: usize,
    pub mean_s_cf: Option<f64>,
    pub mean_s_ct: Option<f64>,
    pub mean_bald: Option<f64>,
    pub loss_final: f64,
    pub wall_ms: Option<u64>,
    /// Share of subset pseudo labels matching the held-back gold label.
    pub pseudo_acc: Option<f64>,
    /// Same, restricted to the reliable set (after any injected noise).
    pub reliable_acc: Option<f64>,
}

/// Per-example scoring export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub iteration: usize,
    pub id: u64,
    pub pseudo_label: usize,
    pub s_cf: f64,
    pub s_ct: f64,
    pub bald_raw: f64,
    pub weight: f64,
    pub selected: bool,
}

/// Everything the loop carries between iterations.
#[derive(Clone, Debug)]
pub struct SelfTrainState {
    pub cfg: SelfTrainConfig,
    /// Shared initialization for every student.
    pub initial: ModelParams,
    pub teacher: ModelParams,
    pub student: Option<ModelParams>,
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    /// Ids of the current subset and its reliable/hard partition.
    pub subset: Vec<u64>,
    pub reliable: Vec<u64>,
    pub hard: Vec<u64>,
    pub iteration: usize,
    pub teacher_curve: Vec<f64>,
    pub student_curves: Vec<Vec<f64>>,
    pub records: Vec<IterationRecord>,
    pub scores: Vec<ScoreRecord>,
}

impl SelfTrainState {
    /// Builds the shared initialization and fine-tunes the teacher.
    pub fn new(
        cfg: SelfTrainConfig,
        labeled: Vec<Example>,
        unlabeled: Vec<Example>,
    ) -> Result<Self> {
        cfg.validate()?;
        let features = labeled
            .first()
            .map(|e| e.features.len())
            .ok_or_else(|| Error::Data("labeled set is empty".into()))?;
        let classes = labeled
            .iter()
            .filter_map(|e| e.gold_label)
            .max()
            .map_or(0, |m| m + 1);
        Self::with_classes(cfg, labeled, unlabeled, features, classes)
    }

    pub fn with_classes(
        cfg: SelfTrainConfig,
        labeled: Vec<Example>,
        unlabeled: Vec<Example>,
        features: usize,
        classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let initial = initial_model(&cfg, &labeled, features, classes)?;
        let (teacher, teacher_curve) = fine_tune_teacher(&initial, &labeled, &cfg)?;
        Ok(Self {
            cfg,
            initial,
            teacher,
            student: None,
            labeled,
            unlabeled,
            subset: Vec::new(),
            reliable: Vec::new(),
            hard: Vec::new(),
            iteration: 0,
            teacher_curve,
            student_curves: Vec::new(),
            records: Vec::new(),
            scores: Vec::new(),
        })
    }

    fn sample_subset(&self, iteration: u64) -> Vec<usize> {
        let n = self.unlabeled.len();
        match self.cfg.subset_size {
            Some(k) if k < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                Rng::derive(self.cfg.seed, &[TAG_SUBSET, iteration]).shuffle(&mut idx);
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    }

    /// Runs one full iteration and promotes the student to teacher.
    pub fn step(&mut self, test: &[Example]) -> Result<&IterationRecord> {
        let started = self.cfg.record_wall_time.then(std::time::Instant::now);
        let k = self.iteration + 1;
        let iter_key = k as u64;
        let classes = self.teacher.dims.classes;

        let subset_idx = self.sample_subset(iter_key);
        if subset_idx.is_empty() {
            return Err(Error::Procedure("unlabeled pool is empty".into()));
        }
        let pool: Vec<Example> = subset_idx
            .iter()
            .map(|&i| self.unlabeled[i].clone())
            .collect();
        let pseudo = pseudo_annotate(&self.teacher, &pool)?;
        let teacher_acc = evaluate(&self.teacher, test)?.accuracy;
        let selection = select_reliable(&self.teacher, &pool, &pseudo, &self.cfg, iter_key)?;

        let mut labels = pseudo.clone();
        if self.cfg.pseudo_label_noise > 0.0 {
            let mut rng = Rng::derive(self.cfg.seed, &[TAG_NOISE, iter_key]);
            for &i in &selection.reliable {
                let flip = rng.uniform() < self.cfg.pseudo_label_noise;
                let offset = 1 + rng.below(classes - 1);
                if flip {
                    labels[i] = (labels[i] + offset) % classes;
                }
            }
        }
        let item = |i: usize| TrainItem {
            id: pool[i].id,
            features: &pool[i].features,
            label: labels[i],
        };
        let reliable: Vec<TrainItem<'_>> = selection.reliable.iter().map(|&i| item(i)).collect();
        let hard: Vec<TrainItem<'_>> = selection.hard.iter().map(|&i| item(i)).collect();
        let (student, curve) = train_student(&self.initial, &reliable, &hard, &self.cfg, iter_key)?;
        let eval = evaluate(&student, test)?;

        let agreement = |idx: &mut dyn Iterator<Item = usize>, lab: &[usize]| -> Option<f64> {
            let (mut hit, mut n) = (0usize, 0usize);
            for i in idx {
                if let Some(g) = pool[i].gold_label {
                    n += 1;
                    hit += usize::from(g == lab[i]);
                }
            }
            (n > 0).then(|| hit as f64 / n as f64)
        };
        let pseudo_acc = agreement(&mut (0..pool.len()), &pseudo);
        let reliable_acc = agreement(&mut selection.reliable.iter().copied(), &labels);

        let mean = |f: &dyn Fn(&SelectionScores) -> f64| {
            selection
                .scores
                .as_ref()
                .map(|s| s.iter().map(f).sum::<f64>() / s.len() as f64)
        };
        let record = IterationRecord {
            iteration: k,
            teacher_acc,
            student_acc: eval.accuracy,
            macro_f1: eval.macro_f1,
            n_selected: selection.reliable.len(),
            mean_s_cf: mean(&|s| s.confidence),
            mean_s_ct: mean(&|s| s.certainty),
            mean_bald: mean(&|s| s.bald_raw),
            loss_final: curve.last().copied().unwrap_or(f64::NAN),
            wall_ms: started.map(|t| t.elapsed().as_millis() as u64),
            pseudo_acc,
            reliable_acc,
        };

        if let Some(scores) = &selection.scores {
            let mut selected = vec![false; pool.len()];
            selection.reliable.iter().for_each(|&i| selected[i] = true);
            for (i, s) in scores.iter().enumerate() {
                self.scores.push(ScoreRecord {
                    iteration: k,
                    id: pool[i].id,
                    pseudo_label: pseudo[i],
                    s_cf: s.confidence,
                    s_ct: s.certainty,
                    bald_raw: s.bald_raw,
                    weight: s.weight,
                    selected: selected[i],
                });
            }
        }
        self.subset = pool.iter().map(|e| e.id).collect();
        self.reliable = selection.reliable.iter().map(|&i| pool[i].id).collect();
        self.hard = selection.hard.iter().map(|&i| pool[i].id).collect();
        self.teacher = student.clone();
        self.student = Some(student);
        self.student_curves.push(curve);
        self.iteration = k;
        self.records.push(record);
        Ok(self.records.last().expect("record just pushed"))
    }

    /// True when student accuracy fell in each of the last two iterations.
    pub fn should_stop(&self) -> bool {
        let r = &self.records;
        self.cfg.early_stop
            && r.len() >= 3
            && r[r.len() - 1].student_acc < r[r.len() - 2].student_acc
            && r[r.len() - 2].student_acc < r[r.len() - 3].student_acc
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Fine-tuned teacher before any self-training.
    pub baseline: EvalMetrics,
    pub final_metrics: EvalMetrics,
    pub records: Vec<IterationRecord>,
    pub scores: Vec<ScoreRecord>,
    pub teacher: ModelParams,
    pub teacher_curve: Vec<f64>,
    pub student_curves: Vec<Vec<f64>>,
}

/// The whole loop. Returns the final teacher.
pub fn run(
    cfg: &SelfTrainConfig,
    labeled: &[Example],
    unlabeled: &[Example],
    test: &[Example],
) -> Result<RunOutcome> {
    run_with(cfg, labeled, unlabeled, test, |_| Ok(()))
}

/// [`run`] with a callback invoked after every iteration; a failing
/// iteration aborts with the index and the count of completed ones.
pub fn run_with(
    cfg: &SelfTrainConfig,
    labeled: &[Example],
    unlabeled: &[Example],
    test: &[Example],
    mut on_iteration: impl FnMut(&IterationRecord) -> Result<()>,
) -> Result<RunOutcome> {
    check_disjoint(labeled, unlabeled, test)?;
    let (features, classes) = shape_of(labeled, unlabeled, test)?;
    let mut state = SelfTrainState::with_classes(
        cfg.clone(),
        labeled.to_vec(),
        unlabeled.to_vec(),
        features,
        classes,
    )?;
    let baseline = evaluate(&state.teacher, test)?;
    for k in 0..cfg.iterations {
        let record = state.step(test).map_err(|e| {
            Error::Procedure(format!(
                "iteration {} failed after {k} completed: {e}",
                k + 1
            ))
        })?;
        on_iteration(record)?;
        if state.should_stop() {
            break;
        }
    }
    let final_metrics = evaluate(&state.teacher, test)?;
    Ok(RunOutcome {
        baseline,
        final_metrics,
        records: state.records,
        scores: state.scores,
        teacher: state.teacher,
        teacher_curve: state.teacher_curve,
        student_curves: state.student_curves,
    })
}

pub(crate) fn shape_of(
    labeled: &[Example],
    unlabeled: &[Example],
    test: &[Example],
) -> Result<(usize, usize)> {
    let features = labeled
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| Error::Data("labeled set is empty".into()))?;
    let all = labeled.iter().chain(unlabeled).chain(test);
    if let Some(bad) = labeled
        .iter()
        .chain(unlabeled)
        .chain(test)
        .find(|e| e.features.len() != features)
    {
        return Err(Error::Dimension(format!(
            "example {} has {} features, expected {features}",
            bad.id,
            bad.features.len()
        )));
    }
    let classes = all.filter_map(|e| e.gold_label).max().map_or(0, |m| m + 1);
    Ok((features, classes))
}

fn check_disjoint(labeled: &[Example], unlabeled: &[Example], test: &[Example]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for e in labeled.iter().chain(unlabeled).chain(test) {
        if !seen.insert(e.id) {
            return Err(Error::Data(format!(
                "example id {} appears in more than one split",
                e.id
            )));
        }
    }
    Ok(())
}

/// Plain self-training: label everything with the teacher, train the
/// student on all of it with cross-entropy, promote, repeat. No scoring,
/// no selection, no robust loss, no regularizer.
pub fn run_vanilla(
    cfg: &SelfTrainConfig,
    labeled: &[Example],
    unlabeled: &[Example],
    test: &[Example],
) -> Result<RunOutcome> {
    check_disjoint(labeled, unlabeled, test)?;
    let (features, classes) = shape_of(labeled, unlabeled, test)?;
    let initial = initial_model(cfg, labeled, features, classes)?;
    let (mut teacher, teacher_curve) = fine_tune_teacher(&initial, labeled, cfg)?;
    let baseline = evaluate(&teacher, test)?;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut student_curves = Vec::new();
    for k in 1..=cfg.iterations {
        let pseudo = pseudo_annotate(&teacher, unlabeled)?;
        let teacher_acc = evaluate(&teacher, test)?.accuracy;
        let items: Vec<TrainItem<'_>> = unlabeled
            .iter()
            .zip(&pseudo)
            .map(|(e, &label)| TrainItem {
                id: e.id,
                features: &e.features,
                label,
            })
            .collect();
        let mut student = initial.clone();
        let opts = FitOptions {
            epochs: cfg.student_epochs,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            stream: [PHASE_STUDENT, k as u64],
        };
        let curve = fit(
            &mut student,
            TrainScope::Efficient,
            &items,
            &[],
            &LossConfig::plain_ce(),
            &opts,
        )?;
        let eval = evaluate(&student, test)?;
        let known: Vec<(usize, usize)> = unlabeled
            .iter()
            .zip(&pseudo)
            .filter_map(|(e, &p)| e.gold_label.map(|g| (g, p)))
            .collect();
        let pseudo_acc = (!known.is_empty())
            .then(|| known.iter().filter(|(g, p)| g == p).count() as f64 / known.len() as f64);
        records.push(IterationRecord {
            iteration: k,
            teacher_acc,
            student_acc: eval.accuracy,
            macro_f1: eval.macro_f1,
            n_selected: items.len(),
            mean_s_cf: None,
            mean_s_ct: None,
            mean_bald: None,
            loss_final: curve.last().copied().unwrap_or(f64::NAN),
            wall_ms: None,
            pseudo_acc,
            reliable_acc: pseudo_acc,
        });
        student_curves.push(curve);
        teacher = student;
        let r = &records;
        if cfg.early_stop
            && r.len() >= 3
            && r[r.len() - 1].student_acc < r[r.len() - 2].student_acc
            && r[r.len() - 2].student_acc < r[r.len() - 3].student_acc
        {
            break;
        }
    }
    let final_metrics = evaluate(&teacher, test)?;
    Ok(RunOutcome {
        baseline,
        final_metrics,
        records,
        scores: Vec::new(),
        teacher,
        teacher_curve,
        student_curves,
    })
}
