//! The classifier standing in for a pretrained language model.
//!
//! A frozen `tanh` backbone maps features to a `d`-dimensional hidden state.
//! Three parameter-efficient variants bolt a small tunable block onto it:
//!
//! * `Ptuning`: the mean of `I` learned feature-space pseudo tokens is added
//!   to the input before the backbone.
//! * `Prefix`: the hidden state attends over `I` learned vectors and adds the
//!   attention-weighted sum back (`h + Σ softmax(h·P)ᵢ Pᵢ`).
//! * `Adapter`: a bottleneck residual `h + up(relu(down(h)))` with `m < d`.
//!
//! Predictions come either from a fresh classification head (`Head`) or from
//! frozen per-class label embeddings scored by dot product (`Prompt`), the
//! latter playing the role of a verbalizer over a pretrained output layer.
//! Dropout, when requested, acts on the final hidden representation only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind};
use crate::numeric::{self, affine, affine_t_acc, outer_acc, ProbVector, Rng};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PelVariant {
    Full,
    Adapter { bottleneck: usize },
    Prefix { count: usize },
    Ptuning { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Head,
    Prompt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PelConfig {
    pub variant: PelVariant,
    pub paradigm: Paradigm,
    pub dropout_rate: f64,
    #[serde(default = "default_verbalizer_temperature")]
    pub verbalizer_temperature: f64,
}

fn default_verbalizer_temperature() -> f64 {
    1.0
}

impl PelConfig {
    pub fn new(variant: PelVariant, paradigm: Paradigm) -> Self {
        Self {
            variant,
            paradigm,
            dropout_rate: 0.1,
            verbalizer_temperature: 1.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        match self.variant {
            PelVariant::Adapter { bottleneck: m } if m == 0 || m >= hidden => {
                return Err(Error::Config(format!(
                    "adapter bottleneck {m} must satisfy 1 <= m < d = {hidden}"
                )));
            }
            PelVariant::Prefix { count: 0 } | PelVariant::Ptuning { count: 0 } => {
                return Err(Error::Config(
                    "prefix/pseudo-token count must be at least 1".into(),
                ));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.verbalizer_temperature > 0.0 && self.verbalizer_temperature.is_finite()) {
            return Err(Error::Config(
                "verbalizer temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Short label such as `prompt-adapter`.
    pub fn label(&self) -> String {
        let paradigm = match self.paradigm {
            Paradigm::Head => "head",
            Paradigm::Prompt => "prompt",
        };
        let variant = match self.variant {
            PelVariant::Full => "full",
            PelVariant::Adapter { .. } => "adapter",
            PelVariant::Prefix { .. } => "prefix",
            PelVariant::Ptuning { .. } => "ptuning",
        };
        format!("{paradigm}-{variant}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Named parameter arrays. Every array is stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    BackboneWeight,
    BackboneBias,
    AdapterDown,
    AdapterDownBias,
    AdapterUp,
    AdapterUpBias,
    Prefix,
    PseudoTokens,
    HeadWeight,
    HeadBias,
    LabelEmbeddings,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::BackboneWeight,
        Block::BackboneBias,
        Block::AdapterDown,
        Block::AdapterDownBias,
        Block::AdapterUp,
        Block::AdapterUpBias,
        Block::Prefix,
        Block::PseudoTokens,
        Block::HeadWeight,
        Block::HeadBias,
        Block::LabelEmbeddings,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::BackboneWeight => "backbone_weight",
            Block::BackboneBias => "backbone_bias",
            Block::AdapterDown => "adapter_down",
            Block::AdapterDownBias => "adapter_down_bias",
            Block::AdapterUp => "adapter_up",
            Block::AdapterUpBias => "adapter_up_bias",
            Block::Prefix => "prefix",
            Block::PseudoTokens => "pseudo_tokens",
            Block::HeadWeight => "head_weight",
            Block::HeadBias => "head_bias",
            Block::LabelEmbeddings => "label_embeddings",
        }
    }

    /// `(rows, cols)` of the block; `(0, 0)` when the configuration has no
    /// such block.
    pub fn shape(self, dims: Dims, pel: &PelConfig) -> (usize, usize) {
        let Dims {
            features: f,
            hidden: d,
            classes: c,
        } = dims;
        let adapter = match pel.variant {
            PelVariant::Adapter { bottleneck } => bottleneck,
            _ => 0,
        };
        let head = pel.paradigm == Paradigm::Head;
        match self {
            Block::BackboneWeight => (d, f),
            Block::BackboneBias => (d, 1),
            Block::AdapterDown if adapter > 0 => (adapter, d),
            Block::AdapterDownBias if adapter > 0 => (adapter, 1),
            Block::AdapterUp if adapter > 0 => (d, adapter),
            Block::AdapterUpBias if adapter > 0 => (d, 1),
            Block::Prefix => match pel.variant {
                PelVariant::Prefix { count } => (count, d),
                _ => (0, 0),
            },
            Block::PseudoTokens => match pel.variant {
                PelVariant::Ptuning { count } => (count, f),
                _ => (0, 0),
            },
            Block::HeadWeight if head => (c, d),
            Block::HeadBias if head => (c, 1),
            Block::LabelEmbeddings if !head => (c, d),
            _ => (0, 0),
        }
    }

    pub fn len(self, dims: Dims, pel: &PelConfig) -> usize {
        let (r, c) = self.shape(dims, pel);
        r * c
    }
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Only the blocks designated by the PEL variant (plus the head under the
    /// head paradigm). Used for the student.
    Efficient,
    /// Every parameter except frozen label embeddings. Used to fine-tune the
    /// teacher.
    All,
}

impl TrainScope {
    pub fn trainable(self, block: Block, pel: &PelConfig) -> bool {
        let head = pel.paradigm == Paradigm::Head;
        match block {
            Block::LabelEmbeddings => false,
            Block::HeadWeight | Block::HeadBias => head,
            Block::BackboneWeight | Block::BackboneBias => {
                self == TrainScope::All || pel.variant == PelVariant::Full
            }
            Block::AdapterDown
            | Block::AdapterDownBias
            | Block::AdapterUp
            | Block::AdapterUpBias => {
                matches!(pel.variant, PelVariant::Adapter { .. })
            }
            Block::Prefix => matches!(pel.variant, PelVariant::Prefix { .. }),
            Block::PseudoTokens => matches!(pel.variant, PelVariant::Ptuning { .. }),
        }
    }
}

/// Number of parameters a student with this configuration tunes.
pub fn trainable_param_count(
    pel: &PelConfig,
    features: usize,
    hidden: usize,
    classes: usize,
) -> usize {
    let dims = Dims {
        features,
        hidden,
        classes,
    };
    Block::ALL
        .iter()
        .filter(|b| TrainScope::Efficient.trainable(**b, pel))
        .map(|b| b.len(dims, pel))
        .sum()
}

/// Inverted-dropout mask over hidden units: each entry is `0` or
/// `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    scale: Vec<f64>,
}

impl Mask {
    pub fn draw(hidden: usize, rate: f64, rng: &mut Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let scale = (0..hidden)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        Self { scale }
    }

    pub fn keep_all(hidden: usize) -> Self {
        Self {
            scale: vec![1.0; hidden],
        }
    }

    pub fn from_keep(keep: &[bool], rate: f64) -> Self {
        let s = 1.0 / (1.0 - rate);
        Self {
            scale: keep.iter().map(|&k| if k { s } else { 0.0 }).collect(),
        }
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn apply(&self, rep: &[f64]) -> Vec<f64> {
        rep.iter().zip(&self.scale).map(|(h, s)| h * s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub pel: PelConfig,
    pub seed: u64,
    /// Set once label embeddings hold class prototypes.
    pub verbalizer_ready: bool,
    blocks: Vec<Vec<f64>>,
}

/// Intermediate values of one dropout-free forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    input: Vec<f64>,
    base: Vec<f64>,
    attention: Vec<f64>,
    mixed: Vec<f64>,
    bottleneck: Vec<f64>,
    /// Final hidden representation before dropout.
    pub rep: Vec<f64>,
}

impl ModelParams {
    /// Fresh parameters. Each block is drawn from its own stream keyed by the
    /// block name, so two configurations sharing a seed share the backbone.
    pub fn init(
        pel: PelConfig,
        features: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if features == 0 || hidden == 0 || classes == 0 {
            return Err(Error::Dimension(format!(
                "dims must be positive, got F={features} d={hidden} C={classes}"
            )));
        }
        pel.validate(hidden)?;
        let dims = Dims {
            features,
            hidden,
            classes,
        };
        let blocks = Block::ALL
            .iter()
            .map(|&b| {
                let len = b.len(dims, &pel);
                let std = match b {
                    Block::BackboneWeight => 1.0 / (features as f64).sqrt(),
                    Block::AdapterUp | Block::AdapterUpBias => 0.0,
                    _ => INIT_STD,
                };
                let mut rng = Rng::derive(seed, &[0x1417, b.index() as u64]);
                (0..len)
                    .map(|_| if std == 0.0 { 0.0 } else { std * rng.normal() })
                    .collect()
            })
            .collect();
        Ok(Self {
            dims,
            pel,
            seed,
            verbalizer_ready: pel.paradigm == Paradigm::Head,
            blocks,
        })
    }

    pub(crate) fn from_blocks(
        dims: Dims,
        pel: PelConfig,
        seed: u64,
        verbalizer_ready: bool,
        blocks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        pel.validate(dims.hidden)?;
        if blocks.len() != Block::ALL.len() {
            return Err(Error::Dimension("wrong number of parameter blocks".into()));
        }
        for b in Block::ALL {
            let want = b.len(dims, &pel);
            let got = blocks[b.index()].len();
            if want != got {
                return Err(Error::Dimension(format!(
                    "block {} has {got} entries, expected {want}",
                    b.name()
                )));
            }
            if blocks[b.index()].iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite entry in {}", b.name())));
            }
        }
        Ok(Self {
            dims,
            pel,
            seed,
            verbalizer_ready,
            blocks,
        })
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        &mut self.blocks[b.index()]
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Sets each label embedding to the mean dropout-free representation of
    /// its class and marks the verbalizer ready. Every class must appear.
    pub fn fit_verbalizer<'a>(
        &mut self,
        examples: impl IntoIterator<Item = (&'a [f64], usize)>,
    ) -> Result<()> {
        if self.pel.paradigm != Paradigm::Prompt {
            return Err(Error::Config(
                "verbalizer only exists under the prompt paradigm".into(),
            ));
        }
        let Dims {
            hidden: d,
            classes: c,
            ..
        } = self.dims;
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for (x, y) in examples {
            if y >= c {
                return Err(Error::Domain(format!("label {y} outside 0..{c}")));
            }
            let rep = self.trace(x)?.rep;
            for (s, h) in sums[y * d..(y + 1) * d].iter_mut().zip(&rep) {
                *s += h;
            }
            counts[y] += 1;
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "class {missing} has no example to build its label embedding"
            )));
        }
        for (y, &n) in counts.iter().enumerate() {
            for s in &mut sums[y * d..(y + 1) * d] {
                *s /= n as f64;
            }
        }
        self.blocks[Block::LabelEmbeddings.index()] = sums;
        self.verbalizer_ready = true;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.features {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dims.features
            )));
        }
        Ok(())
    }

    /// Dropout-free forward pass up to the hidden representation.
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let Dims {
            features: f,
            hidden: d,
            ..
        } = self.dims;

        let mut input = x.to_vec();
        if let PelVariant::Ptuning { count } = self.pel.variant {
            let tokens = self.block(Block::PseudoTokens);
            let inv = 1.0 / count as f64;
            for i in 0..count {
                for (v, t) in input.iter_mut().zip(&tokens[i * f..(i + 1) * f]) {
                    *v += t * inv;
                }
            }
        }

        let mut base = vec![0.0; d];
        affine(
            self.block(Block::BackboneWeight),
            Some(self.block(Block::BackboneBias)),
            &input,
            &mut base,
        );
        base.iter_mut().for_each(|v| *v = v.tanh());

        let mut attention = Vec::new();
        let mut mixed = base.clone();
        if let PelVariant::Prefix { count } = self.pel.variant {
            let prefix = self.block(Block::Prefix);
            let scores: Vec<f64> = (0..count)
                .map(|i| numeric::dot(&base, &prefix[i * d..(i + 1) * d]))
                .collect();
            attention = numeric::softmax_unchecked(&scores);
            for (i, a) in attention.iter().enumerate() {
                for (m, p) in mixed.iter_mut().zip(&prefix[i * d..(i + 1) * d]) {
                    *m += a * p;
                }
            }
        }

        let mut bottleneck = Vec::new();
        let mut rep = mixed.clone();
        if let PelVariant::Adapter { bottleneck: m } = self.pel.variant {
            bottleneck = vec![0.0; m];
            affine(
                self.block(Block::AdapterDown),
                Some(self.block(Block::AdapterDownBias)),
                &mixed,
                &mut bottleneck,
            );
            let act: Vec<f64> = bottleneck.iter().map(|v| v.max(0.0)).collect();
            let mut up = vec![0.0; d];
            affine(
                self.block(Block::AdapterUp),
                Some(self.block(Block::AdapterUpBias)),
                &act,
                &mut up,
            );
            for (r, u) in rep.iter_mut().zip(&up) {
                *r += u;
            }
        }

        Ok(Trace {
            input,
            base,
            attention,
            mixed,
            bottleneck,
            rep,
        })
    }

    /// Hidden representation, with dropout applied when a mask is given.
    pub fn hidden(&self, x: &[f64], mask: Option<&Mask>) -> Result<Vec<f64>> {
        let rep = self.trace(x)?.rep;
        Ok(match mask {
            Some(m) => {
                self.check_mask(m)?;
                m.apply(&rep)
            }
            None => rep,
        })
    }

    fn check_mask(&self, m: &Mask) -> Result<()> {
        if m.scale.len() != self.dims.hidden {
            return Err(Error::Dimension(format!(
                "mask over {} units, model has {}",
                m.scale.len(),
                self.dims.hidden
            )));
        }
        Ok(())
    }

    pub fn logits(&self, rep: &[f64]) -> Result<Vec<f64>> {
        let c = self.dims.classes;
        let mut out = vec![0.0; c];
        match self.pel.paradigm {
            Paradigm::Head => affine(
                self.block(Block::HeadWeight),
                Some(self.block(Block::HeadBias)),
                rep,
                &mut out,
            ),
            Paradigm::Prompt => {
                if !self.verbalizer_ready {
                    return Err(Error::Config(
                        "prompt paradigm needs label embeddings; call fit_verbalizer first".into(),
                    ));
                }
                affine(self.block(Block::LabelEmbeddings), None, rep, &mut out);
                let t = self.pel.verbalizer_temperature;
                out.iter_mut().for_each(|v| *v /= t);
            }
        }
        Ok(out)
    }

    /// Class distribution for `x`, optionally through a dropout mask.
    pub fn proba_with_mask(&self, x: &[f64], mask: Option<&Mask>) -> Result<ProbVector> {
        let rep = self.hidden(x, mask)?;
        numeric::softmax(&self.logits(&rep)?)
    }

    /// Dropout-free class distribution.
    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        self.proba_with_mask(x, None)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    /// Backpropagates `d_rep` (gradient w.r.t. the pre-dropout representation)
    /// into the trainable blocks of `grads`.
    fn backward(&self, trace: &Trace, d_rep: &[f64], scope: TrainScope, grads: &mut Gradients) {
        let pel = &self.pel;
        let Dims {
            features: f,
            hidden: d,
            ..
        } = self.dims;
        let train = |b: Block| scope.trainable(b, pel);
        let backbone = train(Block::BackboneWeight);
        let pseudo = train(Block::PseudoTokens);
        let prefix = train(Block::Prefix);

        let mut d_mixed = d_rep.to_vec();
        if let PelVariant::Adapter { bottleneck: m } = pel.variant {
            let act: Vec<f64> = trace.bottleneck.iter().map(|v| v.max(0.0)).collect();
            if train(Block::AdapterUp) {
                outer_acc(grads.block_mut(Block::AdapterUp), d_rep, &act);
                for (g, v) in grads.block_mut(Block::AdapterUpBias).iter_mut().zip(d_rep) {
                    *g += v;
                }
            }
            let mut d_act = vec![0.0; m];
            affine_t_acc(self.block(Block::AdapterUp), d_rep, &mut d_act);
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&trace.bottleneck)
                .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
                .collect();
            if train(Block::AdapterDown) {
                outer_acc(grads.block_mut(Block::AdapterDown), &d_pre, &trace.mixed);
                for (g, v) in grads
                    .block_mut(Block::AdapterDownBias)
                    .iter_mut()
                    .zip(&d_pre)
                {
                    *g += v;
                }
            }
            affine_t_acc(self.block(Block::AdapterDown), &d_pre, &mut d_mixed);
        }
        if !(backbone || pseudo || prefix) {
            return;
        }

        let mut d_base = d_mixed.clone();
        if let PelVariant::Prefix { count } = pel.variant {
            let table = self.block(Block::Prefix);
            let a = &trace.attention;
            let da: Vec<f64> = (0..count)
                .map(|i| numeric::dot(&table[i * d..(i + 1) * d], &d_mixed))
                .collect();
            let mean_da = numeric::dot(a, &da);
            let ds: Vec<f64> = a
                .iter()
                .zip(&da)
                .map(|(ai, dai)| ai * (dai - mean_da))
                .collect();
            if prefix {
                let g = grads.block_mut(Block::Prefix);
                for i in 0..count {
                    let row = &mut g[i * d..(i + 1) * d];
                    for ((gj, dm), hb) in row.iter_mut().zip(&d_mixed).zip(&trace.base) {
                        *gj += a[i] * dm + ds[i] * hb;
                    }
                }
            }
            for i in 0..count {
                for (db, p) in d_base.iter_mut().zip(&table[i * d..(i + 1) * d]) {
                    *db += ds[i] * p;
                }
            }
        }
        if !(backbone || pseudo) {
            return;
        }

        let d_pre: Vec<f64> = d_base
            .iter()
            .zip(&trace.base)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        if backbone {
            outer_acc(grads.block_mut(Block::BackboneWeight), &d_pre, &trace.input);
            for (g, v) in grads.block_mut(Block::BackboneBias).iter_mut().zip(&d_pre) {
                *g += v;
            }
        }
        if let (true, PelVariant::Ptuning { count }) = (pseudo, pel.variant) {
            let mut d_input = vec![0.0; f];
            affine_t_acc(self.block(Block::BackboneWeight), &d_pre, &mut d_input);
            let inv = 1.0 / count as f64;
            let g = grads.block_mut(Block::PseudoTokens);
            for i in 0..count {
                for (gj, v) in g[i * f..(i + 1) * f].iter_mut().zip(&d_input) {
                    *gj += v * inv;
                }
            }
        }
    }

    /// Gradient of the logits layer; returns the gradient w.r.t. its input.
    fn backward_logits(
        &self,
        rep_in: &[f64],
        d_logits: &[f64],
        scope: TrainScope,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let mut d_rep = vec![0.0; self.dims.hidden];
        match self.pel.paradigm {
            Paradigm::Head => {
                if scope.trainable(Block::HeadWeight, &self.pel) {
                    outer_acc(grads.block_mut(Block::HeadWeight), d_logits, rep_in);
                    for (g, v) in grads.block_mut(Block::HeadBias).iter_mut().zip(d_logits) {
                        *g += v;
                    }
                }
                affine_t_acc(self.block(Block::HeadWeight), d_logits, &mut d_rep);
            }
            Paradigm::Prompt => {
                let t = self.pel.verbalizer_temperature;
                let scaled: Vec<f64> = d_logits.iter().map(|v| v / t).collect();
                affine_t_acc(self.block(Block::LabelEmbeddings), &scaled, &mut d_rep);
            }
        }
        d_rep
    }
}

/// Gradient arrays laid out like [`ModelParams`]; frozen blocks stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            blocks: params.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        &mut self.blocks[b.index()]
    }

    /// Number of entries that may be nonzero under `scope`.
    pub fn mask_cardinality(params: &ModelParams, scope: TrainScope) -> usize {
        Block::ALL
            .iter()
            .filter(|b| scope.trainable(**b, &params.pel))
            .map(|b| params.block(*b).len())
            .sum()
    }
}

/// An input participating in a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BatchInput<'a> {
    pub id: u64,
    pub features: &'a [f64],
}

/// A classification term: input index, target class, optional dropout mask.
#[derive(Clone, Debug)]
pub struct Target {
    pub input: usize,
    pub label: usize,
    pub mask: Option<Mask>,
}

/// One anchor with its positive and negatives, all as input indices.
#[derive(Clone, Debug)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Everything one optimizer step needs. Inputs are listed once even when
/// they play several roles, so each gets a single forward and backward pass.
#[derive(Clone, Debug, Default)]
pub struct Batch<'a> {
    pub inputs: Vec<BatchInput<'a>>,
    pub targets: Vec<Target>,
    pub triples: Vec<Triple>,
}

/// Loss value, its gradient and regularizer bookkeeping.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
    pub anchors_used: usize,
}

/// Exact gradient of `mean_i φ(p_i) + λ · mean_anchor R_anchor` over the
/// trainable blocks of `scope`.
pub fn grad(
    params: &ModelParams,
    scope: TrainScope,
    batch: &Batch<'_>,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    if batch.targets.is_empty() {
        return Err(Error::Procedure("empty batch".into()));
    }
    cfg.validate()?;
    let c = params.dims.classes;
    let n_inputs = batch.inputs.len();
    let mut traces = Vec::with_capacity(n_inputs);
    for inp in &batch.inputs {
        traces.push(params.trace(inp.features)?);
    }
    let mut grads = Gradients::zeros_like(params);
    let mut d_reps = vec![vec![0.0; params.dims.hidden]; n_inputs];

    // classification terms
    let inv_n = 1.0 / batch.targets.len() as f64;
    let mut data_loss = 0.0;
    for t in &batch.targets {
        if t.label >= c {
            return Err(Error::Domain(format!("label {} outside 0..{c}", t.label)));
        }
        let trace = &traces[t.input];
        let rep_in = match &t.mask {
            Some(m) => {
                params.check_mask(m)?;
                m.apply(&trace.rep)
            }
            None => trace.rep.clone(),
        };
        let logits = params.logits(&rep_in)?;
        let p = numeric::softmax_unchecked(&logits);
        let py = p[t.label];
        let loss = losses::example_loss(cfg.kind, py);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                id: batch.inputs[t.input].id,
            });
        }
        data_loss += loss;
        let d_logits: Vec<f64> = match cfg.kind {
            LossKind::Phce { tau } if py <= 1.0 / tau => {
                // dφ/dp_y = -τ, chained through the softmax
                (0..c)
                    .map(|k| -tau * py * (f64::from(u8::from(k == t.label)) - p[k]) * inv_n)
                    .collect()
            }
            _ => (0..c)
                .map(|k| (p[k] - f64::from(u8::from(k == t.label))) * inv_n)
                .collect(),
        };
        let d_rep_in = params.backward_logits(&rep_in, &d_logits, scope, &mut grads);
        let d_rep = &mut d_reps[t.input];
        match &t.mask {
            Some(m) => {
                for ((dr, g), s) in d_rep.iter_mut().zip(&d_rep_in).zip(&m.scale) {
                    *dr += g * s;
                }
            }
            None => {
                for (dr, g) in d_rep.iter_mut().zip(&d_rep_in) {
                    *dr += g;
                }
            }
        }
    }
    let mut total = data_loss * inv_n;

    // contrastive regularizer on dropout-free representations
    let mut anchors_used = 0;
    if cfg.lambda > 0.0 && !batch.triples.is_empty() {
        let usable: Vec<&Triple> = batch
            .triples
            .iter()
            .filter(|t| !t.negatives.is_empty())
            .collect();
        anchors_used = usable.len();
        if anchors_used > 0 {
            let weight = cfg.lambda / anchors_used as f64;
            let mut reg = 0.0;
            for t in usable {
                let a = &traces[t.anchor].rep;
                let pos = cosine_with_grad(a, &traces[t.positive].rep, batch.inputs[t.anchor].id)?;
                let negs = t
                    .negatives
                    .iter()
                    .map(|&k| cosine_with_grad(a, &traces[k].rep, batch.inputs[t.anchor].id))
                    .collect::<Result<Vec<_>>>()?;
                let temp = cfg.g_temperature;
                let g_neg: Vec<f64> = negs.iter().map(|n| n.value / temp).collect();
                let (value, d_pos, d_negs) =
                    losses::contrastive_term(pos.value / temp, &g_neg, cfg.form);
                reg += value;
                let s_pos = weight * d_pos / temp;
                add_scaled(&mut d_reps[t.anchor], &pos.d_a, s_pos);
                add_scaled(&mut d_reps[t.positive], &pos.d_b, s_pos);
                for ((&k, n), dn) in t.negatives.iter().zip(&negs).zip(&d_negs) {
                    let s = weight * dn / temp;
                    add_scaled(&mut d_reps[t.anchor], &n.d_a, s);
                    add_scaled(&mut d_reps[k], &n.d_b, s);
                }
            }
            total += weight * reg;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            id: batch.inputs[batch.targets[0].input].id,
        });
    }

    for (trace, d_rep) in traces.iter().zip(&d_reps) {
        if d_rep.iter().any(|v| *v != 0.0) {
            params.backward(trace, d_rep, scope, &mut grads);
        }
    }
    Ok(LossGrad {
        loss: total,
        grads,
        anchors_used,
    })
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

struct CosineGrad {
    value: f64,
    d_a: Vec<f64>,
    d_b: Vec<f64>,
}

fn cosine_with_grad(a: &[f64], b: &[f64], id: u64) -> Result<CosineGrad> {
    let (na, nb) = (numeric::norm(a), numeric::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(format!(
            "zero representation in contrastive pair for example {id}"
        )));
    }
    let value = numeric::dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let d_a = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv - value * ai / (na * na))
        .collect();
    let d_b = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai * inv - value * bi / (nb * nb))
        .collect();
    Ok(CosineGrad { value, d_a, d_b })
}

/// AdamW optimizer state: decoupled weight decay with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update of the blocks `scope` marks trainable.
pub fn adamw_step(
    params: &mut ModelParams,
    opt: &mut OptState,
    grads: &Gradients,
    scope: TrainScope,
) -> Result<()> {
    for b in Block::ALL {
        let i = b.index();
        let n = params.blocks[i].len();
        if grads.blocks.get(i).map(Vec::len) != Some(n) || opt.first[i].len() != n {
            return Err(Error::Dimension(format!(
                "gradient/optimizer shape mismatch in {}",
                b.name()
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for b in Block::ALL {
        if !scope.trainable(b, &params.pel) {
            continue;
        }
        let i = b.index();
        let theta = &mut params.blocks[i];
        let (m, v) = (&mut opt.first[i], &mut opt.second[i]);
        for (((w, g), m), v) in theta
            .iter_mut()
            .zip(&grads.blocks[i])
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *w -= opt.lr * opt.weight_decay * *w;
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
