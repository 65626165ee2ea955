//! Training objectives for the student.
//!
//! The data term is either plain cross-entropy or the partially huberised
//! cross-entropy (PHCE), which replaces `-ln p` by the tangent line
//! `-τp + ln τ + 1` for `p <= 1/τ`. The loss stays C¹ at the knee and its
//! slope in `p` never exceeds `τ`, which caps the pull of mislabelled
//! examples. The regularizer contrasts each reliable anchor with a reliable
//! positive and hard negatives of the same pseudo class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelParams};
use crate::numeric::{self, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Phce { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `-ln r`, minimized when positives are close and negatives far.
    NegLog,
    /// The bare ratio `r`.
    LiteralPaper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the contrastive regularizer.
    pub lambda: f64,
    /// Negatives per anchor.
    pub negatives: usize,
    pub g_temperature: f64,
    pub form: ContrastiveForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Phce { tau: 10.0 },
            lambda: 0.1,
            negatives: 4,
            g_temperature: 1.0,
            form: ContrastiveForm::NegLog,
        }
    }
}

impl LossConfig {
    /// Cross-entropy with the regularizer switched off.
    pub fn plain_ce() -> Self {
        Self {
            kind: LossKind::Ce,
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::Phce { tau } = self.kind {
            if !(tau > 1.0) {
                return Err(Error::Config(format!("PHCE needs tau > 1, got {tau}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lambda > 0.0 && self.negatives == 0 {
            return Err(Error::Config(
                "at least one negative per anchor is needed when lambda > 0".into(),
            ));
        }
        if !(self.g_temperature > 0.0 && self.g_temperature.is_finite()) {
            return Err(Error::Config(
                "similarity temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Negative log-likelihood `-ln p`.
pub fn ce(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!(
            "cross-entropy needs p in (0, 1], got {p}"
        )));
    }
    Ok(-p.ln())
}

/// Partially huberised cross-entropy.
pub fn phce(p: f64, tau: f64) -> Result<f64> {
    if !(tau > 1.0) {
        return Err(Error::Config(format!("PHCE needs tau > 1, got {tau}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("PHCE needs p in (0, 1], got {p}")));
    }
    Ok(phce_unchecked(p, tau))
}

fn phce_unchecked(p: f64, tau: f64) -> f64 {
    if p <= 1.0 / tau {
        -tau * p + tau.ln() + 1.0
    } else {
        -p.ln()
    }
}

/// `dφ/dp`: `-τ` on the linear branch, `-1/p` on the log branch.
pub fn phce_derivative(p: f64, tau: f64) -> f64 {
    if p <= 1.0 / tau {
        -tau
    } else {
        -1.0 / p
    }
}

/// Per-example data loss on the probability of the target class, floored
/// before any logarithm.
pub fn example_loss(kind: LossKind, p: f64) -> f64 {
    match kind {
        LossKind::Ce => -p.max(PROB_FLOOR).ln(),
        LossKind::Phce { tau } => phce_unchecked(p.max(PROB_FLOOR), tau),
    }
}

/// Value of one anchor's term together with its derivatives w.r.t. the
/// positive similarity and each negative similarity.
///
/// With `S = e^{g+} + mean_k e^{g-_k}` and `r = e^{g+} / S`, `NegLog` returns
/// `-ln r` and `LiteralPaper` returns `r`.
pub fn contrastive_term(g_pos: f64, g_neg: &[f64], form: ContrastiveForm) -> (f64, f64, Vec<f64>) {
    let n = g_neg.len() as f64;
    let top = g_neg.iter().copied().fold(g_pos, f64::max);
    let e_pos = (g_pos - top).exp();
    let e_neg: Vec<f64> = g_neg.iter().map(|g| (g - top).exp() / n).collect();
    let s = e_pos + e_neg.iter().sum::<f64>();
    let r = e_pos / s;
    let q: Vec<f64> = e_neg.iter().map(|e| e / s).collect();
    match form {
        ContrastiveForm::NegLog => {
            let value = -(g_pos - top) + s.ln();
            (value, r - 1.0, q)
        }
        ContrastiveForm::LiteralPaper => {
            let d_neg = q.iter().map(|qk| -r * qk).collect();
            (r, r * (1.0 - r), d_neg)
        }
    }
}

/// One anchor's comparison set, as hidden representations.
#[derive(Clone, Debug)]
pub struct ContrastiveSet<'a> {
    pub anchor: &'a [f64],
    pub positive: Option<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveOutcome {
    /// Mean over usable anchors; zero when none is usable.
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Easy-hard contrastive regularizer with cosine similarity scaled by
/// `1 / temperature`. Anchors missing a positive or negatives are skipped.
pub fn contrastive_reg(
    sets: &[ContrastiveSet<'_>],
    temperature: f64,
    form: ContrastiveForm,
) -> Result<ContrastiveOutcome> {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for set in sets {
        let Some(pos) = set.positive else {
            skipped += 1;
            continue;
        };
        if set.negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let g_pos = numeric::cosine(set.anchor, pos)? / temperature;
        let g_neg = set
            .negatives
            .iter()
            .map(|n| numeric::cosine(set.anchor, n).map(|c| c / temperature))
            .collect::<Result<Vec<_>>>()?;
        sum += contrastive_term(g_pos, &g_neg, form).0;
        used += 1;
    }
    if used == 0 {
        log::warn!(
            "contrastive regularizer has no usable anchor ({skipped} skipped); contributing 0"
        );
        return Ok(ContrastiveOutcome {
            value: 0.0,
            used,
            skipped,
        });
    }
    Ok(ContrastiveOutcome {
        value: sum / used as f64,
        used,
        skipped,
    })
}

/// The full student objective on a batch: mean data loss plus `λ` times the
/// contrastive regularizer. Forward passes only; see [`crate::model::grad`]
/// for the derivative.
pub fn total_loss(params: &ModelParams, batch: &Batch<'_>, cfg: &LossConfig) -> Result<f64> {
    if batch.targets.is_empty() {
        return Err(Error::Procedure("empty batch".into()));
    }
    cfg.validate()?;
    let mut data = 0.0;
    for t in &batch.targets {
        let p = params.proba_with_mask(batch.inputs[t.input].features, t.mask.as_ref())?;
        data += example_loss(cfg.kind, p[t.label]);
    }
    let mut total = data / batch.targets.len() as f64;
    if cfg.lambda > 0.0 {
        let reps = batch
            .inputs
            .iter()
            .map(|i| params.hidden(i.features, None))
            .collect::<Result<Vec<_>>>()?;
        let sets: Vec<ContrastiveSet<'_>> = batch
            .triples
            .iter()
            .map(|t| ContrastiveSet {
                anchor: &reps[t.anchor],
                positive: Some(&reps[t.positive]),
                negatives: t.negatives.iter().map(|&k| reps[k].as_slice()).collect(),
            })
            .collect();
        total += cfg.lambda * contrastive_reg(&sets, cfg.g_temperature, cfg.form)?.value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn ce_examples() {
        assert_eq!(ce(1.0).unwrap(), 0.0);
        assert!((ce(0.5).unwrap() - LN2).abs() < 1e-15);
        assert!((ce((-3.0f64).exp()).unwrap() - 3.0).abs() < 1e-14);
        assert!(matches!(ce(0.0), Err(Error::Domain(_))));
        assert!(matches!(ce(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn phce_examples() {
        // the knee: both branch formulas give ln 2
        let linear = -2.0 * 0.5 + 2f64.ln() + 1.0;
        assert!((linear - LN2).abs() < 1e-15);
        assert!((phce(0.5, 2.0).unwrap() - LN2).abs() < 1e-15);
        assert_eq!(phce(1.0, 7.0).unwrap(), 0.0);
        let v = phce(0.25, 2.0).unwrap();
        assert!((v - (-0.5 + LN2 + 1.0)).abs() < 1e-15);
        assert!((v - 1.193_147_180_559_945_3).abs() < 1e-12);
        assert!(v < ce(0.25).unwrap());
        assert!(matches!(phce(0.5, 1.0), Err(Error::Config(_))));
        assert!(matches!(phce(0.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn phce_is_bounded_by_ce_and_clipped() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            let tau = 1.0 + 99.0 * rng.open_uniform();
            let p = rng.open_uniform();
            let phi = phce(p, tau).unwrap();
            let c = ce(p).unwrap();
            if p >= 1.0 / tau {
                assert_eq!(phi, c);
            } else {
                assert!(phi < c, "p={p} tau={tau}");
            }
            assert!(phce_derivative(p, tau).abs() <= tau);
        }
    }

    #[test]
    fn phce_continuity_at_knee() {
        let mut rng = Rng::new(12);
        for _ in 0..1000 {
            let tau = 1.0 + 99.0 * rng.open_uniform();
            let eps = 1e-6 * rng.open_uniform();
            let knee = 1.0 / tau;
            let gap = (phce(knee - eps, tau).unwrap() - phce(knee + eps, tau).unwrap()).abs();
            assert!(gap <= 3.0 * tau * eps, "tau={tau} eps={eps} gap={gap}");
        }
    }

    #[test]
    fn contrastive_term_examples() {
        let (v, _, _) = contrastive_term(0.3, &[0.3], ContrastiveForm::NegLog);
        assert!((v - LN2).abs() < 1e-15);
        let (v, _, _) = contrastive_term(1.0, &[0.0], ContrastiveForm::NegLog);
        // -ln(e / (e + 1))
        assert!((v - 0.313_261_687_518_222_9).abs() < 1e-12);
        let (v, _, _) = contrastive_term(700.0, &[0.0, 1.0], ContrastiveForm::NegLog);
        assert!(v.abs() < 1e-12);
        let (r, _, _) = contrastive_term(0.3, &[0.3], ContrastiveForm::LiteralPaper);
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn contrastive_term_derivatives_match_differences() {
        let h = 1e-6;
        for form in [ContrastiveForm::NegLog, ContrastiveForm::LiteralPaper] {
            let g_pos = 0.4;
            let g_neg = [0.1, -0.3, 0.7];
            let (_, d_pos, d_neg) = contrastive_term(g_pos, &g_neg, form);
            let f = |gp: f64, gn: &[f64]| contrastive_term(gp, gn, form).0;
            let fd = (f(g_pos + h, &g_neg) - f(g_pos - h, &g_neg)) / (2.0 * h);
            assert!((fd - d_pos).abs() < 1e-8);
            for k in 0..g_neg.len() {
                let mut up = g_neg;
                let mut dn = g_neg;
                up[k] += h;
                dn[k] -= h;
                let fd = (f(g_pos, &up) - f(g_pos, &dn)) / (2.0 * h);
                assert!((fd - d_neg[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn neglog_monotone_in_similarities() {
        let mut rng = Rng::new(13);
        for _ in 0..1000 {
            let gp = 2.0 * rng.uniform() - 1.0;
            let gn: Vec<f64> = (0..3).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let (v, d_pos, d_neg) = contrastive_term(gp, &gn, ContrastiveForm::NegLog);
            assert!(v >= 0.0 || v > -1e-15);
            assert!(d_pos < 0.0);
            assert!(d_neg.iter().all(|d| *d >= 0.0));
        }
    }

    #[test]
    fn contrastive_reg_skips_incomplete_anchors() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let sets = vec![
            ContrastiveSet {
                anchor: &a,
                positive: None,
                negatives: vec![&b],
            },
            ContrastiveSet {
                anchor: &a,
                positive: Some(&a),
                negatives: vec![],
            },
        ];
        let out = contrastive_reg(&sets, 1.0, ContrastiveForm::NegLog).unwrap();
        assert_eq!(
            out,
            ContrastiveOutcome {
                value: 0.0,
                used: 0,
                skipped: 2
            }
        );
        let out = contrastive_reg(&[], 1.0, ContrastiveForm::NegLog).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.kind = LossKind::Phce { tau: 0.5 };
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            negatives: 0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_ok());
    }
}
