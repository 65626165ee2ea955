//! Monte Carlo dropout scoring of pseudo-labelled examples.
//!
//! `T` dropout masks define `T` masked models. For each example the masked
//! models' class distributions form an [`McPosterior`]; from it come the
//! BALD information gain (entropy of the mean minus mean entropy), a
//! certainty score `1 - BALD / ln C`, and a confidence score (mean
//! probability of the pseudo label). The two scores are fused into
//! per-example sampling weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mask, ModelParams};
use crate::numeric::{self, Mat, Rng};

/// `T x C` matrix; row `t` is the class distribution under mask `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct McPosterior {
    probs: Mat,
}

impl McPosterior {
    pub fn new(probs: Mat) -> Result<Self> {
        if probs.rows() == 0 {
            return Err(Error::Domain("posterior needs at least one sample".into()));
        }
        for row in probs.iter_rows() {
            numeric::check_simplex(row)?;
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn samples(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    /// Mean distribution over the masked models. A running mean is used so
    /// that identical rows average to exactly that row.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.classes()];
        for (t, row) in self.probs.iter_rows().enumerate() {
            let n = (t + 1) as f64;
            for (m, p) in mean.iter_mut().zip(row) {
                *m += (p - *m) / n;
            }
        }
        mean
    }
}

/// `count` independent inverted-dropout masks over `hidden` units.
pub fn draw_masks(hidden: usize, count: usize, rate: f64, rng: &mut Rng) -> Result<Vec<Mask>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if count == 0 {
        return Err(Error::Config(
            "at least one Monte Carlo sample is needed".into(),
        ));
    }
    Ok((0..count).map(|_| Mask::draw(hidden, rate, rng)).collect())
}

/// Draws `samples` masks from `rng` and evaluates `x` under each.
pub fn mc_posterior(
    params: &ModelParams,
    x: &[f64],
    samples: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<McPosterior> {
    let masks = draw_masks(params.dims.hidden, samples, rate, rng)?;
    mc_posterior_with_masks(params, x, &masks)
}

pub fn mc_posterior_with_masks(
    params: &ModelParams,
    x: &[f64],
    masks: &[Mask],
) -> Result<McPosterior> {
    let rows = masks
        .iter()
        .map(|m| params.proba_with_mask(x, Some(m)).map(|p| p.into_inner()))
        .collect::<Result<Vec<_>>>()?;
    McPosterior::from_rows(&rows)
}

/// BALD estimate: `H(mean_t p_t) - mean_t H(p_t)`, in nats.
pub fn bald(mc: &McPosterior) -> f64 {
    let h_mean = numeric::entropy_unchecked(&mc.mean());
    let mut mean_h = 0.0;
    for (t, row) in mc.probs.iter_rows().enumerate() {
        mean_h += (numeric::entropy_unchecked(row) - mean_h) / (t + 1) as f64;
    }
    h_mean - mean_h
}

/// Certainty in `[0, 1]` from a raw BALD value: `1 - b / ln C`, clamped.
pub fn certainty_from_bald(bald_raw: f64, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "certainty needs at least 2 classes, got {classes}"
        )));
    }
    Ok((1.0 - bald_raw / (classes as f64).ln()).clamp(0.0, 1.0))
}

pub fn certainty_score(mc: &McPosterior, classes: usize) -> Result<f64> {
    certainty_from_bald(bald(mc), classes)
}

/// Mean probability the masked models give the pseudo label.
pub fn confidence_score(mc: &McPosterior, pseudo_label: usize) -> Result<f64> {
    if pseudo_label >= mc.classes() {
        return Err(Error::Domain(format!(
            "pseudo label {pseudo_label} outside 0..{}",
            mc.classes()
        )));
    }
    Ok(mc.mean()[pseudo_label])
}

/// Normalized fused weights `α·cf + (1-α)·ct` over a pool of
/// `(confidence, certainty)` pairs.
pub fn sampling_weights(scores: &[(f64, f64)], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::DegeneratePool("empty scoring pool".into()));
    }
    let fused: Vec<f64> = scores
        .iter()
        .map(|&(cf, ct)| alpha * cf + (1.0 - alpha) * ct)
        .collect();
    let total: f64 = fused.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegeneratePool(format!(
            "fused scores sum to {total}"
        )));
    }
    Ok(fused.into_iter().map(|s| s / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub confidence: f64,
    pub certainty: f64,
    /// Normalized over the scored pool.
    pub weight: f64,
    pub bald_raw: f64,
}

/// Scores every example of a pool against one shared set of masks.
///
/// All examples see the same `T` masked models, so the result does not
/// depend on evaluation order and `workers > 1` only changes wall time.
pub fn score_pool(
    params: &ModelParams,
    inputs: &[&[f64]],
    pseudo_labels: &[usize],
    masks: &[Mask],
    alpha: f64,
    workers: usize,
) -> Result<Vec<SelectionScores>> {
    if inputs.len() != pseudo_labels.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} pseudo labels",
            inputs.len(),
            pseudo_labels.len()
        )));
    }
    let classes = params.dims.classes;
    let score_one = |i: usize| -> Result<(f64, f64, f64)> {
        let mc = mc_posterior_with_masks(params, inputs[i], masks)?;
        let b = bald(&mc);
        Ok((
            confidence_score(&mc, pseudo_labels[i])?,
            certainty_from_bald(b, classes)?,
            b,
        ))
    };
    let raw: Vec<(f64, f64, f64)> = map_indices(inputs.len(), workers, score_one)?;
    let pairs: Vec<(f64, f64)> = raw.iter().map(|&(cf, ct, _)| (cf, ct)).collect();
    let weights = sampling_weights(&pairs, alpha)?;
    Ok(raw
        .into_iter()
        .zip(weights)
        .map(
            |((confidence, certainty, bald_raw), weight)| SelectionScores {
                confidence,
                certainty,
                weight,
                bald_raw,
            },
        )
        .collect())
}

#[cfg(feature = "parallel")]
fn map_indices<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_indices<T, F>(n: usize, _workers: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Paradigm, PelConfig, PelVariant};

    const LN2: f64 = std::f64::consts::LN_2;

    fn post(rows: &[&[f64]]) -> McPosterior {
        McPosterior::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn bald_examples() {
        assert_eq!(bald(&post(&[&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]])), 0.0);
        assert!((bald(&post(&[&[1.0, 0.0], &[0.0, 1.0]])) - LN2).abs() < 1e-15);
        assert_eq!(bald(&post(&[&[0.5, 0.5], &[0.5, 0.5]])), 0.0);
    }

    #[test]
    fn posterior_rejects_bad_rows() {
        assert!(McPosterior::from_rows(&[vec![0.7, 0.7]]).is_err());
        assert!(McPosterior::from_rows(&[]).is_err());
    }

    #[test]
    fn certainty_examples() {
        assert_eq!(certainty_from_bald(0.0, 3).unwrap(), 1.0);
        assert!(
            certainty_score(&post(&[&[1.0, 0.0], &[0.0, 1.0]]), 2)
                .unwrap()
                .abs()
                < 1e-15
        );
        let uniform = post(&[&[0.25; 4], &[0.25; 4]]);
        assert_eq!(certainty_score(&uniform, 4).unwrap(), 1.0);
        assert!(matches!(certainty_from_bald(0.1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn certainty_monotone_in_bald() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let b = i as f64 * 0.02;
            let s = certainty_from_bald(b, 4).unwrap();
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn confidence_examples() {
        let mc = post(&[&[0.9, 0.1], &[0.8, 0.2], &[0.7, 0.3]]);
        assert!((confidence_score(&mc, 0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(
            confidence_score(&post(&[&[0.0, 1.0], &[0.0, 1.0]]), 1).unwrap(),
            1.0
        );
        assert_eq!(confidence_score(&post(&[&[0.25; 4]]), 2).unwrap(), 0.25);
        assert!(matches!(confidence_score(&mc, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_weight_examples() {
        let w = sampling_weights(&[(0.2, 0.9), (0.3, 0.1), (0.5, 0.4)], 1.0).unwrap();
        for (a, b) in w.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            sampling_weights(&[(1.0, 0.0), (0.0, 1.0)], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
        let w = sampling_weights(&[(0.4, 0.6); 5], 0.3).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert!(matches!(
            sampling_weights(&[(0.0, 0.0)], 0.5),
            Err(Error::DegeneratePool(_))
        ));
        assert!(matches!(
            sampling_weights(&[(0.1, 0.1)], 1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mc_posterior_edge_cases() {
        let pel = PelConfig::new(PelVariant::Adapter { bottleneck: 2 }, Paradigm::Head);
        let params = ModelParams::init(pel, 5, 6, 3, 4).unwrap();
        let x = [0.3, -0.1, 0.8, 0.0, 0.5];
        let exact = params.predict_proba(&x).unwrap();
        let mc = mc_posterior(&params, &x, 7, 0.0, &mut Rng::new(1)).unwrap();
        for row in mc.probs().iter_rows() {
            assert_eq!(row, exact.as_slice());
        }
        assert_eq!(mc.mean(), exact.as_slice());
        let single = mc_posterior(&params, &x, 1, 0.5, &mut Rng::new(2)).unwrap();
        assert_eq!(single.mean(), single.probs().row(0));
        assert!(matches!(
            mc_posterior(&params, &x, 3, 1.0, &mut Rng::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mc_posterior_reference_run() {
        let pel = PelConfig::new(PelVariant::Full, Paradigm::Head);
        let params = ModelParams::init(pel, 3, 4, 2, 21).unwrap();
        let mc = mc_posterior(&params, &[1.0, -2.0, 0.5], 10, 0.5, &mut Rng::new(21)).unwrap();
        assert_eq!(mc.samples(), 10);
        let first: Vec<f64> = mc.probs().row(0).to_vec();
        let again = mc_posterior(&params, &[1.0, -2.0, 0.5], 10, 0.5, &mut Rng::new(21)).unwrap();
        assert_eq!(mc, again);
        assert_eq!(first.len(), 2);
    }
}
