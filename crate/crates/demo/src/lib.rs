//! Browser demo. Each export returns a JSON string for the page to draw.
//!
//! The data is three Gaussian blobs in the plane so that selection and
//! decision regions can be shown directly.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use upet_core::data::Example;
use upet_core::losses::{self, LossConfig, LossKind};
use upet_core::model::{Paradigm, PelConfig, PelVariant};
use upet_core::numeric::Rng;
use upet_core::selftrain::{self, IterationRecord, ReliableSize, SelectionMode, SelfTrainConfig};

const CLASSES: usize = 3;
const SHOTS: usize = 4;
const POOL_PER_CLASS: usize = 100;
const TEST_PER_CLASS: usize = 100;
const GRID: usize = 48;
const EXTENT: f64 = 4.5;

pub struct Plane {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub test: Vec<Example>,
}

/// Class means sit on a triangle with side `sep`.
pub fn plane(seed: u64, sep: f64) -> Plane {
    let mut rng = Rng::derive(seed, &[0xd3]);
    let radius = sep / 3f64.sqrt();
    let centers: Vec<[f64; 2]> = (0..CLASSES)
        .map(|c| {
            let a = std::f64::consts::FRAC_PI_2
                + 2.0 * std::f64::consts::PI * c as f64 / CLASSES as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    let mut id = 0u64;
    let mut draw = |n: usize, rng: &mut Rng| -> Vec<Example> {
        let mut out = Vec::new();
        for _ in 0..n {
            for (c, m) in centers.iter().enumerate() {
                out.push(Example::new(
                    id,
                    vec![m[0] + rng.normal(), m[1] + rng.normal()],
                    Some(c),
                ));
                id += 1;
            }
        }
        out
    };
    let labeled = draw(SHOTS, &mut rng);
    let unlabeled = draw(POOL_PER_CLASS, &mut rng);
    let test = draw(TEST_PER_CLASS, &mut rng);
    Plane {
        labeled,
        unlabeled,
        test,
    }
}

pub fn demo_config(seed: u64, alpha: f64, reliable_fraction: f64) -> SelfTrainConfig {
    SelfTrainConfig {
        iterations: 5,
        teacher_epochs: 60,
        student_epochs: 5,
        hidden: 16,
        pel: PelConfig::new(PelVariant::Adapter { bottleneck: 4 }, Paradigm::Head)
            .with_dropout(0.2),
        alpha,
        reliable: ReliableSize::Fraction(reliable_fraction),
        batch_size: 16,
        seed,
        early_stop: false,
        ..SelfTrainConfig::default()
    }
}

#[derive(Serialize)]
struct Curves {
    tau: f64,
    p: Vec<f64>,
    ce: Vec<f64>,
    phce: Vec<f64>,
    ce_slope: Vec<f64>,
    phce_slope: Vec<f64>,
}

/// CE and PHCE values and slopes on a grid of target probabilities.
pub fn loss_curves(tau: f64, points: usize) -> Result<String, String> {
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    let p: Vec<f64> = (1..=points).map(|i| i as f64 / points as f64).collect();
    let mut c = Curves {
        tau,
        p: p.clone(),
        ce: Vec::new(),
        phce: Vec::new(),
        ce_slope: Vec::new(),
        phce_slope: Vec::new(),
    };
    for &q in &p {
        c.ce.push(losses::ce(q).map_err(|e| e.to_string())?);
        c.phce
            .push(losses::phce(q, tau).map_err(|e| e.to_string())?);
        c.ce_slope.push(-1.0 / q);
        c.phce_slope.push(losses::phce_derivative(q, tau));
    }
    serde_json::to_string(&c).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point {
    x: f64,
    y: f64,
    gold: usize,
    pseudo: usize,
    confidence: f64,
    certainty: f64,
    weight: f64,
    reliable: bool,
}

#[derive(Serialize)]
struct Scatter {
    teacher_acc: f64,
    reliable_acc: f64,
    hard_acc: f64,
    extent: f64,
    grid: usize,
    /// Row-major teacher argmax over the plotting window, top row first.
    regions: Vec<usize>,
    points: Vec<Point>,
}

fn share_correct(points: &[&Point]) -> f64 {
    if points.is_empty() {
        return f64::NAN;
    }
    points.iter().filter(|p| p.gold == p.pseudo).count() as f64 / points.len() as f64
}

/// Fits a teacher on the labeled points, pseudo-labels the pool and draws
/// one reliable set.
pub fn selection_scatter(
    seed: u64,
    sep: f64,
    alpha: f64,
    reliable_fraction: f64,
) -> Result<String, String> {
    let data = plane(seed, sep);
    let cfg = demo_config(seed, alpha, reliable_fraction);
    cfg.validate().map_err(|e| e.to_string())?;
    let w0 =
        selftrain::initial_model(&cfg, &data.labeled, 2, CLASSES).map_err(|e| e.to_string())?;
    let (teacher, _) =
        selftrain::fine_tune_teacher(&w0, &data.labeled, &cfg).map_err(|e| e.to_string())?;
    let pseudo =
        selftrain::pseudo_annotate(&teacher, &data.unlabeled).map_err(|e| e.to_string())?;
    let sel = selftrain::select_reliable(&teacher, &data.unlabeled, &pseudo, &cfg, 1)
        .map_err(|e| e.to_string())?;
    let scores = sel
        .scores
        .ok_or("uncertainty selection returned no scores")?;
    let mut reliable = vec![false; pseudo.len()];
    sel.reliable.iter().for_each(|&i| reliable[i] = true);

    let points: Vec<Point> = data
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, e)| Point {
            x: e.features[0],
            y: e.features[1],
            gold: e.gold_label.unwrap_or(0),
            pseudo: pseudo[i],
            confidence: scores[i].confidence,
            certainty: scores[i].certainty,
            weight: scores[i].weight,
            reliable: reliable[i],
        })
        .collect();
    let step = 2.0 * EXTENT / GRID as f64;
    let mut regions = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        let y = EXTENT - (r as f64 + 0.5) * step;
        for c in 0..GRID {
            let x = -EXTENT + (c as f64 + 0.5) * step;
            regions.push(teacher.predict(&[x, y]).map_err(|e| e.to_string())?);
        }
    }
    let (rel, hard): (Vec<&Point>, Vec<&Point>) = points.iter().partition(|p| p.reliable);
    let out = Scatter {
        teacher_acc: selftrain::evaluate(&teacher, &data.test)
            .map_err(|e| e.to_string())?
            .accuracy,
        reliable_acc: share_correct(&rel),
        hard_acc: share_correct(&hard),
        extent: EXTENT,
        grid: GRID,
        regions,
        points,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Trajectory {
    mode: String,
    teacher_acc: f64,
    final_acc: f64,
    records: Vec<IterationRecord>,
}

/// Runs self-training on the plane. `mode` is `uncertainty`, `random`,
/// `all` or `vanilla`; `loss` is `phce` or `ce`.
pub fn trajectory(
    seed: u64,
    sep: f64,
    iterations: usize,
    mode: &str,
    loss: &str,
    noise: f64,
) -> Result<String, String> {
    let data = plane(seed, sep);
    let mut cfg = demo_config(seed, 0.4, 0.5);
    cfg.iterations = iterations;
    cfg.pseudo_label_noise = noise;
    cfg.loss = match loss {
        "phce" => LossConfig::default(),
        "ce" => LossConfig {
            kind: LossKind::Ce,
            ..LossConfig::default()
        },
        other => return Err(format!("unknown loss {other:?}")),
    };
    let out = match mode {
        "vanilla" => selftrain::run_vanilla(&cfg, &data.labeled, &data.unlabeled, &data.test),
        _ => {
            cfg.selection = match mode {
                "uncertainty" => SelectionMode::Uncertainty,
                "random" => SelectionMode::Random,
                "all" => SelectionMode::All,
                other => return Err(format!("unknown mode {other:?}")),
            };
            selftrain::run(&cfg, &data.labeled, &data.unlabeled, &data.test)
        }
    }
    .map_err(|e| e.to_string())?;
    let t = Trajectory {
        mode: mode.to_owned(),
        teacher_acc: out.baseline.accuracy,
        final_acc: out.final_metrics.accuracy,
        records: out.records,
    };
    serde_json::to_string(&t).map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = lossCurves)]
pub fn loss_curves_js(tau: f64, points: u32) -> Result<String, JsValue> {
    js(loss_curves(tau, points as usize))
}

#[wasm_bindgen(js_name = selectionScatter)]
pub fn selection_scatter_js(
    seed: u32,
    sep: f64,
    alpha: f64,
    reliable_fraction: f64,
) -> Result<String, JsValue> {
    js(selection_scatter(
        seed as u64,
        sep,
        alpha,
        reliable_fraction,
    ))
}

#[wasm_bindgen(js_name = trajectory)]
pub fn trajectory_js(
    seed: u32,
    sep: f64,
    iterations: u32,
    mode: &str,
    loss: &str,
    noise: f64,
) -> Result<String, JsValue> {
    js(trajectory(
        seed as u64,
        sep,
        iterations as usize,
        mode,
        loss,
        noise,
    ))
}
