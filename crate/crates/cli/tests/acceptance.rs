//! Acceptance criteria AC-1..AC-10. Runs without the libtest harness and
//! prints one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;

use upet_cli::Config;
use upet_cli::{commands, runner, Cli};
use upet_core::losses::{self, ContrastiveForm, LossConfig, LossKind};
use upet_core::model::{
    grad, trainable_param_count, Batch, BatchInput, Block, Dims, Gradients, Mask, ModelParams,
    Paradigm, PelConfig, PelVariant, Target, TrainScope, Triple,
};
use upet_core::numeric::Rng;
use upet_core::selftrain::{self, SelectionMode};
use upet_core::uncertainty::{self, McPosterior};

type Check = Result<String, String>;
type Criterion = (&'static str, &'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth.toml")
}

fn synth_config() -> Config {
    Config::from_path(&config_path()).expect("configs/synth.toml")
}

fn ac1() -> Check {
    let mut rng = Rng::new(101);
    let mut on_log = 0;
    for _ in 0..1000 {
        let tau = 1.0 + 99.0 * rng.open_uniform();
        let p = rng.open_uniform();
        let phi = losses::phce(p, tau).map_err(|e| e.to_string())?;
        if p > 1.0 / tau {
            on_log += 1;
            ensure(
                phi == losses::ce(p).unwrap(),
                format!("phce({p}, {tau}) != ce"),
            )?;
        }
        let k = 1.0 / tau;
        let linear = -tau * k + tau.ln() + 1.0;
        let log = -k.ln();
        ensure(
            (linear - log).abs() <= 1e-12,
            format!("branches differ at p = 1/{tau}"),
        )?;
        let d = losses::phce_derivative(p, tau);
        ensure(
            d.abs() <= tau,
            format!("|dphi/dp| = {} > tau = {tau}", d.abs()),
        )?;
    }
    Ok(format!("1000 draws, {on_log} on the log branch"))
}

fn random_simplex(c: usize, peak: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| (peak * rng.normal()).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn ac2() -> Check {
    let mut rng = Rng::new(202);
    let mut worst_hi: f64 = f64::NEG_INFINITY;
    for i in 0..10_000 {
        let t = 1 + rng.below(20);
        let c = 2 + rng.below(9);
        let peak = [0.1, 1.0, 5.0, 30.0][i % 4];
        let rows: Vec<Vec<f64>> = (0..t).map(|_| random_simplex(c, peak, &mut rng)).collect();
        let mc = McPosterior::from_rows(&rows).map_err(|e| e.to_string())?;
        let b = uncertainty::bald(&mc);
        let ln_c = (c as f64).ln();
        ensure(
            b >= -1e-12 && b <= ln_c + 1e-12,
            format!("BALD {b} outside [0, ln {c}]"),
        )?;
        worst_hi = worst_hi.max(b / ln_c);
        let dup = McPosterior::from_rows(&vec![rows[0].clone(); t]).unwrap();
        ensure(
            uncertainty::bald(&dup) == 0.0,
            "duplicated rows give nonzero BALD",
        )?;
    }
    Ok(format!("10000 posteriors, max BALD / ln C = {worst_hi:.4}"))
}

const PELS: [PelVariant; 4] = [
    PelVariant::Full,
    PelVariant::Adapter { bottleneck: 3 },
    PelVariant::Prefix { count: 2 },
    PelVariant::Ptuning { count: 2 },
];

fn combos(dropout: f64) -> Vec<PelConfig> {
    PELS.iter()
        .flat_map(|&v| {
            [Paradigm::Head, Paradigm::Prompt].map(|p| PelConfig::new(v, p).with_dropout(dropout))
        })
        .collect()
}

fn scrambled(pel: PelConfig, f: usize, d: usize, c: usize, seed: u64) -> ModelParams {
    let mut m = ModelParams::init(pel, f, d, c, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    for b in Block::ALL {
        for v in m.block_mut(b) {
            *v = 0.6 * rng.normal();
        }
    }
    m.verbalizer_ready = true;
    m
}

fn gaussian_rows(n: usize, f: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..f).map(|_| rng.normal()).collect())
        .collect()
}

/// Forward pass written out directly from the block layout.
fn straight_line_proba(m: &ModelParams, x: &[f64], scale: &[f64]) -> Vec<f64> {
    let Dims {
        features: f,
        hidden: d,
        classes: c,
    } = m.dims;
    let mut input = x.to_vec();
    if let PelVariant::Ptuning { count } = m.pel.variant {
        let tok = m.block(Block::PseudoTokens);
        for j in 0..f {
            let mut s = 0.0;
            for i in 0..count {
                s += tok[i * f + j];
            }
            input[j] += s / count as f64;
        }
    }
    let w = m.block(Block::BackboneWeight);
    let bias = m.block(Block::BackboneBias);
    let mut h: Vec<f64> = (0..d)
        .map(|r| {
            let mut s = bias[r];
            for j in 0..f {
                s += w[r * f + j] * input[j];
            }
            s.tanh()
        })
        .collect();
    if let PelVariant::Prefix { count } = m.pel.variant {
        let p = m.block(Block::Prefix);
        let scores: Vec<f64> = (0..count)
            .map(|i| (0..d).map(|j| h[j] * p[i * d + j]).sum())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
        for i in 0..count {
            let a = (scores[i] - top).exp() / z;
            for j in 0..d {
                h[j] += a * p[i * d + j];
            }
        }
    }
    if let PelVariant::Adapter { bottleneck: k } = m.pel.variant {
        let down = m.block(Block::AdapterDown);
        let db = m.block(Block::AdapterDownBias);
        let up = m.block(Block::AdapterUp);
        let ub = m.block(Block::AdapterUpBias);
        let act: Vec<f64> = (0..k)
            .map(|r| {
                let mut s = db[r];
                for j in 0..d {
                    s += down[r * d + j] * h[j];
                }
                s.max(0.0)
            })
            .collect();
        let delta: Vec<f64> = (0..d)
            .map(|r| {
                let mut s = ub[r];
                for j in 0..k {
                    s += up[r * k + j] * act[j];
                }
                s
            })
            .collect();
        for j in 0..d {
            h[j] += delta[j];
        }
    }
    for j in 0..d {
        h[j] *= scale[j];
    }
    let logits: Vec<f64> = match m.pel.paradigm {
        Paradigm::Head => {
            let hw = m.block(Block::HeadWeight);
            let hb = m.block(Block::HeadBias);
            (0..c)
                .map(|r| hb[r] + (0..d).map(|j| hw[r * d + j] * h[j]).sum::<f64>())
                .collect()
        }
        Paradigm::Prompt => {
            let e = m.block(Block::LabelEmbeddings);
            let t = m.pel.verbalizer_temperature;
            (0..c)
                .map(|r| (0..d).map(|j| e[r * d + j] * h[j]).sum::<f64>() / t)
                .collect()
        }
    };
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    logits.iter().map(|l| (l - top).exp() / z).collect()
}

fn ac3() -> Check {
    let mut data_rng = Rng::new(303);
    let xs = gaussian_rows(20, 7, &mut data_rng);
    let mut worst: f64 = 0.0;
    for (ci, pel) in combos(0.3).into_iter().enumerate() {
        let m = scrambled(pel, 7, 9, 4, 30 + ci as u64);
        for (i, x) in xs.iter().enumerate() {
            let seed = (ci * 100 + i) as u64;
            let zero = uncertainty::mc_posterior(&m, x, 8, 0.0, &mut Rng::new(seed))
                .map_err(|e| e.to_string())?;
            ensure(
                zero.mean() == m.predict_proba(x).unwrap().into_inner(),
                format!("rate 0 mean differs from predict_proba ({})", pel.label()),
            )?;

            let rate = 0.3;
            let t = 12;
            let mc = uncertainty::mc_posterior(&m, x, t, rate, &mut Rng::new(seed)).unwrap();
            let mut mask_rng = Rng::new(seed);
            let mut expect = vec![0.0; 4];
            for _ in 0..t {
                let scale: Vec<f64> = (0..9)
                    .map(|_| {
                        if mask_rng.uniform() < rate {
                            0.0
                        } else {
                            1.0 / (1.0 - rate)
                        }
                    })
                    .collect();
                for (e, p) in expect.iter_mut().zip(straight_line_proba(&m, x, &scale)) {
                    *e += p / t as f64;
                }
            }
            for (a, b) in mc.mean().iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(
        worst <= 1e-12,
        format!("rate 0.3 estimator off by {worst:e}"),
    )?;
    Ok(format!(
        "8 configurations x 20 inputs, rate 0.3 max deviation {worst:.1e}"
    ))
}

fn fd_batch<'a>(xs: &'a [Vec<f64>], d: usize, rng: &mut Rng) -> Batch<'a> {
    Batch {
        inputs: xs
            .iter()
            .enumerate()
            .map(|(i, x)| BatchInput {
                id: i as u64,
                features: x,
            })
            .collect(),
        targets: (0..4)
            .map(|i| Target {
                input: i,
                label: i % 3,
                mask: (i % 2 == 1).then(|| Mask::draw(d, 0.3, rng)),
            })
            .collect(),
        triples: vec![
            Triple {
                anchor: 0,
                positive: 1,
                negatives: vec![4, 5],
            },
            Triple {
                anchor: 2,
                positive: 3,
                negatives: vec![5],
            },
        ],
    }
}

fn fd_error(m: &ModelParams, scope: TrainScope, batch: &Batch<'_>, cfg: &LossConfig) -> f64 {
    let analytic = grad(m, scope, batch, cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for b in Block::ALL {
        for i in 0..m.block(b).len() {
            let fd = if scope.trainable(b, &m.pel) {
                let mut plus = m.clone();
                plus.block_mut(b)[i] += h;
                let mut minus = m.clone();
                minus.block_mut(b)[i] -= h;
                (losses::total_loss(&plus, batch, cfg).unwrap()
                    - losses::total_loss(&minus, batch, cfg).unwrap())
                    / (2.0 * h)
            } else {
                0.0
            };
            let a = analytic.grads.block(b)[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

fn ac4() -> Check {
    let (f, d, c) = (5, 8, 3);
    let cfgs = [
        LossConfig::default(),
        LossConfig {
            form: ContrastiveForm::LiteralPaper,
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::Ce,
            ..LossConfig::default()
        },
    ];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (ci, pel) in combos(0.3).into_iter().enumerate() {
        let m = scrambled(pel, f, d, c, 40 + ci as u64);
        let mut rng = Rng::new(400 + ci as u64);
        let xs = gaussian_rows(6, f, &mut rng);
        let batch = fd_batch(&xs, d, &mut rng);
        for cfg in &cfgs {
            for scope in [TrainScope::Efficient, TrainScope::All] {
                let e = fd_error(&m, scope, &batch, cfg);
                ensure(
                    e <= 1e-4,
                    format!("{} {:?}: relative error {e:e}", pel.label(), scope),
                )?;
                worst = worst.max(e);
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} cases over 8 configurations, max relative error {worst:.1e}"
    ))
}

fn ac5() -> Check {
    let (f, d, c) = (10, 8, 3);
    let variants = [
        PelVariant::Full,
        PelVariant::Adapter { bottleneck: 1 },
        PelVariant::Adapter { bottleneck: 7 },
        PelVariant::Prefix { count: 1 },
        PelVariant::Prefix { count: 5 },
        PelVariant::Ptuning { count: 1 },
        PelVariant::Ptuning { count: 5 },
    ];
    let mut checked = 0;
    for v in variants {
        for p in [Paradigm::Head, Paradigm::Prompt] {
            let pel = PelConfig::new(v, p);
            let m = ModelParams::init(pel, f, d, c, 5).unwrap();
            let count = trainable_param_count(&pel, f, d, c);
            let card = Gradients::mask_cardinality(&m, TrainScope::Efficient);
            ensure(
                count == card,
                format!("{}: count {count} vs mask {card}", pel.label()),
            )?;
            checked += 1;
        }
    }
    let mut pairs = 0;
    for m in [8, 16, 32] {
        for d in [32, 64, 128] {
            let pel = PelConfig::new(PelVariant::Adapter { bottleneck: m }, Paradigm::Head);
            let dims = Dims {
                features: 10,
                hidden: d,
                classes: 3,
            };
            let adapter: usize = [
                Block::AdapterDown,
                Block::AdapterDownBias,
                Block::AdapterUp,
                Block::AdapterUpBias,
            ]
            .iter()
            .map(|b| b.len(dims, &pel))
            .sum();
            ensure(
                adapter == 2 * m * d + d + m,
                format!("adapter block for m={m}, d={d} is {adapter}"),
            )?;
            if m < d {
                let head = 3 * d + 3;
                ensure(
                    trainable_param_count(&pel, 10, d, 3) == adapter + head,
                    format!("student count for m={m}, d={d}"),
                )?;
            }
            pairs += 1;
        }
    }
    Ok(format!("{checked} configurations, {pairs} (m, d) pairs"))
}

fn ranking(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

fn ac6() -> Check {
    let mut rng = Rng::new(606);
    for _ in 0..200 {
        let n = 2 + rng.below(60);
        let scores: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.open_uniform(), rng.open_uniform()))
            .collect();
        let cf: Vec<f64> = scores.iter().map(|s| s.0).collect();
        let ct: Vec<f64> = scores.iter().map(|s| s.1).collect();
        let w1 = uncertainty::sampling_weights(&scores, 1.0).unwrap();
        let w0 = uncertainty::sampling_weights(&scores, 0.0).unwrap();
        ensure(
            ranking(&w1) == ranking(&cf),
            "alpha = 1 ranking differs from confidence",
        )?;
        ensure(
            ranking(&w0) == ranking(&ct),
            "alpha = 0 ranking differs from certainty",
        )?;
        let alpha = rng.uniform();
        let w = uncertainty::sampling_weights(&scores, alpha).unwrap();
        let total: f64 = w.iter().sum();
        ensure(
            (total - 1.0).abs() <= 1e-9,
            format!("weights sum to {total}"),
        )?;
    }

    let pel =
        PelConfig::new(PelVariant::Adapter { bottleneck: 3 }, Paradigm::Head).with_dropout(0.3);
    let m = scrambled(pel, 6, 8, 3, 66);
    let xs = gaussian_rows(50, 6, &mut rng);
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = xs.iter().map(|x| m.predict(x).unwrap()).collect();
    let masks = uncertainty::draw_masks(8, 10, 0.3, &mut rng).unwrap();
    for (alpha, pick) in [(1.0, 0), (0.0, 1)] {
        let s = uncertainty::score_pool(&m, &inputs, &labels, &masks, alpha, 1).unwrap();
        let w: Vec<f64> = s.iter().map(|r| r.weight).collect();
        let key: Vec<f64> = s
            .iter()
            .map(|r| if pick == 0 { r.confidence } else { r.certainty })
            .collect();
        ensure(
            ranking(&w) == ranking(&key),
            format!("scored pool ranking at alpha = {alpha}"),
        )?;
        let total: f64 = w.iter().sum();
        ensure(
            (total - 1.0).abs() <= 1e-9,
            format!("pool weights sum to {total}"),
        )?;
    }
    Ok("200 random pools and one scored pool".into())
}

struct SeedRuns {
    teacher: f64,
    finals: Vec<f64>,
}

/// Seed-mean teacher accuracy and seed-mean final accuracy for each
/// configuration tweak.
fn seed_means(
    cfg: &Config,
    tweaks: &[&dyn Fn(&mut selftrain::SelfTrainConfig)],
) -> Result<SeedRuns, String> {
    let seeds = &cfg.run.seeds;
    let n = seeds.len() as f64;
    let mut teacher = 0.0;
    let mut finals = vec![0.0; tweaks.len()];
    for &seed in seeds {
        let splits = runner::load_splits(cfg, seed).map_err(|e| e.to_string())?;
        for (k, tweak) in tweaks.iter().enumerate() {
            let mut st = cfg.selftrain(seed);
            tweak(&mut st);
            let out = selftrain::run(&st, &splits.labeled, &splits.unlabeled, &splits.test)
                .map_err(|e| e.to_string())?;
            if k == 0 {
                teacher += out.baseline.accuracy / n;
            }
            finals[k] += out.final_metrics.accuracy / n;
        }
    }
    Ok(SeedRuns { teacher, finals })
}

fn ac7() -> Check {
    let cfg = synth_config();
    let splits = runner::load_splits(&cfg, cfg.run.seeds[0]).map_err(|e| e.to_string())?;
    ensure(
        splits.info.n_unlabeled == 2000 && splits.info.n_labeled == 64,
        format!(
            "split sizes {} / {}",
            splits.info.n_labeled, splits.info.n_unlabeled
        ),
    )?;
    let r = seed_means(&cfg, &[&|_| {}, &|st| st.selection = SelectionMode::Random])?;
    let (upet, random) = (r.finals[0], r.finals[1]);
    let detail = format!(
        "teacher {:.2}, final {:.2} (gain {:+.2}), random selection {:.2}",
        100.0 * r.teacher,
        100.0 * upet,
        100.0 * (upet - r.teacher),
        100.0 * random
    );
    ensure(
        (0.70..=0.85).contains(&r.teacher),
        format!("teacher outside 0.70-0.85: {detail}"),
    )?;
    ensure(
        upet >= r.teacher + 0.03,
        format!("gain below 3 points: {detail}"),
    )?;
    ensure(upet >= random, format!("below random selection: {detail}"))?;
    Ok(detail)
}

fn ac8() -> Check {
    let mut cfg = synth_config();
    cfg.selftrain.pseudo_label_noise = 0.3;
    let r = seed_means(&cfg, &[&|_| {}, &|st| st.loss.kind = LossKind::Ce])?;
    let (phce, ce) = (r.finals[0], r.finals[1]);
    let detail = format!(
        "PHCE {:.2}, CE {:.2} (gap {:+.2})",
        100.0 * phce,
        100.0 * ce,
        100.0 * (phce - ce)
    );
    ensure(phce >= ce - 0.01, detail.clone())?;
    Ok(detail)
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["upet"];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    commands::run(parsed).map_err(|e| format!("{e:#}"))
}

fn ac9() -> Check {
    let cfg = synth_config();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().to_str().unwrap();
    let path = config_path();
    let seeds = [12u64, 42];
    cli(&[
        "train",
        "-c",
        path.to_str().unwrap(),
        "--out",
        out,
        "--name",
        "ablated",
        "--seeds",
        "12,42",
        "--no-selection",
        "--loss",
        "ce",
        "--no-contrastive",
    ])?;
    let mut lines = 0;
    for seed in seeds {
        let splits = runner::load_splits(&cfg, seed).map_err(|e| e.to_string())?;
        let vanilla = selftrain::run_vanilla(
            &cfg.selftrain(seed),
            &splits.labeled,
            &splits.unlabeled,
            &splits.test,
        )
        .map_err(|e| e.to_string())?;
        let mut expect = String::new();
        for r in &vanilla.records {
            expect += &serde_json::to_string(r).unwrap();
            expect.push('\n');
        }
        let got = std::fs::read_to_string(
            tmp.path()
                .join(format!("ablated/seed-{seed}/metrics.jsonl")),
        )
        .map_err(|e| e.to_string())?;
        ensure(
            got == expect,
            format!("seed {seed}: ablated metrics differ from the vanilla loop"),
        )?;
        lines += vanilla.records.len();
    }
    Ok(format!(
        "{lines} iteration records identical over {} seeds",
        seeds.len()
    ))
}

fn ac10() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let path = config_path();
    let dir = |n: &str| root.join(n).to_str().unwrap().to_owned();
    let (a, b, c) = (dir("a"), dir("b"), dir("c"));
    cli(&[
        "train",
        "-c",
        path.to_str().unwrap(),
        "--out",
        &a,
        "--seeds",
        "21,87",
        "--workers",
        "1",
    ])?;
    let manifest = root.join("a/synth/manifest.json");
    cli(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        &b,
    ])?;
    cli(&[
        "train",
        "-c",
        path.to_str().unwrap(),
        "--out",
        &c,
        "--seeds",
        "21,87",
        "--workers",
        "4",
    ])?;
    for seed in [21, 87] {
        let rel = format!("synth/seed-{seed}/metrics.jsonl");
        let first = std::fs::read(root.join("a").join(&rel)).map_err(|e| e.to_string())?;
        ensure(
            first == std::fs::read(root.join("b").join(&rel)).unwrap(),
            format!("seed {seed}: manifest re-run differs"),
        )?;
        ensure(
            first == std::fs::read(root.join("c").join(&rel)).unwrap(),
            format!("seed {seed}: 4 workers differ"),
        )?;
        let scores = format!("synth/seed-{seed}/scores.jsonl");
        ensure(
            std::fs::read(root.join("a").join(&scores)).unwrap()
                == std::fs::read(root.join("c").join(&scores)).unwrap(),
            format!("seed {seed}: scores differ between 1 and 4 workers"),
        )?;
    }

    let cfg = synth_config();
    let splits = runner::load_splits(&cfg, 12).map_err(|e| e.to_string())?;
    let st = cfg.selftrain(12);
    let w0 = selftrain::initial_model(&st, &splits.labeled, 32, 4).map_err(|e| e.to_string())?;
    let (teacher, _) =
        selftrain::fine_tune_teacher(&w0, &splits.labeled, &st).map_err(|e| e.to_string())?;
    let inputs: Vec<&[f64]> = splits
        .unlabeled
        .iter()
        .map(|e| e.features.as_slice())
        .collect();
    let labels =
        selftrain::pseudo_annotate(&teacher, &splits.unlabeled).map_err(|e| e.to_string())?;
    let masks = uncertainty::draw_masks(64, 10, 0.1, &mut Rng::new(12)).unwrap();
    let one = uncertainty::score_pool(&teacher, &inputs, &labels, &masks, 0.4, 1)
        .map_err(|e| e.to_string())?;
    let four = uncertainty::score_pool(&teacher, &inputs, &labels, &masks, 0.4, 4)
        .map_err(|e| e.to_string())?;
    let bits = |s: &[uncertainty::SelectionScores]| -> Vec<[u64; 4]> {
        s.iter()
            .map(|r| {
                [
                    r.confidence.to_bits(),
                    r.certainty.to_bits(),
                    r.weight.to_bits(),
                    r.bald_raw.to_bits(),
                ]
            })
            .collect()
    };
    ensure(
        bits(&one) == bits(&four),
        "score_pool differs between 1 and 4 workers",
    )?;
    Ok(format!(
        "2 seeds re-run from the manifest, {} examples scored on 1 and 4 workers",
        one.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC-1", "PHCE branch algebra", 1, ac1),
        ("AC-2", "BALD bounds", 5, ac2),
        ("AC-3", "posterior consistency", 5, ac3),
        ("AC-4", "gradient oracle", 30, ac4),
        ("AC-5", "parameter accounting", 1, ac5),
        ("AC-6", "selection endpoints", 1, ac6),
        ("AC-7", "self-training gain", 120, ac7),
        ("AC-8", "noise robustness", 120, ac8),
        ("AC-9", "ablation identities", 60, ac9),
        ("AC-10", "determinism", 120, ac10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC-"))
        .collect();
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > Duration::from_secs(limit) => {
                Err(format!("{msg}; over the {limit} s budget"))
            }
            other => other,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("{id:<5} {tag} {name}: {msg} [{:.2} s]", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
