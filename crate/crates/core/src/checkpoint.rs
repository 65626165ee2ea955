//! Versioned JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "upet-checkpoint",
//!   "version": 1,
//!   "dims": {"features": F, "hidden": d, "classes": C},
//!   "pel": {...},
//!   "seed": u64,
//!   "verbalizer_ready": bool,
//!   "params": {"backbone_weight": [...], ...}   // row-major, every block
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so a loaded model
//! reproduces the saved one bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, Dims, ModelParams, PelConfig};

pub const FORMAT: &str = "upet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    dims: Dims,
    pel: PelConfig,
    seed: u64,
    verbalizer_ready: bool,
    params: BTreeMap<String, Vec<f64>>,
}

pub fn to_json(model: &ModelParams) -> Result<String> {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        dims: model.dims,
        pel: model.pel,
        seed: model.seed,
        verbalizer_ready: model.verbalizer_ready,
        params: Block::ALL
            .iter()
            .map(|b| (b.name().to_owned(), model.block(*b).to_vec()))
            .collect(),
    };
    serde_json::to_string(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses a checkpoint. With `expected` set, a checkpoint written for a
/// different PEL configuration is rejected.
pub fn from_json(text: &str, expected: Option<&PelConfig>) -> Result<ModelParams> {
    let doc: Document = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
    if doc.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint (format {:?})",
            doc.format
        )));
    }
    if doc.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {VERSION})",
            doc.version
        )));
    }
    if let Some(pel) = expected {
        if *pel != doc.pel {
            return Err(Error::Config(format!(
                "checkpoint was written for {:?}, expected {:?}",
                doc.pel, pel
            )));
        }
    }
    let mut params = doc.params;
    let blocks = Block::ALL
        .iter()
        .map(|b| {
            params
                .remove(b.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing block {}", b.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unknown block {extra}")));
    }
    ModelParams::from_blocks(doc.dims, doc.pel, doc.seed, doc.verbalizer_ready, blocks)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&PelConfig>) -> Result<ModelParams> {
    from_json(&fs::read_to_string(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Paradigm, PelVariant};
    use crate::numeric::Rng;

    fn model() -> ModelParams {
        let pel = PelConfig::new(PelVariant::Prefix { count: 3 }, Paradigm::Head);
        let mut m = ModelParams::init(pel, 6, 5, 3, 9).unwrap();
        let mut rng = Rng::new(4);
        for b in Block::ALL {
            for v in m.block_mut(b) {
                *v += rng.normal() * 1e-3;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save(&m, &path).unwrap();
        let back = load(&path, Some(&m.pel)).unwrap();
        assert_eq!(back, m);
        let x = [0.1, -0.7, 0.3, 0.9, 0.0, -0.2];
        assert_eq!(
            back.predict_proba(&x).unwrap(),
            m.predict_proba(&x).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = to_json(&model()).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(from_json(cut, None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_config_and_version_are_rejected() {
        let m = model();
        let text = to_json(&m).unwrap();
        let other = PelConfig::new(PelVariant::Adapter { bottleneck: 2 }, Paradigm::Head);
        assert!(matches!(
            from_json(&text, Some(&other)),
            Err(Error::Config(_))
        ));
        let bumped = text.replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            from_json(&bumped, None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = model();
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&m).unwrap()).unwrap();
        doc["params"]["prefix"].as_array_mut().unwrap().pop();
        assert!(matches!(
            from_json(&doc.to_string(), None),
            Err(Error::Checkpoint(_))
        ));
    }
}
