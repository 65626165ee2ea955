//! Experiment runner around `upet-core`: configuration files, seed loops,
//! sweeps and the artifacts they leave on disk.

pub mod commands;
pub mod config;
pub mod runner;
pub mod sweep;

pub use commands::{Cli, Command};
pub use config::Config;

/// Machine-readable failure report printed by the binary.
pub fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| {
            e.downcast_ref::<upet_core::Error>()
                .map(upet_core::Error::kind)
        })
        .or_else(|| {
            err.chain()
                .any(|e| e.is::<toml::de::Error>() || e.is::<serde_json::Error>())
                .then_some("config")
        })
        .or_else(|| {
            err.chain()
                .any(|e| e.is::<std::io::Error>())
                .then_some("io")
        })
        .unwrap_or("cli");
    serde_json::json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
        }
    })
}
