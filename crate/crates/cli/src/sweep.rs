//! Grid sweeps: one experiment per point of the Cartesian product.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Result};

use crate::config::Config;
use crate::runner::{self, SummaryRow, SUMMARY_HEADER};

#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub label: String,
    pub values: Vec<toml::Value>,
    pub result: std::result::Result<SummaryRow, String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub csv: PathBuf,
    pub keys: Vec<String>,
    pub points: Vec<PointOutcome>,
}

/// Every combination of the axes, first key varying slowest.
pub fn grid_points(grid: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<toml::Value>> {
    let mut points = vec![Vec::new()];
    for values in grid.values() {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn point_label(keys: &[String], values: &[toml::Value]) -> String {
    let raw: Vec<String> = keys
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{}={}", k.rsplit('.').next().unwrap_or(k), render(v)))
        .collect();
    raw.join("_")
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "=._-".contains(c) {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Runs the grid in `base.sweep.grid` sequentially. A failing point is
/// recorded in the CSV and the sweep moves on.
pub fn run_sweep(base: &Config) -> Result<SweepReport> {
    let grid = &base.sweep.grid;
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        bail!("sweep grid is empty");
    }
    let keys: Vec<String> = grid.keys().cloned().collect();
    let root = base.out_dir().join(&base.run.name);
    fs::create_dir_all(&root)?;

    let mut points = Vec::new();
    for values in grid_points(grid) {
        let label = point_label(&keys, &values);
        let result = (|| -> Result<SummaryRow> {
            let mut cfg = base.clone();
            for (k, v) in keys.iter().zip(&values) {
                cfg.set_value(k, v.clone())?;
            }
            cfg.sweep = Default::default();
            cfg.run.out_dir = Some(root.clone());
            cfg.run.name = label.clone();
            Ok(runner::run_experiment(&cfg)?.summary)
        })()
        .map_err(|e| format!("{e:#}"));
        if let Err(msg) = &result {
            eprintln!("sweep point {label} failed: {msg}");
        }
        points.push(PointOutcome {
            label,
            values,
            result,
        });
    }

    let csv_path = root.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(keys.iter().cloned());
    header.push("status".into());
    header.extend(SUMMARY_HEADER.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for p in &points {
        let mut row = vec![p.label.clone()];
        row.extend(p.values.iter().map(render));
        match &p.result {
            Ok(s) => {
                row.push("ok".into());
                row.extend(s.fields());
            }
            Err(msg) => {
                row.push(format!("error: {msg}"));
                row.extend(std::iter::repeat_n(String::new(), SUMMARY_HEADER.len()));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(SweepReport {
        csv: csv_path,
        keys,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_product() {
        let mut grid = BTreeMap::new();
        grid.insert(
            "a".to_string(),
            vec![toml::Value::Integer(1), toml::Value::Integer(2)],
        );
        grid.insert(
            "b".to_string(),
            vec![
                toml::Value::String("x".into()),
                toml::Value::String("y".into()),
                toml::Value::String("z".into()),
            ],
        );
        let pts = grid_points(&grid);
        assert_eq!(pts.len(), 6);
        assert_eq!(point_label(&["m.a".into(), "b".into()], &pts[1]), "a=1_b=y");
    }
}
