use serde_json::Value;

use upet_demo::{loss_curves, plane, selection_scatter, trajectory};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn curves_agree_above_the_knee() {
    let c = parse(loss_curves(4.0, 100).unwrap());
    let p = c["p"].as_array().unwrap();
    assert_eq!(p.len(), 100);
    for i in 0..100 {
        let q = p[i].as_f64().unwrap();
        let ce = c["ce"][i].as_f64().unwrap();
        let phce = c["phce"][i].as_f64().unwrap();
        if q > 0.25 {
            assert_eq!(ce, phce);
        } else {
            assert!(phce <= ce);
            assert_eq!(c["phce_slope"][i].as_f64().unwrap(), -4.0);
        }
    }
    assert!(loss_curves(1.0, 10).is_err());
    assert!(loss_curves(4.0, 1).is_err());
}

#[test]
fn plane_is_balanced_and_disjoint() {
    let d = plane(3, 3.0);
    assert_eq!(d.labeled.len(), 12);
    assert_eq!(d.unlabeled.len(), 300);
    assert_eq!(d.test.len(), 300);
    let mut ids: Vec<u64> = d
        .labeled
        .iter()
        .chain(&d.unlabeled)
        .chain(&d.test)
        .map(|e| e.id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 612);
    for c in 0..3 {
        assert_eq!(
            d.labeled.iter().filter(|e| e.gold_label == Some(c)).count(),
            4
        );
    }
}

#[test]
fn scatter_selects_half_the_pool() {
    let s = parse(selection_scatter(1, 3.0, 0.4, 0.5).unwrap());
    let pts = s["points"].as_array().unwrap();
    assert_eq!(pts.len(), 300);
    assert_eq!(
        pts.iter()
            .filter(|p| p["reliable"].as_bool().unwrap())
            .count(),
        150
    );
    let total: f64 = pts.iter().map(|p| p["weight"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(s["regions"].as_array().unwrap().len(), 48 * 48);
    assert!(s["regions"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r.as_u64().unwrap() < 3));
    assert_eq!(
        selection_scatter(1, 3.0, 0.4, 0.5).unwrap(),
        selection_scatter(1, 3.0, 0.4, 0.5).unwrap()
    );
}

#[test]
fn trajectories_run_every_mode() {
    for mode in ["uncertainty", "random", "all", "vanilla"] {
        let t = parse(trajectory(2, 3.0, 2, mode, "phce", 0.0).unwrap());
        assert_eq!(t["records"].as_array().unwrap().len(), 2, "{mode}");
        assert_eq!(t["mode"], mode);
    }
    let a = trajectory(2, 3.0, 2, "uncertainty", "ce", 0.3).unwrap();
    assert_eq!(a, trajectory(2, 3.0, 2, "uncertainty", "ce", 0.3).unwrap());
    assert!(trajectory(2, 3.0, 2, "greedy", "ce", 0.0).is_err());
    assert!(trajectory(2, 3.0, 2, "all", "mse", 0.0).is_err());
}
