//! Aggregates run manifests into comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::runner::{mean_se, Manifest, MANIFEST};

/// Every readable manifest below `dir`, sorted by path. Unreadable ones are
/// skipped with a warning.
pub fn collect_manifests(dir: &Path) -> Vec<Manifest> {
    let mut paths = Vec::new();
    find(dir, &mut paths);
    paths.sort();
    paths
        .into_iter()
        .filter_map(|p| {
            let parsed = fs::read_to_string(&p)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<Manifest>(&t).map_err(|e| e.to_string()));
            match parsed {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    eprintln!("warning: skipping {}: {e}", p.display());
                    None
                }
            }
        })
        .collect()
}

fn find(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            find(&p, out);
        } else if p.file_name().is_some_and(|n| n == MANIFEST) {
            out.push(p);
        }
    }
}

/// Mean, standard error and count per metric.
pub type Aggregate = BTreeMap<String, (f64, f64, usize)>;

pub fn aggregate(manifests: &[&Manifest]) -> Aggregate {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in manifests {
        for (k, v) in &m.metrics {
            by.entry(k.clone()).or_default().push(*v);
        }
    }
    by.into_iter()
        .map(|(k, vs)| {
            let (mean, se) = mean_se(&vs);
            (k, (mean, se, vs.len()))
        })
        .collect()
}

fn mean(agg: &Aggregate, key: &str) -> Option<f64> {
    agg.get(key).map(|v| v.0)
}

/// Metrics named `<prefix><value><suffix>`, sorted by the parsed value.
fn series(agg: &Aggregate, prefix: &str, suffix: &str) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = agg
        .iter()
        .filter_map(|(k, (m, _, _))| {
            let mid = k.strip_prefix(prefix)?.strip_suffix(suffix)?;
            Some((mid.parse::<f64>().ok()?, *m))
        })
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn relative_spread(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::MIN, f64::max);
    let min = vals.iter().copied().fold(f64::MAX, f64::min);
    let avg = vals.iter().sum::<f64>() / vals.len() as f64;
    (max - min) / avg.abs()
}

/// Threshold checks for experiments that carry one.
pub fn checks(experiment: &str, agg: &Aggregate) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    match experiment {
        "ntk-convergence" => {
            let sup = series(agg, "sup_dev_w", "");
            if sup.len() > 1 {
                out.push(("sup deviation decreases with width".into(), sup.windows(2).all(|w| w[1].1 < w[0].1)));
            }
            if let Some(r) = mean(agg, "rel_frob_w1000") {
                out.push(("relative Frobenius deviation at width 1000 < 10%".into(), r < 0.1));
            }
        }
        "lazy-noise" => {
            let mse = series(agg, "train_mse_sigma", "");
            if mse.len() > 1 {
                out.push(("train MSE increases with sigma".into(), mse.windows(2).all(|w| w[1].1 > w[0].1)));
            }
            let layers: Vec<String> = agg
                .keys()
                .filter_map(|k| k.strip_prefix("trace_l").and_then(|r| r.split_once('_')).map(|(l, _)| l.to_string()))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for l in layers {
                let t = series(agg, &format!("trace_l{l}_sigma"), "");
                if t.len() > 1 {
                    let vals: Vec<f64> = t.iter().map(|p| p.1).collect();
                    out.push((format!("layer {l} trace varies < 5% across sigma"), relative_spread(&vals) < 0.05));
                }
            }
        }
        "sgd-batch" => {
            if let (Some(a), Some(b)) = (mean(agg, "test_mse_batch1"), mean(agg, "test_mse_batchfull")) {
                out.push(("test MSE lower with batch 1".into(), a < b));
            }
            for (k, _) in agg.iter().filter(|(k, _)| k.starts_with("trace_l") && k.ends_with("_batch1")) {
                let full = k.replace("_batch1", "_batchfull");
                if let (Some(a), Some(b)) = (mean(agg, k), mean(agg, &full)) {
                    let layer = k.trim_start_matches("trace_l").trim_end_matches("_batch1");
                    out.push((format!("layer {layer} trace lower with batch 1"), a < b));
                }
            }
        }
        "moments" => {
            let worst = agg
                .iter()
                .filter(|(k, _)| k.starts_with("z_"))
                .map(|(_, v)| v.0)
                .fold(0.0f64, f64::max);
            out.push(("expansion within 3 error bars of simulation".into(), worst < 3.0));
        }
        "lin-dynamics" => {
            if let Some(g) = mean(agg, "output_gap_rel") {
                out.push(("network within 5% of its linearisation".into(), g < 0.05));
            }
        }
        "taylor-divergence" => {
            for (k, v) in agg.iter().filter(|(k, _)| k.starts_with("div1_max_w200_")) {
                let stem = k.trim_start_matches("div1_max_");
                if let Some(var) = mean(agg, &format!("output_var_{stem}")) {
                    out.push((format!("{stem}: first-order divergence < 1% of output variance"), v.0 < 0.01 * var));
                }
            }
        }
        _ => {}
    }
    out
}

/// Human-readable table of every configuration found below `dir`.
pub fn report(dir: &Path) -> String {
    let manifests = collect_manifests(dir);
    if manifests.is_empty() {
        return "no runs\n".into();
    }
    let mut groups: BTreeMap<(String, String), Vec<&Manifest>> = BTreeMap::new();
    for m in &manifests {
        groups.entry((m.experiment.clone(), m.config_hash.clone())).or_default().push(m);
    }
    let mut s = String::new();
    for ((exp, hash), ms) in groups {
        let agg = aggregate(&ms);
        s.push_str(&format!("{exp} {hash} ({} seeds)\n", ms.len()));
        let width = agg.keys().map(String::len).max().unwrap_or(6).max(6);
        s.push_str(&format!("  {:<width$}  {:>14}  {:>12}  {:>4}\n", "metric", "mean", "std_error", "n"));
        for (k, (m, se, n)) in &agg {
            s.push_str(&format!("  {k:<width$}  {m:>14.6e}  {se:>12.4e}  {n:>4}\n"));
        }
        for (name, ok) in checks(&exp, &agg) {
            s.push_str(&format!("  [{}] {name}\n", if ok { "PASS" } else { "FAIL" }));
        }
    }
    s
}
