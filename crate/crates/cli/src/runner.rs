//! Executes experiments and lays out their artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use lazydyn::datasets::Standardizer;
use lazydyn::experiments::{self, ExperimentConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_hash, to_toml};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Written last in every run directory; its presence marks a complete run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub noise_rule: String,
    pub config: ExperimentConfig,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<FileEntry>,
    pub dropped_rows: usize,
    pub standardizer: Option<Standardizer>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifests: Vec<Manifest>,
}

/// Mean and standard error; the error is 0 for a single value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_one(cfg: &ExperimentConfig, hash: &str, dir: &Path, seed: u64) -> anyhow::Result<Manifest> {
    let seed_dir = dir.join(seed.to_string());
    fs::create_dir_all(&seed_dir)?;
    let stale = seed_dir.join(MANIFEST);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    let start = Instant::now();
    let out = experiments::run_seed(cfg, seed).with_context(|| format!("{} seed {seed}", cfg.experiment))?;
    let mut files = Vec::new();
    for a in &out.artifacts {
        write_file(&seed_dir.join(&a.name), a.contents.as_bytes())?;
        files.push(FileEntry {
            name: a.name.clone(),
            sha256: hex::encode(Sha256::digest(a.contents.as_bytes())),
            bytes: a.contents.len(),
        });
    }
    let manifest = Manifest {
        experiment: cfg.experiment.name().to_string(),
        config_hash: hash.to_string(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        noise_rule: experiments::NOISE_RULE.to_string(),
        config: cfg.clone(),
        metrics: out.metrics,
        files,
        dropped_rows: out.dropped_rows,
        standardizer: out.standardizer,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_file(&stale, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    log::info!("{} seed {seed} done in {:.1}s", cfg.experiment, manifest.wall_time_s);
    Ok(manifest)
}

/// `metric,mean,std_error,n` over the given manifests.
pub fn summary_csv(manifests: &[Manifest]) -> String {
    let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in manifests {
        for (k, v) in &m.metrics {
            by_metric.entry(k).or_default().push(*v);
        }
    }
    let mut s = String::from("metric,mean,std_error,n\n");
    for (k, vs) in by_metric {
        let (mean, se) = mean_se(&vs);
        s.push_str(&format!("{k},{mean:.16e},{se:.16e},{}\n", vs.len()));
    }
    s
}

/// Runs every seed into `<out>/<experiment>/<hash>/<seed>/`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let hash = config_hash(&cfg);
    let dir = opts.out.join(cfg.experiment.name()).join(&hash);
    fs::create_dir_all(&dir)?;
    let mut resolved = cfg.clone();
    resolved.seeds.clear();
    write_file(&dir.join("config.toml"), to_toml(&resolved)?.as_bytes())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build()?;
    let manifests = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_one(&cfg, &hash, &dir, s))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let all = crate::report::collect_manifests(&dir);
    write_file(&dir.join("summary.csv"), summary_csv(&all).as_bytes())?;
    Ok(RunSummary { dir, manifests })
}
