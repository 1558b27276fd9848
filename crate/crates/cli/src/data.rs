//! Dataset splits on disk and sample construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drf_core::raster::{build_sample, FrameConfig, Sample};
use drf_core::scenario::{content_hash, generate_scenario, load_dataset, perturb_perception, save_dataset, Scenario};
use rayon::prelude::*;

use crate::config::{RunConfig, Split};
use crate::error::CliError;

/// Salt separating perception-noise streams from scenario seeds.
const NOISE_SALT: u64 = 0x6e6f_6973_6521;

/// Scenario seeds of a split: consecutive ranges after `data.seed << 32`.
pub fn split_seeds(cfg: &RunConfig, split: Split) -> std::ops::Range<u64> {
    let d = &cfg.data;
    let base = d.seed << 32;
    let (start, len) = match split {
        Split::Train => (0, d.train),
        Split::Val => (d.train, d.val),
        Split::Test | Split::TestNoisy => (d.train + d.val, d.test),
    };
    base + start as u64..base + (start + len) as u64
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<Scenario>, CliError> {
    let seeds: Vec<u64> = split_seeds(cfg, split).collect();
    let clean = seeds
        .par_iter()
        .map(|s| generate_scenario(*s, &cfg.data.scenario))
        .collect::<drf_core::Result<Vec<_>>>()?;
    Ok(match split {
        Split::TestNoisy => clean
            .par_iter()
            .map(|s| perturb_perception(s, s.seed ^ NOISE_SALT, cfg.data.noise))
            .collect(),
        _ => clean,
    })
}

/// Writes every split plus `manifest.json` with per-split content hashes.
pub fn generate(cfg: &RunConfig) -> Result<BTreeMap<String, String>, CliError> {
    let dir = &cfg.data.dir;
    std::fs::create_dir_all(dir)?;
    let mut manifest = BTreeMap::new();
    for split in Split::ALL {
        let scenarios = generate_split(cfg, split)?;
        save_dataset(&scenarios, &split_path(dir, split))?;
        manifest.insert(split.name().to_string(), content_hash(&scenarios));
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(manifest)
}

pub fn load_split(cfg: &RunConfig, split: Split, limit: Option<usize>) -> Result<Vec<Scenario>, CliError> {
    let path = split_path(&cfg.data.dir, split);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} does not exist; run `drf gen` first",
            path.display()
        )));
    }
    let mut scenarios = load_dataset(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if let Some(n) = limit {
        scenarios.truncate(n);
    }
    Ok(scenarios)
}

/// Rasterizes scenarios in parallel, preserving order.
pub fn build_samples(scenarios: &[&Scenario], frame: &FrameConfig) -> Result<Vec<Sample>, CliError> {
    scenarios
        .par_iter()
        .map(|s| build_sample(s, frame))
        .collect::<drf_core::Result<Vec<_>>>()
        .map_err(|e| CliError::Data(e.to_string()))
}
