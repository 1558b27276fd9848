//! Checkpoint loading and the evaluation report.

use std::path::{Path, PathBuf};

use drf_core::heads::Model;
use drf_core::metrics::{sample_metrics, EvalReport, Evaluator, SampleMetrics};
use drf_core::raster::Sample;
use drf_core::scenario::{Scenario, FRAME_DT};
use drf_core::tensor::Checkpoint;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{build_samples, load_split};
use crate::error::CliError;
use crate::train::{expected_meta, new_model};

/// Builds the configured model and loads `path` into it, naming every
/// architecture field that disagrees.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model<f32>, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut model = new_model(cfg)?;
    let mismatches = ckpt.meta_mismatches(&expected_meta(cfg, &model));
    if !mismatches.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not match the config: {}",
            path.display(),
            mismatches.join("; ")
        )));
    }
    ckpt.load_into(&mut model.store).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(model)
}

pub fn predict_metrics(
    model: &Model<f32>,
    cfg: &RunConfig,
    scenarios: &[Scenario],
) -> Result<Vec<SampleMetrics>, CliError> {
    let horizon = model.horizon();
    let chunks: Vec<Vec<SampleMetrics>> = scenarios
        .par_chunks(cfg.eval.batch_size)
        .map(|chunk| -> Result<Vec<SampleMetrics>, CliError> {
            let refs: Vec<&Scenario> = chunk.iter().collect();
            let samples = build_samples(&refs, &cfg.frame)?;
            let sample_refs: Vec<&Sample> = samples.iter().collect();
            let batch = drf_core::heads::Batch::from_samples(&sample_refs, horizon, model.config.head.leak)?;
            let preds = model.predict(&batch)?;
            samples
                .iter()
                .zip(&preds)
                .zip(chunk)
                .map(|((s, p), scn)| Ok(sample_metrics(&p.marginals, s, &scn.map)?))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_model(
    model: &Model<f32>,
    cfg: &RunConfig,
    scenarios: &[Scenario],
    name: &str,
) -> Result<EvalReport, CliError> {
    let mut ev = Evaluator::new(model.horizon(), FRAME_DT);
    for m in predict_metrics(model, cfg, scenarios)? {
        ev.add(&m)?;
    }
    Ok(ev.finish(name, model.kind().components().is_some()))
}

/// `drf eval`: writes the report CSV (and a calibration curve beside it).
pub fn run_eval(cfg: &RunConfig, out: Option<&Path>) -> Result<(EvalReport, PathBuf), CliError> {
    let model = load_model(cfg, &cfg.checkpoint_path())?;
    let split = cfg.eval.split;
    let scenarios = load_split(cfg, split, cfg.eval.limit)?;
    let name = format!("{}-{}", model.kind(), split.name());
    let report = evaluate_model(&model, cfg, &scenarios, &name)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.train.out.join(format!("eval_{}.csv", split.name())));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, report.to_csv())?;
    std::fs::write(path.with_extension("calibration.csv"), report.calibration_csv())?;
    Ok((report, path))
}
