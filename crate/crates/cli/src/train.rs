//! Mini-batch training with best-validation checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use drf_core::heads::{Batch, Model};
use drf_core::raster::Sample;
use drf_core::scenario::Scenario;
use drf_core::tensor::{Adam, AdamConfig, Checkpoint, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Split};
use crate::data::{build_samples, load_split};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_nll: f64,
    /// Grid NLL on the validation split.
    pub val_nll: f64,
    /// Mixture losses discarded by the clip threshold.
    pub clipped: usize,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model<f32>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Tab-separated log, free of timing data.
    pub log: String,
    pub log_hash: String,
}

pub fn new_model(cfg: &RunConfig) -> Result<Model<f32>, CliError> {
    Ok(Model::new(&cfg.model, cfg.in_channels(), cfg.train.seed)?)
}

/// Checkpoint metadata that must match between training and evaluation.
pub fn expected_meta(cfg: &RunConfig, model: &Model<f32>) -> BTreeMap<String, String> {
    let mut meta = model.signature();
    let f = &cfg.frame;
    meta.insert(
        "frame".into(),
        format!("{}x{} px {} m ratio {}", f.rows, f.cols, f.pixel_size, f.output_ratio),
    );
    meta.insert("past_frames".into(), cfg.data.scenario.past_frames.to_string());
    meta
}

fn batches<'a>(scenarios: &'a [Scenario], order: &[usize], size: usize) -> Vec<Vec<&'a Scenario>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| &scenarios[i]).collect())
        .collect()
}

fn make_batch(samples: &[Sample], leak: f64, horizon: usize) -> Result<Batch<f32>, CliError> {
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(Batch::from_samples(&refs, horizon, leak)?)
}

/// Mean grid NLL over on-grid (sample, step) pairs; mixture heads are scored
/// on their discretized marginals.
pub fn grid_nll(model: &Model<f32>, cfg: &RunConfig, scenarios: &[Scenario]) -> Result<f64, CliError> {
    let horizon = model.horizon();
    let chunks: Vec<(f64, usize)> = scenarios
        .par_chunks(cfg.eval.batch_size)
        .map(|chunk| -> Result<(f64, usize), CliError> {
            let refs: Vec<&Scenario> = chunk.iter().collect();
            let samples = build_samples(&refs, &cfg.frame)?;
            let batch = make_batch(&samples, model.config.head.leak, horizon)?;
            let preds = model.predict(&batch)?;
            let (mut total, mut used) = (0.0, 0);
            for (s, p) in samples.iter().zip(&preds) {
                for (t, lg) in p.marginals.iter().enumerate() {
                    if let Some(b) = s.target(t) {
                        total += lg.logsumexp() - lg.get(b);
                        used += 1;
                    }
                }
            }
            Ok((total, used))
        })
        .collect::<Result<_, _>>()?;
    let (total, used) = chunks.iter().fold((0.0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    Ok(if used == 0 { f64::NAN } else { total / used as f64 })
}

fn dump_batch(out: Option<&Path>, epoch: usize, step: usize, batch: &[&Scenario], loss: f64) -> String {
    let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
    let text = format!("{{\"epoch\": {epoch}, \"step\": {step}, \"loss\": \"{loss}\", \"scenario_seeds\": {seeds:?}}}\n");
    if let Some(dir) = out {
        let path = dir.join("nan_batch.json");
        if std::fs::write(&path, &text).is_ok() {
            return format!("batch dumped to {}", path.display());
        }
    }
    text
}

/// Trains from `cfg.train`; writes `best.ckpt`, `last.ckpt` and
/// `train_log.tsv` under `out` when given.
pub fn train_model(
    cfg: &RunConfig,
    train: &[Scenario],
    val: &[Scenario],
    out: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data("training and validation splits must be non-empty".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let tc = &cfg.train;
    let mut model = new_model(cfg)?;
    let meta = expected_meta(cfg, &model);
    let horizon = model.horizon();
    let leak = model.config.head.leak;
    let mut adam = Adam::new(AdamConfig {
        lr: tc.effective_lr(),
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = String::from("epoch\ttrain_nll\tval_nll\tclipped\n");
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut steps, mut clipped) = (0.0, 0usize, 0usize);
        for (step, chunk) in batches(train, &order, tc.batch_size).into_iter().enumerate() {
            let samples = build_samples(&chunk, &cfg.frame)?;
            let batch = make_batch(&samples, leak, horizon)?;
            let mut tape = Tape::new();
            let output = model.forward(&mut tape, &batch).map_err(|e| {
                CliError::Numerical(format!("{e}; {}", dump_batch(out, epoch, step, &chunk, f64::NAN)))
            })?;
            let (loss, stats) = model.loss(&mut tape, output, &batch)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(CliError::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}; {}",
                    dump_batch(out, epoch, step, &chunk, value)
                )));
            }
            clipped += stats.clipped;
            if stats.used == 0 {
                continue;
            }
            tape.backward(loss)?;
            let grads = model.store.gradients(&tape);
            adam.step(&mut model.store, &grads)?;
            loss_sum += value;
            steps += 1;
        }
        let train_nll = if steps == 0 { f64::NAN } else { loss_sum / steps as f64 };
        let val_nll = grid_nll(&model, cfg, val)?;
        let _ = writeln!(log, "{epoch}\t{train_nll:.6}\t{val_nll:.6}\t{clipped}");
        epochs.push(EpochLog {
            epoch,
            train_nll,
            val_nll,
            clipped,
        });
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_nll < *b);
        if improved {
            if let Some(dir) = out {
                checkpoint(&model, &meta, epoch, val_nll).save(&dir.join("best.ckpt"))?;
            }
            best = Some((epoch, val_nll, model.clone()));
        }
    }
    if let Some(dir) = out {
        checkpoint(&model, &meta, tc.epochs, f64::NAN).save(&dir.join("last.ckpt"))?;
        std::fs::write(dir.join("train_log.tsv"), &log)?;
    }
    let log_hash = hex(&Sha256::digest(log.as_bytes()));
    let (best_epoch, best_val, model) = match best {
        Some(b) => b,
        None => {
            if let Some(dir) = out {
                checkpoint(&model, &meta, 0, f64::NAN).save(&dir.join("best.ckpt"))?;
            }
            (0, f64::NAN, model)
        }
    };
    Ok(TrainOutcome {
        model,
        epochs,
        best_epoch,
        best_val,
        log,
        log_hash,
    })
}

fn checkpoint(model: &Model<f32>, meta: &BTreeMap<String, String>, epoch: usize, val: f64) -> Checkpoint {
    let mut meta = meta.clone();
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("val_nll".into(), format!("{val:.6}"));
    Checkpoint::from_store(&model.store, meta)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `drf train`: loads splits, trains, and records the resolved config.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let train = load_split(cfg, Split::Train, cfg.train.limit)?;
    let val = load_split(cfg, Split::Val, cfg.train.val_limit)?;
    let out = &cfg.train.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    train_model(cfg, &train, &val, Some(out))
}
