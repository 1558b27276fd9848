//! Per-step cost of the flow grows linearly with the number of bins.

use std::time::Instant;

use drf_core::grid::{init_delta, BinIndex, GridSpec};
use drf_core::heads::{Batch, HeadConfig, HeadKind, Model, ModelConfig, Residual};
use drf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 40;

/// Median seconds per residual step on an output grid of `rows x 48` bins.
fn step_time(rows: usize) -> f64 {
    let config = ModelConfig {
        head: HeadConfig {
            kind: HeadKind::Drf,
            horizon: 2,
            ..HeadConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(&config, CHANNELS, 0).unwrap();
    let (h, w) = (rows * 4, 48 * 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raster: Vec<f64> = (0..CHANNELS * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = GridSpec::axis_aligned(rows, 48, 2.0).unwrap();
    let init = init_delta(spec, BinIndex::new(rows / 3, 24), 1e-3).unwrap();
    let batch = Batch {
        raster: Tensor::from_f64(&[1, CHANNELS, h, w], &raster).unwrap(),
        init: Tensor::from_f64(&[1, 1, rows, 48], init.values()).unwrap(),
        targets: vec![None; 2],
        offsets: vec![[0.0; 2]; 2],
        outputs: vec![spec],
        anchors: vec![[0.0; 2]],
    };
    let mut residual = model.residual_adapter(&batch, 0).unwrap();
    residual.log_residual(1, &init).unwrap();
    let mut times: Vec<f64> = (0..9)
        .map(|_| {
            let start = Instant::now();
            residual.log_residual(1, &init).unwrap();
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[test]
fn doubling_bins_doubles_step_time() {
    let small = step_time(48);
    let large = step_time(96);
    let ratio = large / small;
    assert!(
        (1.4..=2.6).contains(&ratio),
        "step time {small:.4} s -> {large:.4} s, ratio {ratio:.2}"
    );
}
