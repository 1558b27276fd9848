//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) before asserting, so `cargo test` output carries a
//! summary line per check even when everything passes.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use drf_cli::config::{RunConfig, Split};
use drf_cli::data::generate_split;
use drf_cli::eval::{evaluate_model, predict_metrics};
use drf_cli::train::{new_model, train_model};
use drf_core::grid::{init_delta, normalize, BinIndex, GridSpec, LogGrid, ProbGrid};
use drf_core::heads::{discretized_log_mass, flow_drf, Batch, Gaussian2, HeadKind, Model, Residual};
use drf_core::metrics::{modepool, Calibrator, MODEPOOL_EPS, MODEPOOL_K};
use drf_core::tensor::{gradcheck, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str, start: Instant) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {status} {name}: {detail} ({:.1} s)\n",
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Flow against exact Markov-chain marginals.

/// psi_t(x) = sum_x' P(x | x') p(x') / p(x), computed from the normalized
/// potential handed in by the flow.
struct RatioResidual {
    transition: Vec<Vec<f64>>,
}

impl Residual for RatioResidual {
    fn log_residual(&mut self, _t: usize, potential: &LogGrid) -> drf_core::Result<Vec<f64>> {
        let v = potential.values();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
        let p: Vec<f64> = v.iter().map(|x| (x - m).exp() / z).collect();
        let k = p.len();
        Ok((0..k)
            .map(|x| {
                let next: f64 = (0..k).map(|from| self.transition[from][x] * p[from]).sum();
                (next / p[x]).ln()
            })
            .collect())
    }
}

fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn flow_reproduces_markov_chain_marginals() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut chains = 0;
    for k in [2usize, 3, 7, 16, 30, 48, 64] {
        for _ in 0..6 {
            let spec = GridSpec::axis_aligned(1, k, 1.0).unwrap();
            let transition = random_stochastic(&mut rng, k);
            let p0: Vec<f64> = {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let init = LogGrid::new(spec, p0.iter().map(|v| v.ln()).collect()).unwrap();
            let potentials = flow_drf(&init, 20, &mut RatioResidual { transition: transition.clone() }).unwrap();
            // Exact marginals by repeated vector-matrix products.
            let mut p = p0.clone();
            for lg in &potentials {
                p = (0..k).map(|x| (0..k).map(|f| p[f] * transition[f][x]).sum()).collect();
                let got = normalize(lg).unwrap();
                worst = worst.max(max_abs(got.mass(), &p));
            }
            chains += 1;
        }
    }
    let pass = worst <= 1e-9 && start.elapsed().as_secs_f64() < 5.0;
    report(
        "flow vs exact chain marginals",
        pass,
        &format!("{chains} chains, K <= 64, 20 steps, max abs err {worst:.2e} (tol 1e-9)"),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Every head yields normalized, finite marginals on random inputs.

fn perturb_zero_params<T: Scalar>(model: &mut Model<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let t = model.store.value_mut(id);
        if t.data().iter().all(|v| v.as_f64() == 0.0) {
            for v in t.data_mut() {
                *v = T::from_f64(rng.random_range(-0.1..0.1));
            }
        }
    }
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &RunConfig, n: usize, horizon: usize) -> Batch<f32> {
    let f = &cfg.frame;
    let c = cfg.in_channels();
    let (orows, ocols) = (f.rows / f.output_ratio, f.cols / f.output_ratio);
    let bin = f.pixel_size * f.output_ratio as f64;
    let raster: Vec<f64> = (0..n * c * f.rows * f.cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut init = Vec::new();
    let mut outputs = Vec::new();
    let mut anchors = Vec::new();
    for _ in 0..n {
        let heading = rng.random_range(-3.0..3.0);
        let origin = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let spec = GridSpec::new(orows, ocols, bin, origin, heading).unwrap();
        let poi = BinIndex::new(rng.random_range(0..orows), rng.random_range(0..ocols));
        init.extend(init_delta(spec, poi, 1e-3).unwrap().values().to_vec());
        outputs.push(spec);
        anchors.push(spec.local_center(poi));
    }
    Batch {
        raster: Tensor::from_f64(&[n, c, f.rows, f.cols], &raster).unwrap(),
        init: Tensor::from_f64(&[n, 1, orows, ocols], &init).unwrap(),
        targets: vec![None; n * horizon],
        offsets: vec![[0.0, 0.0]; n * horizon],
        outputs,
        anchors,
    }
}

#[test]
fn every_head_outputs_normalized_marginals() {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let horizon = cfg.model.head.horizon;
    let (inputs, batch_size) = (200, 8);
    let mut worst = 0.0f64;
    let mut non_finite = 0;
    let mut checked = 0;
    for (i, kind) in HeadKind::ALL.into_iter().enumerate() {
        let mut mc = cfg.model.clone();
        mc.head.kind = kind;
        let mut model = Model::<f32>::new(&mc, cfg.in_channels(), i as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        perturb_zero_params(&mut model, &mut rng);
        for _ in 0..inputs / batch_size {
            let batch = random_batch(&mut rng, &cfg, batch_size, horizon);
            for pred in model.predict(&batch).unwrap() {
                assert_eq!(pred.marginals.len(), horizon);
                for lg in &pred.marginals {
                    if lg.values().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                        non_finite += 1;
                    }
                    let s: f64 = lg.values().iter().map(|v| v.exp()).sum();
                    worst = worst.max((s - 1.0).abs());
                    checked += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-6 && non_finite == 0 && start.elapsed().as_secs_f64() < 60.0;
    report(
        "normalization of every head",
        pass,
        &format!(
            "{} heads x {inputs} inputs, {checked} marginals, max |sum - 1| {worst:.2e} (tol 1e-6), {non_finite} non-finite",
            HeadKind::ALL.len()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks in both precisions.

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let single = gradcheck::suite::<f32>(1e-3, 3).unwrap();
    let double = gradcheck::suite::<f64>(1e-5, 3).unwrap();
    let worst = |r: &[gradcheck::GradCheck]| {
        r.iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|g| (g.op, g.max_rel_err))
            .unwrap()
    };
    let (op32, e32) = worst(&single);
    let (op64, e64) = worst(&double);
    let pass = e32 <= 1e-3 && e64 <= 1e-6 && start.elapsed().as_secs_f64() < 120.0;
    report(
        "gradient checks",
        pass,
        &format!(
            "{} ops; f32 worst {e32:.2e} ({op32}, tol 1e-3); f64 worst {e64:.2e} ({op64}, tol 1e-6)",
            single.len()
        ),
        start,
    );
    for r in single.iter().chain(&double) {
        assert!(r.elements > 0, "{} checked nothing", r.op);
    }
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Mode counting against a max-pool formulation.

/// Modes as bins equal to their k x k max-pool (edge windows truncated)
/// with at least `eps` mass, via separable row then column maxima.
fn maxpool_modes(p: &ProbGrid, k: usize, eps: f64) -> usize {
    let (rows, cols) = (p.spec().rows, p.spec().cols);
    let m = p.mass();
    let r = k as isize / 2;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut horiz = vec![0.0; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            horiz[y * cols + x] = (-r..=r)
                .map(|d| m[y * cols + clamp(x as isize + d, cols)])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut count = 0;
    for y in 0..rows {
        for x in 0..cols {
            let pooled = (-r..=r)
                .map(|d| horiz[clamp(y as isize + d, rows) * cols + x])
                .fold(f64::NEG_INFINITY, f64::max);
            let v = m[y * cols + x];
            if v == pooled && v >= eps {
                count += 1;
            }
        }
    }
    count
}

fn prob(spec: GridSpec, raw: Vec<f64>) -> ProbGrid {
    let s: f64 = raw.iter().sum();
    ProbGrid::new(spec, raw.into_iter().map(|v| v / s).collect()).unwrap()
}

#[test]
fn mode_count_matches_maxpool_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut disagreements = 0;
    for i in 0..1000 {
        let spec = GridSpec::axis_aligned(rng.random_range(1..20), rng.random_range(1..20), 1.0).unwrap();
        // Sparse peaks plus quantized values so plateaus and ties occur.
        let raw: Vec<f64> = (0..spec.len())
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    rng.random_range(1..8) as f64 * 4.0
                } else {
                    rng.random_range(0..3) as f64 * 0.25
                }
            })
            .map(|v| if v == 0.0 && i % 2 == 0 { 0.01 } else { v })
            .collect();
        if raw.iter().all(|v| *v == 0.0) {
            continue;
        }
        let p = prob(spec, raw);
        for (k, eps) in [(MODEPOOL_K, MODEPOOL_EPS), (3, 0.0), (7, 0.02)] {
            if modepool(&p, k, eps).unwrap() != maxpool_modes(&p, k, eps) {
                disagreements += 1;
            }
        }
    }
    let spec = GridSpec::axis_aligned(20, 20, 1.0).unwrap();
    let mut delta = vec![0.0; 400];
    delta[7 * 20 + 3] = 1.0;
    let uniform = vec![1.0; 400];
    let mut blobs = vec![0.0; 400];
    for (cy, cx) in [(4.0, 4.0), (14.0, 15.0)] {
        for y in 0..20 {
            for x in 0..20 {
                let d2: f64 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                blobs[y * 20 + x] += (-d2 / 0.5).exp();
            }
        }
    }
    let constructed = [
        ("delta", modepool(&prob(spec, delta), MODEPOOL_K, MODEPOOL_EPS).unwrap(), 1),
        ("uniform", modepool(&prob(spec, uniform), MODEPOOL_K, MODEPOOL_EPS).unwrap(), 0),
        ("two blobs", modepool(&prob(spec, blobs), MODEPOOL_K, MODEPOOL_EPS).unwrap(), 2),
    ];
    let wrong: Vec<String> = constructed
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    let pass = disagreements == 0 && wrong.is_empty() && start.elapsed().as_secs_f64() < 30.0;
    report(
        "mode count oracle",
        pass,
        &format!(
            "1000 random grids x 3 (k, eps) settings, {disagreements} disagreements; delta/uniform/two-blob {}",
            if wrong.is_empty() { "ok".to_string() } else { wrong.join(", ") }
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Discretized mixture mass against fine quadrature.

/// Mass per bin by an `n x n` midpoint rule of the correlated Gaussian.
fn quadrature_mass(g: &Gaussian2, spec: &GridSpec, n: usize) -> Vec<f64> {
    let h = spec.bin_size / n as f64;
    let (sx, sy, rho) = (g.sigma[0], g.sigma[1], g.rho);
    let det = 1.0 - rho * rho;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sx * sy * det.sqrt());
    (0..spec.len())
        .map(|i| {
            let b = spec.unflat(i);
            let (x0, y0) = (b.col as f64 * spec.bin_size, b.row as f64 * spec.bin_size);
            let mut s = 0.0;
            for a in 0..n {
                for c in 0..n {
                    let dx = (x0 + (c as f64 + 0.5) * h - g.mean[0]) / sx;
                    let dy = (y0 + (a as f64 + 0.5) * h - g.mean[1]) / sy;
                    s += (-(dx * dx - 2.0 * rho * dx * dy + dy * dy) / (2.0 * det)).exp();
                }
            }
            s * norm * h * h
        })
        .collect()
}

#[test]
fn mixture_discretization_conserves_mass() {
    let start = Instant::now();
    let spec = GridSpec::axis_aligned(32, 24, 2.0).unwrap();
    let cases = [
        Gaussian2 { mean: [24.0, 30.0], sigma: [5.0, 5.0], rho: 0.0, weight: 1.0 },
        Gaussian2 { mean: [20.0, 34.0], sigma: [4.0, 6.0], rho: 0.5, weight: 1.0 },
        Gaussian2 { mean: [25.0, 28.0], sigma: [3.0, 4.0], rho: -0.7, weight: 1.0 },
    ];
    let mut lines = Vec::new();
    let mut pass = true;
    for g in &cases {
        let mass: f64 = discretized_log_mass(&[*g], &spec).iter().map(|v| v.exp()).sum();
        let quad: f64 = quadrature_mass(g, &spec, 40).iter().sum();
        let ok = (0.999..=1.001).contains(&mass) && (mass - quad).abs() <= 1e-3;
        pass &= ok;
        lines.push(format!("{mass:.6} vs quadrature {quad:.6}"));
    }
    pass &= start.elapsed().as_secs_f64() < 10.0;
    report(
        "mixture discretization mass",
        pass,
        &format!("in-grid Gaussians, mass in [0.999, 1.001]: {}", lines.join("; ")),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Calibration error of a self-consistent and an overconfident predictor.

#[test]
fn calibration_error_extremes() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut consistent = Calibrator::new(15);
    for _ in 0..100_000 {
        let c: f64 = rng.random();
        consistent.add_event(c, rng.random::<f64>() < c);
    }
    let consistent = consistent.finish();
    let spec = GridSpec::axis_aligned(4, 4, 1.0).unwrap();
    let mut delta = vec![0.0; 16];
    delta[5] = 1.0;
    let p = ProbGrid::new(spec, delta).unwrap();
    let mut over = Calibrator::new(15);
    for i in 0..1000 {
        over.add(&p, if i % 2 == 0 { BinIndex::new(1, 1) } else { BinIndex::new(3, 0) });
    }
    let over = over.finish();
    let pass = consistent.ece < 0.01 && (over.ece - 0.5).abs() <= 1e-6;
    report(
        "calibration error",
        pass,
        &format!(
            "self-consistent ECE {:.4} over {} events (< 0.01); overconfident ECE {:.9} (0.5 +- 1e-6)",
            consistent.ece, consistent.events, over.ece
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// The evaluation pipeline scores a uniform predictor at ln K.

fn small_data_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dir = dir.to_path_buf();
    cfg.data.train = 6;
    cfg.data.val = 3;
    cfg.data.test = 12;
    cfg.train.out = dir.join("run");
    cfg
}

#[test]
fn uniform_predictor_scores_log_k() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data_config(dir.path());
    cfg.model.head.kind = HeadKind::FullyConv;
    let test = generate_split(&cfg, Split::Test).unwrap();
    // The fully-convolutional readout starts at zero: every bin has equal logit.
    let model = new_model(&cfg).unwrap();
    let report_ = evaluate_model(&model, &cfg, &test, "uniform").unwrap();
    let k = (cfg.frame.rows / cfg.frame.output_ratio) * (cfg.frame.cols / cfg.frame.output_ratio);
    let ln_k = (k as f64).ln();
    let worst = report_.rows.iter().map(|r| (r.nll - ln_k).abs()).fold(0.0, f64::max);
    let per_sample = predict_metrics(&model, &cfg, &test).unwrap().len();
    let pass = worst <= 1e-9 && report_.rows.len() == cfg.model.head.horizon && per_sample == test.len();
    report(
        "uniform predictor NLL",
        pass,
        &format!(
            "{} horizons, ln K = {ln_k:.9} (K = {k}), max deviation {worst:.2e}",
            report_.rows.len()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Ablation ordering of the grid heads.

/// Scenarios per split and epochs for the ablation. Far smaller than the
/// default dataset so the check fits in a test run.
const ABLATION_TRAIN: usize = 400;
const ABLATION_VAL: usize = 100;
const ABLATION_TEST: usize = 300;
const ABLATION_EPOCHS: usize = 5;

fn ablation_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dir = dir.to_path_buf();
    cfg.data.train = ABLATION_TRAIN;
    cfg.data.val = ABLATION_VAL;
    cfg.data.test = ABLATION_TEST;
    cfg.train.epochs = ABLATION_EPOCHS;
    cfg
}

#[test]
fn flow_head_beats_regression_and_independent_heads() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = ablation_config(dir.path());
    let train = generate_split(&base, Split::Train).unwrap();
    let val = generate_split(&base, Split::Val).unwrap();
    let test = generate_split(&base, Split::Test).unwrap();
    let mut ordered = 0;
    let mut lines = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..3u64 {
        let mut nll = Vec::new();
        for kind in [HeadKind::Drf, HeadKind::Drr, HeadKind::FullyConv] {
            let run = Instant::now();
            let mut cfg = base.clone();
            cfg.model.head.kind = kind;
            cfg.train.seed = seed;
            let outcome = train_model(&cfg, &train, &val, None).unwrap();
            let r = evaluate_model(&outcome.model, &cfg, &test, kind.name()).unwrap();
            slowest = slowest.max(run.elapsed().as_secs_f64());
            nll.push(r.mean.nll);
        }
        let ok = nll[0] <= nll[1] && nll[1] <= nll[2];
        ordered += ok as usize;
        lines.push(format!(
            "seed {seed}: drf {:.4} drr {:.4} fc {:.4} {}",
            nll[0],
            nll[1],
            nll[2],
            if ok { "ordered" } else { "not ordered" }
        ));
    }
    let pass = ordered >= 2;
    report(
        "ablation ordering drf <= drr <= fully-conv",
        pass,
        &format!(
            "{ordered}/3 seeds ordered; {}; {ABLATION_TRAIN} train scenarios, {ABLATION_EPOCHS} epochs, slowest run {slowest:.0} s",
            lines.join("; ")
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Mode count grows with the horizon on crossing scenarios.

/// Crossing scenarios at 1 m bins over 4 s. At 3 s the crossing and
/// continuing branches are only 2 to 3 bins apart, inside one 5x5 window.
fn crossing_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dir = dir.to_path_buf();
    cfg.data.train = 400;
    cfg.data.val = 100;
    cfg.data.test = 200;
    cfg.data.scenario.cross_prob = 0.5;
    cfg.data.scenario.future_frames = 20;
    cfg.model.head.horizon = 20;
    cfg.model.head.kind = HeadKind::Drf;
    cfg.frame.pixel_size = 0.25;
    cfg
}

#[test]
fn flow_head_multimodality_grows_with_horizon() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = crossing_config(dir.path());
    cfg.validate().unwrap();
    let train = generate_split(&cfg, Split::Train).unwrap();
    let val = generate_split(&cfg, Split::Val).unwrap();
    let test = generate_split(&cfg, Split::Test).unwrap();
    let outcome = train_model(&cfg, &train, &val, None).unwrap();
    let r = evaluate_model(&outcome.model, &cfg, &test, "drf").unwrap();
    let first = r.rows.first().unwrap().modes;
    let last = r.rows.last().unwrap().modes;
    let pass = last >= 1.5 * first && first > 0.0;
    report(
        "multimodality growth",
        pass,
        &format!(
            "mean modes {first:.3} at {:.1} s, {last:.3} at {:.1} s, ratio {:.2} (>= 1.5)",
            r.rows.first().unwrap().seconds,
            r.rows.last().unwrap().seconds,
            last / first
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Byte-identical artifacts from repeated CLI runs.

fn drf(dir: &Path, threads: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_drf"))
        .current_dir(dir)
        .env("DRF_THREADS", threads.to_string())
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "drf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(dir: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let sets = [
        "--set", "data.train=8", "--set", "data.val=4", "--set", "data.test=6",
        "--set", "train.epochs=2", "--set", "model.head.kind=\"drf\"",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(sets.iter()).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        drf(dir, threads, &refs);
    };
    run(with(&["gen"]));
    run(with(&["train", "--out", "run"]));
    run(with(&["eval", "--set", "train.out=\"run\""]));
    run(with(&["eval", "--set", "train.out=\"run\"", "--split", "test_noisy"]));
    let seed = std::fs::read_to_string(dir.join("data/test.jsonl"))
        .unwrap()
        .lines()
        .nth(1)
        .and_then(serde_json_seed)
        .expect("test split has a scenario");
    run(with(&[
        "render", "--set", "train.out=\"run\"", "--scenario", &seed, "--heatmaps", "--png", "--out", "render",
    ]));
    let mut files = Vec::new();
    collect(dir, dir, &mut files);
    files.sort();
    files
}

fn serde_json_seed(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("seed").map(|s| s.to_string())
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), 1);
    let second = pipeline(b.path(), 3);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty() && names.iter().any(|n| n.ends_with(".png"));
    report(
        "determinism of gen/train/eval/render",
        pass,
        &format!(
            "{} artifacts compared across runs with 1 and 3 threads, {} differ{}",
            first.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
        start,
    );
    assert!(pass);
}
