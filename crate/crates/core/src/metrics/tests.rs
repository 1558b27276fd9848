use super::*;
use crate::grid::init_delta;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compares every bin against every other bin within Chebyshev radius `k / 2`.
fn modepool_scan(p: &ProbGrid, k: usize, eps: f64) -> usize {
    let spec = p.spec();
    let r = (k / 2) as i64;
    let mut count = 0;
    for i in 0..spec.len() {
        let a = spec.unflat(i);
        if p.mass()[i] < eps {
            continue;
        }
        let mut dominated = false;
        for j in 0..spec.len() {
            let b = spec.unflat(j);
            let near = (a.row as i64 - b.row as i64).abs() <= r && (a.col as i64 - b.col as i64).abs() <= r;
            if near && p.mass()[j] > p.mass()[i] {
                dominated = true;
            }
        }
        count += !dominated as usize;
    }
    count
}

fn grid(rows: usize, cols: usize, mass: Vec<f64>) -> ProbGrid {
    let total: f64 = mass.iter().sum();
    let spec = GridSpec::axis_aligned(rows, cols, 1.0).unwrap();
    ProbGrid::new(spec, mass.into_iter().map(|m| m / total).collect()).unwrap()
}

/// Two disjoint 3x3 blobs of mass 0.5 on a 32x32 grid.
fn two_blobs() -> ProbGrid {
    let mut m = vec![0.0; 32 * 32];
    for (cr, cc) in [(8usize, 8usize), (22, 24)] {
        for dr in 0..3 {
            for dc in 0..3 {
                let w = if dr == 1 && dc == 1 { 0.18 } else { 0.04 };
                m[(cr + dr - 1) * 32 + cc + dc - 1] = w;
            }
        }
    }
    grid(32, 32, m)
}

#[test]
fn modepool_constructed_cases() {
    let spec = GridSpec::axis_aligned(32, 24, 2.0).unwrap();
    let delta = normalize(&init_delta(spec, BinIndex::new(4, 7), 0.0).unwrap()).unwrap();
    assert_eq!(modepool(&delta, 5, 0.1).unwrap(), 1);
    let uniform = grid(32, 24, vec![1.0; 768]);
    assert_eq!(modepool(&uniform, 5, 0.1).unwrap(), 0);
    assert_eq!(modepool(&uniform, 5, 0.0).unwrap(), 768);
    assert_eq!(modepool(&two_blobs(), MODEPOOL_K, MODEPOOL_EPS).unwrap(), 2);
    assert!(modepool(&uniform, 4, 0.1).is_err());
}

#[test]
fn modepool_plateau_ties_all_count() {
    let mut m = vec![0.0; 25];
    m[12] = 0.5;
    m[13] = 0.5;
    let p = grid(5, 5, m);
    assert_eq!(modepool(&p, 5, 0.1).unwrap(), 2);
    assert_eq!(modepool_scan(&p, 5, 0.1), 2);
}

#[test]
fn modepool_matches_scan_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..14), rng.random_range(1..14));
        let levels = rng.random_range(2..6);
        let mass: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..levels) as f64 + 0.01).collect();
        let p = grid(rows, cols, mass);
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let eps = [0.0, 0.005, 0.02, 0.1][rng.random_range(0..4)];
        assert_eq!(modepool(&p, k, eps).unwrap(), modepool_scan(&p, k, eps));
    }
}

#[test]
fn displacement_examples() {
    let spec = GridSpec::axis_aligned(4, 4, 1.0).unwrap();
    let gt_bin = BinIndex::new(1, 1);
    let gt = spec.bin_center(gt_bin);
    let delta = normalize(&init_delta(spec, gt_bin, 0.0).unwrap()).unwrap();
    assert_eq!(expected_displacement(&delta, gt).unwrap(), 0.0);
    assert!(expected_displacement(&delta, [-0.5, 2.0]).is_none());
}

#[test]
fn displacement_half_and_half_is_two_meters() {
    let spec = GridSpec::axis_aligned(1, 5, 1.0).unwrap();
    let gt = spec.bin_center(BinIndex::new(0, 1));
    let p = ProbGrid::new(spec, vec![0.0, 0.0, 0.5, 0.0, 0.5]).unwrap();
    assert!((expected_displacement(&p, gt).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn displacement_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = GridSpec::new(12, 9, 0.7, [3.0, -4.0], 0.4).unwrap();
    let p = grid_with(spec, (0..108).map(|_| rng.random_range(0.0..1.0)).collect());
    let gt = spec.bin_center(BinIndex::new(5, 4));
    let gt = [gt[0] + 0.1, gt[1] - 0.2];
    let mut direct = 0.0;
    for r in 0..12 {
        for c in 0..9 {
            let b = BinIndex::new(r, c);
            let centre = spec.bin_center(b);
            direct += p.get(b) * ((centre[0] - gt[0]).powi(2) + (centre[1] - gt[1]).powi(2)).sqrt();
        }
    }
    assert!((expected_displacement(&p, gt).unwrap() - direct).abs() < 1e-9);
}

fn grid_with(spec: GridSpec, mass: Vec<f64>) -> ProbGrid {
    let total: f64 = mass.iter().sum();
    ProbGrid::new(spec, mass.into_iter().map(|m| m / total).collect()).unwrap()
}

proptest! {
    #[test]
    fn displacement_is_translation_equivariant(
        dx in -50.0f64..50.0, dy in -50.0f64..50.0, seed in 0u64..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mass: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = GridSpec::new(8, 6, 1.5, [1.0, 2.0], 0.3).unwrap();
        let b = GridSpec::new(8, 6, 1.5, [1.0 + dx, 2.0 + dy], 0.3).unwrap();
        let gt = a.bin_center(BinIndex::new(3, 2));
        let pa = grid_with(a, mass.clone());
        let pb = grid_with(b, mass);
        let da = expected_displacement(&pa, gt).unwrap();
        let db = expected_displacement(&pb, [gt[0] + dx, gt[1] + dy]).unwrap();
        prop_assert!((da - db).abs() <= 1e-9);
    }
}

#[test]
fn semantic_examples() {
    use SurfaceClass::*;
    let classes = vec![Road, Crosswalk, OffRoad, OffRoad];
    let spec = GridSpec::axis_aligned(2, 2, 1.0).unwrap();
    let all_correct = vec![
        ProbGrid::new(spec, vec![0.6, 0.4, 0.0, 0.0]).unwrap(),
        ProbGrid::new(spec, vec![0.0, 0.0, 0.3, 0.7]).unwrap(),
    ];
    let s = semantic_mass(
        &[ProbGrid::new(spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), ProbGrid::new(spec, vec![0.0, 0.0, 0.3, 0.7]).unwrap()],
        &classes,
        &[Road, OffRoad],
    )
    .unwrap();
    assert_eq!(s.accuracy(), 1.0);
    assert_eq!(s.recall(), Some(1.0));

    let s = semantic_mass(
        &[ProbGrid::new(spec, vec![0.8, 0.0, 0.2, 0.0]).unwrap(), ProbGrid::new(spec, vec![0.0, 0.6, 0.4, 0.0]).unwrap()],
        &classes,
        &[Road, Crosswalk],
    )
    .unwrap();
    assert!((s.accuracy() - 0.7).abs() < 1e-15);
    assert!((s.recall().unwrap() - 0.7).abs() < 1e-15);

    let s = semantic_mass(&all_correct, &classes, &[OffRoad, OffRoad]).unwrap();
    assert_eq!(s.recall(), None);
    assert!(s.correct.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn self_consistent_sampler_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = GridSpec::axis_aligned(4, 4, 1.0).unwrap();
    let mut cal = Calibrator::new(CALIBRATION_BUCKETS);
    for _ in 0..100_000 {
        let sharp = rng.random_range(0.0..4.0);
        let mass: Vec<f64> = (0..16).map(|_| (sharp * rng.random_range(-1.0f64..1.0)).exp()).collect();
        let p = grid_with(spec, mass);
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut gt = 15;
        for (i, m) in p.mass().iter().enumerate() {
            acc += m;
            if u < acc {
                gt = i;
                break;
            }
        }
        cal.add(&p, spec.unflat(gt));
    }
    let c = cal.finish();
    assert_eq!(c.events, 100_000);
    assert!(c.ece < 0.01, "{}", c.ece);
    assert!((c.weights().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn overconfident_predictor_has_half_ece() {
    let mut cal = Calibrator::new(CALIBRATION_BUCKETS);
    for i in 0..1000 {
        cal.add_event(1.0, i % 2 == 0);
    }
    let c = cal.finish();
    assert!((c.ece - 0.5).abs() < 1e-12);
    assert_eq!(c.buckets.len(), 1);
    assert!(Calibrator::new(15).finish().ece.is_nan());
}

#[test]
fn entropy_per_mode_examples() {
    let spec = GridSpec::axis_aligned(32, 24, 2.0).unwrap();
    let delta = normalize(&init_delta(spec, BinIndex::new(4, 7), 0.0).unwrap()).unwrap();
    assert_eq!(entropy_per_mode(&delta, 5, 0.1).unwrap(), Some(0.0));
    let uniform = grid(32, 24, vec![1.0; 768]);
    assert_eq!(entropy_per_mode(&uniform, 5, 0.1).unwrap(), None);

    let blobs = two_blobs();
    let direct = -2.0 * (0.18f64 * 0.18f64.ln() + 8.0 * 0.04 * 0.04f64.ln());
    let h_blob = -(0.36f64 * 0.36f64.ln() + 8.0 * 0.08 * 0.08f64.ln());
    assert!((direct - (h_blob + 2.0f64.ln())).abs() < 1e-12);
    let got = entropy_per_mode(&blobs, 5, 0.1).unwrap().unwrap();
    assert!((got - direct / 2.0).abs() < 1e-12);
}

#[test]
fn csv_has_one_row_per_horizon_and_mean() {
    let mut ev = Evaluator::new(3, 0.2);
    let m = SampleMetrics {
        steps: (0..3)
            .map(|t| StepMetrics {
                nll: (t != 1).then_some(1.0 + t as f64),
                displacement: Some(t as f64),
                modes: 1,
                entropy: 0.5,
                epm: Some(0.5),
                correct: 0.9,
                safety: None,
                top: Some((0.5, t == 0)),
            })
            .collect(),
    };
    ev.add(&m).unwrap();
    let r = ev.finish("toy", true);
    assert_eq!(r.off_grid, 1);
    assert!((r.mean.nll - 2.0).abs() < 1e-15);
    assert!((r.rows[2].ade - 1.0).abs() < 1e-15);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("schema,model,horizon"));
    assert!(lines[2].contains(",NaN,"));
    assert!(lines[4].starts_with("drf-eval/1,toy,mean,0.600,1,"));
    assert!(lines.iter().skip(1).all(|l| l.contains(",quantized,")));
    assert!(ev.add(&SampleMetrics { steps: vec![] }).is_err());
}
