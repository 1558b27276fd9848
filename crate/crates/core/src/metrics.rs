//! Evaluation metrics over predicted marginals and the CSV report.

use std::fmt::Write as _;

use crate::error::{DrfError, Result};
use crate::grid::{entropy, normalize, BinIndex, GridSpec, LogGrid, ProbGrid};
use crate::raster::Sample;
use crate::scenario::{SemanticMap, SurfaceClass};

pub const MODEPOOL_K: usize = 5;
pub const MODEPOOL_EPS: f64 = 0.1;
pub const CALIBRATION_BUCKETS: usize = 15;
pub const REPORT_SCHEMA: &str = "drf-eval/1";

/// Number of bins that hold at least `eps` mass and are a maximum (ties
/// included) of their `k x k` neighborhood, truncated at the grid edge.
pub fn modepool(p: &ProbGrid, k: usize, eps: f64) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(DrfError::invalid("modepool", format!("window {k} must be odd")));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(DrfError::invalid("modepool", format!("threshold {eps} is outside [0, 1]")));
    }
    let spec = p.spec();
    let (rows, cols) = (spec.rows, spec.cols);
    let m = p.mass();
    let r = k / 2;
    let mut count = 0;
    for row in 0..rows {
        for col in 0..cols {
            let v = m[row * cols + col];
            if v < eps {
                continue;
            }
            let is_max = (row.saturating_sub(r)..(row + r + 1).min(rows))
                .all(|rr| (col.saturating_sub(r)..(col + r + 1).min(cols)).all(|cc| m[rr * cols + cc] <= v));
            if is_max {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Entropy divided by the mode count; `None` when there are no modes.
pub fn entropy_per_mode(p: &ProbGrid, k: usize, eps: f64) -> Result<Option<f64>> {
    let modes = modepool(p, k, eps)?;
    Ok((modes > 0).then(|| entropy(p) / modes as f64))
}

/// Confidence-weighted distance `sum_b p[b] |center(b) - gt|` in meters, or
/// `None` when `gt` lies outside the grid.
pub fn expected_displacement(p: &ProbGrid, gt: [f64; 2]) -> Option<f64> {
    let spec = p.spec();
    spec.world_to_bin(gt)?;
    Some(
        p.mass()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let c = spec.bin_center(spec.unflat(i));
                m * (c[0] - gt[0]).hypot(c[1] - gt[1])
            })
            .sum(),
    )
}

/// Surface class at every bin center.
pub fn bin_classes(spec: &GridSpec, map: &SemanticMap) -> Vec<SurfaceClass> {
    (0..spec.len())
        .map(|i| map.surface_class(spec.bin_center(spec.unflat(i))))
        .collect()
}

/// Per-timestep semantic masses of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMass {
    /// Mass on the ground-truth surface class at each step.
    pub correct: Vec<f64>,
    /// Mass on crosswalk or road at steps whose ground truth is there.
    pub safety: Vec<Option<f64>>,
}

impl SemanticMass {
    pub fn accuracy(&self) -> f64 {
        self.correct.iter().sum::<f64>() / self.correct.len() as f64
    }

    /// `None` when the ground truth never touches crosswalk or road.
    pub fn recall(&self) -> Option<f64> {
        let hits: Vec<f64> = self.safety.iter().flatten().copied().collect();
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
    }
}

pub fn semantic_mass(preds: &[ProbGrid], classes: &[SurfaceClass], gt: &[SurfaceClass]) -> Result<SemanticMass> {
    if preds.len() != gt.len() || preds.is_empty() {
        return Err(DrfError::invalid(
            "semantic mass",
            format!("{} predictions for {} ground-truth classes", preds.len(), gt.len()),
        ));
    }
    let mut correct = Vec::with_capacity(gt.len());
    let mut safety = Vec::with_capacity(gt.len());
    for (p, truth) in preds.iter().zip(gt) {
        if p.mass().len() != classes.len() {
            return Err(DrfError::invalid("semantic mass", "class map does not match the grid"));
        }
        let on = |pred: &dyn Fn(SurfaceClass) -> bool| -> f64 {
            p.mass().iter().zip(classes).filter(|(_, c)| pred(**c)).map(|(m, _)| m).sum()
        };
        correct.push(on(&|c| c == *truth));
        safety.push(truth.is_safety_sensitive().then(|| on(&|c| c.is_safety_sensitive())));
    }
    Ok(SemanticMass { correct, safety })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Reliability curve over top-1 predictions and its expected calibration error.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Non-empty buckets only.
    pub buckets: Vec<CalibrationBucket>,
    pub ece: f64,
    pub events: usize,
}

impl Calibration {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.buckets.iter().map(|b| b.count as f64 / self.events as f64)
    }
}

/// Accumulates `(confidence, correct)` events in equal-width buckets.
#[derive(Clone, Debug)]
pub struct Calibrator {
    count: Vec<usize>,
    confidence: Vec<f64>,
    correct: Vec<usize>,
}

impl Calibrator {
    pub fn new(buckets: usize) -> Self {
        let buckets = buckets.max(1);
        Calibrator {
            count: vec![0; buckets],
            confidence: vec![0.0; buckets],
            correct: vec![0; buckets],
        }
    }

    pub fn add_event(&mut self, confidence: f64, correct: bool) {
        let n = self.count.len();
        let b = ((confidence * n as f64) as usize).min(n - 1);
        self.count[b] += 1;
        self.confidence[b] += confidence;
        self.correct[b] += correct as usize;
    }

    /// The argmax bin is the prediction and its mass the confidence.
    pub fn add(&mut self, p: &ProbGrid, gt: BinIndex) {
        let top = p.argmax();
        self.add_event(p.get(top), top == gt);
    }

    pub fn events(&self) -> usize {
        self.count.iter().sum()
    }

    pub fn finish(&self) -> Calibration {
        let n = self.count.len();
        let events = self.events();
        let mut buckets = Vec::new();
        let mut ece = 0.0;
        for b in 0..n {
            if self.count[b] == 0 {
                continue;
            }
            let c = self.count[b] as f64;
            let bucket = CalibrationBucket {
                lower: b as f64 / n as f64,
                upper: (b + 1) as f64 / n as f64,
                count: self.count[b],
                confidence: self.confidence[b] / c,
                accuracy: self.correct[b] as f64 / c,
            };
            ece += c / events as f64 * (bucket.accuracy - bucket.confidence).abs();
            buckets.push(bucket);
        }
        Calibration {
            buckets,
            ece: if events == 0 { f64::NAN } else { ece },
            events,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn merge(&mut self, other: &Mean) {
        self.sum += other.sum;
        self.n += other.n;
    }

    fn get(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

#[derive(Clone, Debug)]
struct StepAccumulator {
    nll: Mean,
    displacement: Mean,
    modes: Mean,
    entropy: Mean,
    epm: Mean,
    sem_acc: Mean,
    recall: Mean,
    calibration: Calibrator,
}

impl StepAccumulator {
    fn new() -> Self {
        StepAccumulator {
            nll: Mean::default(),
            displacement: Mean::default(),
            modes: Mean::default(),
            entropy: Mean::default(),
            epm: Mean::default(),
            sem_acc: Mean::default(),
            recall: Mean::default(),
            calibration: Calibrator::new(CALIBRATION_BUCKETS),
        }
    }
}

/// Metric values at one horizon, or averaged over all horizons.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonRow {
    /// 1-based step; 0 for the all-horizon average.
    pub step: usize,
    pub seconds: f64,
    pub nll: f64,
    /// Mean displacement over steps `1..=step`.
    pub ade: f64,
    pub fde: f64,
    pub modes: f64,
    pub entropy: f64,
    pub epm: f64,
    pub sem_acc: f64,
    pub sem_recall: f64,
    pub ece: f64,
}

/// Per-sample metrics computed independently of the others.
#[derive(Clone, Debug)]
pub struct SampleMetrics {
    steps: Vec<StepMetrics>,
}

#[derive(Clone, Debug)]
struct StepMetrics {
    nll: Option<f64>,
    displacement: Option<f64>,
    modes: usize,
    entropy: f64,
    epm: Option<f64>,
    correct: f64,
    safety: Option<f64>,
    top: Option<(f64, bool)>,
}

/// Computes every per-step metric for one sample. Off-grid ground truth is
/// excluded from likelihood, displacement and calibration.
pub fn sample_metrics(preds: &[LogGrid], sample: &Sample, map: &SemanticMap) -> Result<SampleMetrics> {
    if preds.len() > sample.horizon() {
        return Err(DrfError::invalid(
            "evaluation",
            format!("{} predicted steps but {} ground-truth steps", preds.len(), sample.horizon()),
        ));
    }
    let classes = bin_classes(&sample.output, map);
    let probs = preds.iter().map(normalize).collect::<Result<Vec<_>>>()?;
    let sem = semantic_mass(&probs, &classes, &sample.gt_classes[..preds.len()])?;
    let mut steps = Vec::with_capacity(preds.len());
    for (t, (lg, p)) in preds.iter().zip(&probs).enumerate() {
        let target = sample.target(t);
        let modes = modepool(p, MODEPOOL_K, MODEPOOL_EPS)?;
        let h = entropy(p);
        steps.push(StepMetrics {
            nll: target.map(|b| lg.logsumexp() - lg.get(b)),
            displacement: target.and_then(|_| expected_displacement(p, sample.gt_positions[t])),
            modes,
            entropy: h,
            epm: (modes > 0).then(|| h / modes as f64),
            correct: sem.correct[t],
            safety: sem.safety[t],
            top: target.map(|b| {
                let top = p.argmax();
                (p.get(top), top == b)
            }),
        });
    }
    Ok(SampleMetrics { steps })
}

/// Aggregates per-sample metrics in insertion order.
#[derive(Clone, Debug)]
pub struct Evaluator {
    steps: Vec<StepAccumulator>,
    samples: usize,
    off_grid: usize,
    dt: f64,
}

impl Evaluator {
    pub fn new(horizon: usize, dt: f64) -> Self {
        Evaluator {
            steps: (0..horizon).map(|_| StepAccumulator::new()).collect(),
            samples: 0,
            off_grid: 0,
            dt,
        }
    }

    pub fn add(&mut self, m: &SampleMetrics) -> Result<()> {
        if m.steps.len() != self.steps.len() {
            return Err(DrfError::invalid(
                "evaluation",
                format!("sample has {} steps, evaluator expects {}", m.steps.len(), self.steps.len()),
            ));
        }
        self.samples += 1;
        for (acc, s) in self.steps.iter_mut().zip(&m.steps) {
            match s.nll {
                Some(v) => acc.nll.push(v),
                None => self.off_grid += 1,
            }
            if let Some(d) = s.displacement {
                acc.displacement.push(d);
            }
            acc.modes.push(s.modes as f64);
            acc.entropy.push(s.entropy);
            if let Some(e) = s.epm {
                acc.epm.push(e);
            }
            acc.sem_acc.push(s.correct);
            if let Some(r) = s.safety {
                acc.recall.push(r);
            }
            if let Some((conf, ok)) = s.top {
                acc.calibration.add_event(conf, ok);
            }
        }
        Ok(())
    }

    pub fn finish(&self, model: &str, quantized_modes: bool) -> EvalReport {
        let mut rows = Vec::with_capacity(self.steps.len() + 1);
        let mut cumulative = Mean::default();
        for (t, acc) in self.steps.iter().enumerate() {
            cumulative.merge(&acc.displacement);
            rows.push(HorizonRow {
                step: t + 1,
                seconds: (t + 1) as f64 * self.dt,
                nll: acc.nll.get(),
                ade: cumulative.get(),
                fde: acc.displacement.get(),
                modes: acc.modes.get(),
                entropy: acc.entropy.get(),
                epm: acc.epm.get(),
                sem_acc: acc.sem_acc.get(),
                sem_recall: acc.recall.get(),
                ece: acc.calibration.finish().ece,
            });
        }
        let pooled = |f: fn(&StepAccumulator) -> &Mean| {
            let mut m = Mean::default();
            self.steps.iter().for_each(|a| m.merge(f(a)));
            m.get()
        };
        let mut all = Calibrator::new(CALIBRATION_BUCKETS);
        for acc in &self.steps {
            for b in 0..CALIBRATION_BUCKETS {
                all.count[b] += acc.calibration.count[b];
                all.confidence[b] += acc.calibration.confidence[b];
                all.correct[b] += acc.calibration.correct[b];
            }
        }
        let calibration = all.finish();
        let last = rows.last().map(|r| r.fde).unwrap_or(f64::NAN);
        let mean = HorizonRow {
            step: 0,
            seconds: self.steps.len() as f64 * self.dt,
            nll: pooled(|a| &a.nll),
            ade: pooled(|a| &a.displacement),
            fde: last,
            modes: pooled(|a| &a.modes),
            entropy: pooled(|a| &a.entropy),
            epm: pooled(|a| &a.epm),
            sem_acc: pooled(|a| &a.sem_acc),
            sem_recall: pooled(|a| &a.recall),
            ece: calibration.ece,
        };
        EvalReport {
            model: model.to_string(),
            quantized_modes,
            samples: self.samples,
            off_grid: self.off_grid,
            rows,
            mean,
            calibration,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    /// Mode counts of discretized continuous predictions over-count modes.
    pub quantized_modes: bool,
    pub samples: usize,
    /// (sample, step) pairs whose ground truth left the grid.
    pub off_grid: usize,
    pub rows: Vec<HorizonRow>,
    pub mean: HorizonRow,
    /// Pooled over all horizons.
    pub calibration: Calibration,
}

const CSV_HEADER: &str =
    "schema,model,horizon,seconds,samples,nll,ade,fde,modes,modes_kind,entropy,epm,sem_acc,sem_recall,ece";

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    /// One row per horizon plus a `mean` row; undefined values print as `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        let kind = if self.quantized_modes { "quantized" } else { "grid" };
        for row in self.rows.iter().chain([&self.mean]) {
            let horizon = if row.step == 0 { "mean".to_string() } else { row.step.to_string() };
            let _ = writeln!(
                out,
                "{REPORT_SCHEMA},{},{horizon},{:.3},{},{},{},{},{},{kind},{},{},{},{},{}",
                self.model,
                row.seconds,
                self.samples,
                num(row.nll),
                num(row.ade),
                num(row.fde),
                num(row.modes),
                num(row.entropy),
                num(row.epm),
                num(row.sem_acc),
                num(row.sem_recall),
                num(row.ece),
            );
        }
        out
    }

    pub fn calibration_csv(&self) -> String {
        let mut out = String::from("lower,upper,count,confidence,accuracy\n");
        for b in &self.calibration.buckets {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{},{:.6},{:.6}",
                b.lower, b.upper, b.count, b.confidence, b.accuracy
            );
        }
        out
    }
}

#[cfg(test)]
mod tests;
