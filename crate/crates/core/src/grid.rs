//! Discrete spatial state space.
//!
//! A [`GridSpec`] places a `rows x cols` lattice of square bins in the world
//! with an arbitrary origin and rotation. Distributions over the lattice live
//! in log space ([`LogGrid`]) and are only materialized as probabilities
//! ([`ProbGrid`]) at output and metric boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

/// Row/column address of a bin. Rows run along the grid's local `y` axis,
/// columns along its local `x` axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinIndex {
    pub row: usize,
    pub col: usize,
}

impl BinIndex {
    pub fn new(row: usize, col: usize) -> Self {
        BinIndex { row, col }
    }
}

/// Geometry of a rotated square-bin lattice.
///
/// The local frame has its origin at the outer corner of bin (0, 0); local
/// `x` grows with the column index and local `y` with the row index. `heading`
/// rotates the local frame into the world frame (counter-clockwise, radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub bin_size: f64,
    pub origin: [f64; 2],
    pub heading: f64,
}

impl GridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        bin_size: f64,
        origin: [f64; 2],
        heading: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DrfError::invalid(
                "grid shape",
                format!("{rows}x{cols} has an empty axis"),
            ));
        }
        if !(bin_size > 0.0) || !bin_size.is_finite() {
            return Err(DrfError::invalid("bin size", format!("{bin_size}")));
        }
        if !origin.iter().all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(DrfError::invalid("grid pose", "origin and heading must be finite"));
        }
        Ok(GridSpec {
            rows,
            cols,
            bin_size,
            origin,
            heading,
        })
    }

    /// Axis-aligned grid with its (0, 0) corner at the world origin.
    pub fn axis_aligned(rows: usize, cols: usize, bin_size: f64) -> Result<Self> {
        GridSpec::new(rows, cols, bin_size, [0.0, 0.0], 0.0)
    }

    /// Number of bins (the state alphabet size K).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, bin: BinIndex) -> bool {
        bin.row < self.rows && bin.col < self.cols
    }

    pub fn flat(&self, bin: BinIndex) -> usize {
        bin.row * self.cols + bin.col
    }

    pub fn unflat(&self, index: usize) -> BinIndex {
        BinIndex::new(index / self.cols, index % self.cols)
    }

    pub fn check_bin(&self, bin: BinIndex) -> Result<()> {
        if self.contains(bin) {
            Ok(())
        } else {
            Err(DrfError::OutOfBounds {
                row: bin.row,
                col: bin.col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// World meters to local meters.
    pub fn world_to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Local meters to world meters.
    pub fn local_to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.origin[0] + c * q[0] - s * q[1],
            self.origin[1] + s * q[0] + c * q[1],
        ]
    }

    /// Local meters of the center of `bin`.
    pub fn local_center(&self, bin: BinIndex) -> [f64; 2] {
        [
            (bin.col as f64 + 0.5) * self.bin_size,
            (bin.row as f64 + 0.5) * self.bin_size,
        ]
    }

    pub fn bin_center(&self, bin: BinIndex) -> [f64; 2] {
        self.local_to_world(self.local_center(bin))
    }

    /// Floor mapping of a world point. A point exactly on an edge shared by
    /// two bins resolves to the lower index; the grid's outer borders are
    /// inclusive.
    pub fn world_to_bin(&self, p: [f64; 2]) -> Option<BinIndex> {
        let (col, row) = self.fractional_index(p);
        let bin = BinIndex::new(axis_index(row)?, axis_index(col)?);
        self.contains(bin).then_some(bin)
    }

    /// Like [`world_to_bin`](Self::world_to_bin) but clamps off-grid points to
    /// the nearest border bin. The flag is `true` when clamping happened.
    pub fn clamp_to_bin(&self, p: [f64; 2]) -> (BinIndex, bool) {
        if let Some(bin) = self.world_to_bin(p) {
            return (bin, false);
        }
        let (col, row) = self.fractional_index(p);
        let clamp = |v: f64, n: usize| -> usize { axis_index(v).unwrap_or(0).min(n - 1) };
        (BinIndex::new(clamp(row, self.rows), clamp(col, self.cols)), true)
    }

    fn fractional_index(&self, p: [f64; 2]) -> (f64, f64) {
        let q = self.world_to_local(p);
        (q[0] / self.bin_size, q[1] / self.bin_size)
    }

    /// Area of one bin in square meters.
    pub fn bin_area(&self) -> f64 {
        self.bin_size * self.bin_size
    }
}

fn axis_index(v: f64) -> Option<usize> {
    if v.is_nan() || v < 0.0 {
        None
    } else if v == 0.0 {
        Some(0)
    } else {
        Some(v.ceil() as usize - 1)
    }
}

/// Unnormalized log potential over the bins of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LogGrid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl LogGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(DrfError::Shape {
                op: "LogGrid::new",
                lhs: vec![spec.rows, spec.cols],
                rhs: vec![values.len()],
            });
        }
        if let Some(bad) = values.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(DrfError::invalid("log potential", format!("entry {bad}")));
        }
        Ok(LogGrid { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        LogGrid {
            spec,
            values: vec![0.0; spec.len()],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: BinIndex) -> f64 {
        self.values[self.spec.flat(bin)]
    }

    /// Elementwise sum with another potential on the same grid.
    pub fn add(&self, other: &LogGrid) -> Result<LogGrid> {
        if self.spec != other.spec {
            return Err(DrfError::Shape {
                op: "LogGrid::add",
                lhs: vec![self.spec.rows, self.spec.cols],
                rhs: vec![other.spec.rows, other.spec.cols],
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        LogGrid::new(self.spec, values)
    }

    pub fn shifted(&self, c: f64) -> LogGrid {
        LogGrid {
            spec: self.spec,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    pub fn logsumexp(&self) -> f64 {
        logsumexp(&self.values)
    }

    /// Normalized log probabilities `lg - logsumexp(lg)`.
    pub fn log_normalized(&self) -> Result<Vec<f64>> {
        let lse = self.logsumexp();
        if lse == f64::NEG_INFINITY {
            return Err(DrfError::DegeneratePotential);
        }
        Ok(self.values.iter().map(|v| v - lse).collect())
    }
}

/// Max-shifted log-sum-exp with a fixed left-to-right reduction order.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// A categorical distribution over grid bins.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    spec: GridSpec,
    mass: Vec<f64>,
}

impl ProbGrid {
    /// Tolerance on total mass accepted by [`ProbGrid::new`].
    pub const MASS_TOLERANCE: f64 = 1e-6;

    pub fn new(spec: GridSpec, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != spec.len() {
            return Err(DrfError::Shape {
                op: "ProbGrid::new",
                lhs: vec![spec.rows, spec.cols],
                rhs: vec![mass.len()],
            });
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(DrfError::invalid("probability mass", "entries must be finite and >= 0"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > Self::MASS_TOLERANCE {
            return Err(DrfError::invalid("probability mass", format!("total {total}")));
        }
        Ok(ProbGrid { spec, mass })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, bin: BinIndex) -> f64 {
        self.mass[self.spec.flat(bin)]
    }

    pub fn argmax(&self) -> BinIndex {
        let mut best = 0;
        for (i, m) in self.mass.iter().enumerate() {
            if *m > self.mass[best] {
                best = i;
            }
        }
        self.spec.unflat(best)
    }

    /// Little-endian serialization: `rows: u32, cols: u32, bin_size: f64,
    /// origin: [f64; 2], heading: f64`, then `rows * cols` row-major `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 4 * self.mass.len());
        out.extend_from_slice(&(self.spec.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.spec.bin_size.to_le_bytes());
        out.extend_from_slice(&self.spec.origin[0].to_le_bytes());
        out.extend_from_slice(&self.spec.origin[1].to_le_bytes());
        out.extend_from_slice(&self.spec.heading.to_le_bytes());
        for m in &self.mass {
            out.extend_from_slice(&(*m as f32).to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Mass is re-normalized after
    /// the 32-bit round trip.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 40;
        if bytes.len() < HEADER {
            return Err(DrfError::invalid("grid bytes", "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let spec = GridSpec::new(
            u32_at(0),
            u32_at(4),
            f64_at(8),
            [f64_at(16), f64_at(24)],
            f64_at(32),
        )?;
        if bytes.len() != HEADER + 4 * spec.len() {
            return Err(DrfError::invalid(
                "grid bytes",
                format!("expected {} bytes, got {}", HEADER + 4 * spec.len(), bytes.len()),
            ));
        }
        let raw: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let total: f64 = raw.iter().sum();
        ProbGrid::new(spec, raw.into_iter().map(|m| m / total).collect())
    }
}

/// `mass[b] = exp(lg[b] - logsumexp(lg))`.
pub fn normalize(lg: &LogGrid) -> Result<ProbGrid> {
    let logp = lg.log_normalized()?;
    let mass = logp.into_iter().map(f64::exp).collect();
    Ok(ProbGrid {
        spec: lg.spec,
        mass,
    })
}

/// Smoothed delta: after normalization, `1 - leak` at `poi_bin` and
/// `leak / (K - 1)` on every other bin.
pub fn init_delta(spec: GridSpec, poi_bin: BinIndex, leak: f64) -> Result<LogGrid> {
    spec.check_bin(poi_bin)?;
    if !(0.0..1.0).contains(&leak) {
        return Err(DrfError::invalid("leak", format!("{leak} is outside [0, 1)")));
    }
    let k = spec.len();
    let mut values = vec![f64::NEG_INFINITY; k];
    if k > 1 {
        let other = (leak / (k - 1) as f64).ln();
        values.iter_mut().for_each(|v| *v = other);
    }
    values[spec.flat(poi_bin)] = (1.0 - leak).ln();
    LogGrid::new(spec, values)
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbGrid) -> f64 {
    -p.mass
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| m * m.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_potential_is_uniform() {
        let spec = GridSpec::axis_aligned(2, 2, 0.5).unwrap();
        let p = normalize(&LogGrid::zeros(spec)).unwrap();
        for m in p.mass() {
            assert!((m - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_bin_normalization() {
        let spec = GridSpec::axis_aligned(1, 2, 0.5).unwrap();
        let lg = LogGrid::new(spec, vec![0.0, 3f64.ln()]).unwrap();
        let p = normalize(&lg).unwrap();
        assert!((p.mass()[0] - 0.25).abs() < 1e-15);
        assert!((p.mass()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn all_neg_inf_is_degenerate() {
        let spec = GridSpec::axis_aligned(2, 3, 1.0).unwrap();
        let lg = LogGrid::new(spec, vec![f64::NEG_INFINITY; 6]).unwrap();
        assert!(matches!(normalize(&lg), Err(DrfError::DegeneratePotential)));
    }

    #[test]
    fn log_grid_rejects_nan_and_pos_inf() {
        let spec = GridSpec::axis_aligned(1, 2, 1.0).unwrap();
        assert!(LogGrid::new(spec, vec![0.0, f64::NAN]).is_err());
        assert!(LogGrid::new(spec, vec![0.0, f64::INFINITY]).is_err());
        assert!(LogGrid::new(spec, vec![0.0]).is_err());
    }

    #[test]
    fn grid_spec_rejects_bad_geometry() {
        assert!(GridSpec::axis_aligned(0, 3, 1.0).is_err());
        assert!(GridSpec::axis_aligned(3, 3, 0.0).is_err());
        assert!(GridSpec::axis_aligned(3, 3, -1.0).is_err());
        assert!(GridSpec::new(3, 3, 1.0, [f64::NAN, 0.0], 0.0).is_err());
    }

    #[test]
    fn delta_without_leak_is_exact() {
        let spec = GridSpec::axis_aligned(4, 5, 1.0).unwrap();
        let poi = BinIndex::new(2, 3);
        let p = normalize(&init_delta(spec, poi, 0.0).unwrap()).unwrap();
        assert_eq!(p.get(poi), 1.0);
        assert_eq!(p.mass().iter().filter(|m| **m > 0.0).count(), 1);
    }

    #[test]
    fn delta_with_leak() {
        let spec = GridSpec::axis_aligned(32, 24, 2.0).unwrap();
        let poi = BinIndex::new(9, 12);
        let p = normalize(&init_delta(spec, poi, 1e-6).unwrap()).unwrap();
        assert!((p.get(poi) - (1.0 - 1e-6)).abs() < 1e-12);
        let other = 1e-6 / 767.0;
        for (i, m) in p.mass().iter().enumerate() {
            if i != spec.flat(poi) {
                assert!((m - other).abs() / other < 1e-12);
            }
        }
        assert_eq!(p.argmax(), poi);
    }

    #[test]
    fn delta_rejects_bad_arguments() {
        let spec = GridSpec::axis_aligned(4, 4, 1.0).unwrap();
        assert!(matches!(
            init_delta(spec, BinIndex::new(4, 0), 0.0),
            Err(DrfError::OutOfBounds { .. })
        ));
        assert!(init_delta(spec, BinIndex::new(0, 0), 1.0).is_err());
        assert!(init_delta(spec, BinIndex::new(0, 0), -0.1).is_err());
    }

    #[test]
    fn single_bin_delta() {
        let spec = GridSpec::axis_aligned(1, 1, 1.0).unwrap();
        let p = normalize(&init_delta(spec, BinIndex::new(0, 0), 0.5).unwrap()).unwrap();
        assert_eq!(p.mass(), &[1.0]);
    }

    #[test]
    fn entropy_of_delta_and_uniform() {
        let spec = GridSpec::axis_aligned(32, 24, 2.0).unwrap();
        let delta = normalize(&init_delta(spec, BinIndex::new(0, 0), 0.0).unwrap()).unwrap();
        assert_eq!(entropy(&delta), 0.0);
        let uniform = normalize(&LogGrid::zeros(spec)).unwrap();
        assert!((entropy(&uniform) - 768f64.ln()).abs() < 1e-12);
        assert!((768f64.ln() - 6.6438).abs() < 1e-4);
    }

    #[test]
    fn prob_grid_bytes_round_trip() {
        let spec = GridSpec::new(3, 2, 0.5, [1.5, -2.0], 0.3).unwrap();
        let lg = LogGrid::new(spec, vec![0.0, 1.0, -2.0, 0.5, 0.25, -1.0]).unwrap();
        let p = normalize(&lg).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 40 + 6 * 4);
        assert_eq!(&bytes[0..4], &3u32.to_le_bytes());
        let back = ProbGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec(), p.spec());
        for (a, b) in back.mass().iter().zip(p.mass()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(ProbGrid::from_bytes(&bytes[..30]).is_err());
        assert!(ProbGrid::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn clamp_flags_off_grid_points() {
        let spec = GridSpec::axis_aligned(4, 4, 1.0).unwrap();
        assert_eq!(spec.clamp_to_bin([1.5, 2.5]), (BinIndex::new(2, 1), false));
        assert_eq!(spec.clamp_to_bin([-3.0, 2.5]), (BinIndex::new(2, 0), true));
        assert_eq!(spec.clamp_to_bin([9.0, 9.0]), (BinIndex::new(3, 3), true));
        // Shared edges resolve toward the lower index; outer borders are inclusive.
        assert_eq!(spec.world_to_bin([1.0, 2.0]), Some(BinIndex::new(1, 0)));
        assert_eq!(spec.world_to_bin([0.0, 0.0]), Some(BinIndex::new(0, 0)));
        assert_eq!(spec.world_to_bin([4.0, 0.5]), Some(BinIndex::new(0, 3)));
        assert_eq!(spec.world_to_bin([4.001, 0.5]), None);
        assert_eq!(spec.world_to_bin([-0.001, 0.5]), None);
    }

    proptest! {
        #[test]
        fn bin_center_round_trips(
            rows in 1usize..40, cols in 1usize..40,
            bin_size in 0.05f64..4.0,
            ox in -500.0f64..500.0, oy in -500.0f64..500.0,
            heading in -10.0f64..10.0,
            r in 0usize..40, c in 0usize..40,
        ) {
            let spec = GridSpec::new(rows, cols, bin_size, [ox, oy], heading).unwrap();
            let bin = BinIndex::new(r % rows, c % cols);
            prop_assert_eq!(spec.world_to_bin(spec.bin_center(bin)), Some(bin));
        }

        #[test]
        fn normalize_is_shift_invariant(
            values in proptest::collection::vec(-30.0f64..30.0, 12),
            shift in -1e3f64..1e3,
        ) {
            let spec = GridSpec::axis_aligned(3, 4, 1.0).unwrap();
            let a = normalize(&LogGrid::new(spec, values.clone()).unwrap()).unwrap();
            let b = normalize(&LogGrid::new(spec, values).unwrap().shifted(shift)).unwrap();
            for (x, y) in a.mass().iter().zip(b.mass()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let total: f64 = a.mass().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let h = entropy(&a);
            prop_assert!(h >= 0.0 && h <= 12f64.ln() + 1e-12);
        }
    }
}
