//! Bird's-eye-view rasterization around the pedestrian of interest.
//!
//! The channel stack is
//! `[D(-Tp) .. D(0), V(-Tp) .. V(0), R, M1 .. M15, posX, posY]`:
//! pedestrian and vehicle occupancy per past frame, the decaying PoI tracklet,
//! fifteen semantic map masks and two positional encodings. Every channel is
//! drawn in a frame whose local `y` axis points along the PoI heading, with
//! more room ahead of the PoI than behind it.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::geometry::Polygon;
use crate::grid::{BinIndex, GridSpec};
use crate::scenario::{AgentKind, AgentTrack, MapClass, Scenario, SurfaceClass};

pub const MAP_CHANNELS: usize = 15;

/// Input raster layout and its relation to the output grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub rows: usize,
    pub cols: usize,
    /// Meters per input pixel.
    pub pixel_size: f64,
    /// Input pixels per output bin along each axis.
    pub output_ratio: usize,
    /// Fraction of the longitudinal extent behind the PoI.
    pub behind_fraction: f64,
    /// Tracklet decay; `None` selects `1 / (past_frames + 1)`.
    pub gamma: Option<f64>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig::desk()
    }
}

impl FrameConfig {
    /// 128 x 96 px at 0.5 m/px; 32 x 24 output bins of 2 m.
    pub fn desk() -> Self {
        FrameConfig {
            rows: 128,
            cols: 96,
            pixel_size: 0.5,
            output_ratio: 4,
            behind_fraction: 22.0 / 72.0,
            gamma: None,
        }
    }

    /// 576 x 416 px at 0.125 m/px (72 m x 52 m).
    pub fn full_scale() -> Self {
        FrameConfig {
            rows: 576,
            cols: 416,
            pixel_size: 0.125,
            ..FrameConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.pixel_size > 0.0) {
            return Err(DrfError::invalid("frame", "empty raster or non-positive pixel size"));
        }
        if self.output_ratio == 0
            || !self.rows.is_multiple_of(self.output_ratio)
            || !self.cols.is_multiple_of(self.output_ratio)
        {
            return Err(DrfError::invalid(
                "frame",
                format!(
                    "{}x{} raster is not divisible by output ratio {}",
                    self.rows, self.cols, self.output_ratio
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.behind_fraction) {
            return Err(DrfError::invalid("frame", "behind_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Pixel holding the last known PoI position. It is the pixel nearest the
    /// center of its output bin, so early motion does not cross a bin edge.
    pub fn anchor(&self) -> BinIndex {
        let r = self.output_ratio;
        let row = (self.rows as f64 * self.behind_fraction).floor() as usize;
        BinIndex::new(row / r * r + r / 2, self.cols / 2 / r * r + r / 2)
    }

    pub fn gamma(&self, past_frames: usize) -> f64 {
        self.gamma.unwrap_or(1.0 / (past_frames as f64 + 1.0))
    }

    /// Input grid with the anchor pixel centered on `position` and local `y`
    /// pointing along `heading`.
    pub fn input_spec(&self, position: [f64; 2], heading: f64) -> Result<GridSpec> {
        let grid_heading = heading - FRAC_PI_2;
        let probe = GridSpec::new(self.rows, self.cols, self.pixel_size, [0.0, 0.0], grid_heading)?;
        let offset = probe.local_to_world(probe.local_center(self.anchor()));
        GridSpec::new(
            self.rows,
            self.cols,
            self.pixel_size,
            [position[0] - offset[0], position[1] - offset[1]],
            grid_heading,
        )
    }

    pub fn output_spec(&self, input: &GridSpec) -> Result<GridSpec> {
        GridSpec::new(
            input.rows / self.output_ratio,
            input.cols / self.output_ratio,
            input.bin_size * self.output_ratio as f64,
            input.origin,
            input.heading,
        )
    }

    pub fn channel_count(&self, past_frames: usize) -> usize {
        channel_count(past_frames)
    }
}

pub fn channel_count(past_frames: usize) -> usize {
    2 * (past_frames + 1) + 1 + MAP_CHANNELS + 2
}

/// Multi-channel raster, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rasterization {
    pub spec: GridSpec,
    pub past_frames: usize,
    pub data: Vec<f32>,
}

impl Rasterization {
    pub fn channels(&self) -> usize {
        channel_count(self.past_frames)
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let k = self.spec.len();
        &self.data[channel * k..(channel + 1) * k]
    }

    fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let k = self.spec.len();
        &mut self.data[channel * k..(channel + 1) * k]
    }

    /// Pedestrian occupancy at past frame `t <= 0`.
    pub fn pedestrian_channel(&self, t: i64) -> usize {
        (t + self.past_frames as i64) as usize
    }

    pub fn vehicle_channel(&self, t: i64) -> usize {
        self.past_frames + 1 + self.pedestrian_channel(t)
    }

    pub fn tracklet_channel(&self) -> usize {
        2 * (self.past_frames + 1)
    }

    pub fn map_channel(&self, class: MapClass) -> usize {
        self.tracklet_channel() + 1 + class.channel()
    }

    pub fn pos_x_channel(&self) -> usize {
        self.tracklet_channel() + 1 + MAP_CHANNELS
    }

    pub fn pos_y_channel(&self) -> usize {
        self.pos_x_channel() + 1
    }
}

/// Calls `visit(row, col)` for every pixel whose center lies inside `poly`
/// (boundary inclusive). Even-odd scanline with a half-open vertex rule;
/// horizontal edges and vertices lying on a scanline are added explicitly so
/// boundary points are never lost.
pub fn scan_polygon(poly: &Polygon, spec: &GridSpec, mut visit: impl FnMut(usize, usize)) {
    if poly.is_degenerate() {
        return;
    }
    let pts: Vec<[f64; 2]> = poly
        .vertices()
        .iter()
        .map(|p| {
            let q = spec.world_to_local(*p);
            [q[0] / spec.bin_size, q[1] / spec.bin_size]
        })
        .collect();
    let (lo, hi) = pts.iter().fold(
        ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
        |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1])],
                [hi[0].max(p[0]), hi[1].max(p[1])],
            )
        },
    );
    if !(lo[1].is_finite() && hi[1].is_finite()) {
        return;
    }
    let row_lo = (lo[1] - 0.5).ceil().max(0.0);
    let row_hi = (hi[1] - 0.5).floor().min(spec.rows as f64 - 1.0);
    if row_lo > row_hi {
        return;
    }
    let n = pts.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(n);
    for row in row_lo as usize..=row_hi as usize {
        let y = row as f64 + 0.5;
        crossings.clear();
        spans.clear();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            if a[1] == y {
                spans.push((a[0], a[0]));
            }
            if a[1] == b[1] {
                if a[1] == y {
                    spans.push((a[0].min(b[0]), a[0].max(b[0])));
                }
                continue;
            }
            if (a[1] <= y && y < b[1]) || (b[1] <= y && y < a[1]) {
                crossings.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        spans.extend(crossings.chunks_exact(2).map(|c| (c[0], c[1])));
        for &(x0, x1) in &spans {
            let c0 = (x0 - 0.5).ceil().max(0.0);
            let c1 = (x1 - 0.5).floor().min(spec.cols as f64 - 1.0);
            if c0 > c1 {
                continue;
            }
            for col in c0 as usize..=c1 as usize {
                visit(row, col);
            }
        }
    }
}

/// Binary plane: 1 where the pixel center lies inside `poly`.
pub fn rasterize_polygon(poly: &Polygon, spec: &GridSpec) -> Vec<f32> {
    let mut plane = vec![0.0; spec.len()];
    scan_polygon(poly, spec, |r, c| plane[r * spec.cols + c] = 1.0);
    plane
}

/// PoI tracklet: footprint pixels of observed past frame `t` carry
/// `1 + gamma * t`; later frames overwrite earlier ones.
pub fn encode_tracklet(poi: &AgentTrack, spec: &GridSpec, gamma: f64) -> Vec<f32> {
    let mut plane = vec![0.0; spec.len()];
    for (t, state) in poi.observed_past() {
        let value = (1.0 + gamma * t as f64) as f32;
        scan_polygon(&state.footprint(), spec, |r, c| plane[r * spec.cols + c] = value);
    }
    plane
}

/// Last observed PoI position and the heading of its last observed step.
pub fn poi_pose(poi: &AgentTrack) -> Result<([f64; 2], f64)> {
    let observed: Vec<_> = poi.observed_past().collect();
    if observed.len() < 2 {
        return Err(DrfError::CannotOrient {
            observed: observed.len(),
        });
    }
    let (_, last) = observed[observed.len() - 1];
    let (_, prev) = observed[observed.len() - 2];
    let dx = last.position[0] - prev.position[0];
    let dy = last.position[1] - prev.position[1];
    // A standing PoI has no displacement; fall back to its reported heading.
    let heading = if dx.hypot(dy) > 1e-9 {
        dy.atan2(dx)
    } else {
        last.heading
    };
    Ok((last.position, heading))
}

/// Full channel stack for `s` in the PoI frame.
pub fn build_rasterization(s: &Scenario, frame: &FrameConfig) -> Result<Rasterization> {
    frame.validate()?;
    let (position, heading) = poi_pose(&s.poi)?;
    let spec = frame.input_spec(position, heading)?;
    let past = s.poi.past_frames;
    let mut raster = Rasterization {
        spec,
        past_frames: past,
        data: vec![0.0; channel_count(past) * spec.len()],
    };
    let cols = spec.cols;

    for track in std::iter::once(&s.poi).chain(&s.others) {
        for (t, state) in track.observed_past() {
            if t < -(past as i64) {
                continue;
            }
            let channel = match track.kind {
                AgentKind::Pedestrian => raster.pedestrian_channel(t),
                AgentKind::Vehicle => raster.vehicle_channel(t),
            };
            let plane = raster.plane_mut(channel);
            scan_polygon(&state.footprint(), &spec, |r, c| plane[r * cols + c] = 1.0);
        }
    }

    let tracklet = encode_tracklet(&s.poi, &spec, frame.gamma(past));
    let r_channel = raster.tracklet_channel();
    raster.plane_mut(r_channel).copy_from_slice(&tracklet);

    for mp in &s.map.polygons {
        let class = if mp.class == MapClass::Intersection {
            // Intersections are drivable: they feed both the road mask and their own channel.
            let plane = raster.plane_mut(raster.map_channel(MapClass::Road));
            scan_polygon(&mp.polygon, &spec, |r, c| plane[r * cols + c] = 1.0);
            MapClass::Intersection
        } else {
            mp.class
        };
        let plane = raster.plane_mut(raster.map_channel(class));
        scan_polygon(&mp.polygon, &spec, |r, c| plane[r * cols + c] = 1.0);
    }

    let anchor = frame.anchor();
    let x_scale = anchor.col.max(spec.cols - 1 - anchor.col).max(1) as f64;
    let y_scale = anchor.row.max(spec.rows - 1 - anchor.row).max(1) as f64;
    let (px, py) = (raster.pos_x_channel(), raster.pos_y_channel());
    for r in 0..spec.rows {
        for c in 0..cols {
            raster.plane_mut(px)[r * cols + c] = ((c as f64 - anchor.col as f64) / x_scale) as f32;
            raster.plane_mut(py)[r * cols + c] = ((r as f64 - anchor.row as f64) / y_scale) as f32;
        }
    }
    Ok(raster)
}

/// A rasterized scenario paired with its prediction targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub raster: Rasterization,
    /// Output grid sharing the raster's pose.
    pub output: GridSpec,
    /// Output bin holding the last known PoI position.
    pub poi_bin: BinIndex,
    /// Ground-truth positions for `t = 1 ..= T_f` (world meters).
    pub gt_positions: Vec<[f64; 2]>,
    /// Ground-truth bins, clamped onto the grid when off-grid.
    pub gt_bins: Vec<BinIndex>,
    /// `true` where the ground truth left the grid and was clamped.
    pub off_grid: Vec<bool>,
    /// Surface class of each ground-truth position.
    pub gt_classes: Vec<SurfaceClass>,
}

impl Sample {
    pub fn horizon(&self) -> usize {
        self.gt_bins.len()
    }

    /// `Some(bin)` for on-grid timesteps.
    pub fn target(&self, t: usize) -> Option<BinIndex> {
        (!self.off_grid[t]).then_some(self.gt_bins[t])
    }

    /// Ground truth in output-grid local meters (MDN targets).
    pub fn gt_local(&self) -> Vec<[f64; 2]> {
        self.gt_positions
            .iter()
            .map(|p| self.output.world_to_local(*p))
            .collect()
    }
}

pub fn build_sample(s: &Scenario, frame: &FrameConfig) -> Result<Sample> {
    let raster = build_rasterization(s, frame)?;
    let output = frame.output_spec(&raster.spec)?;
    let anchor_world = raster.spec.bin_center(frame.anchor());
    let poi_bin = output
        .world_to_bin(anchor_world)
        .expect("anchor pixel lies inside the output grid");
    let gt_positions = s.poi.future_positions();
    let (gt_bins, off_grid) = gt_positions.iter().map(|p| output.clamp_to_bin(*p)).unzip();
    let gt_classes = gt_positions.iter().map(|p| s.map.surface_class(*p)).collect();
    Ok(Sample {
        seed: s.seed,
        raster,
        output,
        poi_bin,
        gt_positions,
        gt_bins,
        off_grid,
        gt_classes,
    })
}
