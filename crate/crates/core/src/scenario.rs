//! Synthetic street scenes with a pedestrian of interest (PoI).
//!
//! Each scene is a straight two-way road with sidewalks, one signalized
//! intersection, crosswalks and a handful of other agents. The PoI walks
//! along the east sidewalk and follows one high-level plan: keep walking,
//! stand still, or turn onto the crosswalk just ahead (probability `q`).
//! The whole scene is generated in a canonical frame and then rotated by a
//! random world heading about the scene center.
//!
//! Datasets are stored as `drf-scn/1` files: a JSON header line followed by
//! one JSON scenario record per line.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrfError, Result};
use crate::geometry::{rotate, Polygon};

/// Seconds between frames (5 Hz).
pub const FRAME_DT: f64 = 0.2;

/// Past frames that perception never drops for the PoI.
pub const PROTECTED_FRAMES: usize = 3;

pub const DATASET_SCHEMA: &str = "drf-scn/1";

const LANE_WIDTH: f64 = 3.5;
const PEDESTRIAN_HALF_EXTENT: [f64; 2] = [0.4, 0.4];
const VEHICLE_HALF_EXTENT: [f64; 2] = [2.3, 1.0];
const MAX_LATERAL_ACCEL: f64 = 1.2;
const MIN_TURN_RADIUS: f64 = 0.5;

/// Fine-grained map surface labels, in rasterization channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Road,
    Crosswalk,
    Intersection,
    BusLane,
    BikeLane,
    LaneMarker,
    StopLane,
    YieldLane,
    RedLane,
    YellowLane,
    GreenLane,
    StraightLane,
    RightTurn,
    ProtectedLeft,
    UnprotectedLeft,
}

impl MapClass {
    pub const ALL: [MapClass; 15] = [
        MapClass::Road,
        MapClass::Crosswalk,
        MapClass::Intersection,
        MapClass::BusLane,
        MapClass::BikeLane,
        MapClass::LaneMarker,
        MapClass::StopLane,
        MapClass::YieldLane,
        MapClass::RedLane,
        MapClass::YellowLane,
        MapClass::GreenLane,
        MapClass::StraightLane,
        MapClass::RightTurn,
        MapClass::ProtectedLeft,
        MapClass::UnprotectedLeft,
    ];

    /// Index of the semantic channel this class is drawn into.
    pub fn channel(self) -> usize {
        MapClass::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn is_drivable(self) -> bool {
        matches!(self, MapClass::Road | MapClass::Intersection)
    }
}

/// Coarse three-way partition of the plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceClass {
    Crosswalk,
    Road,
    OffRoad,
}

impl SurfaceClass {
    /// Crosswalk or road: the surfaces where a PoI matters most to a vehicle.
    pub fn is_safety_sensitive(self) -> bool {
        matches!(self, SurfaceClass::Crosswalk | SurfaceClass::Road)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolygon {
    pub class: MapClass,
    pub polygon: Polygon,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub polygons: Vec<MapPolygon>,
}

impl SemanticMap {
    /// Crosswalk beats road beats off-road.
    pub fn surface_class(&self, p: [f64; 2]) -> SurfaceClass {
        let inside = |pred: fn(MapClass) -> bool| {
            self.polygons
                .iter()
                .any(|mp| pred(mp.class) && mp.polygon.contains(p))
        };
        if inside(|c| c == MapClass::Crosswalk) {
            SurfaceClass::Crosswalk
        } else if inside(MapClass::is_drivable) {
            SurfaceClass::Road
        } else {
            SurfaceClass::OffRoad
        }
    }

    pub fn of_class(&self, class: MapClass) -> impl Iterator<Item = &Polygon> {
        self.polygons
            .iter()
            .filter(move |mp| mp.class == class)
            .map(|mp| &mp.polygon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Pedestrian,
    Vehicle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    pub heading: f64,
    /// Half length along the heading, half width across it.
    pub half_extent: [f64; 2],
}

impl AgentState {
    pub fn footprint(&self) -> Polygon {
        Polygon::oriented_rect(self.position, self.heading, self.half_extent)
    }
}

/// Per-frame states for frames `-past_frames ..= future_frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub kind: AgentKind,
    pub past_frames: usize,
    pub states: Vec<AgentState>,
    /// One flag per past frame `t = -past_frames ..= 0`.
    pub observed: Vec<bool>,
}

impl AgentTrack {
    pub fn future_frames(&self) -> usize {
        self.states.len() - self.past_frames - 1
    }

    /// State at frame `t` (negative for the past, 0 for now).
    pub fn at(&self, t: i64) -> Option<&AgentState> {
        let i = t + self.past_frames as i64;
        if i < 0 {
            return None;
        }
        self.states.get(i as usize)
    }

    pub fn is_observed(&self, t: i64) -> bool {
        let i = t + self.past_frames as i64;
        t <= 0 && i >= 0 && self.observed[i as usize]
    }

    /// Observed past frames as `(t, state)`, oldest first.
    pub fn observed_past(&self) -> impl Iterator<Item = (i64, &AgentState)> {
        let offset = self.past_frames as i64;
        self.states[..=self.past_frames]
            .iter()
            .zip(&self.observed)
            .enumerate()
            .filter(|(_, (_, seen))| **seen)
            .map(move |(i, (s, _))| (i as i64 - offset, s))
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    /// Ground-truth positions for `t = 1 ..= future_frames`.
    pub fn future_positions(&self) -> Vec<[f64; 2]> {
        self.states[self.past_frames + 1..]
            .iter()
            .map(|s| s.position)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
}

impl LightState {
    pub fn lane_class(self) -> MapClass {
        match self {
            LightState::Red => MapClass::RedLane,
            LightState::Yellow => MapClass::YellowLane,
            LightState::Green => MapClass::GreenLane,
        }
    }
}

/// High-level plan followed by the PoI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plan {
    Continue,
    Stop,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    /// Radius (meters) of the disk around the world origin that holds the scene.
    pub scene_radius: f64,
    pub map: SemanticMap,
    pub poi: AgentTrack,
    pub others: Vec<AgentTrack>,
    pub light_state: LightState,
    pub plan: Plan,
}

impl Scenario {
    /// Does the PoI's ground-truth future touch a crosswalk polygon?
    pub fn poi_enters_crosswalk(&self) -> bool {
        self.poi
            .future_positions()
            .iter()
            .any(|p| self.map.surface_class(*p) == SurfaceClass::Crosswalk)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scene_radius: f64,
    pub crosswalks: usize,
    /// Probability that the PoI crosses at the crosswalk ahead.
    pub cross_prob: f64,
    /// Share of non-crossing PoIs that stand still.
    pub stop_weight: f64,
    pub pedestrians: usize,
    pub vehicles: usize,
    pub lanes_per_direction: usize,
    pub speed_mean: f64,
    pub speed_sd: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub past_frames: usize,
    pub future_frames: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scene_radius: 60.0,
            crosswalks: 2,
            cross_prob: 0.5,
            stop_weight: 0.1,
            pedestrians: 3,
            vehicles: 4,
            lanes_per_direction: 2,
            speed_mean: 1.4,
            speed_sd: 0.2,
            speed_min: 0.3,
            speed_max: 2.5,
            past_frames: 10,
            future_frames: 10,
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DrfError::InfeasibleConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.cross_prob) {
            return bad("cross_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.stop_weight) {
            return bad("stop_weight must lie in [0, 1]");
        }
        if self.crosswalks == 0 {
            return bad("at least one crosswalk is required");
        }
        if self.lanes_per_direction == 0 {
            return bad("at least one lane per direction is required");
        }
        if self.past_frames < PROTECTED_FRAMES - 1 {
            return bad("at least 3 past frames (t = -2..=0) are required");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_sd >= 0.0) {
            return bad("speed bounds must satisfy 0 < min <= max and sd >= 0");
        }
        let road_half = self.lanes_per_direction as f64 * LANE_WIDTH;
        // Road, both sidewalks, and room for the PoI future along the corridor.
        let horizon = self.speed_max * self.future_frames as f64 * FRAME_DT;
        let needed = (road_half + 5.0).hypot(horizon + 5.0);
        if self.scene_radius < needed {
            return Err(DrfError::InfeasibleConfig(format!(
                "no sidewalk corridor fits a scene of radius {} m (needs {needed:.1} m)",
                self.scene_radius
            )));
        }
        Ok(())
    }
}

struct Canvas {
    polygons: Vec<MapPolygon>,
}

impl Canvas {
    fn push(&mut self, class: MapClass, x0: f64, y0: f64, x1: f64, y1: f64) {
        if x1 > x0 && y1 > y0 {
            self.polygons.push(MapPolygon {
                class,
                polygon: Polygon::rect(x0, y0, x1, y1),
            });
        }
    }
}

/// Position and heading of the PoI at time `tau` seconds (canonical frame).
struct PoiMotion {
    plan: Plan,
    x0: f64,
    speed: f64,
    turn_time: f64,
    radius: f64,
}

impl PoiMotion {
    fn at(&self, tau: f64) -> ([f64; 2], f64) {
        match self.plan {
            Plan::Stop => ([self.x0, 0.0], FRAC_PI_2),
            Plan::Continue => ([self.x0, self.speed * tau], FRAC_PI_2),
            Plan::Cross => {
                let y_turn = self.speed * self.turn_time;
                if tau <= self.turn_time {
                    return ([self.x0, self.speed * tau], FRAC_PI_2);
                }
                let arc_time = FRAC_PI_2 * self.radius / self.speed;
                let dt = tau - self.turn_time;
                if dt <= arc_time {
                    let theta = self.speed * dt / self.radius;
                    let p = [
                        self.x0 - self.radius + self.radius * theta.cos(),
                        y_turn + self.radius * theta.sin(),
                    ];
                    (p, FRAC_PI_2 + theta)
                } else {
                    let p = [
                        self.x0 - self.radius - self.speed * (dt - arc_time),
                        y_turn + self.radius,
                    ];
                    (p, PI)
                }
            }
        }
    }
}

fn sample_speed(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> f64 {
    let raw = if cfg.speed_sd > 0.0 {
        Normal::new(cfg.speed_mean, cfg.speed_sd)
            .expect("finite speed distribution")
            .sample(rng)
    } else {
        cfg.speed_mean
    };
    raw.clamp(cfg.speed_min, cfg.speed_max)
}

fn track_from(
    kind: AgentKind,
    cfg: &ScenarioConfig,
    rotation: f64,
    half_extent: [f64; 2],
    motion: impl Fn(f64) -> ([f64; 2], f64),
) -> AgentTrack {
    let states = (-(cfg.past_frames as i64)..=cfg.future_frames as i64)
        .map(|t| {
            let (p, h) = motion(t as f64 * FRAME_DT);
            AgentState {
                position: rotate(p, rotation),
                heading: h + rotation,
                half_extent,
            }
        })
        .collect();
    AgentTrack {
        kind,
        past_frames: cfg.past_frames,
        states,
        observed: vec![true; cfg.past_frames + 1],
    }
}

/// Deterministic scenario synthesis from `(seed, cfg)`.
pub fn generate_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let road_half = cfg.lanes_per_direction as f64 * LANE_WIDTH;
    let rotation = rng.random_range(0.0..2.0 * PI);
    let light_state = match rng.random_range(0..3) {
        0 => LightState::Red,
        1 => LightState::Yellow,
        _ => LightState::Green,
    };

    // PoI plan and kinematics.
    let plan = if rng.random::<f64>() < cfg.cross_prob {
        Plan::Cross
    } else if rng.random::<f64>() < cfg.stop_weight {
        Plan::Stop
    } else {
        Plan::Continue
    };
    let speed = sample_speed(&mut rng, cfg);
    let curb_offset = rng.random_range(1.0..2.5);
    let turn_time = rng.random_range(0.0..0.6);
    let radius = (speed * speed / MAX_LATERAL_ACCEL).max(MIN_TURN_RADIUS);
    let motion = PoiMotion {
        plan,
        x0: road_half + curb_offset,
        speed: if plan == Plan::Stop { 0.0 } else { speed },
        turn_time,
        radius,
    };
    let poi = track_from(
        AgentKind::Pedestrian,
        cfg,
        rotation,
        PEDESTRIAN_HALF_EXTENT,
        |tau| motion.at(tau),
    );

    // Map.
    let r = cfg.scene_radius;
    let road_len = (r * r - (road_half + 5.0).powi(2)).sqrt();
    let mut canvas = Canvas { polygons: Vec::new() };
    canvas.push(MapClass::Road, -road_half, -road_len, road_half, road_len);

    let y_turn = speed * turn_time;
    canvas.push(
        MapClass::Crosswalk,
        -road_half,
        y_turn - 0.5,
        road_half,
        y_turn + radius + 2.0,
    );

    let north = rng.random::<bool>();
    let y_int = if north {
        rng.random_range(38.0..46.0)
    } else {
        -rng.random_range(28.0..40.0)
    };
    let (int_lo, int_hi) = (y_int - road_half, y_int + road_half);
    let cross_len = (r * r - int_lo.abs().max(int_hi.abs()).powi(2)).max(0.0).sqrt();
    if cross_len > road_half {
        canvas.push(MapClass::Road, -cross_len, int_lo, cross_len, int_hi);
    }
    canvas.push(MapClass::Intersection, -road_half, int_lo, road_half, int_hi);
    let extra_crosswalks = [
        (int_hi + 0.5, int_hi + 3.5),
        (int_lo - 3.5, int_lo - 0.5),
    ];
    for (y0, y1) in extra_crosswalks.iter().take(cfg.crosswalks - 1) {
        canvas.push(MapClass::Crosswalk, -road_half, *y0, road_half, *y1);
    }

    // Lanes: indices < lanes_per_direction run south (west half), the rest north.
    let lanes = 2 * cfg.lanes_per_direction;
    let left_class = if rng.random::<bool>() {
        MapClass::ProtectedLeft
    } else {
        MapClass::UnprotectedLeft
    };
    let outer_right = rng.random::<bool>();
    let approach = 30.0;
    for i in 0..lanes {
        let x0 = -road_half + LANE_WIDTH * i as f64;
        let x1 = x0 + LANE_WIDTH;
        let northbound = i >= cfg.lanes_per_direction;
        let (a0, a1) = if northbound {
            ((int_lo - approach).max(-road_len), int_lo)
        } else {
            (int_hi, (int_hi + approach).min(road_len))
        };
        let inner = i + 1 == cfg.lanes_per_direction || i == cfg.lanes_per_direction;
        let outer = i == 0 || i + 1 == lanes;
        let turn_class = if inner && cfg.lanes_per_direction > 1 {
            left_class
        } else if outer && outer_right {
            MapClass::RightTurn
        } else {
            MapClass::StraightLane
        };
        canvas.push(turn_class, x0, a0, x1, a1);
        canvas.push(light_state.lane_class(), x0, a0, x1, a1);
        // Lane parts outside the approach carry no turn.
        canvas.push(MapClass::StraightLane, x0, -road_len, x1, a0.min(int_lo));
        canvas.push(MapClass::StraightLane, x0, a1.max(int_hi), x1, road_len);
        if i > 0 {
            canvas.push(MapClass::LaneMarker, x0 - 0.15, -road_len, x0 + 0.15, road_len);
        }
    }
    canvas.push(MapClass::BikeLane, road_half - 1.5, -road_len, road_half, road_len);
    if rng.random::<bool>() {
        canvas.push(MapClass::BusLane, -road_half, -road_len, -road_half + LANE_WIDTH, road_len);
    }
    let side_class = if rng.random::<bool>() {
        MapClass::StopLane
    } else {
        MapClass::YieldLane
    };
    let side_len = 20.0f64.min(cross_len - road_half);
    if side_len > 0.0 {
        canvas.push(side_class, road_half, int_lo, road_half + side_len, y_int);
        canvas.push(side_class, -road_half - side_len, y_int, -road_half, int_hi);
    }

    // Other agents.
    let mut others = Vec::with_capacity(cfg.pedestrians + cfg.vehicles);
    for _ in 0..cfg.pedestrians {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = side * (road_half + rng.random_range(1.0..3.5));
        let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let v = sample_speed(&mut rng, cfg);
        let y0 = rng.random_range(-20.0..20.0);
        let heading = dir * FRAC_PI_2;
        others.push(track_from(
            AgentKind::Pedestrian,
            cfg,
            rotation,
            PEDESTRIAN_HALF_EXTENT,
            |tau| ([x, y0 + dir * v * tau], heading),
        ));
    }
    for _ in 0..cfg.vehicles {
        let lane = rng.random_range(0..lanes);
        let x = -road_half + LANE_WIDTH * (lane as f64 + 0.5);
        let dir = if lane >= cfg.lanes_per_direction { 1.0 } else { -1.0 };
        let v = rng.random_range(4.0..12.0);
        let y0 = rng.random_range(-40.0..40.0);
        let heading = dir * FRAC_PI_2;
        others.push(track_from(
            AgentKind::Vehicle,
            cfg,
            rotation,
            VEHICLE_HALF_EXTENT,
            |tau| ([x, y0 + dir * v * tau], heading),
        ));
    }

    let map = SemanticMap {
        polygons: canvas
            .polygons
            .into_iter()
            .map(|mp| MapPolygon {
                class: mp.class,
                polygon: mp.polygon.map(|p| rotate(p, rotation)),
            })
            .collect(),
    };
    let scenario = Scenario {
        seed,
        scene_radius: r,
        map,
        poi,
        others,
        light_state,
        plan,
    };
    check_extent(&scenario)?;
    Ok(scenario)
}

fn check_extent(s: &Scenario) -> Result<()> {
    let limit = s.scene_radius * (1.0 + 1e-12);
    let inside = |p: &[f64; 2]| p[0].hypot(p[1]) <= limit;
    if !s.poi.future_positions().iter().all(inside) {
        return Err(DrfError::InfeasibleConfig(
            "PoI future leaves the scene extent".into(),
        ));
    }
    if !s
        .map
        .polygons
        .iter()
        .all(|mp| mp.polygon.vertices().iter().all(inside))
    {
        return Err(DrfError::InfeasibleConfig(
            "map polygon leaves the scene extent".into(),
        ));
    }
    Ok(())
}

/// Perception noise: isotropic position jitter and independent frame drops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerceptionNoise {
    pub position_sd: f64,
    pub drop_prob: f64,
}

/// Jitter and drop past observations of every agent. Future (label) frames are
/// untouched and the PoI always keeps its three most recent past frames.
pub fn perturb_perception(s: &Scenario, seed: u64, noise: PerceptionNoise) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = (noise.position_sd > 0.0)
        .then(|| Normal::new(0.0, noise.position_sd).expect("finite jitter"));
    let mut out = s.clone();
    let tracks = std::iter::once((&mut out.poi, true)).chain(out.others.iter_mut().map(|t| (t, false)));
    for (track, protect) in tracks {
        let past = track.past_frames;
        for i in 0..=past {
            let (dx, dy) = match &jitter {
                Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            let drop = rng.random::<f64>() < noise.drop_prob;
            if !track.observed[i] {
                continue;
            }
            if jitter.is_some() {
                track.states[i].position[0] += dx;
                track.states[i].position[1] += dy;
            }
            let protected = protect && i + PROTECTED_FRAMES > past;
            if drop && !protected {
                track.observed[i] = false;
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    count: usize,
}

/// Serialize scenarios into the `drf-scn/1` text form.
pub fn dataset_to_string(scenarios: &[Scenario]) -> String {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        count: scenarios.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in scenarios {
        out.push_str(&serde_json::to_string(s).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

fn parse_error(line: usize, e: serde_json::Error) -> DrfError {
    DrfError::Parse {
        line,
        column: e.column(),
        msg: e.to_string(),
    }
}

/// Parse the `drf-scn/1` text form.
pub fn dataset_from_reader(reader: impl BufRead) -> Result<Vec<Scenario>> {
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.ok_or(DrfError::Parse {
        line: 1,
        column: 0,
        msg: "empty dataset file".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_error(1, e))?;
    if header.schema != DATASET_SCHEMA {
        return Err(DrfError::Version {
            found: header.schema,
            expected: DATASET_SCHEMA.into(),
        });
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_error(i + 2, e))?);
    }
    if out.len() != header.count {
        return Err(DrfError::Parse {
            line: out.len() + 2,
            column: 0,
            msg: format!("header promises {} records, found {}", header.count, out.len()),
        });
    }
    Ok(out)
}

pub fn save_dataset(scenarios: &[Scenario], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(dataset_to_string(scenarios).as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    dataset_from_reader(BufReader::new(fs::File::open(path)?))
}

/// SHA-256 of the canonical text form, hex encoded.
pub fn content_hash(scenarios: &[Scenario]) -> String {
    let digest = Sha256::digest(dataset_to_string(scenarios).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
