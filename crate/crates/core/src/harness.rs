//! Closed-loop simulation: render, act, optionally smooth, apply faults,
//! step the vehicle and log. Also demonstration collection and synthetic
//! road generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraConfig, CameraError};
use crate::dataset::{Dataset, DatasetError, Sample, FRAMES_DIR, MANIFEST_FILE};
use crate::expert::{self, ExpertError, ExpertParams};
use crate::geometry::{Centerline, GeometryError, LaneLayout, LanePose, Point2};
use crate::metrics;
use crate::policy::{self, PolicyError, PolicyNetwork, SmootherState};
use crate::vehicle::{curvature_to_swa, swa_to_curvature, VehicleError, VehicleParams, VehicleState};

/// Default simulation tick, 20 Hz.
pub const DEFAULT_TICK_DT: f64 = 0.05;
/// Runs stop this far before the end of the road.
pub const ROAD_END_MARGIN_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("initial pose: {0}")]
    InitialPose(GeometryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trajectory log {path}: {reason}")]
    LogFormat { path: PathBuf, reason: String },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub road: Centerline,
    pub lane_index: usize,
    /// Constant speed, m/s.
    pub speed: f64,
    pub duration: f64,
    pub tick_dt: f64,
    pub seed: u64,
    /// Arc length where the run starts, centered and aligned in the lane.
    pub start_s: f64,
    pub camera: CameraConfig,
    pub vehicle: VehicleParams,
}

impl Scenario {
    pub fn new(name: impl Into<String>, road: Centerline, speed: f64, duration: f64) -> Self {
        Self {
            name: name.into(),
            road,
            lane_index: 0,
            speed,
            duration,
            tick_dt: DEFAULT_TICK_DT,
            seed: 0,
            start_s: 0.0,
            camera: CameraConfig::default(),
            vehicle: VehicleParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidScenario(m));
        if !(self.tick_dt > 0.0) {
            return bad(format!("tick_dt {} must be > 0", self.tick_dt));
        }
        if !(self.speed > 0.0) {
            return bad(format!("speed {} must be > 0", self.speed));
        }
        if !(self.duration >= 0.0) {
            return bad(format!("duration {} must be >= 0", self.duration));
        }
        if !(self.start_s >= 0.0 && self.start_s < self.road.length()) {
            return bad(format!("start_s {} outside the road", self.start_s));
        }
        self.road.lanes().check_lane(self.lane_index)?;
        self.vehicle.validate()?;
        self.camera.validate()?;
        Ok(())
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.tick_dt).round() as usize
    }

    /// Vehicle centered in its lane and aligned with the road at `start_s`.
    pub fn initial_state(&self) -> Result<VehicleState, HarnessError> {
        let lat = self.road.lanes().lane_center_offset(self.lane_index);
        let (p, heading) = self.road.frame_at(self.start_s, lat).map_err(HarnessError::InitialPose)?;
        Ok(VehicleState::new(p.x, p.y, heading, self.speed))
    }

    pub fn expedition_id(&self) -> String {
        format!("{}-{}", self.name, self.seed)
    }
}

/// Steering wheel held at `swa_override` for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub t_start: f64,
    pub duration: f64,
    pub swa_override: f64,
}

impl FaultEvent {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.duration > 0.0) {
            return Err(HarnessError::InvalidFault(format!("duration {} must be > 0", self.duration)));
        }
        if !self.t_start.is_finite() || !self.swa_override.is_finite() {
            return Err(HarnessError::InvalidFault("values must be finite".into()));
        }
        Ok(())
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_start + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Completed,
    /// The vehicle left the road.
    Lost,
    RoadEnd,
}

/// State at the start of a tick and the command applied during it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    /// Applied path curvature.
    pub kappa_cmd: f64,
    pub swa: f64,
    pub y_off: f64,
    pub d_l: f64,
    pub d_r: f64,
    pub a_lat: f64,
    pub fault: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub rows: Vec<LogRow>,
    pub termination: TerminationReason,
}

const LOG_HEADER: &str = "t,x,y,psi,v,kappa_cmd,swa,y_off,d_l,d_r,a_lat,fault";

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 + self.rows.len() * 180);
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            for v in [r.t, r.x, r.y, r.psi, r.v, r.kappa_cmd, r.swa, r.y_off, r.d_l, r.d_r, r.a_lat] {
                let _ = write!(out, "{v:.8e},");
            }
            out.push_str(if r.fault { "1\n" } else { "0\n" });
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_csv()).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
    }

    /// Reads a log written by [`TrajectoryLog::save_csv`]. The tick is taken
    /// from the first two rows; termination is not stored and reads back as
    /// completed.
    pub fn load_csv(path: &Path) -> Result<Self, HarnessError> {
        let fmt = |reason: String| HarnessError::LogFormat { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(fmt("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(fmt(format!("row {} has {} fields", i + 1, f.len())));
            }
            let mut v = [0.0; 11];
            for (k, s) in f[..11].iter().enumerate() {
                v[k] = s.parse().map_err(|e| fmt(format!("row {}: {e}", i + 1)))?;
            }
            rows.push(LogRow {
                t: v[0],
                x: v[1],
                y: v[2],
                psi: v[3],
                v: v[4],
                kappa_cmd: v[5],
                swa: v[6],
                y_off: v[7],
                d_l: v[8],
                d_r: v[9],
                a_lat: v[10],
                fault: f[11] == "1",
            });
        }
        let dt = if rows.len() >= 2 { rows[1].t - rows[0].t } else { DEFAULT_TICK_DT };
        Ok(Self { dt, rows, termination: TerminationReason::Completed })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Driver<'a> {
    Policy(&'a PolicyNetwork),
    /// Expert with its own seeded noise stream.
    Expert(ExpertParams),
    /// Follows the true lane-center curvature.
    Optimal,
}

struct DriverState<'a> {
    driver: Driver<'a>,
    rng: ChaCha8Rng,
}

impl<'a> DriverState<'a> {
    fn new(driver: Driver<'a>) -> Self {
        let seed = match driver {
            Driver::Expert(p) => p.seed,
            _ => 0,
        };
        Self { driver, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn act(
        &mut self,
        sc: &Scenario,
        state: &VehicleState,
        pose: &LanePose,
        frame_seed: u64,
    ) -> Result<f64, HarnessError> {
        Ok(match self.driver {
            Driver::Policy(net) => {
                let frame = camera::render(&sc.road, state, sc.lane_index, &sc.camera, frame_seed)?;
                policy::infer(net, &frame)?
            }
            Driver::Expert(p) => expert::expert_action(pose, &sc.road, &p, &sc.vehicle, &mut self.rng),
            Driver::Optimal => {
                // Midpoint of the coming step along the lane.
                let k0 = sc.road.curvature_clamped(pose.s);
                let y = sc.road.lanes().lane_center_offset(sc.lane_index);
                let ds = state.v * sc.tick_dt / 2.0 / (1.0 - k0 * y).max(0.1);
                let s = (pose.s + ds).min(sc.road.length());
                expert::optimal_action(&sc.road, s, sc.lane_index)?
            }
        })
    }
}

/// Per-tick seed for camera noise.
pub fn frame_seed(scenario_seed: u64, tick: usize) -> u64 {
    scenario_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tick as u64)
}

/// A pose kick applied between ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Kick {
    lateral: f64,
    heading: f64,
}

struct KickSchedule {
    rng: ChaCha8Rng,
    exp: Exp<f64>,
    next_t: f64,
    cfg: expert::Perturbation,
}

impl KickSchedule {
    fn new(cfg: expert::Perturbation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_C1C5);
        let exp = Exp::new(1.0 / cfg.mean_interval_s).expect("interval validated");
        let next_t = exp.sample(&mut rng);
        Self { rng, exp, next_t, cfg }
    }

    fn poll(&mut self, t: f64) -> Option<Kick> {
        if t < self.next_t {
            return None;
        }
        self.next_t = t + self.exp.sample(&mut self.rng);
        let l = self.cfg.max_lateral_m;
        let h = self.cfg.max_heading_rad;
        Some(Kick {
            lateral: if l > 0.0 { self.rng.random_range(-l..=l) } else { 0.0 },
            heading: if h > 0.0 { self.rng.random_range(-h..=h) } else { 0.0 },
        })
    }
}

fn apply_kick(state: &VehicleState, road: &Centerline, pose: &LanePose, k: Kick) -> VehicleState {
    let heading = road.heading_at(pose.s).unwrap_or(state.psi);
    VehicleState {
        x: state.x - k.lateral * heading.sin(),
        y: state.y + k.lateral * heading.cos(),
        psi: state.psi + k.heading,
        ..*state
    }
}

/// Observer invoked once per tick with the pose, the logged row and the
/// vehicle state before the step.
pub trait TickObserver {
    fn observe(&mut self, tick: usize, state: &VehicleState, row: &LogRow) -> Result<(), HarnessError>;
}

impl TickObserver for () {
    fn observe(&mut self, _: usize, _: &VehicleState, _: &LogRow) -> Result<(), HarnessError> {
        Ok(())
    }
}

/// Runs one closed loop. `smoothing` is the smoother's gamma.
pub fn run_closed_loop(
    sc: &Scenario,
    driver: Driver<'_>,
    faults: &[FaultEvent],
    smoothing: Option<f64>,
) -> Result<TrajectoryLog, HarnessError> {
    run_observed(sc, driver, faults, smoothing, None, &mut ())
}

fn run_observed(
    sc: &Scenario,
    driver: Driver<'_>,
    faults: &[FaultEvent],
    smoothing: Option<f64>,
    perturbation: Option<expert::Perturbation>,
    observer: &mut dyn TickObserver,
) -> Result<TrajectoryLog, HarnessError> {
    sc.validate()?;
    for f in faults {
        f.validate()?;
    }
    if let Driver::Expert(p) = driver {
        p.validate()?;
    }
    let mut smoother = smoothing.map(|g| SmootherState::new(g, 0.0)).transpose()?;
    let mut state = sc.initial_state()?;
    sc.road.localize(state.x, state.y, state.psi, sc.lane_index).map_err(HarnessError::InitialPose)?;
    let mut ds = DriverState::new(driver);
    let mut kicks = perturbation.map(|p| KickSchedule::new(p, sc.seed));
    let lane_w = sc.road.lane_width();
    let mut rows = Vec::with_capacity(sc.ticks());
    let mut termination = TerminationReason::Completed;
    for k in 0..sc.ticks() {
        let t = k as f64 * sc.tick_dt;
        let mut pose = match sc.road.localize(state.x, state.y, state.psi, sc.lane_index) {
            Ok(p) => p,
            Err(GeometryError::Lost { .. }) => {
                termination = TerminationReason::Lost;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(kick) = kicks.as_mut().and_then(|s| s.poll(t)) {
            state = apply_kick(&state, &sc.road, &pose, kick);
            pose = sc.road.localize(state.x, state.y, state.psi, sc.lane_index)?;
        }
        if pose.s >= sc.road.length() - ROAD_END_MARGIN_M {
            termination = TerminationReason::RoadEnd;
            break;
        }
        let mut kappa = ds.act(sc, &state, &pose, frame_seed(sc.seed, k))?;
        if let Some(sm) = smoother.as_mut() {
            if k == 0 {
                sm.a_bar = kappa;
            }
            kappa = sm.smooth(kappa);
        }
        kappa = sc.vehicle.clamp_curvature(kappa);
        let mut swa = curvature_to_swa(kappa, &sc.vehicle)?;
        let fault = faults.iter().rev().find(|f| f.active(t));
        if let Some(f) = fault {
            swa = f.swa_override.clamp(-sc.vehicle.max_swa, sc.vehicle.max_swa);
            kappa = swa_to_curvature(swa, &sc.vehicle)?;
        }
        let (d_l, d_r) = metrics::marking_distances(pose.y_off, lane_w, sc.vehicle.width);
        let row = LogRow {
            t,
            x: state.x,
            y: state.y,
            psi: state.psi,
            v: state.v,
            kappa_cmd: kappa,
            swa,
            y_off: pose.y_off,
            d_l,
            d_r,
            a_lat: metrics::lateral_accel(state.v, kappa),
            fault: fault.is_some(),
        };
        observer.observe(k, &state, &row)?;
        rows.push(row);
        state = state.step(kappa, sc.tick_dt);
    }
    Ok(TrajectoryLog { dt: sc.tick_dt, rows, termination })
}

struct FrameWriter<'a> {
    sc: &'a Scenario,
    dir: PathBuf,
    id: String,
    samples: Vec<Sample>,
}

impl TickObserver for FrameWriter<'_> {
    fn observe(&mut self, tick: usize, state: &VehicleState, row: &LogRow) -> Result<(), HarnessError> {
        let frame = camera::render(&self.sc.road, state, self.sc.lane_index, &self.sc.camera, frame_seed(self.sc.seed, tick))?;
        let path = self.dir.join(format!("{}_{tick:06}.png", self.id));
        frame.save_png(&path)?;
        self.samples.push(Sample {
            frame_path: path,
            swa: row.swa,
            speed: row.v,
            timestamp: row.t,
            expedition_id: self.id.clone(),
        });
        Ok(())
    }
}

/// Drives `sc` with the expert, writing one frame and manifest row per tick
/// into `out`. Samples are appended to an existing manifest there. Returns
/// the samples of this run together with its trajectory.
pub fn collect(sc: &Scenario, expert: &ExpertParams, out: &Path) -> Result<(Dataset, TrajectoryLog), HarnessError> {
    let frames = out.join(FRAMES_DIR);
    fs::create_dir_all(&frames).map_err(|source| HarnessError::Io { path: frames.clone(), source })?;
    let mut writer = FrameWriter { sc, dir: frames, id: sc.expedition_id(), samples: Vec::new() };
    let log = run_observed(sc, Driver::Expert(*expert), &[], None, expert.perturbation, &mut writer)?;
    let manifest = out.join(MANIFEST_FILE);
    let mut all = if manifest.exists() { Dataset::load(&manifest)? } else { Dataset::default() };
    all.samples.retain(|s| s.expedition_id != writer.id);
    all.samples.extend(writer.samples.iter().cloned());
    all.save(&manifest)?;
    let mut this = Dataset::new(writer.samples);
    this.manifest_path = Some(manifest);
    Ok((this, log))
}

/// Synthetic road construction.
pub mod roads {
    use super::*;

    /// Integration step for curvature profiles, meters.
    const PROFILE_DS: f64 = 0.25;

    fn build(points: Vec<Point2>, lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        Centerline::new(points, lanes)?.resample(crate::geometry::DEFAULT_DS)
    }

    pub fn straight(length: f64, lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        let n = (length / PROFILE_DS).ceil().max(2.0) as usize;
        build((0..=n).map(|i| Point2::new(length * i as f64 / n as f64, 0.0)).collect(), lanes)
    }

    /// Arc of signed radius (positive turns left) and given length.
    pub fn circle(radius: f64, length: f64, lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        from_profile(&[Segment::Arc { kappa: 1.0 / radius, length }], lanes)
    }

    /// Curvature ramping linearly from `k0` to `k1`.
    pub fn clothoid(k0: f64, k1: f64, length: f64, lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        from_profile(&[Segment::Ramp { k0, k1, length }], lanes)
    }

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    pub enum Segment {
        Arc { kappa: f64, length: f64 },
        Ramp { k0: f64, k1: f64, length: f64 },
    }

    impl Segment {
        fn length(&self) -> f64 {
            match *self {
                Segment::Arc { length, .. } | Segment::Ramp { length, .. } => length,
            }
        }

        fn kappa(&self, u: f64) -> f64 {
            match *self {
                Segment::Arc { kappa, .. } => kappa,
                Segment::Ramp { k0, k1, length } => k0 + (k1 - k0) * u / length,
            }
        }
    }

    /// Integrates a piecewise curvature profile from the origin heading +x.
    pub fn from_profile(segments: &[Segment], lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        let mut pts = vec![Point2::new(0.0, 0.0)];
        let (mut x, mut y, mut psi) = (0.0, 0.0, 0.0);
        for seg in segments {
            let n = (seg.length() / PROFILE_DS).ceil().max(1.0) as usize;
            let h = seg.length() / n as f64;
            for i in 0..n {
                let k = seg.kappa((i as f64 + 0.5) * h);
                let mid = psi + 0.5 * k * h;
                x += h * mid.cos();
                y += h * mid.sin();
                psi += k * h;
                pts.push(Point2::new(x, y));
            }
        }
        build(pts, lanes)
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum RoadKind {
        Highway,
        Country,
    }

    impl RoadKind {
        /// Range of |curvature| for the constant arcs, 1/m.
        fn curvature_range(self) -> (f64, f64) {
            match self {
                RoadKind::Highway => (1.0 / 2500.0, 1.0 / 700.0),
                RoadKind::Country => (1.0 / 900.0, 1.0 / 220.0),
            }
        }

        /// Typical driving speed, m/s.
        pub fn speed(self) -> f64 {
            match self {
                RoadKind::Highway => 27.78,
                RoadKind::Country => 19.44,
            }
        }
    }

    /// Straights and arcs joined by clothoid transitions, at least `length` long.
    pub fn mixed_profile(kind: RoadKind, length: f64, seed: u64) -> Vec<Segment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kmin, kmax) = kind.curvature_range();
        let mut segs = vec![Segment::Arc { kappa: 0.0, length: 60.0 }];
        let mut total = 60.0;
        while total < length {
            let straight = rng.random_range(50.0..300.0);
            let k = rng.random_range(kmin..kmax) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let ramp = rng.random_range(40.0..120.0);
            let arc = rng.random_range(60.0..350.0);
            segs.push(Segment::Arc { kappa: 0.0, length: straight });
            segs.push(Segment::Ramp { k0: 0.0, k1: k, length: ramp });
            segs.push(Segment::Arc { kappa: k, length: arc });
            segs.push(Segment::Ramp { k0: k, k1: 0.0, length: ramp });
            total += straight + 2.0 * ramp + arc;
        }
        segs
    }

    pub fn mixed(kind: RoadKind, length: f64, seed: u64, lanes: LaneLayout) -> Result<Centerline, GeometryError> {
        from_profile(&mixed_profile(kind, length, seed), lanes)
    }
}

#[cfg(test)]
mod tests {
    use super::roads::*;
    use super::*;

    fn lanes() -> LaneLayout {
        LaneLayout::default()
    }

    #[test]
    fn optimal_driver_tracks_circle() {
        for r in [100.0, -60.0, 300.0] {
            let road = circle(r, 900.0, lanes()).unwrap();
            let sc = Scenario::new("circle", road, 19.44, 40.0);
            let log = run_closed_loop(&sc, Driver::Optimal, &[], None).unwrap();
            assert_eq!(log.termination, TerminationReason::Completed);
            let worst = log.rows.iter().map(|r| r.y_off.abs()).fold(0.0, f64::max);
            assert!(worst < 0.02, "r {r}: {worst}");
        }
    }

    #[test]
    fn optimal_driver_on_inner_and_outer_lanes() {
        let road = circle(150.0, 900.0, LaneLayout::new(2, 3.75).unwrap()).unwrap();
        for lane in [0, 1] {
            let mut sc = Scenario::new("c", road.clone(), 27.78, 25.0);
            sc.lane_index = lane;
            let log = run_closed_loop(&sc, Driver::Optimal, &[], None).unwrap();
            let worst = log.rows.iter().map(|r| r.y_off.abs()).fold(0.0, f64::max);
            assert!(worst < 0.02, "lane {lane}: {worst}");
        }
    }

    fn settled_worst(road: Centerline, speed: f64, settle_m: f64) -> f64 {
        let duration = (road.length() - 30.0) / speed;
        let sc = Scenario::new("e", road, speed, duration);
        let log = run_closed_loop(&sc, Driver::Expert(ExpertParams::noise_free()), &[], None).unwrap();
        assert_eq!(log.termination, TerminationReason::Completed);
        log.rows.iter().filter(|r| r.t * speed > settle_m).map(|r| r.y_off.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn noise_free_expert_keeps_lane() {
        for speed in [13.9, 19.44, 27.78] {
            assert!(settled_worst(straight(600.0, lanes()).unwrap(), speed, 50.0) < 0.05);
            assert!(settled_worst(circle(200.0, 800.0, lanes()).unwrap(), speed, 50.0) < 0.05);
            assert!(settled_worst(clothoid(0.0, 1.0 / 150.0, 600.0, lanes()).unwrap(), speed, 50.0) < 0.05);
            let mixed = mixed(RoadKind::Country, 1500.0, 3, lanes()).unwrap();
            assert!(settled_worst(mixed, speed, 50.0) < 0.05);
        }
    }

    #[test]
    fn expert_recovers_from_fault() {
        let road = straight(1200.0, lanes()).unwrap();
        let sc = Scenario::new("fault", road, 19.44, 20.0);
        let fault = FaultEvent { t_start: 2.0, duration: 0.5, swa_override: 1.0 };
        let log = run_closed_loop(&sc, Driver::Expert(ExpertParams::noise_free()), &[fault], None).unwrap();
        let end_fault = log.rows.iter().position(|r| r.t >= 2.5).unwrap();
        assert!(log.rows[end_fault].y_off.abs() > 0.1);
        let limit = log.rows[end_fault].t + 150.0 / 19.44;
        let after: Vec<&LogRow> = log.rows.iter().filter(|r| r.t >= limit).collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|r| r.y_off.abs() < 0.05));
        for r in &log.rows {
            assert_eq!(r.fault, fault.active(r.t));
            if r.fault {
                assert_eq!(r.swa, 1.0);
            }
        }
    }

    #[test]
    fn zero_duration_gives_empty_log() {
        let sc = Scenario::new("z", straight(100.0, lanes()).unwrap(), 10.0, 0.0);
        let log = run_closed_loop(&sc, Driver::Optimal, &[], None).unwrap();
        assert!(log.is_empty());
        assert_eq!(log.termination, TerminationReason::Completed);
    }

    #[test]
    fn lost_vehicle_terminates_early() {
        let sc = Scenario::new("lost", straight(2000.0, lanes()).unwrap(), 20.0, 30.0);
        let fault = FaultEvent { t_start: 0.5, duration: 20.0, swa_override: 3.0 };
        let log = run_closed_loop(&sc, Driver::Optimal, &[fault], None).unwrap();
        assert_eq!(log.termination, TerminationReason::Lost);
        assert!(log.len() < sc.ticks());
    }

    #[test]
    fn road_end_terminates() {
        let sc = Scenario::new("end", straight(100.0, lanes()).unwrap(), 20.0, 10.0);
        let log = run_closed_loop(&sc, Driver::Optimal, &[], None).unwrap();
        assert_eq!(log.termination, TerminationReason::RoadEnd);
    }

    #[test]
    fn runs_are_deterministic_and_consistent() {
        let road = mixed(RoadKind::Highway, 800.0, 1, lanes()).unwrap();
        let sc = Scenario::new("d", road, 27.78, 20.0);
        let p = ExpertParams { seed: 5, ..ExpertParams::default() };
        let a = run_closed_loop(&sc, Driver::Expert(p), &[], Some(0.1)).unwrap();
        let b = run_closed_loop(&sc, Driver::Expert(p), &[], Some(0.1)).unwrap();
        assert_eq!(a, b);
        for (i, r) in a.rows.iter().enumerate() {
            assert_eq!(r.a_lat, r.v * r.v * r.kappa_cmd.abs());
            assert_eq!(r.t, i as f64 * 0.05);
        }
        let c = run_closed_loop(&sc, Driver::Expert(ExpertParams { seed: 6, ..p }), &[], Some(0.1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn log_csv_round_trip() {
        let sc = Scenario::new("csv", circle(100.0, 400.0, lanes()).unwrap(), 15.0, 3.0);
        let log = run_closed_loop(&sc, Driver::Optimal, &[], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.save_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x,y,psi,v,kappa_cmd,swa,y_off,d_l,d_r,a_lat,fault\n"));
        let back = TrajectoryLog::load_csv(&p).unwrap();
        assert_eq!(back.len(), log.len());
        for (a, b) in back.rows.iter().zip(&log.rows) {
            assert!((a.x - b.x).abs() <= 1e-8 * b.x.abs().max(1e-300));
            assert!((a.kappa_cmd - b.kappa_cmd).abs() <= 1e-8 * b.kappa_cmd.abs());
        }
    }

    #[test]
    fn collect_writes_frames_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let road = circle(150.0, 600.0, lanes()).unwrap();
        let mut sc = Scenario::new("col", road, 19.44, 1.0);
        sc.camera.image_width = 160;
        sc.camera.image_height = 120;
        sc.seed = 4;
        let p = ExpertParams { seed: 2, ..ExpertParams::default() };
        let (d, log) = collect(&sc, &p, dir.path()).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.expeditions(), vec!["col-4".to_string()]);
        let loaded = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.samples, d.samples);
        for (s, r) in d.samples.iter().zip(&log.rows) {
            assert!(s.swa.abs() <= 9.0);
            assert!(s.frame_path.exists());
            let k = swa_to_curvature(s.swa, &sc.vehicle).unwrap();
            assert!((k - r.kappa_cmd).abs() < 1e-9);
        }
        sc.seed = 5;
        collect(&sc, &p, dir.path()).unwrap();
        assert_eq!(Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap().len(), 40);
    }

    #[test]
    fn perturbed_collection_kicks_the_vehicle() {
        let road = straight(3000.0, lanes()).unwrap();
        let sc = Scenario::new("kick", road, 19.44, 60.0);
        let p = ExpertParams { perturbation: Some(expert::Perturbation::default()), ..ExpertParams::noise_free() };
        let log = run_observed(&sc, Driver::Expert(p), &[], None, p.perturbation, &mut ()).unwrap();
        assert_eq!(log.termination, TerminationReason::Completed);
        let worst = log.rows.iter().map(|r| r.y_off.abs()).fold(0.0, f64::max);
        assert!(worst > 0.3, "{worst}");
        let plain = run_closed_loop(&sc, Driver::Expert(p), &[], None).unwrap();
        assert!(plain.rows.iter().all(|r| r.y_off.abs() < 1e-9));
    }

    #[test]
    fn generated_roads_have_expected_curvature() {
        let c = circle(-80.0, 300.0, lanes()).unwrap();
        assert!((c.curvature_at(150.0).unwrap() + 1.0 / 80.0).abs() < 1e-4);
        let cl = clothoid(0.0, 0.01, 400.0, lanes()).unwrap();
        assert!((cl.curvature_at(200.0).unwrap() - 0.005).abs() < 1e-4);
        let m = mixed(RoadKind::Country, 5000.0, 11, lanes()).unwrap();
        assert!(m.length() >= 5000.0);
        assert!(m.curvatures().iter().all(|k| k.abs() <= 1.0 / 220.0 + 1e-4));
        assert_eq!(mixed(RoadKind::Country, 2000.0, 11, lanes()).unwrap(), mixed(RoadKind::Country, 2000.0, 11, lanes()).unwrap());
    }
}
