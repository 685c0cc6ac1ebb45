//! `lanekeep` command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lanekeep::camera::{self, GrayFrame};
use lanekeep::dataset::{self, Dataset, PruneConfig};
use lanekeep::geometry::{self, Centerline, GeoPoint, LaneLayout};
use lanekeep::harness::roads::{self, RoadKind};
use lanekeep::harness::{self, Driver, FaultEvent, Scenario, TrajectoryLog};
use lanekeep::metrics::{self, MetricsReport};
use lanekeep::policy::{self, PolicyNetwork};
use lanekeep::vehicle::VehicleState;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lanekeep", version, about = "Vision-based lane keeping by direct imitation learning")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (scenario, expert noise, pruning, training).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or import road centerlines.
    Roads {
        #[command(subcommand)]
        action: RoadsCommand,
    },
    /// Record expert demonstrations (frames and manifest) on a road.
    Collect(CollectArgs),
    /// Cap per-bin sample counts of a manifest's steering histogram.
    Prune(PruneArgs),
    /// Train a steering policy on a manifest.
    Train(TrainArgs),
    /// Drive a road in closed loop and report lane-keeping and comfort metrics.
    Eval(EvalArgs),
    /// Drive a road in closed loop and write the trajectory log.
    Drive(DriveArgs),
    /// Compute a saliency mask for a camera frame.
    Saliency(SaliencyArgs),
    /// Run the live websocket bridge for driving clients.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum RoadsCommand {
    /// Generate a synthetic road.
    Gen(RoadGenArgs),
    /// Import a lat/lon polyline (CSV with lat,lon columns or a road JSON file).
    Import(RoadImportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoadGenKind {
    Straight,
    Circle,
    Clothoid,
    Highway,
    Country,
}

#[derive(Debug, Args)]
pub struct LaneArgs {
    /// Number of lanes.
    #[arg(long, default_value_t = 1)]
    pub lanes: usize,
    /// Lane width in meters.
    #[arg(long, default_value_t = geometry::DEFAULT_LANE_WIDTH)]
    pub lane_width: f64,
}

impl LaneArgs {
    fn layout(&self) -> Result<LaneLayout> {
        Ok(LaneLayout::new(self.lanes, self.lane_width)?)
    }
}

#[derive(Debug, Args)]
pub struct RoadGenArgs {
    /// Road shape.
    #[arg(long, value_enum)]
    pub kind: RoadGenKind,
    /// Road length in meters.
    #[arg(long, default_value_t = 1000.0)]
    pub length: f64,
    /// Signed radius in meters for circles (positive turns left).
    #[arg(long, default_value_t = 100.0)]
    pub radius: f64,
    /// Start curvature in 1/m for clothoids.
    #[arg(long, default_value_t = 0.0)]
    pub k0: f64,
    /// End curvature in 1/m for clothoids.
    #[arg(long, default_value_t = 0.01)]
    pub k1: f64,
    #[command(flatten)]
    pub lanes: LaneArgs,
    /// Output road JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RoadImportArgs {
    /// Input CSV (lat,lon header) or road JSON with lat/lon points.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub lanes: LaneArgs,
    /// Output road JSON in local meters.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Road JSON file (overrides the config's scenario.road).
    #[arg(long)]
    pub road: Option<PathBuf>,
    /// Vehicle speed in m/s.
    #[arg(long)]
    pub speed: Option<f64>,
    /// Run duration in seconds; defaults to driving the whole road.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Lane index, 0 is the rightmost lane.
    #[arg(long)]
    pub lane: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Name used in the expedition id.
    #[arg(long, default_value = "expedition")]
    pub name: String,
    /// Standard deviation of the expert's curvature noise in 1/m.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Enable random pose kicks that the expert recovers from.
    #[arg(long)]
    pub perturb: bool,
    /// Dataset directory; samples are appended to its manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Input manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest CSV (frames are shared, not copied).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Histogram half range in radians.
    #[arg(long)]
    pub range: Option<f64>,
    /// Maximum samples per bin.
    #[arg(long)]
    pub cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training batches.
    #[arg(long)]
    pub batches: Option<usize>,
    /// Samples per batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dropout keep probability.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Write the per-batch loss as CSV.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriverKind {
    Policy,
    Expert,
    Optimal,
}

#[derive(Debug, Args)]
pub struct DriveArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Who steers.
    #[arg(long, value_enum, default_value_t = DriverKind::Policy)]
    pub driver: DriverKind,
    /// Model file, required for the policy driver.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Smooth the policy output with this factor in (0, 1].
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Steering fault as start_s,duration_s,swa_rad; repeatable.
    #[arg(long, value_parser = parse_fault)]
    pub fault: Vec<FaultEvent>,
    /// Trajectory log CSV to write.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub drive: DriveArgs,
    /// Evaluate an existing trajectory log instead of driving.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Penalty region width in meters.
    #[arg(long)]
    pub w: Option<f64>,
    /// Penalty shape in (0, 1).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comfort threshold.
    #[arg(long)]
    pub g: Option<f64>,
    /// Skip the optimal-driver reference run used for comfort ratios.
    #[arg(long)]
    pub no_reference: bool,
    /// Metrics report JSON to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Camera frame PNG; when absent a frame is rendered from --road at --s.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Road JSON to render from.
    #[arg(long)]
    pub road: Option<PathBuf>,
    /// Arc length in meters to render at.
    #[arg(long, default_value_t = 0.0)]
    pub s: f64,
    /// Lane index to render from.
    #[arg(long, default_value_t = 0)]
    pub lane: usize,
    /// Output mask PNG (68x183).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to listen on.
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Optional policy model for policy-drive mode.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory that recordings are appended to.
    #[arg(long)]
    pub record_dir: Option<PathBuf>,
}

fn parse_fault(s: &str) -> Result<FaultEvent, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected start_s,duration_s,swa_rad".into());
    }
    let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    let f = FaultEvent { t_start: num(parts[0])?, duration: num(parts[1])?, swa_override: num(parts[2])? };
    f.validate().map_err(|e| e.to_string())?;
    Ok(f)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn command() -> clap::Command {
    Cli::command()
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match cli.command {
        Command::Roads { action: RoadsCommand::Gen(a) } => roads_gen(&a),
        Command::Roads { action: RoadsCommand::Import(a) } => roads_import(&a),
        Command::Collect(a) => collect(&cfg, &a),
        Command::Prune(a) => prune(&cfg, &a),
        Command::Train(a) => train(&cfg, &a),
        Command::Drive(a) => drive(&cfg, &a).map(|_| ()),
        Command::Eval(a) => eval(&cfg, &a),
        Command::Saliency(a) => saliency(&cfg, &a),
        Command::Serve(a) => serve(&cfg, &a),
    }
}

fn roads_gen(a: &RoadGenArgs) -> Result<()> {
    let lanes = a.lanes.layout()?;
    let seed = 0;
    let road = match a.kind {
        RoadGenKind::Straight => roads::straight(a.length, lanes)?,
        RoadGenKind::Circle => roads::circle(a.radius, a.length, lanes)?,
        RoadGenKind::Clothoid => roads::clothoid(a.k0, a.k1, a.length, lanes)?,
        RoadGenKind::Highway => roads::mixed(RoadKind::Highway, a.length, seed, lanes)?,
        RoadGenKind::Country => roads::mixed(RoadKind::Country, a.length, seed, lanes)?,
    };
    geometry::save_road(&road, &a.out)?;
    println!("wrote {} ({:.1} m, {} points)", a.out.display(), road.length(), road.points().len());
    Ok(())
}

fn roads_import(a: &RoadImportArgs) -> Result<()> {
    let lanes = a.lanes.layout()?;
    let is_csv = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let road = if is_csv {
        let mut rdr = csv::Reader::from_path(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let mut pts = Vec::new();
        for rec in rdr.deserialize::<(f64, f64)>() {
            let (lat, lon) = rec.with_context(|| format!("parsing {}", a.input.display()))?;
            pts.push(GeoPoint::new(lat, lon)?);
        }
        let Some(origin) = pts.first().copied() else {
            bail!("{} has no points", a.input.display());
        };
        geometry::import_latlon(&pts, &origin, lanes)?.resample(geometry::DEFAULT_DS)?
    } else {
        geometry::load_road(&a.input)?.with_lanes(lanes)?
    };
    geometry::save_road(&road, &a.out)?;
    println!("wrote {} ({:.1} m)", a.out.display(), road.length());
    Ok(())
}

fn scenario(cfg: &RunConfig, a: &ScenarioArgs, name: &str) -> Result<Scenario> {
    let path = a.road.clone().or_else(|| cfg.scenario.road.clone()).context("no road given (use --road)")?;
    let road = geometry::load_road(&path).with_context(|| format!("loading road {}", path.display()))?;
    let speed = a.speed.unwrap_or(cfg.scenario.speed_mps);
    let full = (road.length() - cfg.scenario.start_s - harness::ROAD_END_MARGIN_M - 1.0).max(0.0) / speed;
    let duration = a.duration.or(cfg.scenario.duration_s).unwrap_or(full);
    let mut sc = Scenario::new(name, road, speed, duration);
    sc.lane_index = a.lane.unwrap_or(cfg.scenario.lane_index);
    sc.tick_dt = cfg.scenario.tick_dt;
    sc.start_s = cfg.scenario.start_s;
    sc.seed = cfg.scenario.seed;
    sc.camera = cfg.camera;
    sc.vehicle = cfg.vehicle;
    sc.validate()?;
    Ok(sc)
}

fn collect(cfg: &RunConfig, a: &CollectArgs) -> Result<()> {
    let sc = scenario(cfg, &a.scenario, &a.name)?;
    let mut expert = cfg.expert;
    if let Some(n) = a.noise_std {
        expert.noise_std = n;
    }
    if a.perturb && expert.perturbation.is_none() {
        expert.perturbation = Some(Default::default());
    }
    let (d, log) = harness::collect(&sc, &expert, &a.out)?;
    println!("collected {} samples as {} into {}", d.len(), sc.expedition_id(), a.out.display());
    if log.termination != harness::TerminationReason::Completed {
        println!("run ended early: {:?}", log.termination);
    }
    Ok(())
}

fn prune(cfg: &RunConfig, a: &PruneArgs) -> Result<()> {
    let d = Dataset::load(&a.manifest)?;
    let pc = PruneConfig {
        bins: a.bins.unwrap_or(cfg.prune.bins),
        swa_range: a.range.unwrap_or(cfg.prune.swa_range),
        cap: a.cap.unwrap_or(cfg.prune.cap),
        seed: cfg.prune.seed,
    };
    let mut out = dataset::prune(&d, &pc)?;
    out.save(&a.out)?;
    println!("pruned {} -> {} samples (cap {}, {} bins)", d.len(), out.len(), pc.cap, pc.bins);
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut tc = cfg.train;
    tc.batches = a.batches.unwrap_or(tc.batches);
    tc.batch = a.batch.unwrap_or(tc.batch);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.keep_prob = a.keep_prob.unwrap_or(tc.keep_prob);
    tc.validate()?;
    let d = Dataset::load(&a.manifest)?;
    if d.is_empty() {
        bail!("manifest {} has no samples", a.manifest.display());
    }
    let cache = dataset::FrameCache::load(&d, &cfg.vehicle)?;
    let every = (tc.batches / 20).max(1);
    let out = dataset::train_on_cache(&cache, &tc, |b, loss| {
        if b % every == 0 || b + 1 == tc.batches {
            eprintln!("batch {b}/{} mse {loss:.4e}", tc.batches);
        }
    })?;
    out.network.save(&a.out)?;
    if let Some(p) = &a.loss_log {
        dataset::save_loss_log(&out.loss_log, p)?;
    }
    println!("trained {} batches on {} samples, wrote {}", tc.batches, d.len(), a.out.display());
    Ok(())
}

fn load_model(path: Option<&Path>) -> Result<PolicyNetwork> {
    let p = path.context("the policy driver needs --model")?;
    PolicyNetwork::load(p).with_context(|| format!("loading model {}", p.display()))
}

fn drive(cfg: &RunConfig, a: &DriveArgs) -> Result<(Scenario, TrajectoryLog)> {
    let sc = scenario(cfg, &a.scenario, "drive")?;
    let model = match a.driver {
        DriverKind::Policy => Some(load_model(a.model.as_deref())?),
        _ => None,
    };
    let driver = match (a.driver, &model) {
        (DriverKind::Policy, Some(m)) => Driver::Policy(m),
        (DriverKind::Expert, _) => Driver::Expert(cfg.expert),
        _ => Driver::Optimal,
    };
    let log = harness::run_closed_loop(&sc, driver, &a.fault, a.smoothing)?;
    if let Some(p) = &a.log {
        log.save_csv(p)?;
    }
    println!("drove {} ticks ({:?})", log.len(), log.termination);
    Ok((sc, log))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    metadata: Metadata,
}

#[derive(Serialize)]
struct Metadata {
    generated_unix_s: u64,
    tool_version: &'static str,
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let mut pc = cfg.penalty;
    pc.w = a.w.unwrap_or(pc.w);
    pc.beta = a.beta.unwrap_or(pc.beta);
    let mut cc = cfg.comfort;
    cc.g = a.g.unwrap_or(cc.g);
    let (log, reference) = match &a.trajectory {
        Some(p) => (TrajectoryLog::load_csv(p)?, None),
        None => {
            let (sc, log) = drive(cfg, &a.drive)?;
            pc.validate(sc.road.lane_width(), sc.vehicle.width)?;
            let reference = if a.no_reference {
                None
            } else {
                Some(harness::run_closed_loop(&sc, Driver::Optimal, &[], None)?)
            };
            (log, reference)
        }
    };
    let report = metrics::evaluate(&log, reference.as_ref(), &pc, &cc)?;
    print_summary(&report);
    if let Some(p) = &a.report {
        let generated_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let file = ReportFile {
            report: &report,
            metadata: Metadata { generated_unix_s, tool_version: env!("CARGO_PKG_VERSION") },
        };
        fs::write(p, serde_json::to_string_pretty(&file)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    println!("ticks                  {} ({:.1} s, {:?})", r.ticks, r.duration_s, r.termination);
    println!("good position fraction {:.4}", r.good_position_fraction);
    println!("mean / max penalty     {:.4} / {:.4}", r.mean_penalty, r.max_penalty);
    println!("marking crossings      {}", r.marking_crossings);
    println!("0.5 m margin fraction  {:.4}", r.margin_fraction);
    println!("discomfort accel/jerk  {:.4} / {:.4}", r.mean_discomfort_accel, r.mean_discomfort_jerk);
    println!("ratio vs optimal       accel {} jerk {}", opt(r.accel_ratio), opt(r.jerk_ratio));
    println!("w {} beta {} g {}", r.penalty.w, r.penalty.beta, r.comfort.g);
}

fn saliency(cfg: &RunConfig, a: &SaliencyArgs) -> Result<()> {
    let net = PolicyNetwork::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let frame = match (&a.image, &a.road) {
        (Some(p), _) => GrayFrame::load_png(p)?,
        (None, Some(r)) => {
            let road: Centerline = geometry::load_road(r)?;
            let lat = road.lanes().lane_center_offset(a.lane);
            let (p, heading) = road.frame_at(a.s, lat)?;
            let state = VehicleState::new(p.x, p.y, heading, 0.0);
            camera::render(&road, &state, a.lane, &cfg.camera, cfg.scenario.seed)?
        }
        (None, None) => bail!("give --image or --road"),
    };
    let mask = policy::vbp_saliency(&net, &frame)?;
    mask.to_frame().save_png(&a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), mask.width, mask.height);
    Ok(())
}

fn serve(cfg: &RunConfig, a: &ServeArgs) -> Result<()> {
    let mut sc = scenario(cfg, &a.scenario, "serve")?;
    sc.duration = 0.0;
    let model = a.model.as_deref().map(|p| load_model(Some(p))).transpose()?;
    let handle = lanekeep_serve::spawn(lanekeep_serve::ServeConfig {
        addr: format!("{}:{}", a.host, a.port),
        scenario: sc,
        model,
        expert: cfg.expert,
        record_dir: a.record_dir.clone(),
        tick_period: None,
    })?;
    println!("serving on ws://{}", handle.local_addr());
    handle.wait()?;
    Ok(())
}
