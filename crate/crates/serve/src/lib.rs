//! Live websocket bridge to the closed-loop simulator.
//!
//! One thread owns the simulation and advances it at a fixed period. Each
//! connected client gets its own thread that forwards inbound commands to
//! the simulation over a channel and writes the per-tick snapshots back.

pub mod protocol;

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::Engine;
use crossbeam_channel::{unbounded, Receiver, Sender, TrySendError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use lanekeep::camera::{self, CameraError};
use lanekeep::dataset::{Dataset, DatasetError, Sample, FRAMES_DIR, MANIFEST_FILE};
use lanekeep::expert::{self, ExpertParams};
use lanekeep::geometry::GeometryError;
use lanekeep::harness::{self, HarnessError, Scenario};
use lanekeep::metrics;
use lanekeep::policy::{self, PolicyError, PolicyNetwork};
use lanekeep::vehicle::{curvature_to_swa, swa_to_curvature, VehicleError, VehicleState};

use protocol::{ClientMessage, DriveMode, Pose, ServerMessage, Tick};

/// Outbound snapshots queued per client before older ones are dropped.
const CLIENT_QUEUE: usize = 4;
const CLIENT_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("a server thread panicked")]
    ThreadPanic,
}

/// Appends recorded ticks to a dataset directory the same way collection does.
struct Recorder {
    dir: PathBuf,
    expedition: String,
    samples: Vec<Sample>,
}

impl Recorder {
    fn new(dir: &Path, expedition: String) -> Result<Self, ServeError> {
        fs::create_dir_all(dir.join(FRAMES_DIR))?;
        Ok(Self { dir: dir.to_path_buf(), expedition, samples: Vec::new() })
    }

    fn record(&mut self, tick: u64, png: &[u8], swa: f64, speed: f64, t: f64) -> Result<(), ServeError> {
        let path = self.dir.join(FRAMES_DIR).join(format!("{}_{tick:06}.png", self.expedition));
        fs::write(&path, png)?;
        self.samples.push(Sample { frame_path: path, swa, speed, timestamp: t, expedition_id: self.expedition.clone() });
        Ok(())
    }

    fn flush(&mut self) -> Result<(), ServeError> {
        let manifest = self.dir.join(MANIFEST_FILE);
        let mut all = if manifest.exists() { Dataset::load(&manifest)? } else { Dataset::default() };
        all.samples.retain(|s| s.expedition_id != self.expedition);
        all.samples.extend(self.samples.iter().cloned());
        all.save(&manifest)?;
        Ok(())
    }
}

/// The authoritative simulation state, advanced one tick at a time.
pub struct Simulator {
    sc: Scenario,
    model: Option<PolicyNetwork>,
    expert: ExpertParams,
    rng: ChaCha8Rng,
    record_dir: Option<PathBuf>,
    state: VehicleState,
    tick: u64,
    mode: DriveMode,
    human_swa: f64,
    /// Override SWA and the first tick it no longer applies to.
    disturb: Option<(u64, f64)>,
    recorder: Option<Recorder>,
    sessions: u32,
}

impl Simulator {
    pub fn new(
        sc: Scenario,
        model: Option<PolicyNetwork>,
        expert: ExpertParams,
        record_dir: Option<PathBuf>,
    ) -> Result<Self, ServeError> {
        sc.validate()?;
        expert.validate().map_err(HarnessError::from)?;
        let state = sc.initial_state()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(expert.seed),
            state,
            sc,
            model,
            expert,
            record_dir,
            tick: 0,
            mode: DriveMode::Expert,
            human_swa: 0.0,
            disturb: None,
            recorder: None,
            sessions: 0,
        })
    }

    pub fn mode(&self) -> DriveMode {
        self.mode
    }

    pub fn recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.sc.tick_dt
    }

    /// Applies a client command; the error string is sent back to the client.
    pub fn handle(&mut self, msg: ClientMessage) -> Result<(), String> {
        match msg {
            ClientMessage::Steer { swa } => self.human_swa = swa,
            ClientMessage::Mode { value: DriveMode::Policy } if self.model.is_none() => {
                return Err("no policy model loaded".into());
            }
            ClientMessage::Mode { value } => self.mode = value,
            ClientMessage::Record { value: true } => {
                if self.recorder.is_none() {
                    let dir = self.record_dir.clone().ok_or("recording is not enabled on this server")?;
                    self.sessions += 1;
                    let id = format!("{}-{}-rec{}", self.sc.name, self.sc.seed, self.sessions);
                    self.recorder = Some(Recorder::new(&dir, id).map_err(|e| e.to_string())?);
                }
            }
            ClientMessage::Record { value: false } => self.stop_recording().map_err(|e| e.to_string())?,
            ClientMessage::Disturb { swa, duration_s } => {
                let ticks = (duration_s / self.sc.tick_dt - 1e-9).ceil() as u64;
                self.disturb = Some((self.tick + ticks, swa));
            }
        }
        Ok(())
    }

    /// Ends the current recording session and writes its manifest rows.
    pub fn stop_recording(&mut self) -> Result<(), ServeError> {
        if let Some(mut r) = self.recorder.take() {
            r.flush()?;
        }
        Ok(())
    }

    /// Called when the last client leaves: fall back to the expert and pause recording.
    pub fn on_idle(&mut self) -> Result<(), ServeError> {
        self.mode = DriveMode::Expert;
        self.stop_recording()
    }

    fn reset(&mut self) -> Result<(), ServeError> {
        self.state = self.sc.initial_state()?;
        self.disturb = None;
        Ok(())
    }

    /// Advances one tick. The frame is only encoded when `with_frame` is set
    /// or a recording is running.
    pub fn step(&mut self, with_frame: bool) -> Result<Tick, ServeError> {
        let road = &self.sc.road;
        let pose = match road.localize(self.state.x, self.state.y, self.state.psi, self.sc.lane_index) {
            Ok(p) if p.s < road.length() - harness::ROAD_END_MARGIN_M => p,
            Ok(_) | Err(GeometryError::Lost { .. }) => {
                self.reset()?;
                self.sc.road.localize(self.state.x, self.state.y, self.state.psi, self.sc.lane_index)?
            }
            Err(e) => return Err(e.into()),
        };
        let vehicle = self.sc.vehicle;
        let need_frame = with_frame || self.recorder.is_some() || self.mode == DriveMode::Policy;
        let frame = if need_frame {
            let seed = harness::frame_seed(self.sc.seed, self.tick as usize);
            Some(camera::render(&self.sc.road, &self.state, self.sc.lane_index, &self.sc.camera, seed)?)
        } else {
            None
        };
        let mut swa = match self.mode {
            DriveMode::Human => self.human_swa,
            DriveMode::Expert => {
                let k = expert::expert_action(&pose, &self.sc.road, &self.expert, &vehicle, &mut self.rng);
                curvature_to_swa(k, &vehicle)?
            }
            DriveMode::Policy => {
                let net = self.model.as_ref().expect("policy mode requires a model");
                let k = policy::infer(net, frame.as_ref().expect("rendered for policy"))?;
                curvature_to_swa(vehicle.clamp_curvature(k), &vehicle)?
            }
        };
        let t = self.time();
        match self.disturb {
            Some((end, s)) if self.tick < end => swa = s,
            Some(_) => self.disturb = None,
            None => {}
        }
        swa = swa.clamp(-vehicle.max_swa, vehicle.max_swa);
        let kappa = swa_to_curvature(swa, &vehicle)?;
        let png = frame.as_ref().map(|f| f.encode_png()).transpose()?;
        if let (Some(r), Some(png)) = (self.recorder.as_mut(), png.as_ref()) {
            r.record(self.tick, png, swa, self.state.v, t)?;
        }
        let (d_l, d_r) = metrics::marking_distances(pose.y_off, self.sc.road.lane_width(), vehicle.width);
        let tick = Tick {
            t,
            pose: Pose { x: self.state.x, y: self.state.y, psi: self.state.psi },
            v: self.state.v,
            swa,
            kappa,
            y_off: pose.y_off,
            d_l,
            d_r,
            frame_png_b64: match (with_frame, png) {
                (true, Some(p)) => base64::engine::general_purpose::STANDARD.encode(p),
                _ => String::new(),
            },
            recording: self.recorder.is_some(),
            mode: self.mode,
        };
        self.state = self.state.step(kappa, self.sc.tick_dt);
        self.tick += 1;
        Ok(tick)
    }
}

pub struct ServeConfig {
    /// Address to bind, for example `127.0.0.1:8765`; port 0 picks a free port.
    pub addr: String,
    pub scenario: Scenario,
    pub model: Option<PolicyNetwork>,
    pub expert: ExpertParams,
    /// Where recordings are written; recording is refused when unset.
    pub record_dir: Option<PathBuf>,
    /// Wall-clock time per tick; defaults to the scenario tick (real time).
    pub tick_period: Option<Duration>,
}

enum Event {
    Connected(u64, Sender<String>),
    Text(u64, String),
    Disconnected(u64),
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: JoinHandle<Result<(), ServeError>>,
    accept: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the simulation, flushes any recording and joins the threads.
    pub fn shutdown(self) -> Result<(), ServeError> {
        self.stop.store(true, Ordering::SeqCst);
        self.accept.join().map_err(|_| ServeError::ThreadPanic)?;
        self.sim.join().map_err(|_| ServeError::ThreadPanic)?
    }

    /// Blocks until the simulation thread ends.
    pub fn wait(self) -> Result<(), ServeError> {
        let r = self.sim.join().map_err(|_| ServeError::ThreadPanic)?;
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.accept.join();
        r
    }
}

pub fn spawn(cfg: ServeConfig) -> Result<ServerHandle, ServeError> {
    let period = cfg.tick_period.unwrap_or_else(|| Duration::from_secs_f64(cfg.scenario.tick_dt));
    let vehicle = cfg.scenario.vehicle;
    let sim = Simulator::new(cfg.scenario, cfg.model, cfg.expert, cfg.record_dir)?;
    let listener = TcpListener::bind(&cfg.addr).map_err(|source| ServeError::Bind { addr: cfg.addr.clone(), source })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = unbounded::<Event>();

    let accept_stop = stop.clone();
    let accept = thread::spawn(move || accept_loop(listener, tx, accept_stop));
    let sim_stop = stop.clone();
    let sim = thread::spawn(move || sim_loop(sim, rx, sim_stop, period, vehicle));
    Ok(ServerHandle { addr, stop, sim, accept })
}

fn accept_loop(listener: TcpListener, events: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_id = 0u64;
    let mut clients = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                next_id += 1;
                let (id, ev, st) = (next_id, events.clone(), stop.clone());
                clients.push(thread::spawn(move || client_loop(id, stream, ev, st)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(_) => thread::sleep(Duration::from_millis(10)),
        }
    }
    for c in clients {
        let _ = c.join();
    }
}

fn client_loop(id: u64, stream: TcpStream, events: Sender<Event>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(CLIENT_POLL)).is_err() {
        return;
    }
    let (out_tx, out_rx) = crossbeam_channel::bounded::<String>(CLIENT_QUEUE);
    if events.send(Event::Connected(id, out_tx)).is_err() {
        return;
    }
    let _ = serve_client(id, &mut ws, &events, &out_rx, &stop);
    let _ = ws.close(None);
    let _ = ws.flush();
    let _ = events.send(Event::Disconnected(id));
}

#[allow(clippy::result_large_err)]
fn serve_client(
    id: u64,
    ws: &mut WebSocket<TcpStream>,
    events: &Sender<Event>,
    outbound: &Receiver<String>,
    stop: &AtomicBool,
) -> Result<(), tungstenite::Error> {
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => {
                if events.send(Event::Text(id, t.as_str().to_owned())).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Binary(_)) => {
                let _ = events.send(Event::Text(id, String::from("<binary>")));
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        while let Ok(msg) = outbound.try_recv() {
            ws.send(Message::text(msg))?;
        }
    }
    Ok(())
}

/// Queues `msg` for a client; a client that is behind misses snapshots.
fn offer(tx: &Sender<String>, msg: String) {
    match tx.try_send(msg) {
        Ok(()) | Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {}
    }
}

fn sim_loop(
    mut sim: Simulator,
    events: Receiver<Event>,
    stop: Arc<AtomicBool>,
    period: Duration,
    vehicle: lanekeep::vehicle::VehicleParams,
) -> Result<(), ServeError> {
    let mut clients: HashMap<u64, Sender<String>> = HashMap::new();
    let mut deadline = Instant::now();
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        while let Ok(ev) = events.try_recv() {
            match ev {
                Event::Connected(id, tx) => {
                    clients.insert(id, tx);
                }
                Event::Text(id, text) => {
                    let reply = protocol::parse_client(&text, &vehicle).and_then(|m| sim.handle(m));
                    if let (Err(reason), Some(tx)) = (reply, clients.get(&id)) {
                        offer(tx, ServerMessage::error(reason).to_json());
                    }
                }
                Event::Disconnected(id) => {
                    clients.remove(&id);
                    if clients.is_empty() {
                        sim.on_idle()?;
                    }
                }
            }
        }
        let tick = match sim.step(!clients.is_empty()) {
            Ok(t) => t,
            Err(e) => break Err(e),
        };
        if !clients.is_empty() {
            let json = ServerMessage::Tick(tick).to_json();
            for tx in clients.values() {
                offer(tx, json.clone());
            }
        }
        deadline += period;
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        } else {
            deadline = now;
        }
    };
    sim.stop_recording()?;
    result
}
