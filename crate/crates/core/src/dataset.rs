//! Demonstration datasets: CSV manifests over PNG frames, SWA histogram
//! pruning, expedition-level splits and policy training.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{self, CameraError, GrayFrame};
use crate::nn::{batch_gradients, AdamConfig, AdamState, DropoutMasks, Gradients, NnError, Tensor};
use crate::policy::{self, PolicyNetwork};
use crate::vehicle::{swa_to_curvature, VehicleError, VehicleParams};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FRAMES_DIR: &str = "frames";
/// Limit on |swa| for recorded samples, radians.
pub const MAX_SAMPLE_SWA: f64 = 9.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("invalid sample on manifest row {row}: {reason}")]
    InvalidSample { row: usize, reason: String },
    #[error("value {value} outside histogram range +-{range}")]
    OutOfRange { value: f64, range: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 expeditions to split, found {0}")]
    TooFewExpeditions(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("frame {path}: {source}")]
    Frame { path: PathBuf, source: CameraError },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss {loss} at batch {batch}")]
    NonFiniteLoss { batch: usize, loss: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Absolute or manifest-relative path, resolved at load time.
    pub frame_path: PathBuf,
    pub swa: f64,
    pub speed: f64,
    pub timestamp: f64,
    pub expedition_id: String,
}

impl Sample {
    fn check(&self, row: usize) -> Result<(), DatasetError> {
        let bad = |reason: String| Err(DatasetError::InvalidSample { row, reason });
        if !(self.swa.abs() <= MAX_SAMPLE_SWA) {
            return bad(format!("swa {} outside +-{MAX_SAMPLE_SWA}", self.swa));
        }
        if !(self.speed >= 0.0) {
            return bad(format!("speed {} must be >= 0", self.speed));
        }
        if !self.timestamp.is_finite() {
            return bad("timestamp must be finite".into());
        }
        if self.expedition_id.is_empty() {
            return bad("empty expedition id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    frame: String,
    swa_rad: f64,
    speed_mps: f64,
    t_s: f64,
    expedition: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Where the manifest was loaded from or last saved to.
    pub manifest_path: Option<PathBuf>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples, manifest_path: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads a manifest; relative frame paths are resolved against its directory.
    pub fn load(manifest: &Path) -> Result<Self, DatasetError> {
        let base = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
        let csv_err = |source| DatasetError::Csv { path: manifest.to_path_buf(), source };
        let mut rdr = csv::Reader::from_path(manifest).map_err(csv_err)?;
        let mut samples = Vec::new();
        for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
            let r = rec.map_err(csv_err)?;
            let p = PathBuf::from(&r.frame);
            let s = Sample {
                frame_path: if p.is_absolute() { p } else { base.join(p) },
                swa: r.swa_rad,
                speed: r.speed_mps,
                timestamp: r.t_s,
                expedition_id: r.expedition,
            };
            s.check(i + 1)?;
            samples.push(s);
        }
        Ok(Self { samples, manifest_path: Some(manifest.to_path_buf()) })
    }

    /// Writes a manifest. Frames below the manifest's directory are stored
    /// relative to it, others as absolute paths; frames are never copied.
    pub fn save(&mut self, manifest: &Path) -> Result<(), DatasetError> {
        let base = manifest.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            fs::create_dir_all(base).map_err(io_err(base))?;
        }
        let abs_base = absolute(base);
        let csv_err = |source| DatasetError::Csv { path: manifest.to_path_buf(), source };
        let mut w = csv::Writer::from_path(manifest).map_err(csv_err)?;
        for (i, s) in self.samples.iter().enumerate() {
            s.check(i + 1)?;
            let abs = absolute(&s.frame_path);
            let frame = match abs.strip_prefix(&abs_base) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => abs,
            };
            w.serialize(ManifestRow {
                frame: frame.to_string_lossy().into_owned(),
                swa_rad: s.swa,
                speed_mps: s.speed,
                t_s: s.timestamp,
                expedition: s.expedition_id.clone(),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(manifest))?;
        self.manifest_path = Some(manifest.to_path_buf());
        Ok(())
    }

    /// Distinct expedition ids in first-seen order.
    pub fn expeditions(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.expedition_id) {
                seen.push(s.expedition_id.clone());
            }
        }
        seen
    }

    pub fn swa_values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.swa).collect()
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn bin_index(value: f64, bins: usize, range: f64) -> Result<usize, DatasetError> {
    if !(value.abs() <= range) {
        return Err(DatasetError::OutOfRange { value, range });
    }
    let width = 2.0 * range / bins as f64;
    Ok((((value + range) / width).floor() as usize).min(bins - 1))
}

/// Counts per uniform bin over [-range, range]; +range lands in the last bin.
pub fn histogram(values: &[f64], bins: usize, range: f64) -> Result<Vec<usize>, DatasetError> {
    if bins == 0 || !(range > 0.0) {
        return Err(DatasetError::InvalidConfig(format!("bins {bins} and range {range} must be > 0")));
    }
    let mut counts = vec![0; bins];
    for &v in values {
        counts[bin_index(v, bins, range)?] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub bins: usize,
    /// Histogram half range, radians.
    pub swa_range: f64,
    /// Maximum samples per bin.
    pub cap: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { bins: 18_000, swa_range: 9.0, cap: 10_000, seed: 0 }
    }
}

impl PruneConfig {
    /// Scales a per-bin cap quoted for `reference` samples down to `n`, rounding up.
    pub fn scaled_cap(cap: usize, n: usize, reference: usize) -> usize {
        ((cap as f64 * n as f64 / reference as f64).ceil() as usize).max(1)
    }
}

/// Caps every SWA bin at `cfg.cap`. Overfull bins lose samples one at a
/// time, each drawn uniformly from the expedition holding the most samples
/// in that bin (ties go to the lexicographically smallest id).
pub fn prune(d: &Dataset, cfg: &PruneConfig) -> Result<Dataset, DatasetError> {
    if cfg.cap == 0 {
        return Err(DatasetError::InvalidConfig("cap must be > 0".into()));
    }
    histogram(&[], cfg.bins, cfg.swa_range)?;
    let mut by_bin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in d.samples.iter().enumerate() {
        by_bin.entry(bin_index(s.swa, cfg.bins, cfg.swa_range)?).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keep = vec![true; d.samples.len()];
    for members in by_bin.values() {
        if members.len() <= cfg.cap {
            continue;
        }
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in members {
            groups.entry(d.samples[i].expedition_id.as_str()).or_default().push(i);
        }
        for _ in 0..members.len() - cfg.cap {
            let largest = groups.values_mut().rev().max_by_key(|g| g.len()).expect("overfull bin has members");
            let victim = largest.swap_remove(rng.random_range(0..largest.len()));
            keep[victim] = false;
        }
    }
    let samples = d.samples.iter().zip(&keep).filter(|(_, &k)| k).map(|(s, _)| s.clone()).collect();
    Ok(Dataset { samples, manifest_path: None })
}

/// Splits whole expeditions into train and validation sets.
pub fn split(d: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DatasetError::InvalidConfig(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let mut ids = d.expeditions();
    if ids.len() < 2 {
        return Err(DatasetError::TooFewExpeditions(ids.len()));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ids.len() as f64 * train_frac).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: Vec<&String> = ids[..n_train].iter().collect();
    let (train, val): (Vec<Sample>, Vec<Sample>) =
        d.samples.iter().cloned().partition(|s| train_ids.contains(&&s.expedition_id));
    Ok((Dataset::new(train), Dataset::new(val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub batches: usize,
    pub seed: u64,
    pub keep_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch: 64, lr: 1e-4, batches: 5_000, seed: 0, keep_prob: policy::DEFAULT_KEEP_PROB }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.batch == 0 {
            return Err(DatasetError::InvalidConfig("batch must be > 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(DatasetError::InvalidConfig(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(DatasetError::InvalidConfig(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        Ok(())
    }
}

/// Frames reduced to network resolution, kept as bytes to bound memory.
#[derive(Debug, Clone)]
pub struct FrameCache {
    frames: Vec<GrayFrame>,
    targets: Vec<f64>,
}

impl FrameCache {
    /// Loads every frame and converts each SWA label to a curvature target.
    pub fn load(d: &Dataset, vehicle: &VehicleParams) -> Result<Self, DatasetError> {
        let mut paths: HashMap<&Path, usize> = HashMap::new();
        let mut frames: Vec<GrayFrame> = Vec::new();
        let mut index = Vec::with_capacity(d.len());
        for s in &d.samples {
            let k = match paths.get(s.frame_path.as_path()) {
                Some(&k) => k,
                None => {
                    let ferr = |source| DatasetError::Frame { path: s.frame_path.clone(), source };
                    let f = GrayFrame::load_png(&s.frame_path).map_err(ferr)?;
                    frames.push(camera::reduce_to_input(&f).map_err(ferr)?);
                    paths.insert(&s.frame_path, frames.len() - 1);
                    frames.len() - 1
                }
            };
            index.push(k);
        }
        let targets = d.samples.iter().map(|s| swa_to_curvature(s.swa, vehicle)).collect::<Result<_, _>>()?;
        let frames = index.into_iter().map(|k| frames[k].clone()).collect();
        Ok(Self { frames, targets })
    }

    pub fn from_parts(frames: Vec<GrayFrame>, targets: Vec<f64>) -> Result<Self, DatasetError> {
        if frames.len() != targets.len() {
            return Err(DatasetError::InvalidConfig("frame and target counts differ".into()));
        }
        Ok(Self { frames, targets })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> Tensor {
        camera::standardize(&self.frames[i])
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: PolicyNetwork,
    /// Batch MSE, one entry per batch.
    pub loss_log: Vec<f64>,
}

pub fn train_policy(train: &Dataset, cfg: &TrainConfig, vehicle: &VehicleParams) -> Result<TrainOutcome, DatasetError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DatasetError::Empty);
    }
    let cache = FrameCache::load(train, vehicle)?;
    train_on_cache(&cache, cfg, |_, _| {})
}

/// Trains a freshly initialized network on cached frames. `progress` is
/// called after every batch with its index and loss.
pub fn train_on_cache(
    cache: &FrameCache,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome, DatasetError> {
    cfg.validate()?;
    if cache.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = policy::architecture(cfg.keep_prob);
    let mut net = crate::nn::Network::initialized(&specs, rng.random())?;
    let mut adam = AdamState::new(&net, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut grads = Gradients::zeros_like(&net);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut loss_log = Vec::with_capacity(cfg.batches);
    let input_shape = [1, camera::INPUT_HEIGHT, camera::INPUT_WIDTH];
    for b in 0..cfg.batches {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..cache.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<Tensor> = idx.iter().map(|&i| cache.input(i)).collect();
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let targets: Vec<f64> = idx.iter().map(|&i| cache.targets[i]).collect();
        let masks: Vec<DropoutMasks> =
            idx.iter().map(|_| net.sample_masks(&input_shape, &mut rng)).collect::<Result<_, _>>()?;
        let loss = batch_gradients(&net, &refs, &targets, &masks, &mut grads)?;
        if !loss.is_finite() {
            return Err(DatasetError::NonFiniteLoss { batch: b, loss });
        }
        adam.step_network(&mut net, &grads)?;
        loss_log.push(loss);
        progress(b, loss);
    }
    Ok(TrainOutcome { network: PolicyNetwork::from_network(net), loss_log })
}

/// Writes a per-batch loss log as CSV.
pub fn save_loss_log(loss: &[f64], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::from("batch,mse\n");
    for (i, l) in loss.iter().enumerate() {
        out.push_str(&format!("{i},{l:.8e}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(swa: f64, exp: &str) -> Sample {
        Sample { frame_path: PathBuf::from("f.png"), swa, speed: 20.0, timestamp: 0.0, expedition_id: exp.into() }
    }

    /// Straightforward re-implementation of the removal rule, used as an oracle.
    fn oracle_removed_per_expedition(counts: &[(&str, usize)], cap: usize) -> BTreeMap<String, usize> {
        let mut left: Vec<(String, usize)> = counts.iter().map(|(e, n)| (e.to_string(), *n)).collect();
        left.sort();
        let mut removed: BTreeMap<String, usize> = BTreeMap::new();
        let total: usize = counts.iter().map(|c| c.1).sum();
        for _ in 0..total.saturating_sub(cap) {
            let mut best = 0;
            for (i, (_, n)) in left.iter().enumerate() {
                if *n > left[best].1 {
                    best = i;
                }
            }
            left[best].1 -= 1;
            *removed.entry(left[best].0.clone()).or_default() += 1;
        }
        removed
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.0], 18_000, 9.0).unwrap();
        assert_eq!(h[9000], 1);
        assert_eq!(h.iter().sum::<usize>(), 1);
        assert!(histogram(&[], 10, 9.0).unwrap().iter().all(|&c| c == 0));
        let h = histogram(&[9.0, -9.0], 18_000, 9.0).unwrap();
        assert_eq!((h[0], h[17_999]), (1, 1));
        assert!(matches!(histogram(&[9.01], 10, 9.0), Err(DatasetError::OutOfRange { .. })));
        assert!(histogram(&[0.0], 0, 9.0).is_err());
    }

    #[test]
    fn prune_below_cap_is_identity() {
        let d = Dataset::new((0..100).map(|i| sample(i as f64 * 0.05 - 2.5, "a")).collect());
        let cfg = PruneConfig { cap: 10, bins: 100, ..PruneConfig::default() };
        assert_eq!(prune(&d, &cfg).unwrap().samples, d.samples);
    }

    #[test]
    fn prune_removes_overflow_from_largest_expedition() {
        let mut s: Vec<Sample> = (0..8000).map(|_| sample(0.0, "A")).collect();
        s.extend((0..4000).map(|_| sample(0.0, "B")));
        s.extend((0..50).map(|_| sample(3.0, "B")));
        let d = Dataset::new(s);
        let cfg = PruneConfig::default();
        let out = prune(&d, &cfg).unwrap();
        assert_eq!(out.len(), 10_050);
        let count = |e: &str, swa: f64| out.samples.iter().filter(|x| x.expedition_id == e && x.swa == swa).count();
        let oracle = oracle_removed_per_expedition(&[("A", 8000), ("B", 4000)], 10_000);
        assert_eq!(8000 - count("A", 0.0), oracle.get("A").copied().unwrap_or(0));
        assert_eq!(4000 - count("B", 0.0), oracle.get("B").copied().unwrap_or(0));
        assert!(8000 - count("A", 0.0) >= 4000 - count("B", 0.0));
        assert_eq!(count("B", 3.0), 50);
        assert!(histogram(&out.swa_values(), cfg.bins, cfg.swa_range).unwrap().iter().all(|&c| c <= cfg.cap));
    }

    #[test]
    fn prune_single_overfull_bin() {
        let d = Dataset::new((0..12_000).map(|i| sample(0.5, if i % 3 == 0 { "x" } else { "y" })).collect());
        let out = prune(&d, &PruneConfig::default()).unwrap();
        assert_eq!(d.len() - out.len(), 2000);
    }

    #[test]
    fn prune_alternates_between_tied_expeditions() {
        let s: Vec<Sample> = ["p", "q", "r"].iter().flat_map(|e| (0..7).map(move |_| sample(1.0, e))).collect();
        let out = prune(&Dataset::new(s), &PruneConfig { cap: 9, ..PruneConfig::default() }).unwrap();
        for e in ["p", "q", "r"] {
            assert_eq!(out.samples.iter().filter(|x| x.expedition_id == e).count(), 3);
        }
    }

    #[test]
    fn scaled_cap() {
        assert_eq!(PruneConfig::scaled_cap(10_000, 60_000, 2_500_000), 240);
        assert_eq!(PruneConfig::scaled_cap(10_000, 1, 2_500_000), 1);
    }

    #[test]
    fn split_by_expedition() {
        let s: Vec<Sample> = (0..10).flat_map(|e| (0..5).map(move |_| sample(0.0, &format!("e{e}")))).collect();
        let d = Dataset::new(s);
        let (a, b) = split(&d, 0.8, 1).unwrap();
        assert_eq!(a.expeditions().len(), 8);
        assert_eq!(b.expeditions().len(), 2);
        assert_eq!(a.len() + b.len(), d.len());
        assert!(a.expeditions().iter().all(|e| !b.expeditions().contains(e)));
        let (a2, _) = split(&d, 0.8, 1).unwrap();
        assert_eq!(a.samples, a2.samples);
        let one = Dataset::new(vec![sample(0.0, "only")]);
        assert!(matches!(split(&one, 0.5, 0), Err(DatasetError::TooFewExpeditions(1))));
        assert!(split(&d, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_with_shared_frames() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("data").join(FRAMES_DIR);
        fs::create_dir_all(&frames).unwrap();
        let mut d = Dataset::new(vec![Sample {
            frame_path: frames.join("a_000000.png"),
            swa: -0.25,
            speed: 19.4,
            timestamp: 0.05,
            expedition_id: "a-1".into(),
        }]);
        let m = dir.path().join("data").join(MANIFEST_FILE);
        d.save(&m).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.starts_with("frame,swa_rad,speed_mps,t_s,expedition\n"));
        assert!(text.contains("frames/a_000000.png,"));
        assert_eq!(Dataset::load(&m).unwrap().samples, d.samples);
        let mut pruned = prune(&d, &PruneConfig::default()).unwrap();
        let other = dir.path().join("pruned").join(MANIFEST_FILE);
        pruned.save(&other).unwrap();
        assert_eq!(Dataset::load(&other).unwrap().samples, d.samples);
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        fs::write(&m, "frame,swa_rad,speed_mps,t_s,expedition\nf.png,9.5,1,0,a\n").unwrap();
        assert!(matches!(Dataset::load(&m), Err(DatasetError::InvalidSample { row: 1, .. })));
        fs::write(&m, "frame,swa_rad,speed_mps,t_s,expedition\nf.png,0,1,0,\n").unwrap();
        assert!(Dataset::load(&m).is_err());
    }

    fn tiny_cache(n: usize, seed: u64) -> FrameCache {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|_| {
                GrayFrame::new(camera::INPUT_WIDTH, camera::INPUT_HEIGHT, (0..68 * 183).map(|_| rng.random()).collect())
                    .unwrap()
            })
            .collect();
        FrameCache::from_parts(frames, vec![0.02; n]).unwrap()
    }

    #[test]
    fn zero_batches_returns_initial_network() {
        let cfg = TrainConfig { batches: 0, seed: 9, ..TrainConfig::default() };
        let out = train_on_cache(&tiny_cache(2, 0), &cfg, |_, _| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let expected = crate::nn::Network::initialized(&policy::architecture(0.5), rng.random()).unwrap();
        assert_eq!(out.network.network(), &expected);
        assert!(out.loss_log.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig { batches: 2, batch: 4, seed: 3, ..TrainConfig::default() };
        let c = tiny_cache(6, 1);
        let a = train_on_cache(&c, &cfg, |_, _| {}).unwrap();
        let b = train_on_cache(&c, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn targets_are_curvature() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        GrayFrame::filled(640, 480, 90).save_png(&p).unwrap();
        let d = Dataset::new(vec![Sample { frame_path: p, ..sample(1.6, "a") }]);
        let v = VehicleParams::default();
        let c = FrameCache::load(&d, &v).unwrap();
        assert_eq!(c.targets(), &[swa_to_curvature(1.6, &v).unwrap()]);
        assert_ne!(c.targets()[0], 1.6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prune_caps_bins_and_conserves(
            swas in proptest::collection::vec((-20i32..20, 0usize..4), 0..400),
            cap in 1usize..30,
            seed in 0u64..1000,
        ) {
            let d = Dataset::new(swas.iter().map(|&(b, e)| sample(b as f64 * 0.4, &format!("e{e}"))).collect());
            let cfg = PruneConfig { bins: 100, swa_range: 9.0, cap, seed };
            let before = histogram(&d.swa_values(), 100, 9.0).unwrap();
            let out = prune(&d, &cfg).unwrap();
            let after = histogram(&out.swa_values(), 100, 9.0).unwrap();
            let overflow: usize = before.iter().map(|&c| c.saturating_sub(cap)).sum();
            prop_assert_eq!(d.len() - out.len(), overflow);
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a <= b && *a <= cap);
            }
            prop_assert_eq!(prune(&d, &cfg).unwrap(), out);
            let open = PruneConfig { cap: usize::MAX, ..cfg };
            prop_assert_eq!(prune(&d, &open).unwrap().samples, d.samples.clone());
        }
    }
}
