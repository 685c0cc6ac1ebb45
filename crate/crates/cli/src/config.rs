//! TOML run configuration. Every block is optional and falls back to the
//! library defaults; unknown keys are rejected.
//!
//! ```toml
//! [scenario]
//! road = "roads/country.json"
//! speed_mps = 19.44
//! lane_index = 0
//!
//! [vehicle]
//! steering_ratio = 16.0
//!
//! [penalty]
//! w = 0.4
//! beta = 0.5
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use lanekeep::camera::CameraConfig;
use lanekeep::dataset::{PruneConfig, TrainConfig};
use lanekeep::expert::ExpertParams;
use lanekeep::metrics::{ComfortConfig, PenaltyConfig};
use lanekeep::vehicle::VehicleParams;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub road: Option<PathBuf>,
    pub speed_mps: f64,
    pub duration_s: Option<f64>,
    pub lane_index: usize,
    pub tick_dt: f64,
    pub start_s: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road: None,
            speed_mps: 19.44,
            duration_s: None,
            lane_index: 0,
            tick_dt: lanekeep::harness::DEFAULT_TICK_DT,
            start_s: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub vehicle: VehicleParams,
    pub camera: CameraConfig,
    pub expert: ExpertParams,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub penalty: PenaltyConfig,
    pub comfort: ComfortConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        if let Some(road) = &cfg.scenario.road {
            let resolved = if road.is_relative() { base.join(road) } else { road.clone() };
            if !resolved.exists() {
                bail!("config references missing road file {}", resolved.display());
            }
            cfg.scenario.road = Some(resolved);
        }
        Ok(cfg)
    }

    /// Loads `path`, or defaults when absent. Relative paths inside the file
    /// resolve against its directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .with_context(|| format!("in config {}", path.display()))
    }

    /// Sets every seed from a single value.
    pub fn apply_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.expert.seed = seed;
        self.prune.seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("", Path::new(".")).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_blocks_override_defaults() {
        let cfg = RunConfig::parse(
            "[vehicle]\nsteering_ratio = 14.0\n[penalty]\nw = 0.3\n[train]\nbatches = 10\n[expert]\nnoise_std = 0.0\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.vehicle.steering_ratio, 14.0);
        assert_eq!(cfg.vehicle.wheelbase, 2.9);
        assert_eq!(cfg.penalty.w, 0.3);
        assert_eq!(cfg.train.batches, 10);
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.expert.noise_std, 0.0);
    }

    #[test]
    fn unknown_keys_and_missing_paths_are_rejected() {
        assert!(RunConfig::parse("[vehicle]\nwheel_base = 3.0\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[nonsense]\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[scenario]\nroad = \"/no/such/road.json\"\n", Path::new(".")).is_err());
    }

    #[test]
    fn seed_applies_everywhere() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(42);
        assert_eq!((cfg.scenario.seed, cfg.expert.seed, cfg.prune.seed, cfg.train.seed), (42, 42, 42, 42));
    }
}
