//! Scripted drivers: a lane-centering expert used to produce demonstrations
//! and an "optimal" driver that follows the true lane curvature.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Centerline, GeometryError, LanePose};
use crate::vehicle::VehicleParams;

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("invalid expert parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Random pose kicks applied during collection. The expert keeps driving
/// through them, so the recorded data contains recoveries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// Mean time between kicks in seconds (exponentially distributed).
    pub mean_interval_s: f64,
    /// Lateral displacement is uniform in [-max, max].
    pub max_lateral_m: f64,
    /// Heading change is uniform in [-max, max].
    pub max_heading_rad: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self { mean_interval_s: 6.0, max_lateral_m: 1.5, max_heading_rad: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertParams {
    /// Preview distance for the curvature feedforward, meters.
    pub lookahead: f64,
    /// Lateral gain, 1/m per m.
    pub k_y: f64,
    /// Heading gain, 1/m per rad.
    pub k_psi: f64,
    /// Standard deviation of additive curvature noise, 1/m.
    pub noise_std: f64,
    pub seed: u64,
    /// Off unless set.
    pub perturbation: Option<Perturbation>,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self { lookahead: 12.0, k_y: 0.05, k_psi: 0.3, noise_std: 0.002, seed: 0, perturbation: None }
    }
}

impl ExpertParams {
    pub fn noise_free() -> Self {
        Self { noise_std: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let bad = |m: String| Err(ExpertError::InvalidParams(m));
        if !(self.lookahead > 0.0) {
            return bad(format!("lookahead {} must be > 0", self.lookahead));
        }
        if !(self.k_y >= 0.0 && self.k_psi >= 0.0 && self.noise_std >= 0.0) {
            return bad("gains and noise must be >= 0".into());
        }
        if let Some(p) = self.perturbation {
            if !(p.mean_interval_s > 0.0 && p.max_lateral_m >= 0.0 && p.max_heading_rad >= 0.0) {
                return bad("perturbation interval must be > 0 and magnitudes >= 0".into());
            }
        }
        Ok(())
    }
}

/// Noise-free expert command: previewed road curvature plus lateral and
/// heading feedback, clamped to the vehicle's limits.
pub fn expert_command(pose: &LanePose, road: &Centerline, p: &ExpertParams, vehicle: &VehicleParams) -> f64 {
    let ff = road.curvature_clamped(pose.s + p.lookahead);
    vehicle.clamp_curvature(ff - p.k_y * pose.y_off - p.k_psi * pose.psi_err)
}

/// Expert command with seeded Gaussian noise drawn from `rng`.
pub fn expert_action<R: Rng>(
    pose: &LanePose,
    road: &Centerline,
    p: &ExpertParams,
    vehicle: &VehicleParams,
    rng: &mut R,
) -> f64 {
    let ff = road.curvature_clamped(pose.s + p.lookahead);
    let mut k = ff - p.k_y * pose.y_off - p.k_psi * pose.psi_err;
    if p.noise_std > 0.0 {
        k += Normal::new(0.0, p.noise_std).expect("noise_std validated").sample(rng);
    }
    vehicle.clamp_curvature(k)
}

/// Curvature of the path followed by the center of `lane_index` at `s`.
pub fn optimal_action(road: &Centerline, s: f64, lane_index: usize) -> Result<f64, ExpertError> {
    road.lanes().check_lane(lane_index)?;
    let k = road.curvature_at(s)?;
    let y = road.lanes().lane_center_offset(lane_index);
    Ok(k / (1.0 - k * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{LaneLayout, Point2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight() -> Centerline {
        Centerline::new((0..=300).map(|i| Point2::new(i as f64, 0.0)).collect(), LaneLayout::default()).unwrap()
    }

    fn circle(r: f64, lanes: LaneLayout) -> Centerline {
        circle_ds(r, lanes, 1.0)
    }

    fn circle_ds(r: f64, lanes: LaneLayout, ds: f64) -> Centerline {
        let n = (2.0 * std::f64::consts::PI * r * 0.9 / 0.05) as usize;
        let pts = (0..=n)
            .map(|i| {
                let th = i as f64 * 0.05 / r;
                Point2::new(r * th.sin(), r * (1.0 - th.cos()))
            })
            .collect();
        Centerline::new(pts, lanes).unwrap().resample(ds).unwrap()
    }

    fn pose(s: f64, y_off: f64) -> LanePose {
        LanePose { s, y_off, psi_err: 0.0 }
    }

    #[test]
    fn expert_examples() {
        let (p, v) = (ExpertParams::noise_free(), VehicleParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(expert_action(&pose(50.0, 0.0), &straight(), &p, &v, &mut rng), 0.0);
        let k = expert_action(&pose(50.0, 0.5), &straight(), &p, &v, &mut rng);
        assert!((k + 0.025).abs() < 1e-15);
        // At 1 m spacing the chord polygon of a 20 m circle turns 2 asin(1/40)
        // per meter, 5e-6 above 1/20; a finer road brings it below 1e-6.
        let c = circle_ds(20.0, LaneLayout::default(), 0.25);
        let k = expert_command(&pose(30.0, 0.0), &c, &p, &v);
        assert!((k - 0.05).abs() < 1e-6, "{k}");
    }

    #[test]
    fn expert_noise_is_seeded_and_clamped() {
        let p = ExpertParams { noise_std: 0.01, ..ExpertParams::default() };
        let v = VehicleParams::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| expert_action(&pose(10.0, 0.0), &straight(), &p, &v, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
        let k = expert_command(&pose(10.0, -1e4), &straight(), &p, &v);
        assert_eq!(k, v.steerable_curvature());
        assert!(crate::vehicle::curvature_to_swa(k, &v).unwrap().abs() <= v.max_swa);
    }

    #[test]
    fn optimal_examples() {
        assert_eq!(optimal_action(&straight(), 100.0, 0).unwrap(), 0.0);
        let c = circle(100.0, LaneLayout::default());
        assert!((optimal_action(&c, 200.0, 0).unwrap() - 0.01).abs() < 1e-6);
        let two = circle(100.0, LaneLayout::new(2, 3.75).unwrap());
        let inner = optimal_action(&two, 200.0, 1).unwrap();
        assert!((inner - 0.010_191_1).abs() < 1e-6, "{inner}");
        assert!(optimal_action(&c, -1.0, 0).is_err());
        assert!(optimal_action(&c, 10.0, 1).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ExpertParams::default().validate().is_ok());
        assert!(ExpertParams { lookahead: 0.0, ..ExpertParams::default() }.validate().is_err());
        assert!(ExpertParams { k_y: -1.0, ..ExpertParams::default() }.validate().is_err());
        let perturbation = Some(Perturbation { mean_interval_s: 0.0, ..Perturbation::default() });
        assert!(ExpertParams { perturbation, ..ExpertParams::default() }.validate().is_err());
    }
}
