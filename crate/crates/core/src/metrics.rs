//! Lane-positioning penalty, comfort (discomfort of lateral acceleration and
//! jerk) and aggregated trajectory reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{TerminationReason, TrajectoryLog};

/// Width of the centered moving average applied to acceleration before
/// differencing.
pub const JERK_FILTER_WINDOW: usize = 5;
/// Distance from a marking used for the margin fraction in reports.
pub const MARGIN_DISTANCE_M: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid penalty config: {0}")]
    InvalidPenalty(String),
    #[error("comfort threshold {0} must be > 0")]
    InvalidComfort(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("time step {0} must be > 0")]
    InvalidStep(f64),
    #[error("logs are not aligned: {0}")]
    Misaligned(String),
    #[error("vehicle width {vehicle} must be smaller than lane width {lane}")]
    VehicleTooWide { vehicle: f64, lane: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    /// Penalty region width in meters, used for both sides unless overridden.
    pub w: f64,
    pub beta: f64,
    pub w_left: Option<f64>,
    pub w_right: Option<f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { w: 0.4, beta: 0.5, w_left: None, w_right: None }
    }
}

impl PenaltyConfig {
    pub fn new(w: f64, beta: f64) -> Result<Self, MetricsError> {
        let c = Self { w, beta, w_left: None, w_right: None };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), MetricsError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(MetricsError::InvalidPenalty(format!("beta {} outside (0, 1)", self.beta)));
        }
        for w in [Some(self.w), self.w_left, self.w_right].into_iter().flatten() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(MetricsError::InvalidPenalty(format!("width {w} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Checks the config, including that each penalty region fits in the free
    /// space between vehicle and marking.
    pub fn validate(&self, lane_width: f64, vehicle_width: f64) -> Result<(), MetricsError> {
        self.check()?;
        let free = (lane_width - vehicle_width) / 2.0;
        if !(free > 0.0) {
            return Err(MetricsError::VehicleTooWide { vehicle: vehicle_width, lane: lane_width });
        }
        for w in [self.left_width(), self.right_width()] {
            if w > free {
                return Err(MetricsError::InvalidPenalty(format!("width {w} exceeds free space {free}")));
            }
        }
        Ok(())
    }

    pub fn left_width(&self) -> f64 {
        self.w_left.unwrap_or(self.w)
    }

    pub fn right_width(&self) -> f64 {
        self.w_right.unwrap_or(self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComfortConfig {
    /// Comfort threshold, m/s^2 for acceleration and m/s^3 for jerk.
    pub g: f64,
}

impl Default for ComfortConfig {
    fn default() -> Self {
        Self { g: 1.8 }
    }
}

impl ComfortConfig {
    pub fn new(g: f64) -> Result<Self, MetricsError> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(MetricsError::InvalidComfort(g));
        }
        Ok(Self { g })
    }
}

/// Distances from the vehicle body to the left and right markings.
/// Negative means the marking has been crossed.
pub fn marking_distances(y_off: f64, lane_width: f64, vehicle_width: f64) -> (f64, f64) {
    let half_free = (lane_width - vehicle_width) / 2.0;
    (half_free - y_off, half_free + y_off)
}

/// Penalty for a marking distance `d` with region width `w` and shape `beta`.
pub fn lane_penalty_w(d: f64, w: f64, beta: f64) -> f64 {
    if d < 0.0 {
        1.0
    } else if d > w || w == 0.0 {
        0.0
    } else {
        (beta * w).powf(d / w) - beta * d
    }
}

pub fn lane_penalty(d: f64, cfg: &PenaltyConfig) -> f64 {
    lane_penalty_w(d, cfg.w, cfg.beta)
}

/// Per-tick penalty: the worse of the two sides.
pub fn tick_penalty(d_l: f64, d_r: f64, cfg: &PenaltyConfig) -> f64 {
    lane_penalty_w(d_l, cfg.left_width(), cfg.beta).max(lane_penalty_w(d_r, cfg.right_width(), cfg.beta))
}

/// Level of discomfort for a magnitude `x >= 0`; equals 1 at the threshold.
pub fn discomfort(x: f64, cfg: &ComfortConfig) -> f64 {
    let r2 = (x / cfg.g).powi(2);
    if x < cfg.g {
        r2
    } else {
        (5.0 / 6.0 + r2 / 6.0).powi(6)
    }
}

pub fn lateral_accel(v: f64, kappa: f64) -> f64 {
    v * v * kappa.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JerkFilter {
    /// Centered moving average, truncated at the ends.
    MovingAverage(usize),
    Raw,
}

impl Default for JerkFilter {
    fn default() -> Self {
        JerkFilter::MovingAverage(JERK_FILTER_WINDOW)
    }
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Time derivative of signed acceleration: central differences inside,
/// one-sided at the ends.
pub fn jerk_series(accel: &[f64], dt: f64, filter: JerkFilter) -> Result<Vec<f64>, MetricsError> {
    if accel.len() < 2 {
        return Err(MetricsError::TooFewSamples(accel.len()));
    }
    if !(dt > 0.0) {
        return Err(MetricsError::InvalidStep(dt));
    }
    let a = match filter {
        JerkFilter::MovingAverage(w) if w > 1 => moving_average(accel, w),
        _ => accel.to_vec(),
    };
    let n = a.len();
    Ok((0..n)
        .map(|i| match i {
            0 => (a[1] - a[0]) / dt,
            i if i == n - 1 => (a[n - 1] - a[n - 2]) / dt,
            i => (a[i + 1] - a[i - 1]) / (2.0 * dt),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ticks: usize,
    pub duration_s: f64,
    pub termination: TerminationReason,
    pub good_position_fraction: f64,
    pub mean_penalty: f64,
    pub max_penalty: f64,
    /// Number of separate events where a marking was crossed.
    pub marking_crossings: usize,
    /// Fraction of ticks with at least 0.5 m to both markings.
    pub margin_fraction: f64,
    pub mean_discomfort_accel: f64,
    pub mean_discomfort_jerk: f64,
    /// Mean discomfort relative to the reference log; absent when there is
    /// no reference or its mean is zero.
    pub accel_ratio: Option<f64>,
    pub jerk_ratio: Option<f64>,
    pub penalty: PenaltyConfig,
    pub comfort: ComfortConfig,
    pub jerk_filter: JerkFilter,
}

fn mean(x: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = x.len();
    if n == 0 {
        0.0
    } else {
        x.sum::<f64>() / n as f64
    }
}

/// Mean discomfort of lateral acceleration and jerk for the first `n` ticks.
fn comfort_means(log: &TrajectoryLog, n: usize, ccfg: &ComfortConfig, filter: JerkFilter) -> (f64, f64) {
    let rows = &log.rows[..n];
    let acc = mean(rows.iter().map(|r| discomfort(r.a_lat.abs(), ccfg)));
    let signed: Vec<f64> = rows.iter().map(|r| r.v * r.v * r.kappa_cmd).collect();
    let jerk = match jerk_series(&signed, log.dt, filter) {
        Ok(j) => mean(j.iter().map(|x| discomfort(x.abs(), ccfg))),
        Err(_) => 0.0,
    };
    (acc, jerk)
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

pub fn evaluate(
    log: &TrajectoryLog,
    optimal: Option<&TrajectoryLog>,
    pcfg: &PenaltyConfig,
    ccfg: &ComfortConfig,
) -> Result<MetricsReport, MetricsError> {
    evaluate_with(log, optimal, pcfg, ccfg, JerkFilter::default())
}

/// As [`evaluate`] with an explicit jerk filter. When the evaluated run ended
/// early, the reference is compared over the same prefix.
pub fn evaluate_with(
    log: &TrajectoryLog,
    optimal: Option<&TrajectoryLog>,
    pcfg: &PenaltyConfig,
    ccfg: &ComfortConfig,
    filter: JerkFilter,
) -> Result<MetricsReport, MetricsError> {
    pcfg.check()?;
    ComfortConfig::new(ccfg.g)?;
    let n = log.rows.len();
    let penalties: Vec<f64> = log.rows.iter().map(|r| tick_penalty(r.d_l, r.d_r, pcfg)).collect();
    let good = penalties.iter().filter(|&&p| p == 0.0).count();
    let mut crossings = 0;
    let mut crossed = false;
    for r in &log.rows {
        let now = r.d_l < 0.0 || r.d_r < 0.0;
        if now && !crossed {
            crossings += 1;
        }
        crossed = now;
    }
    let margin = log.rows.iter().filter(|r| r.d_l >= MARGIN_DISTANCE_M && r.d_r >= MARGIN_DISTANCE_M).count();
    let (acc, jerk) = comfort_means(log, n, ccfg, filter);
    let (accel_ratio, jerk_ratio) = match optimal {
        None => (None, None),
        Some(o) => {
            if (o.dt - log.dt).abs() > 1e-12 * log.dt.abs().max(1.0) {
                return Err(MetricsError::Misaligned(format!("dt {} vs {}", log.dt, o.dt)));
            }
            let truncated = log.termination != TerminationReason::Completed;
            if o.rows.len() < n || (o.rows.len() != n && !truncated) {
                return Err(MetricsError::Misaligned(format!("{} ticks vs {}", n, o.rows.len())));
            }
            let (oa, oj) = comfort_means(o, n, ccfg, filter);
            (ratio(acc, oa), ratio(jerk, oj))
        }
    };
    let frac = |k: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    Ok(MetricsReport {
        ticks: n,
        duration_s: n as f64 * log.dt,
        termination: log.termination,
        good_position_fraction: frac(good),
        mean_penalty: mean(penalties.iter().copied()),
        max_penalty: penalties.iter().copied().fold(0.0, f64::max),
        marking_crossings: crossings,
        margin_fraction: frac(margin),
        mean_discomfort_accel: acc,
        mean_discomfort_jerk: jerk,
        accel_ratio,
        jerk_ratio,
        penalty: *pcfg,
        comfort: *ccfg,
        jerk_filter: filter,
    })
}
