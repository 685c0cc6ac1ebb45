//! Kinematic bicycle model.
//!
//! Steering wheel angle (SWA) maps to front-wheel angle through the steering
//! ratio, and front-wheel angle to path curvature through the wheelbase:
//! `kappa = tan(swa / ratio) / wheelbase`. The state is referenced to the
//! rear axle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("steering wheel angle {swa} rad exceeds the limit of {limit} rad")]
    SwaOutOfRange { swa: f64, limit: f64 },
    #[error("curvature {kappa} 1/m exceeds the mechanical limit of {limit} 1/m")]
    CurvatureOutOfRange { kappa: f64, limit: f64 },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    #[serde(rename = "wheelbase_m")]
    pub wheelbase: f64,
    pub steering_ratio: f64,
    #[serde(rename = "max_swa_rad")]
    pub max_swa: f64,
    #[serde(rename = "width_m")]
    pub width: f64,
    #[serde(rename = "max_alpha_rad")]
    pub max_alpha: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.9,
            steering_ratio: 16.0,
            max_swa: 9.0,
            width: 2.0,
            max_alpha: 0.6,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let bad = |m: &str| Err(VehicleError::InvalidParams(m.to_string()));
        if !(self.wheelbase > 0.0) {
            return bad("wheelbase must be > 0");
        }
        if !(self.steering_ratio >= 1.0) {
            return bad("steering ratio must be >= 1");
        }
        if !(self.max_swa > 0.0) {
            return bad("max SWA must be > 0");
        }
        if !(self.width > 0.0) {
            return bad("vehicle width must be > 0");
        }
        if !(self.max_alpha > 0.0 && self.max_alpha < std::f64::consts::FRAC_PI_2) {
            return bad("max wheel angle must lie in (0, pi/2)");
        }
        Ok(())
    }

    /// Largest reachable path curvature, tan(max_alpha) / L.
    pub fn max_curvature(&self) -> f64 {
        self.max_alpha.tan() / self.wheelbase
    }

    /// Curvature reachable within both the wheel and the steering-wheel limit.
    pub fn steerable_curvature(&self) -> f64 {
        self.max_alpha.min(self.max_swa / self.steering_ratio).tan() / self.wheelbase
    }

    pub fn clamp_curvature(&self, kappa: f64) -> f64 {
        let lim = self.steerable_curvature();
        kappa.clamp(-lim, lim)
    }
}

pub fn swa_to_curvature(swa: f64, p: &VehicleParams) -> Result<f64, VehicleError> {
    if !(swa.abs() <= p.max_swa) {
        return Err(VehicleError::SwaOutOfRange { swa, limit: p.max_swa });
    }
    let alpha = (swa / p.steering_ratio).clamp(-p.max_alpha, p.max_alpha);
    Ok(alpha.tan() / p.wheelbase)
}

pub fn curvature_to_swa(kappa: f64, p: &VehicleParams) -> Result<f64, VehicleError> {
    let limit = p.max_curvature();
    if !(kappa.abs() <= limit) {
        return Err(VehicleError::CurvatureOutOfRange { kappa, limit });
    }
    Ok(p.steering_ratio * (kappa * p.wheelbase).atan())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub kappa: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self { x, y, psi, v, kappa: 0.0 }
    }

    /// Advances by `dt` holding `kappa_cmd`, using the midpoint heading for
    /// the position update. Speed is constant.
    pub fn step(&self, kappa_cmd: f64, dt: f64) -> VehicleState {
        let dpsi = self.v * kappa_cmd * dt;
        let psi_mid = self.psi + 0.5 * dpsi;
        VehicleState {
            x: self.x + self.v * psi_mid.cos() * dt,
            y: self.y + self.v * psi_mid.sin() * dt,
            psi: self.psi + dpsi,
            v: self.v,
            kappa: kappa_cmd,
        }
    }
}

/// Free-function form of [`VehicleState::step`].
pub fn step(state: &VehicleState, kappa_cmd: f64, dt: f64) -> VehicleState {
    state.step(kappa_cmd, dt)
}
