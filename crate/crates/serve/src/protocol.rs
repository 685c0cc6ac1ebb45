//! JSON messages exchanged with driving clients, one per websocket text frame.

use serde::{Deserialize, Serialize};

use lanekeep::vehicle::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    Human,
    Policy,
    Expert,
}

impl DriveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DriveMode::Human => "human",
            DriveMode::Policy => "policy",
            DriveMode::Expert => "expert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Steer { swa: f64 },
    Mode { value: DriveMode },
    Record { value: bool },
    Disturb { swa: f64, duration_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: f64,
    pub pose: Pose,
    pub v: f64,
    pub swa: f64,
    pub kappa: f64,
    pub y_off: f64,
    pub d_l: f64,
    pub d_r: f64,
    pub frame_png_b64: String,
    pub recording: bool,
    pub mode: DriveMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Tick(Tick),
    Error { reason: String },
}

impl ServerMessage {
    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error { reason: reason.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Parses and range-checks a client message.
pub fn parse_client(text: &str, vehicle: &VehicleParams) -> Result<ClientMessage, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    let check_swa = |swa: f64| {
        if swa.is_finite() && swa.abs() <= vehicle.max_swa {
            Ok(())
        } else {
            Err(format!("swa {swa} outside +-{} rad", vehicle.max_swa))
        }
    };
    match msg {
        ClientMessage::Steer { swa } => check_swa(swa)?,
        ClientMessage::Disturb { swa, duration_s } => {
            check_swa(swa)?;
            if !(duration_s > 0.0 && duration_s.is_finite()) {
                return Err(format!("duration_s {duration_s} must be > 0"));
            }
        }
        ClientMessage::Mode { .. } | ClientMessage::Record { .. } => {}
    }
    Ok(msg)
}
