//! Wire messages of session protocol version 1.
//!
//! Every message is one JSON object with a `type` tag, sent as a WebSocket
//! text frame or written as one line of a trace or snapshot log. Field names
//! are documented in `docs/protocol.md`.

use serde::{Deserialize, Serialize};

use crate::conditioning::FiveBarIndices;
use crate::fivebar::{PostureState, WorkingMode};
use crate::forcefield::{ConditioningLaw, EnvelopeMode, ForceCommand, ForceEnvelope, ViscosityLaw};
use crate::model::Vec2;
use crate::session::Sensitivity;

pub const PROTOCOL_VERSION: u32 = 1;

/// Highest rate at which force updates are pushed over the transport.
pub const MAX_FORCE_RATE_HZ: f64 = 250.0;

/// Every `n`-th haptic tick is forwarded as a force message.
pub fn force_decimation(haptic_hz: f64) -> u32 {
    (haptic_hz / MAX_FORCE_RATE_HZ).ceil().max(1.0) as u32
}

/// One pointer reading in device units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointerSample {
    /// Strictly increasing per connection.
    pub seq: u64,
    /// Monotonic timestamp, ns.
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

impl PointerSample {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Partial update of the tunable session parameters. Absent fields keep
/// their current value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<WorkingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<Sensitivity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_zoom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_mode: Option<EnvelopeMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<ForceEnvelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<ConditioningLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viscosity: Option<ViscosityLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_f_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_f_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_config: Option<ParamsPatch>,
    },
    Pointer {
        seq: u64,
        t: u64,
        x: f64,
        y: f64,
    },
    SetMode {
        s1: crate::fivebar::Sign,
        s2: crate::fivebar::Sign,
    },
    SetParams(ParamsPatch),
}

impl ClientMessage {
    pub fn pointer(p: PointerSample) -> Self {
        ClientMessage::Pointer {
            seq: p.seq,
            t: p.t,
            x: p.x,
            y: p.y,
        }
    }

    pub fn as_pointer(&self) -> Option<PointerSample> {
        match *self {
            ClientMessage::Pointer { seq, t, x, y } => Some(PointerSample { seq, t, x, y }),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Hello { .. } => "hello",
            ClientMessage::Pointer { .. } => "pointer",
            ClientMessage::SetMode { .. } => "set_mode",
            ClientMessage::SetParams(_) => "set_params",
        }
    }
}

/// A 2-D force carried with a third component fixed at zero.
pub fn force3(f: Vec2) -> [f64; 3] {
    [f.x, f.y, 0.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireComponents {
    pub joint_limit: [f64; 3],
    pub boundary: [f64; 3],
    pub conditioning: [f64; 3],
    pub viscous: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireForce {
    pub f: [f64; 3],
    pub components: WireComponents,
    pub clamped: bool,
}

impl From<&ForceCommand> for WireForce {
    fn from(c: &ForceCommand) -> Self {
        WireForce {
            f: force3(c.f),
            components: WireComponents {
                joint_limit: force3(c.components.joint_limit),
                boundary: force3(c.components.boundary),
                conditioning: force3(c.components.conditioning),
                viscous: force3(c.components.viscous),
            },
            clamped: c.clamped,
        }
    }
}

impl WireForce {
    pub fn norm(&self) -> f64 {
        self.f.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// State after one haptic tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub tick: u64,
    /// Session time of the tick, ns.
    pub t: u64,
    pub mode: WorkingMode,
    /// End-point position requested by the pointer.
    pub target: Vec2,
    /// `null` when the target is outside the workspace; indices then
    /// describe the last reachable posture.
    pub posture: Option<PostureState>,
    pub indices: FiveBarIndices,
    pub force: WireForce,
    /// Signed distance to the nearest reach-annulus circle, positive inside.
    pub boundary_distance: f64,
    pub class: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Driver,
    Observer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub model_name: Option<String>,
    pub model_hash: String,
    pub mode: WorkingMode,
    pub haptic_hz: f64,
    pub analysis_hz: f64,
    pub broadcast_hz: f64,
    /// Force messages carry every `force_decimation`-th haptic tick.
    pub force_decimation: u32,
}

/// Periodic numerical health report from the analysis loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tick: u64,
    /// SVD condition numbers of `A` and `B` at the latest posture.
    #[serde(with = "crate::conditioning::inf_as_null")]
    pub kappa_a_svd: f64,
    #[serde(with = "crate::conditioning::inf_as_null")]
    pub kappa_b_svd: f64,
    /// Largest relative gap between the SVD and closed-form values, over
    /// finite condition numbers.
    pub max_rel_err: f64,
    pub ticks: u64,
    pub tick_p50_us: f64,
    pub tick_p99_us: f64,
    pub tick_max_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        version: u32,
        role: Role,
        session: SessionInfo,
    },
    Snapshot(StateSnapshot),
    Force {
        tick: u64,
        f: [f64; 3],
        clamped: bool,
    },
    Analysis(AnalysisReport),
    Reject {
        reason: String,
    },
    Error {
        code: String,
        reason: String,
    },
}

impl ServerMessage {
    pub fn error(code: &str, reason: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.into(),
            reason: reason.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fivebar::Sign;

    #[test]
    fn client_messages_parse() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"hello","version":1}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Hello {
                version: 1,
                session_config: None
            }
        );
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"pointer","seq":3,"t":1000,"x":0.5,"y":-1}"#).unwrap();
        assert_eq!(
            m.as_pointer(),
            Some(PointerSample {
                seq: 3,
                t: 1000,
                x: 0.5,
                y: -1.0
            })
        );
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"set_mode","s1":"+","s2":"-"}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::SetMode {
                s1: Sign::Plus,
                s2: Sign::Minus
            }
        );
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"set_params","sensitivity":"fine","view_zoom":2}"#)
                .unwrap();
        let ClientMessage::SetParams(p) = m else {
            panic!()
        };
        assert_eq!(p.sensitivity, Some(Sensitivity::Fine));
        assert_eq!(p.view_zoom, Some(2.0));
    }

    #[test]
    fn malformed_messages_fail() {
        for bad in [
            r#"{"type":"pointer","seq":1,"t":0,"x":1}"#,
            r#"{"type":"teleport"}"#,
            r#"{"type":"set_params","bogus":1}"#,
            r#"{"type":"pointer","seq":-1,"t":0,"x":1,"y":2}"#,
            "not json",
        ] {
            assert!(serde_json::from_str::<ClientMessage>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn server_message_tags() {
        let s = ServerMessage::error("malformed", "bad frame").to_json();
        assert_eq!(s, r#"{"type":"error","code":"malformed","reason":"bad frame"}"#);
        let s = ServerMessage::Reject {
            reason: "x".into(),
        }
        .to_json();
        assert!(s.starts_with(r#"{"type":"reject""#));
    }

    #[test]
    fn decimation() {
        assert_eq!(force_decimation(1000.0), 4);
        assert_eq!(force_decimation(100.0), 1);
        assert_eq!(force_decimation(251.0), 2);
    }

    #[test]
    fn pointer_round_trip() {
        let p = PointerSample {
            seq: 9,
            t: 12,
            x: 0.1,
            y: 0.2,
        };
        let s = serde_json::to_string(&ClientMessage::pointer(p)).unwrap();
        let back: ClientMessage = serde_json::from_str(&s).unwrap();
        assert_eq!(back.as_pointer(), Some(p));
    }
}
