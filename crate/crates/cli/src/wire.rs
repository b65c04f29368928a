//! JSON messages exchanged with the teleoperation client over a WebSocket.
//!
//! Every message is one text frame holding an object with a `type` tag and
//! a `seq` counter that increases by one per message from each sender.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lsrl_core::{Action, Frame, TrackSpec};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub width: usize,
    pub height: usize,
    pub tick_hz: f64,
    pub record_every: usize,
    pub track: TrackSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub tick: u64,
    pub episode: u64,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub cte: f64,
    pub speed: f64,
    pub reward: f64,
    pub on_track: bool,
    pub done: bool,
    pub recording: bool,
    pub frames_recorded: usize,
    pub steering: f64,
    pub throttle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMsg {
    pub tick: u64,
    pub width: usize,
    pub height: usize,
    /// Base64 of row-major RGB8 bytes.
    pub data: String,
}

impl FrameMsg {
    pub fn encode(tick: u64, frame: &Frame) -> Self {
        Self {
            tick,
            width: frame.width(),
            height: frame.height(),
            data: STANDARD.encode(frame.data()),
        }
    }

    pub fn decode(&self) -> Result<Frame, String> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| format!("bad base64 frame: {e}"))?;
        Frame::new(self.width, self.height, bytes).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMsg {
    pub ticks: u64,
    pub episode: u64,
    pub episode_reward: f64,
    pub frames_recorded: usize,
    pub tick_jitter_p95_ms: f64,
    pub dropped_messages: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        protocol: u32,
        role: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<SessionInfo>,
    },
    State(StateMsg),
    Frame(FrameMsg),
    Action {
        steering: f64,
        throttle: f64,
    },
    Record {
        on: bool,
    },
    EpisodeReset,
    Metrics(MetricsMsg),
    Error {
        message: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::State(_) => "state",
            WireMessage::Frame(_) => "frame",
            WireMessage::Action { .. } => "action",
            WireMessage::Record { .. } => "record",
            WireMessage::EpisodeReset => "episode_reset",
            WireMessage::Metrics(_) => "metrics",
            WireMessage::Error { .. } => "error",
        }
    }

    pub fn action(a: Action) -> Self {
        WireMessage::Action {
            steering: a.steering,
            throttle: a.throttle,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        WireMessage::Error { message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    #[serde(flatten)]
    pub msg: WireMessage,
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    /// Parse one text frame. The error string is suitable for an `error` reply.
    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        let obj = value.as_object().ok_or("message must be a JSON object")?;
        match obj.get("type") {
            None => return Err("message has no `type` field".into()),
            Some(t) if !t.is_string() => return Err("`type` must be a string".into()),
            _ => {}
        }
        if !obj.get("seq").is_some_and(|s| s.is_u64()) {
            return Err("message has no non-negative integer `seq`".into());
        }
        serde_json::from_value(value).map_err(|e| format!("invalid message: {e}"))
    }
}

/// Stamps outgoing messages with consecutive sequence numbers.
#[derive(Debug, Default)]
pub struct Sequencer {
    next: u64,
}

impl Sequencer {
    pub fn new() -> Self {
        Self { next: 1 }
    }

    pub fn stamp(&mut self, msg: WireMessage) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope { seq, msg }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagged_layout() {
        let e = Envelope {
            seq: 7,
            msg: WireMessage::Action {
                steering: -0.5,
                throttle: 0.25,
            },
        };
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v, serde_json::json!({"seq": 7, "type": "action", "steering": -0.5, "throttle": 0.25}));
        assert_eq!(Envelope::parse(&e.to_json()).unwrap(), e);

        let r = Envelope { seq: 1, msg: WireMessage::EpisodeReset };
        assert_eq!(r.to_json(), r#"{"seq":1,"type":"episode_reset"}"#);
        assert_eq!(Envelope::parse(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn rejects_unknown_or_malformed() {
        assert!(Envelope::parse(r#"{"seq":1,"type":"teleport"}"#).unwrap_err().contains("teleport"));
        assert!(Envelope::parse(r#"{"type":"record","on":true}"#).unwrap_err().contains("seq"));
        assert!(Envelope::parse(r#"{"seq":1}"#).unwrap_err().contains("type"));
        assert!(Envelope::parse("not json").is_err());
        assert!(Envelope::parse("[1,2]").is_err());
        assert!(Envelope::parse(r#"{"seq":1,"type":"action","steering":"left"}"#).is_err());
    }

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(3, 2, (0..18).collect()).unwrap();
        let m = FrameMsg::encode(4, &f);
        assert_eq!((m.width, m.height), (3, 2));
        assert_eq!(m.decode().unwrap(), f);
        let bad = FrameMsg { width: 4, ..m };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn sequencer_is_monotone() {
        let mut s = Sequencer::new();
        let a = s.stamp(WireMessage::EpisodeReset).seq;
        let b = s.stamp(WireMessage::error("x")).seq;
        assert_eq!((a, b), (1, 2));
    }
}
