//! Newline-delimited JSON messages exchanged with the gateway. Every line is
//! one object `{"type": ..., "seq": ..., "payload": {...}}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::SessionMetrics;
use crate::gaze::GazeSample;
use crate::orchestrator::{Announcement, IntentEvent, RobotCommand, RobotEvent, RobotPhase};
use crate::perception::DetectionFrame;
use crate::sim::{Scene, Vec2};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    Hello,
    Config,
    GazeSample,
    DetectionFrame,
    TouchRequest,
    AssemblyMark,
    Intent,
    Announcement,
    RobotState,
    SceneSnapshot,
    Metrics,
    Fault,
}

impl MessageType {
    pub const ALL: [MessageType; 12] = [
        MessageType::Hello,
        MessageType::Config,
        MessageType::GazeSample,
        MessageType::DetectionFrame,
        MessageType::TouchRequest,
        MessageType::AssemblyMark,
        MessageType::Intent,
        MessageType::Announcement,
        MessageType::RobotState,
        MessageType::SceneSnapshot,
        MessageType::Metrics,
        MessageType::Fault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::Config => "CONFIG",
            MessageType::GazeSample => "GAZE_SAMPLE",
            MessageType::DetectionFrame => "DETECTION_FRAME",
            MessageType::TouchRequest => "TOUCH_REQUEST",
            MessageType::AssemblyMark => "ASSEMBLY_MARK",
            MessageType::Intent => "INTENT",
            MessageType::Announcement => "ANNOUNCEMENT",
            MessageType::RobotState => "ROBOT_STATE",
            MessageType::SceneSnapshot => "SCENE_SNAPSHOT",
            MessageType::Metrics => "METRICS",
            MessageType::Fault => "FAULT",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageType {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownType(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfigPayload {
    /// Marks the start of the measured session.
    #[serde(default)]
    pub start_session: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPayload {
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotEventKind {
    PickedUp,
    Delivered,
    Returned,
    Fault,
}

/// Robot traffic. `REPORT` flows from the robot (or simulator) to the
/// engine; `PHASE_CHANGE` and `COMMAND` flow from the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotState {
    PhaseChange { from: RobotPhase, to: RobotPhase },
    Command { command: RobotCommand },
    Report {
        event: RobotEventKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl From<RobotEvent> for RobotState {
    fn from(e: RobotEvent) -> Self {
        let (event, reason) = match e {
            RobotEvent::PickedUp => (RobotEventKind::PickedUp, None),
            RobotEvent::Delivered => (RobotEventKind::Delivered, None),
            RobotEvent::Returned => (RobotEventKind::Returned, None),
            RobotEvent::Fault { reason } => (RobotEventKind::Fault, Some(reason)),
        };
        RobotState::Report { event, reason }
    }
}

impl RobotState {
    pub fn as_event(&self) -> Option<RobotEvent> {
        let RobotState::Report { event, reason } = self else { return None };
        Some(match event {
            RobotEventKind::PickedUp => RobotEvent::PickedUp,
            RobotEventKind::Delivered => RobotEvent::Delivered,
            RobotEventKind::Returned => RobotEvent::Returned,
            RobotEventKind::Fault => RobotEvent::Fault { reason: reason.clone().unwrap_or_default() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub now_us: i64,
    pub phase: RobotPhase,
    pub robot_pose: Vec2,
    pub scene: Scene,
    /// Noise-free boxes as the user camera sees the table.
    pub user_view: DetectionFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
}

impl Fault {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.to_string(), message: message.into(), line: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Hello(Hello),
    Config(ConfigPayload),
    GazeSample(GazeSample),
    DetectionFrame(DetectionFrame),
    TouchRequest(LabelPayload),
    AssemblyMark(LabelPayload),
    Intent(IntentEvent),
    Announcement(Announcement),
    RobotState(RobotState),
    SceneSnapshot(Box<SceneSnapshot>),
    Metrics(SessionMetrics),
    Fault(Fault),
}

impl Payload {
    pub fn message_type(&self) -> MessageType {
        match self {
            Payload::Hello(_) => MessageType::Hello,
            Payload::Config(_) => MessageType::Config,
            Payload::GazeSample(_) => MessageType::GazeSample,
            Payload::DetectionFrame(_) => MessageType::DetectionFrame,
            Payload::TouchRequest(_) => MessageType::TouchRequest,
            Payload::AssemblyMark(_) => MessageType::AssemblyMark,
            Payload::Intent(_) => MessageType::Intent,
            Payload::Announcement(_) => MessageType::Announcement,
            Payload::RobotState(_) => MessageType::RobotState,
            Payload::SceneSnapshot(_) => MessageType::SceneSnapshot,
            Payload::Metrics(_) => MessageType::Metrics,
            Payload::Fault(_) => MessageType::Fault,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("unknown message type '{0}'")]
    UnknownType(String),
    #[error("bad {kind} payload: {message}")]
    Payload { kind: MessageType, message: String },
    #[error("protocol version {got} not supported (expected {expected})")]
    Version { got: u32, expected: u32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMessage {
    #[serde(rename = "type")]
    kind: String,
    seq: u64,
    #[serde(default)]
    payload: Value,
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawMessage", try_from = "RawMessage")]
pub struct WireMessage {
    pub seq: u64,
    pub payload: Payload,
}

impl From<WireMessage> for RawMessage {
    fn from(m: WireMessage) -> Self {
        let kind = m.payload.message_type().as_str().to_string();
        let mut tagged = serde_json::to_value(&m.payload).expect("payloads serialize");
        let payload = tagged.get_mut("payload").map(Value::take).unwrap_or(Value::Null);
        RawMessage { kind, seq: m.seq, payload }
    }
}

impl TryFrom<RawMessage> for WireMessage {
    type Error = ProtocolError;

    fn try_from(raw: RawMessage) -> Result<Self, Self::Error> {
        let kind: MessageType = raw.kind.parse()?;
        let tagged = serde_json::json!({ "type": raw.kind, "payload": raw.payload });
        let payload = serde_json::from_value(tagged)
            .map_err(|e| ProtocolError::Payload { kind, message: e.to_string() })?;
        Ok(WireMessage { seq: raw.seq, payload })
    }
}

impl WireMessage {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload }
    }

    pub fn message_type(&self) -> MessageType {
        self.payload.message_type()
    }

    /// One JSON line, without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn decode(line: &str) -> Result<Self, ProtocolError> {
        let raw: RawMessage = serde_json::from_str(line).map_err(|e| ProtocolError::Json(e.to_string()))?;
        WireMessage::try_from(raw)
    }
}

/// Accepts a HELLO at our protocol version.
pub fn check_hello(hello: &Hello) -> Result<(), ProtocolError> {
    if hello.version != PROTOCOL_VERSION {
        return Err(ProtocolError::Version { got: hello.version, expected: PROTOCOL_VERSION });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{AnnouncementKind, IntentSource};

    #[test]
    fn encodes_type_seq_payload() {
        let m = WireMessage::new(3, Payload::GazeSample(GazeSample::new(50_000, 10.5, 20.0)));
        assert_eq!(
            m.encode(),
            r#"{"type":"GAZE_SAMPLE","seq":3,"payload":{"timestamp_us":50000,"valid":true,"x":10.5,"y":20.0}}"#
        );
        assert_eq!(WireMessage::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn touch_and_robot_report_shapes() {
        let touch = WireMessage::decode(r#"{"type":"TOUCH_REQUEST","seq":1,"payload":{"label":"gear_small"}}"#).unwrap();
        assert_eq!(touch.payload, Payload::TouchRequest(LabelPayload { label: "gear_small".into() }));
        let report =
            WireMessage::decode(r#"{"type":"ROBOT_STATE","seq":2,"payload":{"kind":"REPORT","event":"PICKED_UP"}}"#)
                .unwrap();
        let Payload::RobotState(state) = report.payload else { panic!() };
        assert_eq!(state.as_event(), Some(RobotEvent::PickedUp));
        let fault: RobotState = RobotEvent::Fault { reason: "x".into() }.into();
        assert_eq!(fault.as_event(), Some(RobotEvent::Fault { reason: "x".into() }));
    }

    #[test]
    fn unknown_type_is_rejected() {
        let err = WireMessage::decode(r#"{"type":"TELEPORT","seq":1,"payload":{}}"#).unwrap_err();
        assert_eq!(err, ProtocolError::UnknownType("TELEPORT".into()));
    }

    #[test]
    fn malformed_and_bad_payload() {
        assert!(matches!(WireMessage::decode("{not json"), Err(ProtocolError::Json(_))));
        assert!(matches!(
            WireMessage::decode(r#"{"type":"GAZE_SAMPLE","seq":1,"payload":{"x":1}}"#),
            Err(ProtocolError::Payload { kind: MessageType::GazeSample, .. })
        ));
    }

    #[test]
    fn hello_version() {
        assert!(check_hello(&Hello { version: 1, role: None }).is_ok());
        assert_eq!(
            check_hello(&Hello { version: 2, role: None }),
            Err(ProtocolError::Version { got: 2, expected: 1 })
        );
    }

    #[test]
    fn announcement_round_trip() {
        let m = WireMessage::new(
            9,
            Payload::Announcement(Announcement {
                kind: AnnouncementKind::Selected,
                label: "gear_large".into(),
                text: "Object gear_large selected; Bringing now".into(),
                timestamp_us: 5,
            }),
        );
        assert_eq!(WireMessage::decode(&m.encode()).unwrap(), m);
        let i = WireMessage::new(
            10,
            Payload::Intent(IntentEvent { source: IntentSource::Touch, label: "a".into(), timestamp_us: 1, dwell_emissions: 0 }),
        );
        assert_eq!(WireMessage::decode(&i.encode()).unwrap(), i);
    }

    #[test]
    fn type_names_parse_back() {
        for t in MessageType::ALL {
            assert_eq!(t.as_str().parse::<MessageType>().unwrap(), t);
        }
    }
}
