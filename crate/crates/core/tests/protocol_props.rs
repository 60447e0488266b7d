use std::collections::BTreeSet;

use gear_core::analysis::SessionMetrics;
use gear_core::assembly::builtin_plan;
use gear_core::config::GearConfig;
use gear_core::gaze::{GazeSample, StreamConfig};
use gear_core::orchestrator::{
    Announcement, AnnouncementKind, IntentEvent, IntentSource, OrchestratorConfig, RobotCommand, RobotPhase,
};
use gear_core::perception::{BBox, DetectionFrame, Viewpoint};
use gear_core::protocol::{
    ConfigPayload, Fault, Hello, LabelPayload, MessageType, Payload, ProtocolError, RobotEventKind, RobotState,
    WireMessage,
};
use gear_core::session::World;
use gear_core::trace::{read_trace, Direction, TraceHeader, TraceWriter, TRACE_FORMAT_VERSION};
use proptest::prelude::*;

fn label() -> impl Strategy<Value = String> {
    "[a-z_]{1,12}|[^\\x00-\\x1f]{0,20}"
}

fn phase() -> impl Strategy<Value = RobotPhase> {
    prop::sample::select(vec![
        RobotPhase::Idle,
        RobotPhase::Announcing,
        RobotPhase::Retrieving,
        RobotPhase::Delivering,
        RobotPhase::Returning,
    ])
}

fn bbox() -> impl Strategy<Value = BBox> {
    (label(), -1e4..1e4f64, -1e4..1e4f64, 0.0..1e3f64, 0.0..1e3f64, 0.0..=1.0f64)
        .prop_map(|(l, x, y, w, h, c)| BBox::new(l, x, y, x + w, y + h, c).unwrap())
}

fn payload() -> impl Strategy<Value = Payload> {
    let ts = any::<i64>();
    prop_oneof![
        (any::<u32>(), prop::option::of(label())).prop_map(|(version, role)| Payload::Hello(Hello { version, role })),
        any::<bool>().prop_map(|start_session| Payload::Config(ConfigPayload { start_session })),
        (ts, any::<f64>(), any::<f64>(), any::<bool>()).prop_filter_map("finite", |(t, x, y, v)| {
            (x.is_finite() && y.is_finite()).then_some(Payload::GazeSample(GazeSample { timestamp_us: t, x, y, valid: v }))
        }),
        (ts, any::<bool>(), prop::collection::vec(bbox(), 0..6)).prop_map(|(t, user, boxes)| {
            Payload::DetectionFrame(DetectionFrame {
                source: if user { Viewpoint::User } else { Viewpoint::Robot },
                timestamp_us: t,
                boxes,
                frame_width: 1920.0,
                frame_height: 1080.0,
            })
        }),
        label().prop_map(|label| Payload::TouchRequest(LabelPayload { label })),
        label().prop_map(|label| Payload::AssemblyMark(LabelPayload { label })),
        (any::<bool>(), label(), ts, any::<u32>()).prop_map(|(g, label, t, d)| Payload::Intent(IntentEvent {
            source: if g { IntentSource::Gaze } else { IntentSource::Touch },
            label,
            timestamp_us: t,
            dwell_emissions: d,
        })),
        (0usize..4, label(), label(), ts).prop_map(|(k, label, text, t)| Payload::Announcement(Announcement {
            kind: [AnnouncementKind::Selected, AnnouncementKind::Prerequisite, AnnouncementKind::Unavailable, AnnouncementKind::Busy][k],
            label,
            text,
            timestamp_us: t,
        })),
        (phase(), phase()).prop_map(|(from, to)| Payload::RobotState(RobotState::PhaseChange { from, to })),
        (label(), label(), bbox()).prop_map(|(label, step_id, target)| {
            Payload::RobotState(RobotState::Command { command: RobotCommand::Fetch { label, step_id, target } })
        }),
        (0usize..4, prop::option::of(label())).prop_map(|(k, reason)| Payload::RobotState(RobotState::Report {
            event: [RobotEventKind::PickedUp, RobotEventKind::Delivered, RobotEventKind::Returned, RobotEventKind::Fault][k],
            reason,
        })),
        (any::<u64>(), 0usize..5).prop_map(|(seed, p)| {
            let plan = builtin_plan("gear_assembly").unwrap();
            let world = World::new(&plan, seed, &GearConfig::default().sim).unwrap();
            let phases = [RobotPhase::Idle, RobotPhase::Announcing, RobotPhase::Retrieving, RobotPhase::Delivering, RobotPhase::Returning];
            Payload::SceneSnapshot(Box::new(world.snapshot(phases[p])))
        }),
        (0.0..1e4f64, any::<u64>(), any::<u64>(), any::<bool>(), any::<bool>()).prop_map(|(c, total, wrong, complete, annotated)| {
            let wrong = wrong.min(total);
            Payload::Metrics(SessionMetrics {
                completion_time_s: c,
                requests_total: total,
                requests_incorrect: wrong,
                error_rate: if total > 0 { wrong as f64 / total as f64 } else { 0.0 },
                complete,
                annotated,
            })
        }),
        (label(), label(), prop::option::of(any::<u64>()))
            .prop_map(|(code, message, line)| Payload::Fault(Fault { code, message, line })),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn wire_round_trip(seq in any::<u64>(), p in payload()) {
        let msg = WireMessage::new(seq, p);
        let line = msg.encode();
        prop_assert!(!line.contains('\n'));
        let back = WireMessage::decode(&line).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(back.encode(), line);
    }

    #[test]
    fn trace_round_trip(msgs in prop::collection::vec((0i64..1_000_000, any::<bool>(), prop::option::of(0u64..4), payload()), 0..20)) {
        let plan = builtin_plan("gear_assembly").unwrap();
        let header = TraceHeader {
            version: TRACE_FORMAT_VERSION,
            source: "sim".into(),
            seed: Some(3),
            plan: plan.document().clone(),
            stream: StreamConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            annotations: Vec::new(),
        };
        let mut msgs = msgs;
        msgs.sort_by_key(|m| m.0);
        let mut w = TraceWriter::new(Vec::new(), &header).unwrap();
        for (i, (t, inbound, conn, p)) in msgs.iter().enumerate() {
            let dir = if *inbound { Direction::In } else { Direction::Out };
            w.message(*t, dir, *conn, &WireMessage::new(i as u64, p.clone())).unwrap();
        }
        let text = String::from_utf8(w.into_inner()).unwrap();
        let trace = read_trace(&text).unwrap();
        prop_assert_eq!(&trace.header, &header);
        prop_assert!(!trace.truncated);
        prop_assert_eq!(trace.messages.len(), msgs.len());
        for (m, (t, inbound, conn, p)) in trace.messages.iter().zip(&msgs) {
            prop_assert_eq!(m.t_us, *t);
            prop_assert_eq!(m.dir == Direction::In, *inbound);
            prop_assert_eq!(m.conn, *conn);
            prop_assert_eq!(&m.msg.payload, p);
        }
        // cutting the last line short is tolerated
        if let Some(cut) = text.trim_end().rfind('\n') {
            if !msgs.is_empty() {
                let mut end = cut + 1 + (text.len() - cut - 1) / 2;
                while !text.is_char_boundary(end) {
                    end -= 1;
                }
                let partial = &text[..end];
                let t = read_trace(partial).unwrap();
                prop_assert!(t.truncated);
                prop_assert_eq!(t.messages.len(), msgs.len() - 1);
            }
        }
    }

    #[test]
    fn garbage_never_panics(line in "\\PC{0,80}") {
        let _ = WireMessage::decode(&line);
    }
}

#[test]
fn every_message_type_is_generated() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let strategy = payload();
    let mut seen = BTreeSet::new();
    for _ in 0..2_000 {
        seen.insert(strategy.new_tree(&mut runner).unwrap().current().message_type().as_str());
    }
    let all: BTreeSet<&str> = MessageType::ALL.iter().map(|t| t.as_str()).collect();
    assert_eq!(seen, all);
}

#[test]
fn decode_errors() {
    assert!(matches!(WireMessage::decode("{"), Err(ProtocolError::Json(_))));
    assert!(matches!(
        WireMessage::decode(r#"{"type":"NOPE","seq":1,"payload":{}}"#),
        Err(ProtocolError::UnknownType(t)) if t == "NOPE"
    ));
    assert!(matches!(
        WireMessage::decode(r#"{"type":"GAZE_SAMPLE","seq":1,"payload":{"x":1}}"#),
        Err(ProtocolError::Payload { .. })
    ));
}
