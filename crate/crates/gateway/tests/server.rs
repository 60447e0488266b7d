use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gear_core::assembly::builtin_plan;
use gear_core::config::GearConfig;
use gear_core::orchestrator::{AnnouncementKind, EventLog};
use gear_core::protocol::{Fault, Hello, LabelPayload, Payload, WireMessage, PROTOCOL_VERSION};
use gear_core::session::{replay, run_simulation};
use gear_core::trace::{read_trace, Direction};
use gear_gateway::server::{start, ServeOptions, ServerHandle, WS_PATH};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;

const WAIT: Duration = Duration::from_secs(10);

fn options(simulate: bool) -> ServeOptions {
    let mut config = GearConfig::default();
    config.gateway.tcp_port = 0;
    config.gateway.ws_port = 0;
    let mut opts = ServeOptions::new(builtin_plan("gear_assembly").unwrap(), config);
    opts.simulate = simulate;
    opts
}

struct Client {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl Client {
    async fn connect(h: &ServerHandle) -> Self {
        let (r, w) = TcpStream::connect(h.tcp_addr).await.unwrap().into_split();
        Self { lines: BufReader::new(r).lines(), write: w }
    }

    async fn send_raw(&mut self, line: &str) {
        self.write.write_all(line.as_bytes()).await.unwrap();
        self.write.write_all(b"\n").await.unwrap();
    }

    async fn send(&mut self, seq: u64, p: Payload) {
        self.send_raw(&WireMessage::new(seq, p).encode()).await;
    }

    /// Next message, or None once the server closes the connection.
    async fn recv(&mut self) -> Option<WireMessage> {
        let line = timeout(WAIT, self.lines.next_line()).await.expect("server went quiet").unwrap()?;
        Some(WireMessage::decode(&line).unwrap())
    }

    async fn recv_fault(&mut self) -> Fault {
        loop {
            match self.recv().await.expect("closed before a fault").payload {
                Payload::Fault(f) => return f,
                _ => continue,
            }
        }
    }
}

fn hello(version: u32) -> Payload {
    Payload::Hello(Hello { version, role: Some("test".into()) })
}

fn touch(label: &str) -> Payload {
    Payload::TouchRequest(LabelPayload { label: label.into() })
}

#[tokio::test(flavor = "multi_thread")]
async fn tcp_round_trip() {
    let h = start(options(false)).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send(1, hello(PROTOCOL_VERSION)).await;
    c.send(2, touch("spanner")).await;
    let msg = c.recv().await.unwrap();
    let Payload::Announcement(a) = msg.payload else { panic!("{msg:?}") };
    assert_eq!(a.kind, AnnouncementKind::Unavailable);
    assert_eq!(a.label, "spanner");
    let summary = h.stop().await.unwrap();
    assert_eq!(summary.messages_in, 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn websocket_round_trip() {
    let h = start(options(false)).await.unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}{WS_PATH}", h.ws_addr)).await.unwrap();
    ws.send(Message::text(WireMessage::new(1, hello(PROTOCOL_VERSION)).encode())).await.unwrap();
    ws.send(Message::text(WireMessage::new(2, touch("spanner")).encode())).await.unwrap();
    let frame = timeout(WAIT, ws.next()).await.unwrap().unwrap().unwrap();
    let msg = WireMessage::decode(frame.to_text().unwrap()).unwrap();
    assert!(matches!(msg.payload, Payload::Announcement(ref a) if a.label == "spanner"), "{msg:?}");
    h.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn websocket_on_another_path_is_refused() {
    let h = start(options(false)).await.unwrap();
    let err = tokio_tungstenite::connect_async(format!("ws://{}/other", h.ws_addr)).await.unwrap_err();
    assert!(err.to_string().contains("404"), "{err}");
    h.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_line_reports_its_line_number() {
    let h = start(options(false)).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send(1, hello(PROTOCOL_VERSION)).await;
    c.send_raw("{not json").await;
    let f = c.recv_fault().await;
    assert_eq!((f.code.as_str(), f.line), ("MALFORMED", Some(2)));
    // the connection stays usable
    c.send(2, touch("spanner")).await;
    assert!(matches!(c.recv().await.unwrap().payload, Payload::Announcement(_)));
    h.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn wrong_version_closes_the_connection() {
    let h = start(options(false)).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send(1, hello(PROTOCOL_VERSION + 1)).await;
    assert_eq!(c.recv_fault().await.code, "VERSION");
    assert!(c.recv().await.is_none());
    h.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_type_closes_the_connection() {
    let h = start(options(false)).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send_raw(r#"{"type":"TELEPORT","seq":1,"payload":{}}"#).await;
    let f = c.recv_fault().await;
    assert_eq!((f.code.as_str(), f.line), ("UNKNOWN_TYPE", Some(1)));
    assert!(c.recv().await.is_none());
    h.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn sequence_gap_warns_and_still_processes() {
    let h = start(options(false)).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send(1, hello(PROTOCOL_VERSION)).await;
    c.send(5, touch("spanner")).await;
    assert_eq!(c.recv_fault().await.code, "SEQ_GAP");
    assert!(matches!(c.recv().await.unwrap().payload, Payload::Announcement(_)));
    h.stop().await.unwrap();
}

/// Feeding a simulator trace's inputs over TCP gives the same decisions, and
/// the served trace replays to the served log.
#[tokio::test(flavor = "multi_thread")]
async fn transport_preserves_decisions() {
    let plan = builtin_plan("gear_assembly").unwrap();
    let run = run_simulation(&plan, 7, &GearConfig::default(), None).unwrap();
    let original = read_trace(&run.trace).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(false);
    opts.trace_path = Some(dir.path().join("served.jsonl"));
    opts.log_path = Some(dir.path().join("served.log.jsonl"));
    let h = start(opts).await.unwrap();
    let mut c = Client::connect(&h).await;
    let inbound: Vec<&WireMessage> = original.inbound().map(|m| &m.msg).collect();
    for (i, msg) in inbound.iter().enumerate() {
        c.send(i as u64 + 1, msg.payload.clone()).await;
    }
    // the closing METRICS message is only sent when the gateway stops
    let want: Vec<&Payload> = original
        .messages
        .iter()
        .filter(|m| m.dir == Direction::Out && !matches!(m.msg.payload, Payload::Metrics(_)))
        .map(|m| &m.msg.payload)
        .collect();
    let mut got = Vec::new();
    while got.len() < want.len() {
        got.push(c.recv().await.expect("closed early").payload);
    }
    // a refused touch after the last input acts as a barrier
    c.send(inbound.len() as u64 + 1, touch("barrier")).await;
    loop {
        if let Payload::Announcement(a) = c.recv().await.unwrap().payload {
            if a.label == "barrier" {
                break;
            }
        }
    }
    let summary = h.stop().await.unwrap();
    assert_eq!(summary.messages_in, inbound.len() as u64 + 1);

    let announcements = |ps: Vec<&Payload>| -> Vec<(AnnouncementKind, String)> {
        ps.into_iter()
            .filter_map(|p| match p {
                Payload::Announcement(a) => Some((a.kind, a.label.clone())),
                _ => None,
            })
            .collect()
    };
    assert_eq!(announcements(got.iter().collect()), announcements(want.clone()));
    let types = |ps: Vec<&Payload>| ps.into_iter().map(|p| p.message_type()).collect::<Vec<_>>();
    assert_eq!(types(got.iter().collect()), types(want));

    let served = read_trace(&std::fs::read_to_string(dir.path().join("served.jsonl")).unwrap()).unwrap();
    assert_eq!(served.header.source, "live");
    let replayed = replay(&served).unwrap();
    let log_text = std::fs::read_to_string(dir.path().join("served.log.jsonl")).unwrap();
    assert_eq!(replayed.log.to_jsonl(), log_text);
    assert_eq!(EventLog::parse_jsonl(&log_text).unwrap(), summary.log);
}

#[tokio::test(flavor = "multi_thread")]
async fn simulated_session_runs_to_completion() {
    let mut opts = options(true);
    opts.config.gateway.time_scale = 100.0;
    opts.scripted_gaze = true;
    opts.exit_when_done = true;
    opts.max_duration = Some(Duration::from_secs(30));
    let h = start(opts).await.unwrap();
    let mut c = Client::connect(&h).await;
    c.send(1, hello(PROTOCOL_VERSION)).await;
    let mut snapshots = 0;
    let mut metrics = None;
    while let Some(msg) = c.recv().await {
        match msg.payload {
            Payload::SceneSnapshot(_) => snapshots += 1,
            Payload::Metrics(m) => metrics = Some(m),
            _ => {}
        }
    }
    let summary = h.wait().await.unwrap();
    assert!(summary.done);
    assert!(snapshots > 0);
    let m = summary.metrics.unwrap();
    assert!(m.complete && m.requests_total == 4 && m.requests_incorrect == 0, "{m:?}");
    if let Some(seen) = metrics {
        assert_eq!(seen, m);
    }
}
