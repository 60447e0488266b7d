//! Live gateway. TCP clients and WebSocket clients on `/gear` speak the same
//! newline-delimited protocol; every inbound message goes through one queue
//! so the session sees a single total order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gear_core::analysis::{session_metrics, IntentAnnotation, SessionMetrics};
use gear_core::assembly::AssemblyPlan;
use gear_core::config::GearConfig;
use gear_core::orchestrator::EventLog;
use gear_core::protocol::{check_hello, ConfigPayload, Fault, Payload, ProtocolError, WireMessage};
use gear_core::session::{script_annotations, Session, World, SIM_CONN};
use gear_core::sim::{default_script, scripted_gaze};
use gear_core::trace::{Direction, TraceHeader, TraceWriter, TRACE_FORMAT_VERSION};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;
use tracing::{debug, info, warn};

pub const WS_PATH: &str = "/gear";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation: {0}")]
    Sim(#[from] gear_core::sim::SimError),
    #[error("engine task failed: {0}")]
    Join(String),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub plan: AssemblyPlan,
    pub seed: u64,
    pub config: GearConfig,
    pub trace_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Run the simulated table, robot and user alongside the gateway.
    pub simulate: bool,
    /// Also feed the default gaze script (requires `simulate`).
    pub scripted_gaze: bool,
    /// Stop once the simulated user has assembled everything.
    pub exit_when_done: bool,
    pub max_duration: Option<Duration>,
}

impl ServeOptions {
    pub fn new(plan: AssemblyPlan, config: GearConfig) -> Self {
        Self {
            plan,
            seed: 0,
            config,
            trace_path: None,
            log_path: None,
            simulate: true,
            scripted_gaze: false,
            exit_when_done: false,
            max_duration: None,
        }
    }
}

#[derive(Debug)]
pub struct ServeSummary {
    pub log: EventLog,
    pub metrics: Option<SessionMetrics>,
    pub messages_in: u64,
    /// The simulated session finished.
    pub done: bool,
}

pub struct ServerHandle {
    pub tcp_addr: SocketAddr,
    pub ws_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    engine: JoinHandle<Result<ServeSummary, ServeError>>,
}

impl ServerHandle {
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
    }

    /// Waits for the engine to stop on its own (or after `shutdown`).
    pub async fn wait(self) -> Result<ServeSummary, ServeError> {
        let res = self.engine.await.map_err(|e| ServeError::Join(e.to_string()))?;
        let _ = self.shutdown.send(true);
        res
    }

    /// A cloneable trigger for `shutdown`, for use from other tasks.
    pub fn stopper(&self) -> Stopper {
        Stopper(self.shutdown.clone())
    }

    pub async fn stop(self) -> Result<ServeSummary, ServeError> {
        self.shutdown();
        self.wait().await
    }
}

#[derive(Clone)]
pub struct Stopper(watch::Sender<bool>);

impl Stopper {
    pub fn stop(&self) {
        let _ = self.0.send(true);
    }
}

enum ConnOut {
    Line(Arc<str>),
    Close,
}

enum Inbound {
    Connected { conn: u64, tx: mpsc::UnboundedSender<ConnOut> },
    Line { conn: u64, line_no: u64, text: String },
    Closed { conn: u64 },
}

/// Binds both listeners and starts the engine.
pub async fn start(opts: ServeOptions) -> Result<ServerHandle, ServeError> {
    let gw = &opts.config.gateway;
    let tcp = TcpListener::bind((gw.bind.as_str(), gw.tcp_port)).await?;
    let ws = TcpListener::bind((gw.bind.as_str(), gw.ws_port)).await?;
    let (tcp_addr, ws_addr) = (tcp.local_addr()?, ws.local_addr()?);
    info!(%tcp_addr, %ws_addr, "gateway listening");

    let (shutdown, shutdown_rx) = watch::channel(false);
    let (in_tx, in_rx) = mpsc::unbounded_channel();
    let next_conn = Arc::new(std::sync::atomic::AtomicU64::new(1));
    tokio::spawn(accept_loop(tcp, false, in_tx.clone(), next_conn.clone(), shutdown_rx.clone()));
    tokio::spawn(accept_loop(ws, true, in_tx, next_conn, shutdown_rx.clone()));

    let engine = Engine::new(opts)?;
    let engine = tokio::spawn(engine.run(in_rx, shutdown_rx));
    Ok(ServerHandle { tcp_addr, ws_addr, shutdown, engine })
}

async fn accept_loop(
    listener: TcpListener,
    websocket: bool,
    in_tx: mpsc::UnboundedSender<Inbound>,
    next_conn: Arc<std::sync::atomic::AtomicU64>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(a) => a,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                let conn = next_conn.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                debug!(conn, %peer, websocket, "client connected");
                let in_tx = in_tx.clone();
                let shutdown = shutdown.clone();
                tokio::spawn(async move {
                    let res = if websocket {
                        serve_ws(stream, conn, in_tx.clone(), shutdown).await.map_err(|e| e.to_string())
                    } else {
                        serve_tcp(stream, conn, in_tx.clone(), shutdown).await.map_err(|e| e.to_string())
                    };
                    if let Err(e) = res {
                        debug!(conn, "connection ended: {e}");
                    }
                    let _ = in_tx.send(Inbound::Closed { conn });
                });
            }
        }
    }
}

async fn serve_tcp(
    stream: TcpStream,
    conn: u64,
    in_tx: mpsc::UnboundedSender<Inbound>,
    mut shutdown: watch::Receiver<bool>,
) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let _ = in_tx.send(Inbound::Connected { conn, tx: out_tx });
    let mut lines = BufReader::new(read).lines();
    let mut line_no = 0u64;
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            line = lines.next_line() => match line? {
                Some(text) => {
                    line_no += 1;
                    let _ = in_tx.send(Inbound::Line { conn, line_no, text });
                }
                None => break,
            },
            out = out_rx.recv() => match out {
                Some(ConnOut::Line(l)) => {
                    write.write_all(l.as_bytes()).await?;
                    write.write_all(b"\n").await?;
                }
                Some(ConnOut::Close) | None => break,
            },
        }
    }
    write.shutdown().await
}

// the handshake callback signature is fixed by tungstenite
#[allow(clippy::result_large_err)]
async fn serve_ws(
    stream: TcpStream,
    conn: u64,
    in_tx: mpsc::UnboundedSender<Inbound>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == WS_PATH {
            return Ok(resp);
        }
        let mut err = ErrorResponse::new(Some(format!("unknown path; use {WS_PATH}")));
        *err.status_mut() = StatusCode::NOT_FOUND;
        Err(err)
    };
    let ws = tokio_tungstenite::accept_hdr_async(stream, check_path).await?;
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let _ = in_tx.send(Inbound::Connected { conn, tx: out_tx });
    let mut line_no = 0u64;
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            frame = source.next() => match frame {
                Some(Ok(Message::Text(text))) => {
                    for l in text.as_str().lines() {
                        line_no += 1;
                        let _ = in_tx.send(Inbound::Line { conn, line_no, text: l.to_string() });
                    }
                }
                Some(Ok(Message::Close(_))) | None => break,
                Some(Ok(_)) => {}
                Some(Err(e)) => return Err(e),
            },
            out = out_rx.recv() => match out {
                Some(ConnOut::Line(l)) => sink.send(Message::text(l.as_ref())).await?,
                Some(ConnOut::Close) | None => break,
            },
        }
    }
    let _ = sink.send(Message::Close(None)).await;
    Ok(())
}

struct Engine {
    opts: ServeOptions,
    session: Session,
    world: Option<World>,
    trace: Option<TraceWriter<BufWriter<File>>>,
    clients: HashMap<u64, mpsc::UnboundedSender<ConnOut>>,
    last_seq: HashMap<u64, u64>,
    sim_seq: u64,
    messages_in: u64,
    annotations: Vec<IntentAnnotation>,
    started: Instant,
    next_snapshot_us: i64,
}

impl Engine {
    fn new(opts: ServeOptions) -> Result<Self, ServeError> {
        let cfg = &opts.config;
        let mut annotations = Vec::new();
        let world = if opts.simulate {
            let mut world = World::new(&opts.plan, opts.seed, &cfg.sim)?;
            if opts.scripted_gaze {
                let script = default_script(&opts.plan, cfg.sim.fixation_ms, cfg.sim.gap_ms);
                let samples = scripted_gaze(
                    &world.simulation().scene,
                    &cfg.sim.user_camera,
                    &script,
                    cfg.sim.gaze_sigma_px,
                    opts.seed,
                    &cfg.stream,
                    0,
                )?;
                world.queue_gaze(samples);
                annotations = script_annotations(&script, &cfg.stream, 0);
            }
            Some(world)
        } else {
            None
        };
        let trace = match &opts.trace_path {
            Some(path) => {
                let header = TraceHeader {
                    version: TRACE_FORMAT_VERSION,
                    source: "live".into(),
                    seed: opts.simulate.then_some(opts.seed),
                    plan: opts.plan.document().clone(),
                    stream: cfg.stream,
                    orchestrator: cfg.orchestrator,
                    annotations: annotations.clone(),
                };
                Some(TraceWriter::new(BufWriter::new(File::create(path)?), &header)?)
            }
            None => None,
        };
        let session = Session::new(opts.plan.clone(), cfg.orchestrator, cfg.stream);
        Ok(Self {
            opts,
            session,
            world,
            trace,
            clients: HashMap::new(),
            last_seq: HashMap::new(),
            sim_seq: 0,
            messages_in: 0,
            annotations,
            started: Instant::now(),
            next_snapshot_us: 0,
        })
    }

    fn now_us(&self) -> i64 {
        match &self.world {
            Some(w) => w.now_us(),
            None => self.elapsed_us(),
        }
    }

    /// Wall time since start, in scaled simulation microseconds.
    fn elapsed_us(&self) -> i64 {
        (self.started.elapsed().as_micros() as f64 * self.opts.config.gateway.time_scale) as i64
    }

    async fn run(
        mut self,
        mut rx: mpsc::UnboundedReceiver<Inbound>,
        mut shutdown: watch::Receiver<bool>,
    ) -> Result<ServeSummary, ServeError> {
        self.started = Instant::now();
        let scale = self.opts.config.gateway.time_scale;
        let tick = Duration::from_micros(((self.opts.config.sim.tick_us as f64 / scale) as u64).max(1_000));
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let deadline = self.opts.max_duration.map(|d| self.started + d);
        if let Some(world) = self.world.as_mut() {
            let mut inputs = vec![Payload::Config(ConfigPayload { start_session: true })];
            inputs.extend(world.start());
            self.feed_sim(inputs)?;
        }
        let mut done = false;
        loop {
            tokio::select! {
                biased;
                _ = shutdown.changed() => break,
                ev = rx.recv() => match ev {
                    Some(ev) => self.on_inbound(ev)?,
                    None => break,
                },
                _ = ticker.tick(), if self.world.is_some() => {
                    self.catch_up()?;
                    let w = self.world.as_ref().expect("ticking with a world");
                    if self.opts.exit_when_done && w.is_done() && w.gaze_pending() == 0 {
                        done = true;
                        break;
                    }
                }
                _ = sleep_until(deadline) => break,
            }
        }
        self.finish(done)
    }

    /// Advances the world to wall-clock time.
    fn catch_up(&mut self) -> Result<(), ServeError> {
        let elapsed = self.elapsed_us();
        loop {
            let world = self.world.as_mut().expect("catch_up needs a world");
            if world.now_us() + world.simulation().tick_us() > elapsed {
                break;
            }
            let inputs = world.tick()?;
            self.feed_sim(inputs)?;
            let now = self.now_us();
            if now >= self.next_snapshot_us {
                let w = self.world.as_ref().expect("world present");
                let snap = w.snapshot(self.session.phase());
                // Snapshots are derived state and are not traced.
                let msg = self.session.stamp(Payload::SceneSnapshot(Box::new(snap)));
                self.broadcast(&msg, false)?;
                self.next_snapshot_us = now + self.opts.config.gateway.snapshot_period_us;
            }
        }
        Ok(())
    }

    fn feed_sim(&mut self, inputs: Vec<Payload>) -> Result<(), ServeError> {
        let now = self.now_us();
        for p in inputs {
            self.sim_seq += 1;
            let msg = WireMessage::new(self.sim_seq, p);
            if let Some(t) = self.trace.as_mut() {
                t.message(now, Direction::In, Some(SIM_CONN), &msg)?;
            }
            self.dispatch(now, &msg.payload)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, now: i64, payload: &Payload) -> Result<(), ServeError> {
        self.messages_in += 1;
        for out in self.session.handle(now, payload) {
            if let Some(w) = self.world.as_mut() {
                w.apply(&out);
            }
            let msg = self.session.stamp(out);
            self.broadcast(&msg, true)?;
        }
        Ok(())
    }

    fn broadcast(&mut self, msg: &WireMessage, traced: bool) -> Result<(), ServeError> {
        if traced {
            let now = self.now_us();
            if let Some(t) = self.trace.as_mut() {
                t.message(now, Direction::Out, None, msg)?;
            }
        }
        let line: Arc<str> = msg.encode().into();
        self.clients.retain(|_, tx| tx.send(ConnOut::Line(line.clone())).is_ok());
        Ok(())
    }

    fn reply(&mut self, conn: u64, fault: Fault, close: bool) -> Result<(), ServeError> {
        let msg = self.session.stamp(Payload::Fault(fault));
        let now = self.now_us();
        if let Some(t) = self.trace.as_mut() {
            t.message(now, Direction::Out, Some(conn), &msg)?;
        }
        if let Some(tx) = self.clients.get(&conn) {
            let _ = tx.send(ConnOut::Line(msg.encode().into()));
            if close {
                let _ = tx.send(ConnOut::Close);
            }
        }
        Ok(())
    }

    fn on_inbound(&mut self, ev: Inbound) -> Result<(), ServeError> {
        match ev {
            Inbound::Connected { conn, tx } => {
                self.clients.insert(conn, tx);
            }
            Inbound::Closed { conn } => {
                self.clients.remove(&conn);
                self.last_seq.remove(&conn);
            }
            Inbound::Line { conn, line_no, text } => {
                if text.trim().is_empty() {
                    return Ok(());
                }
                let msg = match WireMessage::decode(&text) {
                    Ok(m) => m,
                    Err(e) => {
                        // Unknown types mean the peer speaks another protocol version.
                        let close = matches!(e, ProtocolError::UnknownType(_));
                        let code = if close { "UNKNOWN_TYPE" } else { "MALFORMED" };
                        let fault = Fault { code: code.into(), message: e.to_string(), line: Some(line_no) };
                        return self.reply(conn, fault, close);
                    }
                };
                let expected = self.last_seq.get(&conn).map_or(msg.seq, |s| s + 1);
                self.last_seq.insert(conn, msg.seq);
                if msg.seq != expected {
                    let fault = Fault {
                        code: "SEQ_GAP".into(),
                        message: format!("expected seq {expected}, got {}", msg.seq),
                        line: Some(line_no),
                    };
                    self.reply(conn, fault, false)?;
                }
                if let Payload::Hello(h) = &msg.payload {
                    if let Err(e) = check_hello(h) {
                        return self.reply(conn, Fault::new("VERSION", e.to_string()), true);
                    }
                }
                let now = self.now_us();
                if let Some(t) = self.trace.as_mut() {
                    t.message(now, Direction::In, Some(conn), &msg)?;
                }
                self.dispatch(now, &msg.payload)?;
            }
        }
        Ok(())
    }

    fn finish(mut self, done: bool) -> Result<ServeSummary, ServeError> {
        let now = self.now_us();
        let metrics = session_metrics(self.session.log().records(), &self.opts.plan, &self.annotations).ok();
        if let Some(m) = &metrics {
            let msg = self.session.stamp(Payload::Metrics(m.clone()));
            if let Some(t) = self.trace.as_mut() {
                t.message(now, Direction::Out, None, &msg)?;
            }
            let line: Arc<str> = msg.encode().into();
            for tx in self.clients.values() {
                let _ = tx.send(ConnOut::Line(line.clone()));
            }
        }
        for tx in self.clients.values() {
            let _ = tx.send(ConnOut::Close);
        }
        if let Some(mut t) = self.trace.take() {
            t.flush()?;
        }
        let log = self.session.into_log();
        if let Some(path) = &self.opts.log_path {
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(log.to_jsonl().as_bytes())?;
            f.flush()?;
        }
        info!(messages_in = self.messages_in, done, "gateway stopped");
        Ok(ServeSummary { log, metrics, messages_in: self.messages_in, done })
    }
}

async fn sleep_until(deadline: Option<Instant>) {
    match deadline {
        Some(d) => tokio::time::sleep_until(d).await,
        None => std::future::pending().await,
    }
}
