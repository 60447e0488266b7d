//! Message-level driver around the orchestrator, the simulated world that
//! feeds it, and the offline run and replay loops built from the two.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::{session_metrics, AnalysisError, IntentAnnotation, SessionMetrics};
use crate::assembly::AssemblyPlan;
use crate::config::{GearConfig, SimConfig};
use crate::gaze::{GazeSample, StreamConfig};
use crate::orchestrator::{
    EventLog, Orchestrator, OrchestratorConfig, OrchestratorError, Output, RobotPhase,
};
use crate::perception::Viewpoint;
use crate::protocol::{ConfigPayload, Fault, LabelPayload, Payload, RobotState, SceneSnapshot, WireMessage};
use crate::sim::{
    default_script, entry_sample_count, randomize_scene, render_detections, rng_for, scripted_gaze, DetectionNoise,
    ScriptEntry, SimClock, SimError, SimulatedUser, Simulation, STREAM_DETECTIONS,
};
use crate::trace::{Direction, Trace, TraceError, TraceHeader, TraceWriter, TRACE_FORMAT_VERSION};

/// Connection id used for messages produced by the simulated world.
pub const SIM_CONN: u64 = 0;

/// Turns inbound protocol payloads into orchestrator calls and orchestrator
/// outputs into outbound payloads.
pub struct Session {
    orch: Orchestrator,
    out_seq: u64,
}

impl Session {
    pub fn new(plan: AssemblyPlan, config: OrchestratorConfig, stream: StreamConfig) -> Self {
        Self { orch: Orchestrator::new(plan, config, stream), out_seq: 0 }
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orch
    }

    pub fn phase(&self) -> RobotPhase {
        self.orch.phase()
    }

    pub fn log(&self) -> &EventLog {
        self.orch.log()
    }

    pub fn into_log(self) -> EventLog {
        self.orch.into_log()
    }

    /// Wraps an outbound payload with the next broadcast sequence number.
    pub fn stamp(&mut self, payload: Payload) -> WireMessage {
        self.out_seq += 1;
        WireMessage::new(self.out_seq, payload)
    }

    /// Applies one inbound payload received at `now_us`. HELLO is handled by
    /// the transport and ignored here.
    pub fn handle(&mut self, now_us: i64, payload: &Payload) -> Vec<Payload> {
        match payload {
            Payload::Hello(_) => Vec::new(),
            Payload::Config(c) => {
                if c.start_session {
                    self.orch.start_session(now_us);
                }
                Vec::new()
            }
            Payload::GazeSample(s) => match self.orch.on_gaze_sample(now_us, *s) {
                Ok(out) => to_payloads(out),
                Err(e) => vec![fault("GAZE", e.to_string())],
            },
            Payload::DetectionFrame(f) => match f.validate() {
                Ok(()) => {
                    self.orch.on_detection_frame(f.clone());
                    Vec::new()
                }
                Err(e) => vec![fault("DETECTION", e.to_string())],
            },
            Payload::TouchRequest(t) => to_payloads(self.orch.on_touch_request(now_us, &t.label)),
            Payload::AssemblyMark(m) => match self.orch.on_assembly_mark(now_us, &m.label) {
                Ok(()) => Vec::new(),
                Err(e) => vec![fault("ASSEMBLY_MARK", e.to_string())],
            },
            Payload::RobotState(state) => {
                let Some(event) = state.as_event() else {
                    return vec![fault("UNEXPECTED", "only REPORT robot states are accepted")];
                };
                let before = self.orch.phase();
                match self.orch.on_robot_event(now_us, event) {
                    Ok(out) => to_payloads(out),
                    Err(e @ OrchestratorError::Protocol { .. }) => {
                        let mut out = vec![fault("ROBOT_PROTOCOL", e.to_string())];
                        if before != RobotPhase::Idle {
                            out.push(Payload::RobotState(RobotState::PhaseChange { from: before, to: RobotPhase::Idle }));
                        }
                        out
                    }
                    Err(e) => vec![fault("ROBOT", e.to_string())],
                }
            }
            other => vec![fault("UNEXPECTED", format!("{} is not accepted inbound", other.message_type()))],
        }
    }
}

fn fault(code: &str, message: impl Into<String>) -> Payload {
    Payload::Fault(Fault::new(code, message))
}

fn to_payloads(outputs: Vec<Output>) -> Vec<Payload> {
    outputs
        .into_iter()
        .map(|o| match o {
            Output::Intent(i) => Payload::Intent(i),
            Output::Announcement(a) => Payload::Announcement(a),
            Output::PhaseChange { from, to } => Payload::RobotState(RobotState::PhaseChange { from, to }),
            Output::Command(command) => Payload::RobotState(RobotState::Command { command }),
            Output::Fault(reason) => fault("ABORTED", reason),
        })
        .collect()
}

/// Simulated table, robot, cameras and user, advanced one tick at a time.
pub struct World {
    plan: AssemblyPlan,
    cfg: SimConfig,
    sim: Simulation,
    user: SimulatedUser,
    det_rng: ChaCha8Rng,
    gaze: VecDeque<GazeSample>,
    next_detection_us: i64,
}

impl World {
    pub fn new(plan: &AssemblyPlan, seed: u64, cfg: &SimConfig) -> Result<Self, SimError> {
        let scene = randomize_scene(plan, seed, &cfg.layout)?;
        let sim = Simulation::new(scene, cfg.layout.clone(), cfg.robot, SimClock::new(cfg.tick_us));
        Ok(Self {
            plan: plan.clone(),
            cfg: cfg.clone(),
            sim,
            user: SimulatedUser::new(cfg.assemble_us),
            det_rng: rng_for(seed, STREAM_DETECTIONS),
            gaze: VecDeque::new(),
            next_detection_us: 0,
        })
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn now_us(&self) -> i64 {
        self.sim.now_us()
    }

    /// Queues tracker samples; each is emitted on the first tick at or
    /// after its timestamp.
    pub fn queue_gaze(&mut self, samples: impl IntoIterator<Item = GazeSample>) {
        self.gaze.extend(samples);
    }

    pub fn gaze_pending(&self) -> usize {
        self.gaze.len()
    }

    /// Every plan step has been assembled and the robot is home.
    pub fn is_done(&self) -> bool {
        !self.sim.is_busy() && self.plan.steps().iter().all(|s| self.user.assembled().contains(&s.part_label))
    }

    /// Inputs at the current time without advancing the clock. Used once
    /// before the first tick.
    pub fn start(&mut self) -> Vec<Payload> {
        self.collect(Vec::new())
    }

    /// Advances one tick and returns the inputs it produced, in order:
    /// robot reports, assembly marks, detection frames, gaze samples.
    pub fn tick(&mut self) -> Result<Vec<Payload>, SimError> {
        let events = self.sim.step(self.sim.tick_us())?;
        let reports = events.into_iter().map(|(_, e)| Payload::RobotState(e.into())).collect();
        Ok(self.collect(reports))
    }

    fn collect(&mut self, mut out: Vec<Payload>) -> Vec<Payload> {
        let now = self.sim.now_us();
        for label in self.user.step(now, &self.plan, &self.sim.scene) {
            self.sim.mark_assembled(&label);
            out.push(Payload::AssemblyMark(LabelPayload { label }));
        }
        if now >= self.next_detection_us {
            for (camera, viewpoint) in [(&self.cfg.user_camera, Viewpoint::User), (&self.cfg.robot_camera, Viewpoint::Robot)] {
                let frame = render_detections(&self.sim.scene, camera, viewpoint, self.cfg.noise, now, &mut self.det_rng);
                out.push(Payload::DetectionFrame(frame));
            }
            self.next_detection_us = now + self.cfg.detection_period_us;
        }
        while self.gaze.front().is_some_and(|s| s.timestamp_us <= now) {
            out.push(Payload::GazeSample(self.gaze.pop_front().expect("checked front")));
        }
        out
    }

    /// Lets the world react to an outbound payload (robot commands).
    pub fn apply(&mut self, payload: &Payload) {
        if let Payload::RobotState(RobotState::Command { command }) = payload {
            self.sim.dispatch(command);
        }
    }

    pub fn snapshot(&self, phase: RobotPhase) -> SceneSnapshot {
        let mut rng = rng_for(0, 0);
        let user_view = render_detections(
            &self.sim.scene,
            &self.cfg.user_camera,
            Viewpoint::User,
            DetectionNoise::NONE,
            self.now_us(),
            &mut rng,
        );
        SceneSnapshot {
            now_us: self.now_us(),
            phase,
            robot_pose: self.sim.robot_position(),
            scene: self.sim.scene.clone(),
            user_view,
        }
    }
}

/// Ground-truth intent windows for a gaze script starting at `start_us`.
pub fn script_annotations(script: &[ScriptEntry], stream: &StreamConfig, start_us: i64) -> Vec<IntentAnnotation> {
    let period = stream.sample_period_us();
    let mut t = start_us;
    let mut out = Vec::new();
    for entry in script {
        let end = t + entry_sample_count(entry, stream) as i64 * period;
        if let Some(label) = &entry.target_label {
            out.push(IntentAnnotation { start_us: t, end_us: end, intended_label: label.clone() });
        }
        t = end;
    }
    out
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("trace plan is invalid: {0}")]
    Plan(String),
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Trace(e.into())
    }
}

pub struct SimRun {
    /// The trace file contents.
    pub trace: String,
    pub log: EventLog,
    pub metrics: SessionMetrics,
    pub annotations: Vec<IntentAnnotation>,
    pub end_us: i64,
}

/// Runs a full scripted session in virtual time. The default script is
/// used when `script` is `None`.
pub fn run_simulation(
    plan: &AssemblyPlan,
    seed: u64,
    config: &GearConfig,
    script: Option<&[ScriptEntry]>,
) -> Result<SimRun, RunError> {
    let sim_cfg = &config.sim;
    let default;
    let script = match script {
        Some(s) => s,
        None => {
            default = default_script(plan, sim_cfg.fixation_ms, sim_cfg.gap_ms);
            &default
        }
    };
    let mut world = World::new(plan, seed, sim_cfg)?;
    let samples = scripted_gaze(
        &world.simulation().scene,
        &sim_cfg.user_camera,
        script,
        sim_cfg.gaze_sigma_px,
        seed,
        &config.stream,
        0,
    )?;
    let script_end = samples.last().map_or(0, |s| s.timestamp_us);
    world.queue_gaze(samples);
    let annotations = script_annotations(script, &config.stream, 0);

    let header = TraceHeader {
        version: TRACE_FORMAT_VERSION,
        source: "sim".into(),
        seed: Some(seed),
        plan: plan.document().clone(),
        stream: config.stream,
        orchestrator: config.orchestrator,
        annotations: annotations.clone(),
    };
    let mut writer = TraceWriter::new(Vec::new(), &header)?;
    let mut session = Session::new(plan.clone(), config.orchestrator, config.stream);
    let mut in_seq = 0u64;

    let mut feed = |now: i64, inputs: Vec<Payload>, world: &mut World, session: &mut Session, writer: &mut TraceWriter<Vec<u8>>| -> std::io::Result<()> {
        for p in inputs {
            in_seq += 1;
            let outputs = session.handle(now, &p);
            writer.message(now, Direction::In, Some(SIM_CONN), &WireMessage::new(in_seq, p))?;
            for o in outputs {
                world.apply(&o);
                let msg = session.stamp(o);
                writer.message(now, Direction::Out, None, &msg)?;
            }
        }
        Ok(())
    };

    let start = vec![Payload::Config(ConfigPayload { start_session: true })];
    let mut inputs = start;
    inputs.extend(world.start());
    feed(0, inputs, &mut world, &mut session, &mut writer)?;
    let deadline = script_end + sim_cfg.tail_us;
    while !(world.is_done() && world.gaze_pending() == 0) && world.now_us() < deadline {
        let inputs = world.tick()?;
        feed(world.now_us(), inputs, &mut world, &mut session, &mut writer)?;
    }
    let end_us = world.now_us();
    let metrics = session_metrics(session.log().records(), plan, &annotations)?;
    let msg = session.stamp(Payload::Metrics(metrics.clone()));
    writer.message(end_us, Direction::Out, None, &msg)?;
    let trace = String::from_utf8(writer.into_inner()).expect("JSON is UTF-8");
    Ok(SimRun { trace, log: session.into_log(), metrics, annotations, end_us })
}

pub struct Replay {
    pub log: EventLog,
    pub metrics: SessionMetrics,
    pub truncated: bool,
}

/// Feeds a trace's inbound messages through a fresh session in recorded
/// order and timing.
pub fn replay(trace: &Trace) -> Result<Replay, RunError> {
    let mut session = replay_session(&trace.header)?;
    for m in trace.inbound() {
        session.handle(m.t_us, &m.msg.payload);
    }
    let plan = session.orchestrator().plan().clone();
    let metrics = session_metrics(session.log().records(), &plan, &trace.header.annotations)?;
    Ok(Replay { log: session.into_log(), metrics, truncated: trace.truncated })
}

/// A session configured from a trace header.
pub fn replay_session(header: &TraceHeader) -> Result<Session, RunError> {
    let plan = AssemblyPlan::from_document(header.plan.clone()).map_err(|e| RunError::Plan(e.to_string()))?;
    Ok(Session::new(plan, header.orchestrator, header.stream))
}
