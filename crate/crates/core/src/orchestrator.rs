//! The event loop that turns gaze and touch input into validated fetch
//! commands and drives the robot lifecycle:
//! IDLE -> ANNOUNCING -> RETRIEVING -> DELIVERING -> RETURNING -> IDLE.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{validate_request, AssemblyPlan, PlanState, StateError, Validation};
use crate::gaze::{GazeError, GazeSample, GazeWindow, MeanGaze, StreamConfig};
use crate::perception::{align_object, resolve_target_min_confidence, BBox, DetectionFrame, Viewpoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Consecutive mean-gaze emissions on one label needed to fire an intent.
    pub dwell_threshold: u32,
    /// Same-label gaze intents are suppressed for this long after firing.
    pub refractory_us: i64,
    /// Maximum age of the USER frame paired with a mean gaze.
    pub staleness_us: i64,
    pub min_confidence: f64,
    /// Means whose window spans longer than this are not matched. They mix
    /// samples from either side of a tracking gap.
    pub max_window_span_us: i64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            dwell_threshold: 1,
            refractory_us: 2_000_000,
            staleness_us: 200_000,
            min_confidence: 0.0,
            max_window_span_us: 1_500_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentSource {
    Gaze,
    Touch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentEvent {
    pub source: IntentSource,
    pub label: String,
    pub timestamp_us: i64,
    /// Consecutive matching emissions behind a gaze intent; 0 for touch.
    pub dwell_emissions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotPhase {
    Idle,
    Announcing,
    Retrieving,
    Delivering,
    Returning,
}

impl RobotPhase {
    /// The phase that follows in a normal fetch cycle.
    pub fn next(self) -> RobotPhase {
        match self {
            RobotPhase::Idle => RobotPhase::Announcing,
            RobotPhase::Announcing => RobotPhase::Retrieving,
            RobotPhase::Retrieving => RobotPhase::Delivering,
            RobotPhase::Delivering => RobotPhase::Returning,
            RobotPhase::Returning => RobotPhase::Idle,
        }
    }

    pub fn can_transition(self, to: RobotPhase) -> bool {
        to == self.next() || to == RobotPhase::Idle
    }
}

impl fmt::Display for RobotPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RobotPhase::Idle => "IDLE",
            RobotPhase::Announcing => "ANNOUNCING",
            RobotPhase::Retrieving => "RETRIEVING",
            RobotPhase::Delivering => "DELIVERING",
            RobotPhase::Returning => "RETURNING",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnouncementKind {
    Selected,
    Prerequisite,
    Unavailable,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub kind: AnnouncementKind,
    pub label: String,
    pub text: String,
    pub timestamp_us: i64,
}

pub fn selected_text(label: &str) -> String {
    format!("Object {label} selected; Bringing now")
}

pub fn prerequisite_text(label: &str, pending_labels: &[String]) -> String {
    format!("Object {label} needs {} assembled first", pending_labels.join(", "))
}

pub fn busy_text(label: &str) -> String {
    format!("Robot busy; request for {label} ignored")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotCommand {
    Fetch { label: String, step_id: String, target: BBox },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotEvent {
    PickedUp,
    Delivered,
    Returned,
    Fault { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogPayload {
    SessionStart { plan_id: String },
    GazeSampleRef { sample_timestamp_us: i64, valid: bool },
    MeanGaze(MeanGaze),
    Intent(IntentEvent),
    ValidationOutcome { label: String, validation: Validation },
    Announcement(Announcement),
    RobotPhaseChange { from: RobotPhase, to: RobotPhase },
    Command(RobotCommand),
    Delivery { label: String, step_id: String },
    AssemblyMark { label: String, step_id: String },
    Fault { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub index: u64,
    pub timestamp_us: i64,
    pub payload: LogPayload,
}

/// Append-only, timestamp-ordered session log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<EventLogRecord>,
}

impl EventLog {
    pub fn push(&mut self, timestamp_us: i64, payload: LogPayload) -> &EventLogRecord {
        let ts = self.records.last().map_or(timestamp_us, |r| r.timestamp_us.max(timestamp_us));
        self.records.push(EventLogRecord { index: self.records.len() as u64, timestamp_us: ts, payload });
        self.records.last().expect("just pushed")
    }

    pub fn records(&self) -> &[EventLogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_records(records: Vec<EventLogRecord>) -> Self {
        Self { records }
    }

    /// Parses `to_jsonl` output. Errors carry the 1-based line number.
    pub fn parse_jsonl(text: &str) -> Result<Self, (usize, serde_json::Error)> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
            .collect::<Result<Vec<EventLogRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// Counts consecutive emissions resolving to the same label and fires once
/// the count reaches the threshold, outside the per-label refractory period.
#[derive(Debug, Clone)]
pub struct DwellTracker {
    threshold: u32,
    refractory_us: i64,
    current: Option<(String, u32)>,
    last_fired: HashMap<String, i64>,
}

impl DwellTracker {
    pub fn new(threshold: u32, refractory_us: i64) -> Self {
        Self { threshold: threshold.max(1), refractory_us, current: None, last_fired: HashMap::new() }
    }

    pub fn observe(&mut self, label: Option<&str>, timestamp_us: i64) -> Option<IntentEvent> {
        let Some(label) = label else {
            self.current = None;
            return None;
        };
        let count = match &mut self.current {
            Some((l, n)) if l == label => {
                *n = n.saturating_add(1);
                *n
            }
            _ => {
                self.current = Some((label.to_string(), 1));
                1
            }
        };
        if count < self.threshold {
            return None;
        }
        if let Some(&t) = self.last_fired.get(label) {
            if timestamp_us - t < self.refractory_us {
                return None;
            }
        }
        self.last_fired.insert(label.to_string(), timestamp_us);
        Some(IntentEvent {
            source: IntentSource::Gaze,
            label: label.to_string(),
            timestamp_us,
            dwell_emissions: count,
        })
    }

    pub fn reset(&mut self) {
        self.current = None;
    }
}

/// Everything the loop wants the outside world to see.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Intent(IntentEvent),
    Announcement(Announcement),
    PhaseChange { from: RobotPhase, to: RobotPhase },
    Command(RobotCommand),
    Fault(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestratorError {
    #[error("unknown part '{0}'")]
    UnknownPart(String),
    #[error("robot event {event:?} not valid in phase {phase}")]
    Protocol { event: RobotEvent, phase: RobotPhase },
    #[error(transparent)]
    Gaze(#[from] GazeError),
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, PartialEq)]
struct Outstanding {
    label: String,
    step_id: String,
    delivered: bool,
}

pub struct Orchestrator {
    plan: AssemblyPlan,
    config: OrchestratorConfig,
    state: PlanState,
    phase: RobotPhase,
    window: GazeWindow,
    dwell: DwellTracker,
    user_frame: Option<DetectionFrame>,
    robot_frame: Option<DetectionFrame>,
    outstanding: Option<Outstanding>,
    log: EventLog,
}

impl Orchestrator {
    pub fn new(plan: AssemblyPlan, config: OrchestratorConfig, stream: StreamConfig) -> Self {
        Self {
            plan,
            config,
            state: PlanState::new(),
            phase: RobotPhase::Idle,
            window: GazeWindow::from_config(&stream),
            dwell: DwellTracker::new(config.dwell_threshold, config.refractory_us),
            user_frame: None,
            robot_frame: None,
            outstanding: None,
            log: EventLog::default(),
        }
    }

    pub fn plan(&self) -> &AssemblyPlan {
        &self.plan
    }

    pub fn plan_state(&self) -> &PlanState {
        &self.state
    }

    pub fn phase(&self) -> RobotPhase {
        self.phase
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn has_outstanding_command(&self) -> bool {
        self.outstanding.is_some()
    }

    pub fn start_session(&mut self, now_us: i64) {
        let plan_id = self.plan.plan_id().to_string();
        self.log.push(now_us, LogPayload::SessionStart { plan_id });
    }

    pub fn on_detection_frame(&mut self, frame: DetectionFrame) {
        match frame.source {
            Viewpoint::User => self.user_frame = Some(frame),
            Viewpoint::Robot => self.robot_frame = Some(frame),
        }
    }

    /// Feeds one raw sample through the gaze window and, on emission, the
    /// dwell tracker and intent path.
    pub fn on_gaze_sample(&mut self, now_us: i64, sample: GazeSample) -> Result<Vec<Output>, OrchestratorError> {
        self.log.push(
            now_us,
            LogPayload::GazeSampleRef { sample_timestamp_us: sample.timestamp_us, valid: sample.valid },
        );
        let emission = match self.window.push_sample(sample) {
            Ok(e) => e,
            Err(e) => {
                self.log.push(now_us, LogPayload::Fault { reason: e.to_string() });
                return Err(e.into());
            }
        };
        let Some(mean) = emission else {
            return Ok(Vec::new());
        };
        self.log.push(now_us, LogPayload::MeanGaze(mean));
        let Some(intent) = self.on_mean_gaze(mean) else {
            return Ok(Vec::new());
        };
        let mut out = vec![Output::Intent(intent.clone())];
        out.extend(self.handle_intent(now_us, intent));
        Ok(out)
    }

    /// Matches a mean gaze against the freshest USER frame and updates the
    /// dwell counter.
    pub fn on_mean_gaze(&mut self, gaze: MeanGaze) -> Option<IntentEvent> {
        if gaze.span_us > self.config.max_window_span_us {
            self.dwell.reset();
            return None;
        }
        let frame = self
            .user_frame
            .as_ref()
            .filter(|f| gaze.timestamp_us - f.timestamp_us <= self.config.staleness_us);
        let label = frame
            .and_then(|f| resolve_target_min_confidence(&gaze, f, self.config.min_confidence))
            .map(|b| b.label.clone());
        self.dwell.observe(label.as_deref(), gaze.timestamp_us)
    }

    pub fn on_touch(&mut self, now_us: i64, label: &str) -> Result<IntentEvent, OrchestratorError> {
        if self.plan.step_for_label(label).is_none() {
            self.log.push(
                now_us,
                LogPayload::ValidationOutcome { label: label.to_string(), validation: Validation::UnknownPart },
            );
            return Err(OrchestratorError::UnknownPart(label.to_string()));
        }
        Ok(IntentEvent {
            source: IntentSource::Touch,
            label: label.to_string(),
            timestamp_us: now_us,
            dwell_emissions: 0,
        })
    }

    /// Touch request through the shared intent path. Unknown labels are
    /// answered with an UNAVAILABLE announcement.
    pub fn on_touch_request(&mut self, now_us: i64, label: &str) -> Vec<Output> {
        let Ok(intent) = self.on_touch(now_us, label) else {
            let text = format!("Object {label} is not part of this assembly");
            return vec![self.announce(now_us, AnnouncementKind::Unavailable, label, text)];
        };
        let mut out = vec![Output::Intent(intent.clone())];
        out.extend(self.handle_intent(now_us, intent));
        out
    }

    /// Validate, announce and (when allowed) dispatch. Gaze and touch intents
    /// share this path.
    pub fn handle_intent(&mut self, now_us: i64, intent: IntentEvent) -> Vec<Output> {
        self.log.push(now_us, LogPayload::Intent(intent.clone()));
        let label = intent.label;
        if self.phase != RobotPhase::Idle {
            return vec![self.announce(now_us, AnnouncementKind::Busy, &label, busy_text(&label))];
        }
        let validation = validate_request(&self.plan, &self.state, &label);
        self.log.push(
            now_us,
            LogPayload::ValidationOutcome { label: label.clone(), validation: validation.clone() },
        );
        match validation {
            Validation::Allowed { step_id } => {
                let target = self.robot_frame.as_ref().and_then(|f| align_object(f, &label)).cloned();
                let Some(target) = target else {
                    let text = format!("Object {label} not visible to the robot");
                    return vec![self.announce(now_us, AnnouncementKind::Unavailable, &label, text)];
                };
                let mut out = Vec::with_capacity(4);
                out.push(self.transition(now_us, RobotPhase::Announcing));
                out.push(self.announce(now_us, AnnouncementKind::Selected, &label, selected_text(&label)));
                let command = RobotCommand::Fetch { label: label.clone(), step_id: step_id.clone(), target };
                self.log.push(now_us, LogPayload::Command(command.clone()));
                self.outstanding = Some(Outstanding { label, step_id, delivered: false });
                out.push(self.transition(now_us, RobotPhase::Retrieving));
                out.push(Output::Command(command));
                out
            }
            Validation::PrerequisiteNeeded { pending, .. } => {
                let labels: Vec<String> = pending
                    .iter()
                    .map(|id| self.plan.step(id).map_or_else(|| id.clone(), |s| s.part_label.clone()))
                    .collect();
                let text = prerequisite_text(&label, &labels);
                vec![self.announce(now_us, AnnouncementKind::Prerequisite, &label, text)]
            }
            Validation::UnknownPart => {
                let text = format!("Object {label} is not part of this assembly");
                vec![self.announce(now_us, AnnouncementKind::Unavailable, &label, text)]
            }
            Validation::AlreadyHandled { .. } => {
                let text = format!("Object {label} already delivered");
                vec![self.announce(now_us, AnnouncementKind::Unavailable, &label, text)]
            }
        }
    }

    /// Applies a robot progress report. Out-of-order events abort the fetch.
    pub fn on_robot_event(&mut self, now_us: i64, event: RobotEvent) -> Result<Vec<Output>, OrchestratorError> {
        let expected = match event {
            RobotEvent::PickedUp => RobotPhase::Retrieving,
            RobotEvent::Delivered => RobotPhase::Delivering,
            RobotEvent::Returned => RobotPhase::Returning,
            RobotEvent::Fault { ref reason } => {
                let reason = reason.clone();
                return Ok(self.abort(now_us, format!("robot fault: {reason}")));
            }
        };
        if self.phase != expected {
            let err = OrchestratorError::Protocol { event, phase: self.phase };
            self.abort(now_us, err.to_string());
            return Err(err);
        }
        let mut out = Vec::with_capacity(2);
        if event == RobotEvent::Delivered {
            let outstanding = self.outstanding.as_mut().expect("a fetch is in progress while delivering");
            outstanding.delivered = true;
            let (label, step_id) = (outstanding.label.clone(), outstanding.step_id.clone());
            self.state.mark_delivered(&self.plan, &step_id)?;
            self.log.push(now_us, LogPayload::Delivery { label, step_id });
        }
        out.push(self.transition(now_us, self.phase.next()));
        if self.phase == RobotPhase::Idle {
            self.outstanding = None;
        }
        Ok(out)
    }

    /// The user reports a part assembled.
    pub fn on_assembly_mark(&mut self, now_us: i64, label: &str) -> Result<(), OrchestratorError> {
        let step_id = match self.plan.step_for_label(label) {
            Some(s) => s.step_id.clone(),
            None => {
                self.log.push(now_us, LogPayload::Fault { reason: format!("assembly mark for unknown part '{label}'") });
                return Err(OrchestratorError::UnknownPart(label.to_string()));
            }
        };
        if let Err(e) = self.state.mark_assembled(&self.plan, &step_id) {
            self.log.push(now_us, LogPayload::Fault { reason: e.to_string() });
            return Err(e.into());
        }
        self.log.push(now_us, LogPayload::AssemblyMark { label: label.to_string(), step_id });
        Ok(())
    }

    fn announce(&mut self, now_us: i64, kind: AnnouncementKind, label: &str, text: String) -> Output {
        let a = Announcement { kind, label: label.to_string(), text, timestamp_us: now_us };
        self.log.push(now_us, LogPayload::Announcement(a.clone()));
        Output::Announcement(a)
    }

    fn transition(&mut self, now_us: i64, to: RobotPhase) -> Output {
        let from = self.phase;
        debug_assert!(from.can_transition(to), "{from} -> {to}");
        self.phase = to;
        self.log.push(now_us, LogPayload::RobotPhaseChange { from, to });
        Output::PhaseChange { from, to }
    }

    fn abort(&mut self, now_us: i64, reason: String) -> Vec<Output> {
        self.log.push(now_us, LogPayload::Fault { reason: reason.clone() });
        let mut out = vec![Output::Fault(reason)];
        if self.phase != RobotPhase::Idle {
            out.push(self.transition(now_us, RobotPhase::Idle));
        }
        self.outstanding = None;
        out
    }
}
