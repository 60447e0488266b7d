//! `gear` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use gear_core::analysis::{
    export_metrics, export_report, gaze_accuracy, session_metrics, GazeAccuracyReport, HeatmapConfig, ReportFormat,
    SessionMetrics,
};
use gear_core::assembly::{builtin_plan, load_plan, AssemblyPlan, BUILTIN_PLANS};
use gear_core::config::GearConfig;
use gear_core::gaze::GazeSample;
use gear_core::orchestrator::EventLog;
use gear_core::perception::{BBox, Viewpoint};
use gear_core::protocol::Payload;
use gear_core::session::{replay, replay_session, run_simulation};
use gear_core::sim::ScriptEntry;
use gear_core::trace::{read_trace, Trace};

use crate::server::{self, ServeOptions};

pub const DEFAULT_PLAN: &str = "gear_assembly";

#[derive(Debug, Parser)]
#[command(name = "gear", version, about = "Gaze-driven part request engine")]
pub struct Cli {
    /// Seed for layout, detection noise and scripted gaze.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Built-in plan name or path to a plan JSON file.
    #[arg(long, global = true, default_value = DEFAULT_PLAN)]
    pub plan: String,
    /// Configuration JSON. Falls back to $GEAR_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Jsonl => ReportFormat::Jsonl,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scripted session in virtual time and write its trace.
    RunSim {
        #[arg(long)]
        trace_out: PathBuf,
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// Gaze script (JSON array of {target_label, duration_ms}).
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Serve the wire protocol over TCP and WebSocket.
    Serve {
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// Do not run the simulated table and robot.
        #[arg(long)]
        no_sim: bool,
        /// Drive the simulated user's gaze from the default script.
        #[arg(long)]
        scripted_gaze: bool,
        /// Stop when the simulated session is complete.
        #[arg(long)]
        exit_when_done: bool,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        tcp_port: Option<u16>,
        #[arg(long)]
        ws_port: Option<u16>,
    },
    /// Re-run a trace's inputs through a fresh session.
    Replay {
        trace: PathBuf,
        /// Playback speed relative to recorded time; 0 runs unpaced.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Gaze accuracy against a target's box, one trial per annotated fixation.
    AnalyzeGaze {
        trace: PathBuf,
        #[arg(long)]
        target: String,
        /// Leading samples dropped from each trial.
        #[arg(long, default_value_t = 10)]
        discard: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Completion time and error rate from a trace or an event log.
    Metrics {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check a plan file and print its order.
    ValidatePlan { path: PathBuf },
}

/// Failures split by exit code: bad input (1) or a runtime failure (2).
#[derive(Debug)]
pub enum CliError {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

pub fn resolve_plan(name: &str) -> anyhow::Result<AssemblyPlan> {
    if BUILTIN_PLANS.iter().any(|(builtin, _)| *builtin == name) {
        return Ok(builtin_plan(name)?);
    }
    let text = fs::read_to_string(name).with_context(|| format!("no built-in plan or readable file '{name}'"))?;
    load_plan(&text).with_context(|| format!("invalid plan {name}"))
}

pub fn resolve_config(flag: Option<&Path>) -> anyhow::Result<GearConfig> {
    let path = flag.map(Path::to_path_buf).or_else(|| std::env::var_os("GEAR_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => Ok(GearConfig::load(&p)?),
        None => Ok(GearConfig::default()),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_trace(path: &Path) -> Result<Trace, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(input)?;
    let trace = read_trace(&text).with_context(|| format!("reading {}", path.display())).map_err(input)?;
    if trace.truncated {
        tracing::warn!("{} ends with a truncated line; using the records before it", path.display());
    }
    Ok(trace)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(cli.config.as_deref()).map_err(input)?;
    match cli.command {
        Command::RunSim { trace_out, log_out, script } => {
            let plan = resolve_plan(&cli.plan).map_err(input)?;
            let script: Option<Vec<ScriptEntry>> = match script {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())).map_err(input)?;
                    Some(serde_json::from_str(&text).with_context(|| format!("bad script {}", p.display())).map_err(input)?)
                }
                None => None,
            };
            let run = run_simulation(&plan, cli.seed, &config, script.as_deref()).map_err(runtime)?;
            fs::write(&trace_out, &run.trace).with_context(|| format!("writing {}", trace_out.display())).map_err(runtime)?;
            if let Some(p) = log_out {
                fs::write(&p, run.log.to_jsonl()).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
            }
            println!("{}", serde_json::to_string(&run.metrics).map_err(runtime)?);
            Ok(())
        }
        Command::Serve { trace_out, log_out, no_sim, scripted_gaze, exit_when_done, duration_s, tcp_port, ws_port } => {
            let plan = resolve_plan(&cli.plan).map_err(input)?;
            let mut config = config;
            if let Some(p) = tcp_port {
                config.gateway.tcp_port = p;
            }
            if let Some(p) = ws_port {
                config.gateway.ws_port = p;
            }
            if no_sim && (scripted_gaze || exit_when_done) {
                return Err(input(anyhow!("--scripted-gaze and --exit-when-done need the simulator")));
            }
            let max_duration = match duration_s {
                Some(s) if s.is_finite() && s > 0.0 => Some(Duration::from_secs_f64(s)),
                Some(_) => return Err(input(anyhow!("--duration-s must be positive"))),
                None => None,
            };
            let opts = ServeOptions {
                seed: cli.seed,
                trace_path: trace_out,
                log_path: log_out,
                simulate: !no_sim,
                scripted_gaze,
                exit_when_done,
                max_duration,
                ..ServeOptions::new(plan, config)
            };
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            let summary = rt.block_on(async {
                let handle = server::start(opts).await?;
                eprintln!("listening: tcp {} ws {}{}", handle.tcp_addr, handle.ws_addr, server::WS_PATH);
                let stopper = handle.stopper();
                tokio::spawn(async move {
                    if tokio::signal::ctrl_c().await.is_ok() {
                        stopper.stop();
                    }
                });
                handle.wait().await
            });
            let summary = summary.map_err(runtime)?;
            if let Some(m) = summary.metrics {
                println!("{}", serde_json::to_string(&m).map_err(runtime)?);
            }
            Ok(())
        }
        Command::Replay { trace, speed, log_out } => {
            let trace = load_trace(&trace)?;
            if !(speed >= 0.0 && speed.is_finite()) {
                return Err(input(anyhow!("--speed must be a non-negative number")));
            }
            let (log, metrics) = if speed == 0.0 {
                let r = replay(&trace).map_err(input)?;
                (r.log, r.metrics)
            } else {
                paced_replay(&trace, speed).map_err(input)?
            };
            if let Some(p) = log_out {
                fs::write(&p, log.to_jsonl()).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
            }
            println!("{}", serde_json::to_string(&metrics).map_err(runtime)?);
            if trace.truncated {
                eprintln!("warning: trace was truncated");
            }
            Ok(())
        }
        Command::AnalyzeGaze { trace, target, discard, format, out } => {
            let trace = load_trace(&trace)?;
            let reports = analyze_gaze(&trace, &target, discard).map_err(input)?;
            let text = export_report(&reports, format.into()).map_err(runtime)?;
            write_or_print(out.as_deref(), &text)
        }
        Command::Metrics { input: path, format } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(input)?;
            let metrics = if let Ok(trace) = read_trace(&text) {
                replay(&trace).map_err(input)?.metrics
            } else {
                let plan = resolve_plan(&cli.plan).map_err(input)?;
                let log = EventLog::parse_jsonl(&text)
                    .map_err(|(line, e)| input(anyhow!("{} line {line}: {e}", path.display())))?;
                session_metrics(log.records(), &plan, &[]).map_err(input)?
            };
            let text = export_metrics(&metrics, format.into()).map_err(runtime)?;
            write_or_print(None, &text)
        }
        Command::ValidatePlan { path } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(input)?;
            let plan = load_plan(&text).with_context(|| format!("invalid plan {}", path.display())).map_err(input)?;
            let order: Vec<&str> = plan.topological_steps().iter().map(|s| s.step_id.as_str()).collect();
            println!("{}: {} steps, order {}", plan.plan_id(), plan.steps().len(), order.join(" > "));
            Ok(())
        }
    }
}

fn paced_replay(
    trace: &Trace,
    speed: f64,
) -> anyhow::Result<(EventLog, SessionMetrics)> {
    let mut session = replay_session(&trace.header)?;
    let start = std::time::Instant::now();
    let t0 = trace.messages.first().map_or(0, |m| m.t_us);
    for m in trace.inbound() {
        let due = Duration::from_secs_f64((m.t_us - t0).max(0) as f64 / 1e6 / speed);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        session.handle(m.t_us, &m.msg.payload);
    }
    let plan = session.orchestrator().plan().clone();
    let metrics = session_metrics(session.log().records(), &plan, &trace.header.annotations)?;
    Ok((session.into_log(), metrics))
}

/// Splits a trace's gaze into trials for `target` and scores each against
/// the user camera's box for it. Annotated fixations on the target become
/// one trial each; an unannotated trace is a single trial.
pub fn analyze_gaze(trace: &Trace, target: &str, discard: usize) -> anyhow::Result<Vec<GazeAccuracyReport>> {
    let mut samples: Vec<GazeSample> = Vec::new();
    let mut boxes: Vec<(i64, BBox)> = Vec::new();
    for m in trace.inbound() {
        match &m.msg.payload {
            Payload::GazeSample(s) => samples.push(*s),
            Payload::DetectionFrame(f) if f.source == Viewpoint::User => {
                if let Some(b) = f.boxes.iter().find(|b| b.label == target) {
                    boxes.push((f.timestamp_us, b.clone()));
                }
            }
            _ => {}
        }
    }
    if boxes.is_empty() {
        bail!("the user camera never saw '{target}'");
    }
    // Box seen last at or before `t`, else the first one seen.
    let box_at = |t: i64| -> &BBox {
        boxes.iter().rev().find(|(ts, _)| *ts <= t).map_or(&boxes[0].1, |(_, b)| b)
    };
    let frame = HeatmapConfig {
        frame_width: trace.header.stream.frame_width,
        frame_height: trace.header.stream.frame_height,
        ..HeatmapConfig::default()
    };
    let windows: Vec<_> = trace.header.annotations.iter().filter(|a| a.intended_label == target).collect();
    if windows.is_empty() {
        let end = samples.last().map_or(0, |s| s.timestamp_us);
        return Ok(vec![gaze_accuracy(&format!("{target}#1"), &samples, box_at(end), discard, &frame)?]);
    }
    windows
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let trial: Vec<GazeSample> =
                samples.iter().filter(|s| a.start_us <= s.timestamp_us && s.timestamp_us < a.end_us).copied().collect();
            Ok(gaze_accuracy(&format!("{target}#{}", k + 1), &trial, box_at(a.end_us), discard, &frame)?)
        })
        .collect()
}
