//! Offline measurements over recorded sessions: gaze accuracy against a
//! fixated target, and request effectiveness (completion time, error rate).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::AssemblyPlan;
use crate::gaze::GazeSample;
use crate::orchestrator::{AnnouncementKind, EventLogRecord, LogPayload};
use crate::perception::{bbox_center, BBox};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("trace has {len} samples; need more than the {discard_n} discarded")]
    TraceTooShort { len: usize, discard_n: usize },
    #[error("no valid samples left after discarding")]
    NoValidSamples,
    #[error("event log has no session start")]
    MissingSessionStart,
    #[error("heatmap needs at least one bin and a positive frame size")]
    Heatmap,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Selection thresholds around a target box center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Half the box width.
    pub x_bound_px: f64,
    /// Half the box height.
    pub y_bound_px: f64,
    /// Center to the farthest corner.
    pub max_corner_px: f64,
}

impl Thresholds {
    pub fn for_box(target: &BBox) -> Self {
        let x = target.width() / 2.0;
        let y = target.height() / 2.0;
        Self { x_bound_px: x, y_bound_px: y, max_corner_px: (x * x + y * y).sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub bins: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { frame_width: 1920.0, frame_height: 1080.0, bins: 64 }
    }
}

/// Count grid over the frame, `counts[row][col]`, rows along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub bins: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Heatmap {
    pub fn empty(bins: usize) -> Self {
        Self { bins, counts: vec![vec![0; bins]; bins] }
    }

    /// Samples outside the frame land in the nearest edge bin.
    pub fn add(&mut self, x: f64, y: f64, config: &HeatmapConfig) {
        let bin = |v: f64, extent: f64| {
            let b = (v / extent * self.bins as f64).floor();
            b.clamp(0.0, (self.bins - 1) as f64) as usize
        };
        let (col, row) = (bin(x, config.frame_width), bin(y, config.frame_height));
        self.counts[row][col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeAccuracyReport {
    pub trial: String,
    pub target_label: String,
    pub n_used: usize,
    /// Euclidean distance of each used sample from the target center.
    pub distances: Vec<f64>,
    pub median_px: f64,
    pub iqr_px: f64,
    pub thresholds: Thresholds,
    pub frac_within_x_bound: f64,
    pub frac_within_y_bound: f64,
    pub frac_within_max_corner: f64,
    pub heatmap: Heatmap,
}

/// Linear-interpolation quantile of sorted data (the common "type 7").
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Gaze accuracy for one fixation trial. The first `discard_n` samples are
/// dropped as transients, then invalid samples.
pub fn gaze_accuracy(
    trial: &str,
    trace: &[GazeSample],
    target: &BBox,
    discard_n: usize,
    heatmap: &HeatmapConfig,
) -> Result<GazeAccuracyReport, AnalysisError> {
    if trace.len() <= discard_n {
        return Err(AnalysisError::TraceTooShort { len: trace.len(), discard_n });
    }
    if heatmap.bins == 0 || !(heatmap.frame_width > 0.0 && heatmap.frame_height > 0.0) {
        return Err(AnalysisError::Heatmap);
    }
    let used: Vec<&GazeSample> = trace[discard_n..].iter().filter(|s| s.valid).collect();
    if used.is_empty() {
        return Err(AnalysisError::NoValidSamples);
    }
    let (cx, cy) = bbox_center(target);
    let th = Thresholds::for_box(target);
    let mut grid = Heatmap::empty(heatmap.bins);
    let (mut in_x, mut in_y, mut in_r) = (0usize, 0usize, 0usize);
    let mut distances = Vec::with_capacity(used.len());
    for s in &used {
        let (dx, dy) = (s.x - cx, s.y - cy);
        let d = dx.hypot(dy);
        in_x += usize::from(dx.abs() <= th.x_bound_px);
        in_y += usize::from(dy.abs() <= th.y_bound_px);
        in_r += usize::from(d <= th.max_corner_px);
        distances.push(d);
        grid.add(s.x, s.y, heatmap);
    }
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let n = used.len() as f64;
    Ok(GazeAccuracyReport {
        trial: trial.to_string(),
        target_label: target.label.clone(),
        n_used: used.len(),
        distances,
        median_px: quantile_sorted(&sorted, 0.5),
        iqr_px: quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
        thresholds: th,
        frac_within_x_bound: in_x as f64 / n,
        frac_within_y_bound: in_y as f64 / n,
        frac_within_max_corner: in_r as f64 / n,
        heatmap: grid,
    })
}

/// Ground truth for which part the user meant during `[start_us, end_us)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentAnnotation {
    pub start_us: i64,
    pub end_us: i64,
    pub intended_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub completion_time_s: f64,
    pub requests_total: u64,
    pub requests_incorrect: u64,
    pub error_rate: f64,
    /// All robot-fetched steps were assembled.
    pub complete: bool,
    /// Whether ground-truth annotations were available.
    pub annotated: bool,
}

/// Completion time and selection error rate for one session log. A request
/// is an intent that produced a SELECTED announcement; it is incorrect when
/// the annotation active at that moment names a different part (or none).
pub fn session_metrics(
    log: &[EventLogRecord],
    plan: &AssemblyPlan,
    annotations: &[IntentAnnotation],
) -> Result<SessionMetrics, AnalysisError> {
    let start = log
        .iter()
        .find(|r| matches!(r.payload, LogPayload::SessionStart { .. }))
        .map(|r| r.timestamp_us)
        .ok_or(AnalysisError::MissingSessionStart)?;

    let mut requests_total = 0u64;
    let mut requests_incorrect = 0u64;
    let mut assembled = BTreeSet::new();
    let mut last_mark = None;
    for r in log {
        match &r.payload {
            LogPayload::Announcement(a) if a.kind == AnnouncementKind::Selected => {
                requests_total += 1;
                if !annotations.is_empty() {
                    let intended = annotations
                        .iter()
                        .find(|an| an.start_us <= r.timestamp_us && r.timestamp_us < an.end_us);
                    if intended.is_none_or(|an| an.intended_label != a.label) {
                        requests_incorrect += 1;
                    }
                }
            }
            LogPayload::AssemblyMark { step_id, .. } => {
                assembled.insert(step_id.clone());
                last_mark = Some(last_mark.map_or(r.timestamp_us, |t: i64| t.max(r.timestamp_us)));
            }
            _ => {}
        }
    }
    let complete = plan.robot_steps().all(|s| assembled.contains(&s.step_id));
    let end = last_mark.unwrap_or_else(|| log.iter().map(|r| r.timestamp_us).max().unwrap_or(start));
    Ok(SessionMetrics {
        completion_time_s: (end - start) as f64 / 1e6,
        requests_total,
        requests_incorrect,
        error_rate: if requests_total > 0 { requests_incorrect as f64 / requests_total as f64 } else { 0.0 },
        complete,
        annotated: !annotations.is_empty(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

/// Column order of the gaze-accuracy CSV summary.
pub const GAZE_REPORT_CSV_HEADER: [&str; 11] = [
    "trial",
    "target_label",
    "n_used",
    "median_px",
    "iqr_px",
    "x_bound_px",
    "y_bound_px",
    "max_corner_px",
    "frac_within_x_bound",
    "frac_within_y_bound",
    "frac_within_max_corner",
];

/// Column order of the session-metrics CSV.
pub const METRICS_CSV_HEADER: [&str; 6] =
    ["completion_time_s", "requests_total", "requests_incorrect", "error_rate", "complete", "annotated"];

/// Serializes reports: JSONL carries everything (one report per line), CSV
/// carries the summary columns of [`GAZE_REPORT_CSV_HEADER`].
pub fn export_report(reports: &[GazeAccuracyReport], format: ReportFormat) -> Result<String, AnalysisError> {
    match format {
        ReportFormat::Jsonl => {
            let mut out = String::new();
            for r in reports {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(GAZE_REPORT_CSV_HEADER)?;
            for r in reports {
                w.write_record([
                    r.trial.clone(),
                    r.target_label.clone(),
                    r.n_used.to_string(),
                    r.median_px.to_string(),
                    r.iqr_px.to_string(),
                    r.thresholds.x_bound_px.to_string(),
                    r.thresholds.y_bound_px.to_string(),
                    r.thresholds.max_corner_px.to_string(),
                    r.frac_within_x_bound.to_string(),
                    r.frac_within_y_bound.to_string(),
                    r.frac_within_max_corner.to_string(),
                ])?;
            }
            Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
        }
    }
}

pub fn parse_report_jsonl(doc: &str) -> Result<Vec<GazeAccuracyReport>, AnalysisError> {
    doc.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(AnalysisError::from))
        .collect()
}

/// Heatmap as CSV: one row per grid row, no header.
pub fn export_heatmap_csv(heatmap: &Heatmap) -> Result<String, AnalysisError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in &heatmap.counts {
        w.write_record(row.iter().map(u64::to_string))?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

pub fn export_metrics(metrics: &SessionMetrics, format: ReportFormat) -> Result<String, AnalysisError> {
    match format {
        ReportFormat::Jsonl => Ok(serde_json::to_string(metrics)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(METRICS_CSV_HEADER)?;
            w.write_record([
                metrics.completion_time_s.to_string(),
                metrics.requests_total.to_string(),
                metrics.requests_incorrect.to_string(),
                metrics.error_rate.to_string(),
                metrics.complete.to_string(),
                metrics.annotated.to_string(),
            ])?;
            Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::builtin_plan;
    use crate::orchestrator::{Announcement, EventLog};

    fn target_80x60() -> BBox {
        BBox::new("peg_grey", 100.0, 100.0, 180.0, 160.0, 1.0).unwrap()
    }

    fn at(ts: i64, x: f64, y: f64) -> GazeSample {
        GazeSample::new(ts, x, y)
    }

    #[test]
    fn all_at_center_is_perfect() {
        let t = target_80x60();
        let trace: Vec<_> = (0..40).map(|i| at(i, 140.0, 130.0)).collect();
        let r = gaze_accuracy("t", &trace, &t, 10, &HeatmapConfig::default()).unwrap();
        assert_eq!(r.n_used, 30);
        assert!(r.distances.iter().all(|&d| d == 0.0));
        assert_eq!((r.median_px, r.iqr_px), (0.0, 0.0));
        assert_eq!(
            (r.frac_within_x_bound, r.frac_within_y_bound, r.frac_within_max_corner),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(r.heatmap.total(), 30);
    }

    #[test]
    fn three_four_five_thresholds() {
        let th = Thresholds::for_box(&target_80x60());
        assert_eq!((th.x_bound_px, th.y_bound_px, th.max_corner_px), (40.0, 30.0, 50.0));
    }

    #[test]
    fn per_axis_fractions() {
        let t = target_80x60();
        // inside x bound only, inside y bound only, inside circle only, outside all
        let trace = vec![at(0, 140.0, 170.0), at(1, 190.0, 130.0), at(2, 178.0, 156.0), at(3, 300.0, 300.0)];
        let r = gaze_accuracy("t", &trace, &t, 0, &HeatmapConfig::default()).unwrap();
        assert_eq!(r.frac_within_x_bound, 0.5);
        assert_eq!(r.frac_within_y_bound, 0.5);
        assert_eq!(r.frac_within_max_corner, 0.75);
    }

    #[test]
    fn invalid_samples_excluded() {
        let t = target_80x60();
        let mut trace: Vec<_> = (0..20).map(|i| at(i, 140.0, 130.0)).collect();
        trace[15] = GazeSample::invalid(15);
        let r = gaze_accuracy("t", &trace, &t, 10, &HeatmapConfig::default()).unwrap();
        assert_eq!(r.n_used, 9);
    }

    #[test]
    fn short_trace_rejected() {
        let trace: Vec<_> = (0..10).map(|i| at(i, 0.0, 0.0)).collect();
        assert!(matches!(
            gaze_accuracy("t", &trace, &target_80x60(), 10, &HeatmapConfig::default()),
            Err(AnalysisError::TraceTooShort { len: 10, discard_n: 10 })
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&d, 0.5), 2.5);
        assert_eq!(quantile_sorted(&d, 0.25), 1.75);
        assert_eq!(quantile_sorted(&d, 0.75), 3.25);
    }

    #[test]
    fn heatmap_clamps_to_edges() {
        let cfg = HeatmapConfig { frame_width: 100.0, frame_height: 100.0, bins: 4 };
        let mut h = Heatmap::empty(4);
        h.add(-5.0, 50.0, &cfg);
        h.add(100.0, 100.0, &cfg);
        h.add(30.0, 10.0, &cfg);
        assert_eq!(h.counts[2][0], 1);
        assert_eq!(h.counts[3][3], 1);
        assert_eq!(h.counts[0][1], 1);
        assert_eq!(h.total(), 3);
    }

    fn log_with(requests: &[(&str, i64)], marks: &[(&str, i64)]) -> Vec<EventLogRecord> {
        let mut log = EventLog::default();
        log.push(0, LogPayload::SessionStart { plan_id: "gear_assembly".into() });
        let mut events: Vec<(i64, LogPayload)> = requests
            .iter()
            .map(|&(label, t)| {
                (
                    t,
                    LogPayload::Announcement(Announcement {
                        kind: AnnouncementKind::Selected,
                        label: label.into(),
                        text: format!("Object {label} selected; Bringing now"),
                        timestamp_us: t,
                    }),
                )
            })
            .collect();
        events.extend(
            marks
                .iter()
                .map(|&(l, t)| (t, LogPayload::AssemblyMark { label: l.into(), step_id: l.into() })),
        );
        events.sort_by_key(|e| e.0);
        for (t, p) in events {
            log.push(t, p);
        }
        log.records().to_vec()
    }

    fn ann(label: &str, start_s: i64, end_s: i64) -> IntentAnnotation {
        IntentAnnotation { start_us: start_s * 1_000_000, end_us: end_s * 1_000_000, intended_label: label.into() }
    }

    #[test]
    fn error_rate_zero_and_one_fifth() {
        let plan = builtin_plan("gear_assembly").unwrap();
        let labels = ["peg_grey", "gear_large", "gear_small", "cap_grey"];
        let reqs: Vec<_> = labels.iter().enumerate().map(|(i, l)| (*l, i as i64 * 10_000_000 + 1)).collect();
        let anns: Vec<_> = labels.iter().enumerate().map(|(i, l)| ann(l, i as i64 * 10, i as i64 * 10 + 5)).collect();
        let m = session_metrics(&log_with(&reqs, &[]), &plan, &anns).unwrap();
        assert_eq!((m.requests_total, m.requests_incorrect, m.error_rate), (4, 0, 0.0));

        let mut reqs = reqs;
        reqs.push(("gear_small", 40_000_001));
        let mut anns = anns;
        anns.push(ann("cap_grey", 40, 45));
        let m = session_metrics(&log_with(&reqs, &[]), &plan, &anns).unwrap();
        assert_eq!((m.requests_total, m.requests_incorrect), (5, 1));
        assert_eq!(m.error_rate, 0.2);
    }

    #[test]
    fn completion_time_from_last_mark() {
        let plan = builtin_plan("gear_assembly").unwrap();
        let marks = [
            ("peg_grey", 20_000_000),
            ("gear_large", 40_000_000),
            ("gear_medium", 45_000_000),
            ("gear_small", 70_000_000),
            ("cap_grey", 98_000_000),
        ];
        let m = session_metrics(&log_with(&[], &marks), &plan, &[]).unwrap();
        assert_eq!(m.completion_time_s, 98.0);
        assert!(m.complete);
        assert!(!m.annotated);
        let partial = session_metrics(&log_with(&[], &marks[..2]), &plan, &[]).unwrap();
        assert!(!partial.complete);
    }

    #[test]
    fn missing_start_is_an_error() {
        let plan = builtin_plan("gear_assembly").unwrap();
        let log = log_with(&[], &[]);
        assert!(matches!(session_metrics(&log[1..], &plan, &[]), Err(AnalysisError::MissingSessionStart)));
    }

    #[test]
    fn jsonl_round_trip_and_csv_header() {
        let trace: Vec<_> = (0..30).map(|i| at(i, 140.0 + i as f64, 130.0)).collect();
        let r = gaze_accuracy("trial-1", &trace, &target_80x60(), 10, &HeatmapConfig::default()).unwrap();
        let doc = export_report(std::slice::from_ref(&r), ReportFormat::Jsonl).unwrap();
        assert_eq!(parse_report_jsonl(&doc).unwrap(), vec![r.clone()]);
        let csv = export_report(&[r], ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().next().unwrap(), GAZE_REPORT_CSV_HEADER.join(","));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn empty_heatmap_exports_zero_rows() {
        let csv = export_heatmap_csv(&Heatmap::empty(3)).unwrap();
        assert_eq!(csv, "0,0,0\n0,0,0\n0,0,0\n");
    }

    #[test]
    fn metrics_csv_header() {
        let m = SessionMetrics {
            completion_time_s: 98.0,
            requests_total: 4,
            requests_incorrect: 0,
            error_rate: 0.0,
            complete: true,
            annotated: true,
        };
        let csv = export_metrics(&m, ReportFormat::Csv).unwrap();
        assert_eq!(csv, "completion_time_s,requests_total,requests_incorrect,error_rate,complete,annotated\n98,4,0,0,true,true\n");
        let json = export_metrics(&m, ReportFormat::Jsonl).unwrap();
        assert_eq!(serde_json::from_str::<SessionMetrics>(&json).unwrap(), m);
    }
}
