//! Deterministic desk-scale world: a 2D top-down table with three zones,
//! orthographic cameras for the user and robot viewpoints, a single-arm
//! robot with piecewise-linear motion, and scripted gaze.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with a `u64`.
//! Separate ChaCha streams are used for layout, detection noise and gaze
//! noise so that changing one noise source never shifts another.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{AssemblyPlan, PartSource};
use crate::gaze::{GazeSample, StreamConfig};
use crate::orchestrator::{RobotCommand, RobotEvent};
use crate::perception::{BBox, DetectionFrame, Viewpoint};

pub const STREAM_LAYOUT: u64 = 1;
pub const STREAM_DETECTIONS: u64 = 2;
pub const STREAM_GAZE: u64 = 3;

/// Seeded generator for one purpose of one run.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("could not place '{label}' after {attempts} attempts")]
    Capacity { label: String, attempts: u32 },
    #[error("fixed pose for '{0}' lies outside the user station")]
    Layout(String),
    #[error("script error: {0}")]
    Script(String),
    #[error("step of {dt_us} us is not a multiple of the {tick_us} us tick")]
    Step { dt_us: i64, tick_us: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Zone {
    UserStation,
    RobotWorkspace,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Vec2 {
        Vec2::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size {
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn centered(center: Vec2, size: Size) -> Self {
        Self::new(
            center.x - size.w / 2.0,
            center.y - size.h / 2.0,
            center.x + size.w / 2.0,
            center.y + size.h / 2.0,
        )
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x_min <= other.x_min && other.x_max <= self.x_max && self.y_min <= other.y_min && other.y_max <= self.y_max
    }

    /// Positive-area intersection; touching edges do not count.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max && other.x_min < self.x_max && self.y_min < other.y_max && other.y_min < self.y_max
    }

    pub fn inflate(&self, margin: f64) -> Rect {
        Rect::new(self.x_min - margin, self.y_min - margin, self.x_max + margin, self.y_max + margin)
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneBounds {
    pub user_station: Rect,
    pub robot_workspace: Rect,
    pub shared: Rect,
}

impl ZoneBounds {
    pub fn get(&self, zone: Zone) -> Rect {
        match zone {
            Zone::UserStation => self.user_station,
            Zone::RobotWorkspace => self.robot_workspace,
            Zone::Shared => self.shared,
        }
    }
}

impl Default for ZoneBounds {
    fn default() -> Self {
        // Placeholder dimensions: user station 0.6 x 0.4 m, robot workspace
        // 1.0 x 0.6 m, shared hand-over area 0.4 x 0.3 m between them.
        Self {
            robot_workspace: Rect::new(0.0, 0.0, 1.0, 0.6),
            shared: Rect::new(0.3, 0.65, 0.7, 0.95),
            user_station: Rect::new(0.2, 1.0, 0.8, 1.4),
        }
    }
}

/// Static description of the table, independent of any seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneLayout {
    pub zones: ZoneBounds,
    pub default_footprint: Size,
    pub footprints: BTreeMap<String, Size>,
    /// Fixed poses for user-station parts. Parts not listed are spaced
    /// evenly along the station.
    pub user_station_poses: BTreeMap<String, Vec2>,
    /// Where assembled parts end up.
    pub assembly_point: Vec2,
    /// Pitch of the drop slots in the shared zone.
    pub shared_slot: Size,
    /// Minimum free gap between randomly placed footprints.
    pub clearance_m: f64,
    pub max_attempts: u32,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            zones: ZoneBounds::default(),
            default_footprint: Size { w: 0.12, h: 0.12 },
            footprints: BTreeMap::new(),
            user_station_poses: BTreeMap::new(),
            assembly_point: Vec2::new(0.65, 1.2),
            shared_slot: Size { w: 0.13, h: 0.15 },
            clearance_m: 0.03,
            max_attempts: 10_000,
        }
    }
}

impl SceneLayout {
    pub fn footprint(&self, label: &str) -> Size {
        self.footprints.get(label).copied().unwrap_or(self.default_footprint)
    }

    /// Slot centers in the shared zone, row-major.
    pub fn shared_slots(&self) -> Vec<Vec2> {
        let z = self.zones.shared;
        let cols = ((z.width() / self.shared_slot.w).floor() as usize).max(1);
        let rows = ((z.height() / self.shared_slot.h).floor() as usize).max(1);
        let (pitch_x, pitch_y) = (z.width() / cols as f64, z.height() / rows as f64);
        let mut slots = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                slots.push(Vec2::new(
                    z.x_min + pitch_x * (c as f64 + 0.5),
                    z.y_min + pitch_y * (r as f64 + 0.5),
                ));
            }
        }
        slots
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePart {
    pub part_label: String,
    /// Footprint center, meters.
    pub pose: Vec2,
    pub footprint: Size,
    pub zone: Zone,
    #[serde(default)]
    pub carried: bool,
    #[serde(default)]
    pub assembled: bool,
}

impl ScenePart {
    pub fn rect(&self) -> Rect {
        Rect::centered(self.pose, self.footprint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub parts: Vec<ScenePart>,
    pub zones: ZoneBounds,
}

impl Scene {
    pub fn part(&self, label: &str) -> Option<&ScenePart> {
        self.parts.iter().find(|p| p.part_label == label)
    }

    fn part_mut(&mut self, label: &str) -> Option<&mut ScenePart> {
        self.parts.iter_mut().find(|p| p.part_label == label)
    }

    /// Marks a part assembled and moves it onto the assembly.
    pub fn mark_assembled(&mut self, label: &str, assembly_point: Vec2) -> bool {
        match self.part_mut(label) {
            Some(p) if !p.carried => {
                p.assembled = true;
                p.zone = Zone::UserStation;
                p.pose = assembly_point;
                true
            }
            _ => false,
        }
    }
}

/// Places the parts of `plan`: robot-fetched parts uniformly at random inside
/// the robot workspace (non-overlapping, rejection sampled), user-station
/// parts at their fixed poses.
pub fn randomize_scene(plan: &AssemblyPlan, seed: u64, layout: &SceneLayout) -> Result<Scene, SimError> {
    let mut rng = rng_for(seed, STREAM_LAYOUT);
    let zones = layout.zones;
    let user_steps: Vec<_> = plan.steps().iter().filter(|s| s.source == PartSource::UserStation).collect();
    let mut parts = Vec::with_capacity(plan.steps().len());

    let station = zones.user_station;
    // parts without a fixed pose go on a grid over the left part of the
    // station; the right end is kept for the assembly itself
    let auto: Vec<&str> = user_steps
        .iter()
        .filter(|s| !layout.user_station_poses.contains_key(&s.part_label))
        .map(|s| s.part_label.as_str())
        .collect();
    let usable = station.width() * 0.6;
    let widest = auto.iter().map(|l| layout.footprint(l).w).fold(0.0, f64::max);
    let cols = if widest > 0.0 { ((usable / widest + 1e-9).floor() as usize).clamp(1, auto.len().max(1)) } else { 1 };
    let rows = auto.len().div_ceil(cols).max(1);
    let (pitch_x, pitch_y) = (usable / cols as f64, station.height() / rows as f64);
    for step in &user_steps {
        let footprint = layout.footprint(&step.part_label);
        let pose = match layout.user_station_poses.get(&step.part_label) {
            Some(&p) => p,
            None => {
                let k = auto.iter().position(|l| *l == step.part_label).unwrap_or(0);
                let (r, c) = (k / cols, k % cols);
                Vec2::new(station.x_min + pitch_x * (c as f64 + 0.5), station.y_min + pitch_y * (r as f64 + 0.5))
            }
        };
        let part = ScenePart {
            part_label: step.part_label.clone(),
            pose,
            footprint,
            zone: Zone::UserStation,
            carried: false,
            assembled: false,
        };
        if !station.contains_rect(&part.rect()) {
            return Err(SimError::Layout(step.part_label.clone()));
        }
        parts.push(part);
    }

    let ws = zones.robot_workspace;
    let mut placed: Vec<Rect> = Vec::new();
    for step in plan.robot_steps() {
        let fp = layout.footprint(&step.part_label);
        let (lo_x, hi_x) = (ws.x_min + fp.w / 2.0, ws.x_max - fp.w / 2.0);
        let (lo_y, hi_y) = (ws.y_min + fp.h / 2.0, ws.y_max - fp.h / 2.0);
        let mut attempts = 0;
        let rect = loop {
            if attempts >= layout.max_attempts || lo_x > hi_x || lo_y > hi_y {
                return Err(SimError::Capacity { label: step.part_label.clone(), attempts });
            }
            attempts += 1;
            let center = Vec2::new(rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
            let candidate = Rect::centered(center, fp);
            if placed.iter().all(|r| !r.inflate(layout.clearance_m).overlaps(&candidate)) {
                break candidate;
            }
        };
        placed.push(rect);
        parts.push(ScenePart {
            part_label: step.part_label.clone(),
            pose: rect.center(),
            footprint: fp,
            zone: Zone::RobotWorkspace,
            carried: false,
            assembled: false,
        });
    }
    Ok(Scene { parts, zones })
}

/// Top-down orthographic camera: pixel = (meters - origin) * px_per_m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub origin_x_m: f64,
    pub origin_y_m: f64,
    pub px_per_m: f64,
    pub width_px: f64,
    pub height_px: f64,
    pub visible_zones: BTreeSet<Zone>,
}

impl Camera {
    /// The user's scene camera: looks across the whole table.
    pub fn user_default() -> Self {
        Self {
            origin_x_m: -0.8,
            origin_y_m: -0.05,
            px_per_m: 720.0,
            width_px: 1920.0,
            height_px: 1080.0,
            visible_zones: [Zone::UserStation, Zone::RobotWorkspace, Zone::Shared].into(),
        }
    }

    pub fn robot_default() -> Self {
        Self {
            origin_x_m: -0.46,
            origin_y_m: -0.05,
            px_per_m: 1000.0,
            width_px: 1920.0,
            height_px: 1080.0,
            visible_zones: [Zone::RobotWorkspace, Zone::Shared].into(),
        }
    }

    pub fn project_point(&self, p: Vec2) -> (f64, f64) {
        ((p.x - self.origin_x_m) * self.px_per_m, (p.y - self.origin_y_m) * self.px_per_m)
    }

    pub fn unproject_point(&self, px: f64, py: f64) -> Vec2 {
        Vec2::new(px / self.px_per_m + self.origin_x_m, py / self.px_per_m + self.origin_y_m)
    }

    /// Pixel box of a footprint, without noise.
    pub fn project_rect(&self, r: &Rect) -> (f64, f64, f64, f64) {
        let (x0, y0) = self.project_point(Vec2::new(r.x_min, r.y_min));
        let (x1, y1) = self.project_point(Vec2::new(r.x_max, r.y_max));
        (x0, y0, x1, y1)
    }

    pub fn sees(&self, part: &ScenePart) -> bool {
        !part.carried && !part.assembled && self.visible_zones.contains(&part.zone)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionNoise {
    /// Standard deviation of the per-corner Gaussian jitter, pixels.
    pub jitter_px: f64,
    pub dropout_p: f64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self { jitter_px: 1.0, dropout_p: 0.0 }
    }
}

impl DetectionNoise {
    pub const NONE: DetectionNoise = DetectionNoise { jitter_px: 0.0, dropout_p: 0.0 };
}

/// Synthesizes the detector output for one viewpoint. Random draws per
/// visible part are fixed (four jitter values, one dropout draw) so the
/// stream position does not depend on outcomes.
pub fn render_detections(
    scene: &Scene,
    camera: &Camera,
    viewpoint: Viewpoint,
    noise: DetectionNoise,
    timestamp_us: i64,
    rng: &mut impl Rng,
) -> DetectionFrame {
    let jitter = Normal::new(0.0, noise.jitter_px.max(0.0)).expect("finite jitter");
    let confidence = (1.0 - noise.dropout_p).clamp(0.0, 1.0);
    let mut frame = DetectionFrame::new(viewpoint, timestamp_us, camera.width_px, camera.height_px);
    for part in scene.parts.iter().filter(|p| camera.sees(p)) {
        let (x0, y0, x1, y1) = camera.project_rect(&part.rect());
        let d: [f64; 4] = std::array::from_fn(|_| jitter.sample(rng));
        let dropped = rng.random::<f64>() < noise.dropout_p;
        if dropped {
            continue;
        }
        let x_min = (x0 + d[0]).clamp(0.0, camera.width_px);
        let y_min = (y0 + d[1]).clamp(0.0, camera.height_px);
        let x_max = (x1 + d[2]).clamp(0.0, camera.width_px);
        let y_max = (y1 + d[3]).clamp(0.0, camera.height_px);
        if let Ok(b) = BBox::new(part.part_label.clone(), x_min, y_min, x_max, y_max, confidence) {
            frame.boxes.push(b);
        }
    }
    frame
}

/// Virtual clock in whole ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick_us: i64,
    pub now_us: i64,
}

impl SimClock {
    pub fn new(tick_us: i64) -> Self {
        assert!(tick_us > 0);
        Self { tick_us, now_us: 0 }
    }

    pub fn tick(&mut self) -> i64 {
        self.now_us += self.tick_us;
        self.now_us
    }
}

impl Default for SimClock {
    fn default() -> Self {
        Self::new(10_000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotModel {
    pub speed_mps: f64,
    pub grasp_s: f64,
    pub place_s: f64,
    pub home_pose: Vec2,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self { speed_mps: 0.5, grasp_s: 2.0, place_s: 2.0, home_pose: Vec2::new(0.5, -0.15) }
    }
}

/// Offsets (microseconds from dispatch) of the milestones of one fetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchTimeline {
    pub at_part_us: i64,
    pub picked_up_us: i64,
    pub at_shared_us: i64,
    pub delivered_us: i64,
    pub returned_us: i64,
}

fn secs_to_us(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

impl RobotModel {
    /// home -> part, grasp, part -> drop point, place, drop point -> home.
    /// Delivery is reported when the part has been placed.
    pub fn fetch_timeline(&self, part: Vec2, drop: Vec2) -> FetchTimeline {
        let legs = [
            self.home_pose.distance(part) / self.speed_mps,
            self.grasp_s,
            part.distance(drop) / self.speed_mps,
            self.place_s,
            drop.distance(self.home_pose) / self.speed_mps,
        ];
        let mut acc = 0.0;
        let cum: Vec<i64> = legs
            .iter()
            .map(|l| {
                acc += l;
                secs_to_us(acc)
            })
            .collect();
        FetchTimeline {
            at_part_us: cum[0],
            picked_up_us: cum[1],
            at_shared_us: cum[2],
            delivered_us: cum[3],
            returned_us: cum[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveFetch {
    pub label: String,
    pub started_us: i64,
    pub part_pose: Vec2,
    pub drop_pose: Vec2,
    pub timeline: FetchTimeline,
    /// Milestones already reported: 0 none, 1 picked up, 2 delivered.
    pub reported: u8,
}

/// Robot and table state, advanced in whole ticks.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: Scene,
    pub layout: SceneLayout,
    pub robot: RobotModel,
    clock: SimClock,
    active: Option<ActiveFetch>,
    pending_faults: Vec<String>,
}

impl Simulation {
    pub fn new(scene: Scene, layout: SceneLayout, robot: RobotModel, clock: SimClock) -> Self {
        Self { scene, layout, robot, clock, active: None, pending_faults: Vec::new() }
    }

    pub fn now_us(&self) -> i64 {
        self.clock.now_us
    }

    pub fn tick_us(&self) -> i64 {
        self.clock.tick_us
    }

    pub fn active_fetch(&self) -> Option<&ActiveFetch> {
        self.active.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    /// Starts a fetch now. Problems surface as a fault on the next step.
    pub fn dispatch(&mut self, command: &RobotCommand) {
        let RobotCommand::Fetch { label, .. } = command;
        if self.active.is_some() {
            self.pending_faults.push(format!("robot already fetching; '{label}' refused"));
            return;
        }
        let Some(part) = self.scene.part(label).filter(|p| p.zone == Zone::RobotWorkspace && !p.carried) else {
            self.pending_faults.push(format!("part '{label}' is not in the robot workspace"));
            return;
        };
        let part_pose = part.pose;
        let Some(drop_pose) = self.free_slot() else {
            self.pending_faults.push("shared zone is full".to_string());
            return;
        };
        self.active = Some(ActiveFetch {
            label: label.clone(),
            started_us: self.clock.now_us,
            part_pose,
            drop_pose,
            timeline: self.robot.fetch_timeline(part_pose, drop_pose),
            reported: 0,
        });
    }

    fn free_slot(&self) -> Option<Vec2> {
        let occupied: Vec<Vec2> = self
            .scene
            .parts
            .iter()
            .filter(|p| p.zone == Zone::Shared && !p.assembled)
            .map(|p| p.pose)
            .collect();
        self.layout
            .shared_slots()
            .into_iter()
            .find(|s| occupied.iter().all(|p| p.distance(*s) > 1e-6))
    }

    /// Advances by `dt_us` and returns robot events stamped with the tick
    /// on which they occur.
    pub fn step(&mut self, dt_us: i64) -> Result<Vec<(i64, RobotEvent)>, SimError> {
        if dt_us < 0 || dt_us % self.clock.tick_us != 0 {
            return Err(SimError::Step { dt_us, tick_us: self.clock.tick_us });
        }
        let mut events = Vec::new();
        for _ in 0..dt_us / self.clock.tick_us {
            let now = self.clock.tick();
            for reason in self.pending_faults.drain(..) {
                events.push((now, RobotEvent::Fault { reason }));
            }
            self.advance_fetch(now, &mut events);
        }
        Ok(events)
    }

    fn advance_fetch(&mut self, now: i64, events: &mut Vec<(i64, RobotEvent)>) {
        let Some(fetch) = self.active.as_mut() else { return };
        let elapsed = now - fetch.started_us;
        if fetch.reported == 0 && elapsed >= fetch.timeline.picked_up_us {
            fetch.reported = 1;
            let label = fetch.label.clone();
            if let Some(p) = self.scene.part_mut(&label) {
                p.carried = true;
            }
            events.push((now, RobotEvent::PickedUp));
        }
        let Some(fetch) = self.active.as_mut() else { return };
        if fetch.reported == 1 && elapsed >= fetch.timeline.delivered_us {
            fetch.reported = 2;
            let (label, drop) = (fetch.label.clone(), fetch.drop_pose);
            if let Some(p) = self.scene.part_mut(&label) {
                p.carried = false;
                p.zone = Zone::Shared;
                p.pose = drop;
            }
            events.push((now, RobotEvent::Delivered));
        }
        let Some(fetch) = self.active.as_ref() else { return };
        if fetch.reported == 2 && elapsed >= fetch.timeline.returned_us {
            self.active = None;
            events.push((now, RobotEvent::Returned));
        }
    }

    /// Robot end-effector position, meters.
    pub fn robot_position(&self) -> Vec2 {
        let home = self.robot.home_pose;
        let Some(f) = &self.active else { return home };
        let t = self.clock.now_us - f.started_us;
        let tl = &f.timeline;
        let seg = |from: Vec2, to: Vec2, t0: i64, t1: i64| {
            if t1 <= t0 {
                to
            } else {
                from.lerp(to, ((t - t0) as f64 / (t1 - t0) as f64).clamp(0.0, 1.0))
            }
        };
        if t < tl.at_part_us {
            seg(home, f.part_pose, 0, tl.at_part_us)
        } else if t < tl.picked_up_us {
            f.part_pose
        } else if t < tl.at_shared_us {
            seg(f.part_pose, f.drop_pose, tl.picked_up_us, tl.at_shared_us)
        } else if t < tl.delivered_us {
            f.drop_pose
        } else {
            seg(f.drop_pose, home, tl.delivered_us, tl.returned_us)
        }
    }

    pub fn mark_assembled(&mut self, label: &str) -> bool {
        let point = self.layout.assembly_point;
        self.scene.mark_assembled(label, point)
    }
}

/// One fixation in a gaze script. `target_label: null` looks away from the
/// scene (tracker reports invalid samples).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub target_label: Option<String>,
    pub duration_ms: u64,
}

/// Samples per entry at the stream rate.
pub fn entry_sample_count(entry: &ScriptEntry, stream: &StreamConfig) -> usize {
    (entry.duration_ms as f64 * stream.sample_rate_hz / 1000.0).round() as usize
}

/// Generates tracker output for a gaze script: each fixation is centered on
/// the target's projected box center with isotropic Gaussian noise.
pub fn scripted_gaze(
    scene: &Scene,
    camera: &Camera,
    script: &[ScriptEntry],
    sigma_px: f64,
    seed: u64,
    stream: &StreamConfig,
    start_us: i64,
) -> Result<Vec<GazeSample>, SimError> {
    let mut rng = rng_for(seed, STREAM_GAZE);
    let noise = Normal::new(0.0, sigma_px.max(0.0)).map_err(|e| SimError::Script(e.to_string()))?;
    let period = stream.sample_period_us();
    let mut samples = Vec::new();
    for entry in script {
        let center = match &entry.target_label {
            None => None,
            Some(label) => {
                let part = scene
                    .part(label)
                    .filter(|p| camera.sees(p))
                    .ok_or_else(|| SimError::Script(format!("target '{label}' is not visible to the user")))?;
                let (x0, y0, x1, y1) = camera.project_rect(&part.rect());
                Some(((x0 + x1) / 2.0, (y0 + y1) / 2.0))
            }
        };
        for _ in 0..entry_sample_count(entry, stream) {
            let ts = start_us + samples.len() as i64 * period;
            let (dx, dy) = (noise.sample(&mut rng), noise.sample(&mut rng));
            samples.push(match center {
                Some((cx, cy)) => GazeSample::new(ts, cx + dx, cy + dy),
                None => GazeSample::invalid(ts),
            });
        }
    }
    Ok(samples)
}

/// Default script for a plan: fixate each robot-fetched part in
/// prerequisite order, then look away long enough for the fetch and the
/// assembly of the parts that follow.
pub fn default_script(plan: &AssemblyPlan, fixation_ms: u64, gap_ms: u64) -> Vec<ScriptEntry> {
    let mut script = vec![ScriptEntry { target_label: None, duration_ms: 1_000 }];
    for step in plan.topological_steps().into_iter().filter(|s| s.source == PartSource::RobotWorkspace) {
        script.push(ScriptEntry { target_label: Some(step.part_label.clone()), duration_ms: fixation_ms });
        script.push(ScriptEntry { target_label: None, duration_ms: gap_ms });
    }
    script
}

/// A stand-in for the person at the bench: takes delivered parts and works
/// through user-station parts, one at a time, in plan order.
#[derive(Debug, Clone)]
pub struct SimulatedUser {
    assemble_us: i64,
    assembled: BTreeSet<String>,
    working_on: Option<(String, i64)>,
}

impl SimulatedUser {
    pub fn new(assemble_us: i64) -> Self {
        Self { assemble_us, assembled: BTreeSet::new(), working_on: None }
    }

    pub fn assembled(&self) -> &BTreeSet<String> {
        &self.assembled
    }

    /// Returns labels finished at `now_us`, and may start the next part.
    pub fn step(&mut self, now_us: i64, plan: &AssemblyPlan, scene: &Scene) -> Vec<String> {
        let mut finished = Vec::new();
        if let Some((label, done_at)) = &self.working_on {
            if now_us >= *done_at {
                finished.push(label.clone());
                self.assembled.insert(label.clone());
                self.working_on = None;
            }
        }
        if self.working_on.is_none() {
            let next = plan.topological_steps().into_iter().find(|s| {
                if self.assembled.contains(&s.part_label) {
                    return false;
                }
                let at_hand = scene.part(&s.part_label).is_some_and(|p| {
                    !p.assembled
                        && !p.carried
                        && match s.source {
                            PartSource::UserStation => p.zone == Zone::UserStation,
                            PartSource::RobotWorkspace => p.zone == Zone::Shared,
                        }
                });
                at_hand
                    && s.prerequisites.iter().all(|pre| {
                        plan.step(pre).is_some_and(|ps| self.assembled.contains(&ps.part_label))
                    })
            });
            if let Some(s) = next {
                self.working_on = Some((s.part_label.clone(), now_us + self.assemble_us));
            }
        }
        finished
    }
}
