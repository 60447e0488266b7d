//! Labeled detections from the user and robot viewpoints, gaze-to-box
//! matching, target resolution and robot-side object alignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::MeanGaze;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Viewpoint {
    User,
    Robot,
}

/// Axis-aligned labeled box in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub label: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("box '{label}' has empty extent")]
    EmptyBox { label: String },
    #[error("box '{label}' confidence {confidence} outside [0, 1]")]
    Confidence { label: String, confidence: f64 },
    #[error("box '{label}' lies outside the {width}x{height} frame")]
    OutOfFrame { label: String, width: f64, height: f64 },
}

impl BBox {
    pub fn new(
        label: impl Into<String>,
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        confidence: f64,
    ) -> Result<Self, DetectionError> {
        let b = Self { label: label.into(), x_min, y_min, x_max, y_max, confidence };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(DetectionError::EmptyBox { label: self.label.clone() });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(DetectionError::Confidence {
                label: self.label.clone(),
                confidence: self.confidence,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Inclusive on all four edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x <= self.x_max && self.y_min <= y && y <= self.y_max
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            ..self.clone()
        }
    }
}

pub fn bbox_center(bbox: &BBox) -> (f64, f64) {
    ((bbox.x_min + bbox.x_max) / 2.0, (bbox.y_min + bbox.y_max) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub source: Viewpoint,
    pub timestamp_us: i64,
    pub boxes: Vec<BBox>,
    pub frame_width: f64,
    pub frame_height: f64,
}

impl DetectionFrame {
    pub fn new(source: Viewpoint, timestamp_us: i64, frame_width: f64, frame_height: f64) -> Self {
        Self { source, timestamp_us, boxes: Vec::new(), frame_width, frame_height }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        for b in &self.boxes {
            b.validate()?;
            if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > self.frame_width || b.y_max > self.frame_height {
                return Err(DetectionError::OutOfFrame {
                    label: b.label.clone(),
                    width: self.frame_width,
                    height: self.frame_height,
                });
            }
        }
        Ok(())
    }
}

/// Point-in-box test on the smoothed gaze, bounds inclusive.
pub fn gaze_match(gaze: &MeanGaze, bbox: &BBox) -> bool {
    bbox.contains(gaze.x_mean, gaze.y_mean)
}

fn distance(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx).hypot(ay - by)
}

/// Picks the box the user is looking at. Among matching boxes the smallest
/// area wins, then the nearest center, then the lexicographically smallest
/// label.
pub fn resolve_target<'a>(gaze: &MeanGaze, frame: &'a DetectionFrame) -> Option<&'a BBox> {
    resolve_target_min_confidence(gaze, frame, 0.0)
}

/// [`resolve_target`] restricted to boxes with `confidence >= min_confidence`.
pub fn resolve_target_min_confidence<'a>(
    gaze: &MeanGaze,
    frame: &'a DetectionFrame,
    min_confidence: f64,
) -> Option<&'a BBox> {
    debug_assert_eq!(frame.source, Viewpoint::User);
    let key = |b: &BBox| {
        let (cx, cy) = bbox_center(b);
        (b.area(), distance(gaze.x_mean, gaze.y_mean, cx, cy))
    };
    frame
        .boxes
        .iter()
        .filter(|b| b.confidence >= min_confidence && gaze_match(gaze, b))
        .min_by(|a, b| {
            let (area_a, dist_a) = key(a);
            let (area_b, dist_b) = key(b);
            area_a
                .total_cmp(&area_b)
                .then(dist_a.total_cmp(&dist_b))
                .then_with(|| a.label.cmp(&b.label))
        })
}

/// Finds the requested part in the robot's own view. Several instances are
/// ranked by confidence (highest first), then by distance to the frame
/// center.
pub fn align_object<'a>(frame: &'a DetectionFrame, label: &str) -> Option<&'a BBox> {
    debug_assert_eq!(frame.source, Viewpoint::Robot);
    let (fx, fy) = (frame.frame_width / 2.0, frame.frame_height / 2.0);
    frame
        .boxes
        .iter()
        .filter(|b| b.label == label)
        .min_by(|a, b| {
            let (ax, ay) = bbox_center(a);
            let (bx, by) = bbox_center(b);
            b.confidence
                .total_cmp(&a.confidence)
                .then(distance(ax, ay, fx, fy).total_cmp(&distance(bx, by, fx, fy)))
        })
}
