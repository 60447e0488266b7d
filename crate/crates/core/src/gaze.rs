//! Gaze smoothing: a sliding window over valid tracker samples that emits the
//! window mean once it is full.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One raw tracker sample in scene-camera pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub timestamp_us: i64,
    pub x: f64,
    pub y: f64,
    /// Tracker confidence flag. Coordinates of invalid samples are ignored.
    pub valid: bool,
}

impl GazeSample {
    pub fn new(timestamp_us: i64, x: f64, y: f64) -> Self {
        Self { timestamp_us, x, y, valid: true }
    }

    pub fn invalid(timestamp_us: i64) -> Self {
        Self { timestamp_us, x: 0.0, y: 0.0, valid: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub sample_rate_hz: f64,
    pub window_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        // 15 samples at 20 Hz span 0.75 s.
        Self {
            frame_width: 1920.0,
            frame_height: 1080.0,
            sample_rate_hz: 20.0,
            window_size: 15,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), GazeError> {
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(GazeError::Config("frame dimensions must be positive".into()));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(GazeError::Config("sample_rate_hz must be positive".into()));
        }
        if self.window_size == 0 {
            return Err(GazeError::Config("window_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Sample period in microseconds, rounded to the nearest microsecond.
    pub fn sample_period_us(&self) -> i64 {
        (1e6 / self.sample_rate_hz).round() as i64
    }
}

/// Window-averaged gaze point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanGaze {
    pub x_mean: f64,
    pub y_mean: f64,
    pub n: usize,
    /// Time between the oldest and newest sample in the window.
    pub span_us: i64,
    /// Timestamp of the newest sample in the window.
    pub timestamp_us: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GazeError {
    #[error("gaze stream out of order: sample at {got_us} us after {last_us} us")]
    StreamOrder { last_us: i64, got_us: i64 },
    #[error("invalid stream config: {0}")]
    Config(String),
}

/// Sliding window state for one gaze stream. Single writer.
#[derive(Debug, Clone)]
pub struct GazeWindow {
    window_size: usize,
    samples: VecDeque<GazeSample>,
    last_timestamp_us: Option<i64>,
}

impl GazeWindow {
    pub fn new(window_size: usize) -> Self {
        assert!(window_size >= 1, "window_size must be at least 1");
        Self {
            window_size,
            samples: VecDeque::with_capacity(window_size),
            last_timestamp_us: None,
        }
    }

    pub fn from_config(config: &StreamConfig) -> Self {
        Self::new(config.window_size)
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Accepts one sample. Invalid samples only advance the stream clock.
    /// Returns the window mean on every push once `window_size` valid samples
    /// are held.
    pub fn push_sample(&mut self, sample: GazeSample) -> Result<Option<MeanGaze>, GazeError> {
        if let Some(last) = self.last_timestamp_us {
            if sample.timestamp_us <= last {
                return Err(GazeError::StreamOrder { last_us: last, got_us: sample.timestamp_us });
            }
        }
        self.last_timestamp_us = Some(sample.timestamp_us);
        if !sample.valid {
            return Ok(None);
        }
        if self.samples.len() == self.window_size {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        if self.samples.len() < self.window_size {
            return Ok(None);
        }
        Ok(Some(self.mean()))
    }

    /// Empties the window. The stream clock is kept, so timestamps must still
    /// increase across a reset.
    pub fn reset_window(&mut self) {
        self.samples.clear();
    }

    // Summed afresh on each emission: no running-sum drift.
    fn mean(&self) -> MeanGaze {
        let n = self.samples.len();
        let (sx, sy) = self
            .samples
            .iter()
            .fold((0.0, 0.0), |(sx, sy), s| (sx + s.x, sy + s.y));
        let first = self.samples.front().expect("window is full");
        let last = self.samples.back().expect("window is full");
        MeanGaze {
            x_mean: sx / n as f64,
            y_mean: sy / n as f64,
            n,
            span_us: last.timestamp_us - first.timestamp_us,
            timestamp_us: last.timestamp_us,
        }
    }
}
