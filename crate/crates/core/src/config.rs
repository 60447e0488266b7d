//! Run configuration loaded from a JSON file. Missing fields take defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::StreamConfig;
use crate::orchestrator::OrchestratorConfig;
use crate::sim::{Camera, DetectionNoise, RobotModel, SceneLayout};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub bind: String,
    pub tcp_port: u16,
    pub ws_port: u16,
    /// Scene snapshots are broadcast at this period while serving.
    pub snapshot_period_us: i64,
    /// Simulated seconds per wall-clock second while serving.
    pub time_scale: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), tcp_port: 7420, ws_port: 7421, snapshot_period_us: 200_000, time_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub tick_us: i64,
    pub detection_period_us: i64,
    pub gaze_sigma_px: f64,
    /// Time the simulated user needs to assemble one part.
    pub assemble_us: i64,
    pub fixation_ms: u64,
    pub gap_ms: u64,
    /// Simulated time allowed after the gaze script ends.
    pub tail_us: i64,
    pub layout: SceneLayout,
    pub robot: RobotModel,
    pub noise: DetectionNoise,
    pub user_camera: Camera,
    pub robot_camera: Camera,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_us: 10_000,
            detection_period_us: 100_000,
            gaze_sigma_px: 10.0,
            assemble_us: 2_000_000,
            fixation_ms: 1_500,
            gap_ms: 20_000,
            tail_us: 60_000_000,
            layout: SceneLayout::default(),
            robot: RobotModel::default(),
            noise: DetectionNoise::default(),
            user_camera: Camera::user_default(),
            robot_camera: Camera::robot_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GearConfig {
    pub stream: StreamConfig,
    pub orchestrator: OrchestratorConfig,
    pub sim: SimConfig,
    pub gateway: GatewayConfig,
}

impl GearConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: GearConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.stream.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.sim;
        if s.tick_us <= 0 {
            return Err(ConfigError::Invalid("sim.tick_us must be positive".into()));
        }
        if s.detection_period_us <= 0 || s.detection_period_us % s.tick_us != 0 {
            return Err(ConfigError::Invalid("sim.detection_period_us must be a positive multiple of tick_us".into()));
        }
        if self.stream.sample_period_us() % s.tick_us != 0 {
            return Err(ConfigError::Invalid("gaze sample period must be a multiple of sim.tick_us".into()));
        }
        if s.robot.speed_mps.is_nan() || s.robot.speed_mps <= 0.0 {
            return Err(ConfigError::Invalid("sim.robot.speed_mps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&s.noise.dropout_p) {
            return Err(ConfigError::Invalid("sim.noise.dropout_p must be in [0, 1]".into()));
        }
        if !(self.gateway.time_scale > 0.0 && self.gateway.time_scale.is_finite()) {
            return Err(ConfigError::Invalid("gateway.time_scale must be positive".into()));
        }
        if self.orchestrator.dwell_threshold == 0 {
            return Err(ConfigError::Invalid("orchestrator.dwell_threshold must be at least 1".into()));
        }
        Ok(())
    }
}
