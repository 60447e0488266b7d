pub mod assembly;
pub mod gaze;
pub mod perception;
pub mod orchestrator;
pub mod sim;
pub mod analysis;
pub mod protocol;
pub mod config;
pub mod trace;
pub mod session;
