//! Deterministic synthetic scenarios: trajectories, sensor streams, landmark
//! fields and their serialization.

pub mod config;
pub mod dataset;
pub mod sensors;
pub mod trajectory;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ScenarioConfig;
pub use dataset::{read_dataset, read_groundtruth, read_meta, write_dataset, Frame, SensorDataset, Stamp, TruthRecord};
pub use sensors::{generate, generate_landmarks, Landmark};
pub use trajectory::{MotionConfig, Trajectory, TrajectoryKind, TruthPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: timestamp {t} not after the previous record", path.display())]
    OutOfOrder { path: PathBuf, line: usize, t: f64 },
}
