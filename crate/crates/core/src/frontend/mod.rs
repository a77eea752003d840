//! Frame tracking and the sequential estimation pipeline.

pub mod estimator;
pub mod tracking;

pub use estimator::{run_estimator, EstimateOutput, EstimatorConfig, EstimatorError, EstimatorStats, Mode, TrajectoryPoint};
pub use tracking::{
    keyframe_decision, predict_state_degraded, refine_photometric, track_coarse, CoarseResult, FrameState, HostPoint,
    RefineResult, TrackError, TrackerConfig, TrackingStatus,
};
