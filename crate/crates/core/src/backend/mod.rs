//! Local-window factor graph and its Levenberg-Marquardt solver.

pub mod factor;
pub mod solver;
pub mod window;

pub use factor::{robust_weight, Calibration, Factor, FactorKind, Measurement, Values, VarKey};
pub use solver::{solve, state_covariances, LocalWindow, SolveError, SolveReport, SolverConfig};
pub use window::{assemble_window, KeyframeInput, KeyframeLink, WindowConfig, WindowError};
