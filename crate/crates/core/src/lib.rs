//! Tightly coupled visual, inertial, DVL and pressure state estimation for
//! underwater vehicles, with a deterministic scenario simulator and an
//! evaluation toolkit.
//!
//! The sensor models and manifold types are generic over the scalar; the
//! aliases below fix them to `f64`, which is what the estimator runs on.

pub mod dvl;
pub mod imu;
pub mod manifold;
pub mod scalar;
pub mod state;
pub mod depth;
pub mod visual;
pub mod backend;
pub mod sim;
pub mod frontend;
pub mod eval;
pub mod cli;

pub type Rotation = manifold::Rotation<f64>;
pub type Pose = manifold::Pose<f64>;
pub type NavState = state::NavState<f64>;
pub type ImuSample = imu::ImuSample<f64>;
pub type ImuBias = imu::ImuBias<f64>;
pub type ImuNoiseSpec = imu::ImuNoiseSpec<f64>;
pub type ImuPreintegrated = imu::ImuPreintegrated<f64>;
pub type DvlSample = dvl::DvlSample<f64>;
pub type DvlBias = dvl::DvlBias<f64>;
pub type DvlExtrinsics = dvl::DvlExtrinsics<f64>;
pub type DvlPreintegrated = dvl::DvlPreintegrated<f64>;
pub type PressureSample = depth::PressureSample<f64>;
pub type DepthExtrinsics = depth::DepthExtrinsics<f64>;
pub type CameraModel = visual::CameraModel<f64>;
pub type LandmarkObservation = visual::LandmarkObservation<f64>;
