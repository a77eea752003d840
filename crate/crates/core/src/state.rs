//! Per-keyframe navigation state.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dvl::DvlBias;
use crate::imu::ImuBias;
use crate::manifold::{Pose, Rotation};
use crate::scalar::Real;

/// Tangent dimension of [`NavState`].
pub const STATE_DIM: usize = 18;

/// Offsets of each block inside the 18-dimensional state tangent.
pub mod idx {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const BV: usize = 15;
}

/// Rotation, position and velocity of the IMU in the world frame plus the
/// gyro, accelerometer and DVL velocity biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct NavState<T: Real> {
    pub rotation: Rotation<T>,
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    pub imu_bias: ImuBias<T>,
    pub dvl_bias: DvlBias<T>,
}

impl<T: Real> Default for NavState<T> {
    fn default() -> Self {
        Self {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            imu_bias: ImuBias::zero(),
            dvl_bias: DvlBias::zero(),
        }
    }
}

impl<T: Real> NavState<T> {
    pub fn from_pose(pose: &Pose<T>) -> Self {
        Self { rotation: pose.rotation, position: pose.translation, ..Default::default() }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.rotation, self.position)
    }

    pub fn set_pose(&mut self, pose: &Pose<T>) {
        self.rotation = pose.rotation;
        self.position = pose.translation;
    }

    /// Applies a tangent increment: rotation on the right, everything else additive.
    pub fn retract(&self, d: &SVector<T, STATE_DIM>) -> Self {
        let seg = |o: usize| Vector3::new(d[o], d[o + 1], d[o + 2]);
        Self {
            rotation: self.rotation.retract(&seg(idx::ROT)),
            position: self.position + seg(idx::POS),
            velocity: self.velocity + seg(idx::VEL),
            imu_bias: ImuBias {
                bg: self.imu_bias.bg + seg(idx::BG),
                ba: self.imu_bias.ba + seg(idx::BA),
            },
            dvl_bias: DvlBias { bv: self.dvl_bias.bv + seg(idx::BV) },
        }
    }

    /// Inverse of [`NavState::retract`]: `self.retract(self.local(other)) == other`.
    pub fn local(&self, other: &Self) -> SVector<T, STATE_DIM> {
        let mut d = SVector::<T, STATE_DIM>::zeros();
        d.fixed_rows_mut::<3>(idx::ROT).copy_from(&self.rotation.local(&other.rotation));
        d.fixed_rows_mut::<3>(idx::POS).copy_from(&(other.position - self.position));
        d.fixed_rows_mut::<3>(idx::VEL).copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(idx::BG).copy_from(&(other.imu_bias.bg - self.imu_bias.bg));
        d.fixed_rows_mut::<3>(idx::BA).copy_from(&(other.imu_bias.ba - self.imu_bias.ba));
        d.fixed_rows_mut::<3>(idx::BV).copy_from(&(other.dvl_bias.bv - self.dvl_bias.bv));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite()
            && self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.imu_bias.bg.iter().all(|x| x.is_finite())
            && self.imu_bias.ba.iter().all(|x| x.is_finite())
            && self.dvl_bias.bv.iter().all(|x| x.is_finite())
    }
}
