//! Pressure-derived depth and the relative depth residual.
//!
//! The world z axis points down, so the depth of a point is its z coordinate.

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::hat;
use crate::scalar::{lit, Real};
use crate::state::{idx, NavState, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DepthError {
    #[error("pressure timestamps not strictly increasing at sample {index}")]
    NonMonotonic { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureSample<T> {
    pub t: f64,
    /// Depth below the surface, m (positive down).
    pub depth: T,
}

/// Lever arm from the IMU to the pressure sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DepthExtrinsics<T: Real> {
    pub p_ip: Vector3<T>,
}

impl<T: Real> Default for DepthExtrinsics<T> {
    fn default() -> Self {
        Self { p_ip: Vector3::zeros() }
    }
}

/// World position of the pressure sensor.
pub fn pressure_position_estimate<T: Real>(state: &NavState<T>, ext: &DepthExtrinsics<T>) -> Vector3<T> {
    state.rotation.rotate(&ext.p_ip) + state.position
}

/// Change of estimated sensor depth minus change of measured depth.
pub fn pressure_residual<T: Real>(
    state_i: &NavState<T>,
    state_n: &NavState<T>,
    depth_i: T,
    depth_n: T,
    ext: &DepthExtrinsics<T>,
) -> T {
    // Position difference first so a common world shift cancels exactly.
    let lever = state_n.rotation.rotate(&ext.p_ip) - state_i.rotation.rotate(&ext.p_ip);
    ((state_n.position - state_i.position) + lever).z - (depth_n - depth_i)
}

pub fn pressure_residual_jacobians<T: Real>(
    state_i: &NavState<T>,
    state_n: &NavState<T>,
    depth_i: T,
    depth_n: T,
    ext: &DepthExtrinsics<T>,
) -> (T, SMatrix<T, 1, STATE_DIM>, SMatrix<T, 1, STATE_DIM>) {
    let r = pressure_residual(state_i, state_n, depth_i, depth_n, ext);
    let lever = hat(&ext.p_ip);
    let row = |s: &NavState<T>| (s.rotation.matrix() * lever).row(2).into_owned();
    let mut ji = SMatrix::<T, 1, STATE_DIM>::zeros();
    let mut jn = SMatrix::<T, 1, STATE_DIM>::zeros();
    ji.fixed_view_mut::<1, 3>(0, idx::ROT).copy_from(&row(state_i));
    ji[(0, idx::POS + 2)] = -T::one();
    jn.fixed_view_mut::<1, 3>(0, idx::ROT).copy_from(&(-row(state_n)));
    jn[(0, idx::POS + 2)] = T::one();
    (r, ji, jn)
}

/// A time-sorted pressure stream.
#[derive(Debug, Clone, Default)]
pub struct PressureStream<T: Real> {
    samples: Vec<PressureSample<T>>,
}

impl<T: Real> PressureStream<T> {
    pub fn new(samples: Vec<PressureSample<T>>) -> Result<Self, DepthError> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(DepthError::NonMonotonic { index: i + 1 });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[PressureSample<T>] {
        &self.samples
    }

    /// Depth at `t`, linearly interpolated between bracketing samples at most
    /// `max_gap` seconds apart.
    pub fn depth_at(&self, t: f64, max_gap: f64) -> Option<T> {
        let n = self.samples.partition_point(|s| s.t <= t);
        if n == 0 {
            return None;
        }
        let a = &self.samples[n - 1];
        if a.t == t {
            return Some(a.depth);
        }
        let b = self.samples.get(n)?;
        if b.t - a.t > max_gap {
            return None;
        }
        let w: T = lit((t - a.t) / (b.t - a.t));
        Some(a.depth * (T::one() - w) + b.depth * w)
    }
}
