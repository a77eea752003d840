//! Doppler velocity log: bias-aware velocity model, dead reckoning,
//! translation preintegration in the IMU frame of the first keyframe, and
//! the two DVL residuals.
//!
//! The measured velocity is modelled as `v_meas = v_D + b_v + n_v`, where
//! `b_v` drifts slowly and is carried in every keyframe state. Between two
//! keyframes `i` and `m` the translation increment
//!
//! ```text
//! dp = sum_k dR_ik R_ID (v_k - b_v) dt_k
//! ```
//!
//! only depends on the preintegrated IMU rotation, so it is computed once
//! and corrected to first order when the gyro or velocity bias estimate moves.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu::{ImuPreintegrated, RotationCheckpoint};
use crate::manifold::{hat, Rotation};
use crate::scalar::{lit, Real};
use crate::state::{idx, NavState, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DvlError {
    #[error("no DVL samples")]
    Empty,
    #[error("DVL timestamps not strictly increasing at sample {index}")]
    NonMonotonic { index: usize },
    #[error("{rotations} rotations supplied for {samples} DVL samples")]
    LengthMismatch { samples: usize, rotations: usize },
    #[error("no rotation checkpoint at DVL time {t}")]
    MisalignedCheckpoint { t: f64 },
    #[error("end time {t_end} precedes the last DVL sample at {t_last}")]
    EndBeforeLastSample { t_end: f64, t_last: f64 },
    #[error("DVL stream does not cover [{t0}, {t1}]")]
    Coverage { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DvlSample<T: Real> {
    pub t: f64,
    /// Velocity in the DVL frame, m/s.
    pub vel: Vector3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DvlBias<T: Real> {
    pub bv: Vector3<T>,
}

impl<T: Real> DvlBias<T> {
    pub fn zero() -> Self {
        Self { bv: Vector3::zeros() }
    }
}

impl<T: Real> Default for DvlBias<T> {
    fn default() -> Self {
        Self::zero()
    }
}

/// Mounting of the DVL relative to the IMU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DvlExtrinsics<T: Real> {
    pub r_id: Rotation<T>,
    pub p_id: Vector3<T>,
}

impl<T: Real> Default for DvlExtrinsics<T> {
    fn default() -> Self {
        Self { r_id: Rotation::identity(), p_id: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvlPreintegrated<T: Real> {
    pub t_start: f64,
    pub t_end: f64,
    pub dp: Vector3<T>,
    pub dt_total: T,
    pub lin_bg: Vector3<T>,
    pub lin_bv: Vector3<T>,
    pub j_dp_dbv: Matrix3<T>,
    pub j_dp_dbg: Matrix3<T>,
    pub cov: Matrix3<T>,
}

fn check_monotonic<T: Real>(samples: &[DvlSample<T>]) -> Result<(), DvlError> {
    if samples.is_empty() {
        return Err(DvlError::Empty);
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].t <= w[0].t || !w[1].t.is_finite() {
            return Err(DvlError::NonMonotonic { index: i + 1 });
        }
    }
    Ok(())
}

fn step_lengths<T: Real>(samples: &[DvlSample<T>], t_end: f64) -> Result<Vec<f64>, DvlError> {
    check_monotonic(samples)?;
    let t_last = samples[samples.len() - 1].t;
    if t_end < t_last {
        return Err(DvlError::EndBeforeLastSample { t_end, t_last });
    }
    Ok((0..samples.len())
        .map(|k| samples.get(k + 1).map_or(t_end, |n| n.t) - samples[k].t)
        .collect())
}

/// Dead-reckons the DVL position from `p0` with one world rotation `R_WD`
/// per sample; sample `k` is held until the next one (the last until `t_end`).
pub fn dead_reckon_dvl<T: Real>(
    p0: &Vector3<T>,
    rotations: &[Rotation<T>],
    samples: &[DvlSample<T>],
    t_end: f64,
    bias: &DvlBias<T>,
) -> Result<Vector3<T>, DvlError> {
    if rotations.len() != samples.len() {
        return Err(DvlError::LengthMismatch { samples: samples.len(), rotations: rotations.len() });
    }
    let steps = step_lengths(samples, t_end)?;
    let mut p = *p0;
    for ((r, s), dt) in rotations.iter().zip(samples).zip(steps) {
        p += r.rotate(&(s.vel - bias.bv)) * lit::<T>(dt);
    }
    Ok(p)
}

/// Preintegrates DVL translation over `[samples[0].t, t_end]`.
///
/// `checkpoints` must hold the preintegrated IMU rotation at every sample
/// time (extra checkpoints are ignored). `sigma_v` is the per-axis standard
/// deviation of a single velocity measurement.
pub fn preintegrate_dvl<T: Real>(
    samples: &[DvlSample<T>],
    t_end: f64,
    checkpoints: &[RotationCheckpoint<T>],
    ext: &DvlExtrinsics<T>,
    lin_bg: Vector3<T>,
    lin_bv: Vector3<T>,
    sigma_v: T,
) -> Result<DvlPreintegrated<T>, DvlError> {
    let steps = step_lengths(samples, t_end)?;
    let find = |t: f64| {
        let i = checkpoints.partition_point(|c| c.t < t - 1e-9);
        checkpoints
            .get(i)
            .filter(|c| (c.t - t).abs() <= 1e-9)
            .ok_or(DvlError::MisalignedCheckpoint { t })
    };
    let aligned = samples.iter().map(|s| find(s.t)).collect::<Result<Vec<_>, _>>()?;
    let end_cp = find(t_end).map(|c| (c.delta_r, c.cov_phi)).ok();

    let r_id = *ext.r_id.matrix();
    let mut dp = Vector3::zeros();
    let mut j_bv = Matrix3::zeros();
    let mut j_bg = Matrix3::zeros();
    // Joint covariance of (dphi_k, dp_k).
    let mut cov = SMatrix::<T, 6, 6>::zeros();
    let mut total = 0.0;
    for (k, (s, dt)) in samples.iter().zip(&steps).enumerate() {
        let c = aligned[k];
        let h: T = lit(*dt);
        let dr = *c.delta_r.matrix();
        let u = r_id * (s.vel - lin_bv);
        dp += dr * u * h;
        j_bv -= dr * r_id * h;
        j_bg -= dr * hat(&u) * c.d_rot_d_bg * h;

        // Rotation noise carried to the next checkpoint plus its own increment.
        let next = aligned.get(k + 1).map(|n| (n.delta_r, n.cov_phi));
        let (r_next, cov_next) = match (next, end_cp) {
            (Some(n), _) => n,
            (None, Some(e)) => e,
            (None, None) => (c.delta_r, c.cov_phi),
        };
        let step = (c.delta_r.inverse() * r_next).matrix().transpose();
        let mut f = SMatrix::<T, 6, 6>::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&step);
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(dr * hat(&u)) * h));
        let mut q = SMatrix::<T, 6, 6>::zeros();
        let q_phi = cov_next - step * c.cov_phi * step.transpose();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&((q_phi + q_phi.transpose()) * lit::<T>(0.5)));
        let var_v = sigma_v * sigma_v * h * h;
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * var_v));
        cov = f * cov * f.transpose() + q;
        total += dt;
    }
    let cov_p = cov.fixed_view::<3, 3>(3, 3).into_owned();
    Ok(DvlPreintegrated {
        t_start: samples[0].t,
        t_end,
        dp,
        dt_total: lit(total),
        lin_bg,
        lin_bv,
        j_dp_dbv: j_bv,
        j_dp_dbg: j_bg,
        cov: (cov_p + cov_p.transpose()) * lit::<T>(0.5),
    })
}

/// First-order bias update of the translation increment; never re-integrates.
pub fn correct_dvl_bias<T: Real>(
    pre: &DvlPreintegrated<T>,
    new_bg: &Vector3<T>,
    new_bv: &Vector3<T>,
) -> Vector3<T> {
    pre.dp + pre.j_dp_dbv * (new_bv - pre.lin_bv) + pre.j_dp_dbg * (new_bg - pre.lin_bg)
}

/// Velocity the DVL should read for `state` rotating at `gyro` (IMU frame).
pub fn dvl_velocity_estimate<T: Real>(
    state: &NavState<T>,
    gyro: &Vector3<T>,
    ext: &DvlExtrinsics<T>,
) -> Vector3<T> {
    ext.r_id.inverse_rotate(&(state.rotation.inverse_rotate(&state.velocity) + gyro.cross(&ext.p_id)))
}

/// Relative velocity residual between keyframes `i` and `m`; a bias common to
/// both measurements cancels.
#[allow(clippy::too_many_arguments)]
pub fn dvl_velocity_residual<T: Real>(
    state_i: &NavState<T>,
    state_m: &NavState<T>,
    gyro_i: &Vector3<T>,
    gyro_m: &Vector3<T>,
    meas_i: &Vector3<T>,
    meas_m: &Vector3<T>,
    ext: &DvlExtrinsics<T>,
) -> Vector3<T> {
    let vi = dvl_velocity_estimate(state_i, gyro_i, ext);
    let vm = dvl_velocity_estimate(state_m, gyro_m, ext);
    (vm - vi) - (meas_m - meas_i)
}

/// Jacobian of [`dvl_velocity_estimate`] with respect to the state tangent.
fn velocity_estimate_jacobian<T: Real>(state: &NavState<T>, ext: &DvlExtrinsics<T>) -> SMatrix<T, 3, STATE_DIM> {
    let rid_t = ext.r_id.matrix().transpose();
    let mut j = SMatrix::<T, 3, STATE_DIM>::zeros();
    let body_v = state.rotation.inverse_rotate(&state.velocity);
    j.fixed_view_mut::<3, 3>(0, idx::ROT).copy_from(&(rid_t * hat(&body_v)));
    j.fixed_view_mut::<3, 3>(0, idx::VEL).copy_from(&(rid_t * state.rotation.matrix().transpose()));
    j
}

#[allow(clippy::too_many_arguments)]
pub fn dvl_velocity_residual_jacobians<T: Real>(
    state_i: &NavState<T>,
    state_m: &NavState<T>,
    gyro_i: &Vector3<T>,
    gyro_m: &Vector3<T>,
    meas_i: &Vector3<T>,
    meas_m: &Vector3<T>,
    ext: &DvlExtrinsics<T>,
) -> (Vector3<T>, SMatrix<T, 3, STATE_DIM>, SMatrix<T, 3, STATE_DIM>) {
    let r = dvl_velocity_residual(state_i, state_m, gyro_i, gyro_m, meas_i, meas_m, ext);
    (r, -velocity_estimate_jacobian(state_i, ext), velocity_estimate_jacobian(state_m, ext))
}

/// Translation residual between keyframes `i` and `m` against the
/// bias-corrected preintegrated increment.
pub fn dvl_position_residual<T: Real>(
    state_i: &NavState<T>,
    state_m: &NavState<T>,
    pre: &DvlPreintegrated<T>,
    ext: &DvlExtrinsics<T>,
) -> Vector3<T> {
    let ri = &state_i.rotation;
    let lever = state_m.rotation.rotate(&ext.p_id) - ri.rotate(&ext.p_id);
    ri.inverse_rotate(&(lever + (state_m.position - state_i.position)))
        - correct_dvl_bias(pre, &state_i.imu_bias.bg, &state_i.dvl_bias.bv)
}

pub fn dvl_position_residual_jacobians<T: Real>(
    state_i: &NavState<T>,
    state_m: &NavState<T>,
    pre: &DvlPreintegrated<T>,
    ext: &DvlExtrinsics<T>,
) -> (Vector3<T>, SMatrix<T, 3, STATE_DIM>, SMatrix<T, 3, STATE_DIM>) {
    let r = dvl_position_residual(state_i, state_m, pre, ext);
    let ri_t = state_i.rotation.matrix().transpose();
    let rm = state_m.rotation.matrix();
    let mut ji = SMatrix::<T, 3, STATE_DIM>::zeros();
    let mut jm = SMatrix::<T, 3, STATE_DIM>::zeros();
    let reach = ri_t * (rm * ext.p_id + state_m.position - state_i.position);
    ji.fixed_view_mut::<3, 3>(0, idx::ROT).copy_from(&hat(&reach));
    ji.fixed_view_mut::<3, 3>(0, idx::POS).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(0, idx::BG).copy_from(&(-pre.j_dp_dbg));
    ji.fixed_view_mut::<3, 3>(0, idx::BV).copy_from(&(-pre.j_dp_dbv));
    jm.fixed_view_mut::<3, 3>(0, idx::ROT).copy_from(&(-(ri_t * rm * hat(&ext.p_id))));
    jm.fixed_view_mut::<3, 3>(0, idx::POS).copy_from(&ri_t);
    (r, ji, jm)
}

/// A time-sorted DVL stream with interval and point queries.
#[derive(Debug, Clone, Default)]
pub struct DvlStream<T: Real> {
    samples: Vec<DvlSample<T>>,
}

impl<T: Real> DvlStream<T> {
    pub fn new(samples: Vec<DvlSample<T>>) -> Result<Self, DvlError> {
        check_monotonic(&samples)?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[DvlSample<T>] {
        &self.samples
    }

    /// Sample times strictly inside `(t0, t1)`.
    pub fn times_between(&self, t0: f64, t1: f64) -> Vec<f64> {
        let a = self.samples.partition_point(|s| s.t <= t0);
        self.samples[a..].iter().map(|s| s.t).take_while(|&t| t < t1).collect()
    }

    /// Measurement at `t`, linearly interpolated between the bracketing samples
    /// when they are at most `max_gap` seconds apart.
    pub fn measurement_at(&self, t: f64, max_gap: f64) -> Option<Vector3<T>> {
        let n = self.samples.partition_point(|s| s.t <= t);
        if n == 0 {
            return None;
        }
        let a = &self.samples[n - 1];
        if a.t == t {
            return Some(a.vel);
        }
        let b = self.samples.get(n)?;
        if b.t - a.t > max_gap {
            return None;
        }
        let w: T = lit((t - a.t) / (b.t - a.t));
        Some(a.vel * (T::one() - w) + b.vel * w)
    }

    /// Time of the sample in effect at `t`.
    pub fn held_time(&self, t: f64) -> Option<f64> {
        let n = self.samples.partition_point(|s| s.t <= t);
        n.checked_sub(1).map(|k| self.samples[k].t)
    }

    /// Slope of the velocity around sample `k` from its neighbours' means,
    /// ignoring neighbours further than `max_gap` away.
    fn slope(&self, k: usize, max_gap: f64) -> Vector3<T> {
        let near = |j: Option<usize>| {
            j.and_then(|j| self.samples.get(j)).filter(|s| (s.t - self.samples[k].t).abs() <= max_gap)
        };
        match (near(k.checked_sub(1)), near(Some(k + 1))) {
            (Some(a), Some(b)) => (b.vel - a.vel) / lit::<T>(b.t - a.t),
            (Some(a), None) => (self.samples[k].vel - a.vel) / lit::<T>(self.samples[k].t - a.t),
            (None, Some(b)) => (b.vel - self.samples[k].vel) / lit::<T>(b.t - self.samples[k].t),
            (None, None) => Vector3::zeros(),
        }
    }

    /// Preintegrates `[t0, t1]` using rotation checkpoints from `imu`, which must
    /// span the same interval and contain checkpoints at every DVL time inside it.
    ///
    /// Each sample is the mean velocity over its own period, expressed at the
    /// attitude of its start. A period cut by `t0` or `t1` contributes the mean
    /// of a linear velocity profile over the part inside, and `lead` is the
    /// body rotation from the held sample's time to `t0` (identity when `t0`
    /// falls on a sample).
    #[allow(clippy::too_many_arguments)]
    pub fn preintegrate(
        &self,
        t0: f64,
        t1: f64,
        imu: &ImuPreintegrated<T>,
        ext: &DvlExtrinsics<T>,
        lin_bv: Vector3<T>,
        lead: &Rotation<T>,
        sigma_v: T,
        max_gap: f64,
    ) -> Result<DvlPreintegrated<T>, DvlError> {
        let n = self.samples.partition_point(|s| s.t <= t0);
        if n == 0 || t1 <= t0 {
            return Err(DvlError::Coverage { t0, t1 });
        }
        let first = n - 1;
        let last = first + self.samples[n..].iter().take_while(|s| s.t < t1).count();
        let mut prev = self.samples[first].t;
        for s in self.samples[n..=last].iter().chain(self.samples.get(last + 1)) {
            if s.t - prev > max_gap {
                return Err(DvlError::Coverage { t0, t1 });
            }
            prev = s.t;
        }
        if t1 - prev > max_gap {
            return Err(DvlError::Coverage { t0, t1 });
        }
        let mut pieces: Vec<DvlSample<T>> = (first..=last)
            .map(|k| {
                let s = &self.samples[k];
                let start = s.t.max(t0);
                let end = self.samples.get(k + 1).map_or(t1, |b| b.t.min(t1));
                let vel = match self.samples.get(k + 1) {
                    Some(b) if start > s.t || end < b.t => {
                        // Mean of the linear profile over the covered part of the period.
                        let offset = 0.5 * (start + end) - 0.5 * (s.t + b.t);
                        s.vel + self.slope(k, max_gap) * lit::<T>(offset)
                    }
                    _ => s.vel,
                };
                DvlSample { t: start, vel }
            })
            .collect();
        let r_id = ext.r_id;
        pieces[0].vel = r_id.inverse_rotate(&lead.inverse_rotate(&r_id.rotate(&pieces[0].vel)));
        preintegrate_dvl(&pieces, t1, &imu.checkpoints, ext, imu.lin_bias.bg, lin_bv, sigma_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{ImuBias, ImuNoiseSpec, ImuSample, ImuStream};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn constant_samples(n: usize, dt: f64, vel: Vector3<f64>) -> Vec<DvlSample<f64>> {
        (0..n).map(|k| DvlSample { t: k as f64 * dt, vel }).collect()
    }

    fn identity_checkpoints(samples: &[DvlSample<f64>], t_end: f64) -> Vec<RotationCheckpoint<f64>> {
        samples
            .iter()
            .map(|s| s.t)
            .chain([t_end])
            .map(|t| RotationCheckpoint {
                t,
                delta_r: Rotation::identity(),
                d_rot_d_bg: Matrix3::zeros(),
                cov_phi: Matrix3::zeros(),
            })
            .collect()
    }

    #[test]
    fn dead_reckoning_basic_cases() {
        let s = constant_samples(10, 0.1, Vector3::x());
        let rots = vec![Rotation::identity(); 10];
        let p0 = Vector3::new(1.0, 2.0, 3.0);
        let p = dead_reckon_dvl(&p0, &rots, &s, 1.0, &DvlBias::zero()).unwrap();
        assert_relative_eq!(p, p0 + Vector3::x(), epsilon = 1e-12);
        let p = dead_reckon_dvl(&p0, &rots, &s, 1.0, &DvlBias { bv: Vector3::x() }).unwrap();
        assert_eq!(p, p0);
        assert_eq!(
            dead_reckon_dvl(&p0, &rots[..3], &s, 1.0, &DvlBias::zero()).unwrap_err(),
            DvlError::LengthMismatch { samples: 10, rotations: 3 }
        );
    }

    #[test]
    fn dead_reckoning_quarter_arc() {
        // Forward speed 1 m/s while yawing through pi/2: the exact path is an arc
        // of radius 2/pi whose chord endpoint is (r, r).
        let run = |n: usize| {
            let dt = 1.0 / n as f64;
            let s = constant_samples(n, dt, Vector3::x());
            let rots: Vec<_> = (0..n).map(|k| Rotation::about_z(PI / 2.0 * k as f64 * dt)).collect();
            let p = dead_reckon_dvl(&Vector3::zeros(), &rots, &s, 1.0, &DvlBias::zero()).unwrap();
            let r = 2.0 / PI;
            (p - Vector3::new(r, r, 0.0)).norm()
        };
        let (coarse, fine) = (run(100), run(200));
        assert!(coarse < 0.02);
        // Left Riemann sums converge at first order.
        assert!((coarse / fine - 2.0).abs() < 0.1);
    }

    #[test]
    fn preintegration_trivial_cases() {
        let s = constant_samples(10, 0.1, Vector3::x());
        let cps = identity_checkpoints(&s, 1.0);
        let ext = DvlExtrinsics::default();
        let pre = preintegrate_dvl(&s, 1.0, &cps, &ext, Vector3::zeros(), Vector3::zeros(), 0.0).unwrap();
        assert_relative_eq!(pre.dp, Vector3::x(), epsilon = 1e-12);
        let pre = preintegrate_dvl(&s, 1.0, &cps, &ext, Vector3::zeros(), Vector3::x(), 0.0).unwrap();
        assert_eq!(pre.dp, Vector3::zeros());
        assert_relative_eq!(pre.j_dp_dbv, -Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn straight_line_bias_update_is_exact() {
        let s = constant_samples(10, 0.1, Vector3::new(1.0, 0.2, 0.0));
        let cps = identity_checkpoints(&s, 1.0);
        let ext = DvlExtrinsics::default();
        let pre = preintegrate_dvl(&s, 1.0, &cps, &ext, Vector3::zeros(), Vector3::zeros(), 0.0).unwrap();
        assert_eq!(correct_dvl_bias(&pre, &Vector3::zeros(), &Vector3::zeros()), pre.dp);
        let nb = Vector3::new(0.05, 0.0, 0.0);
        let fix = correct_dvl_bias(&pre, &Vector3::zeros(), &nb);
        let re = preintegrate_dvl(&s, 1.0, &cps, &ext, Vector3::zeros(), nb, 0.0).unwrap();
        assert_relative_eq!(fix, re.dp, epsilon = 1e-15);
        assert_relative_eq!(fix - pre.dp, -nb, epsilon = 1e-15);
    }

    fn rotating_setup(bg: Vector3<f64>) -> (DvlPreintegrated<f64>, DvlStream<f64>, ImuStream<f64>, DvlExtrinsics<f64>) {
        let imu: Vec<_> = (0..=200)
            .map(|k| {
                let t = k as f64 * 0.01;
                ImuSample { t, gyro: Vector3::new(0.1 * t.sin(), -0.2, 0.5), accel: Vector3::zeros() }
            })
            .collect();
        let dvl: Vec<_> = (0..=20)
            .map(|k| {
                let t = k as f64 * 0.1 + 0.003;
                DvlSample { t, vel: Vector3::new(1.0, 0.1 * t, -0.05) }
            })
            .collect();
        let imu = ImuStream::new(imu).unwrap();
        let dvl = DvlStream::new(dvl).unwrap();
        let ext = DvlExtrinsics { r_id: Rotation::exp(&Vector3::new(0.0, 0.1, PI / 4.0)), p_id: Vector3::new(0.2, 0.0, 0.3) };
        let pm = imu
            .preintegrate(0.05, 1.55, ImuBias { bg, ba: Vector3::zeros() }, ImuNoiseSpec::zero(), &dvl.times_between(0.05, 1.55))
            .unwrap();
        let pre = dvl.preintegrate(0.05, 1.55, &pm, &ext, Vector3::zeros(), &Rotation::identity(), 0.0, 0.15).unwrap();
        (pre, dvl, imu, ext)
    }

    #[test]
    fn gyro_bias_update_has_quadratic_remainder() {
        let (pre, dvl, imu, ext) = rotating_setup(Vector3::zeros());
        let gap = |scale: f64| {
            let bg = Vector3::new(0.0, 0.0, 0.02) * scale;
            let pm = imu
                .preintegrate(0.05, 1.55, ImuBias { bg, ba: Vector3::zeros() }, ImuNoiseSpec::zero(), &dvl.times_between(0.05, 1.55))
                .unwrap();
            let re = dvl.preintegrate(0.05, 1.55, &pm, &ext, Vector3::zeros(), &Rotation::identity(), 0.0, 0.15).unwrap();
            (correct_dvl_bias(&pre, &bg, &Vector3::zeros()) - re.dp).norm()
        };
        let ratio = gap(1.0) / gap(0.5);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn velocity_estimate_examples() {
        let mut s = NavState::<f64>::default();
        s.velocity = Vector3::x();
        let ext = DvlExtrinsics::default();
        assert_relative_eq!(dvl_velocity_estimate(&s, &Vector3::zeros(), &ext), Vector3::x());
        s.velocity = Vector3::zeros();
        let lever = DvlExtrinsics { r_id: Rotation::identity(), p_id: Vector3::y() };
        assert_relative_eq!(dvl_velocity_estimate(&s, &Vector3::z(), &lever), -Vector3::x(), epsilon = 1e-15);
        let turned = DvlExtrinsics { r_id: Rotation::about_z(PI / 2.0), p_id: Vector3::y() };
        assert_relative_eq!(dvl_velocity_estimate(&s, &Vector3::z(), &turned), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn velocity_residual_cancels_common_offset() {
        let si = NavState { velocity: Vector3::new(0.5, 0.1, 0.0), ..Default::default() };
        let sm = NavState { velocity: Vector3::new(0.6, 0.0, 0.1), rotation: Rotation::about_z(0.3), ..si };
        let ext = DvlExtrinsics { r_id: Rotation::about_z(0.2), p_id: Vector3::new(0.1, 0.2, 0.3) };
        let (wi, wm) = (Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.01, 0.0, 0.2));
        // Dyadic values keep the measurement arithmetic exact.
        let (mi, mm) = (Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.5625, 0.03125, 0.015625));
        let base = dvl_velocity_residual(&si, &sm, &wi, &wm, &mi, &mm, &ext);
        let off = Vector3::new(0.25, -0.5, 0.125);
        assert_eq!(dvl_velocity_residual(&si, &sm, &wi, &wm, &(mi + off), &(mm + off), &ext), base);
        assert_eq!(dvl_velocity_residual(&si, &si, &wi, &wi, &mi, &mi, &ext), Vector3::zeros());
    }

    #[test]
    fn position_residual_examples() {
        let s = constant_samples(10, 0.1, Vector3::x());
        let cps = identity_checkpoints(&s, 1.0);
        let ext = DvlExtrinsics::default();
        let pre = preintegrate_dvl(&s, 1.0, &cps, &ext, Vector3::zeros(), Vector3::zeros(), 0.0).unwrap();
        let si = NavState::<f64>::default();
        let mut sm = si;
        sm.position = Vector3::x();
        assert!(dvl_position_residual(&si, &sm, &pre, &ext).norm() < 1e-12);
        sm.position += Vector3::new(0.1, 0.0, 0.0);
        assert_relative_eq!(dvl_position_residual(&si, &sm, &pre, &ext), Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-12);

        // Pure rotation with a lever arm leaves only the lever term.
        let lever = DvlExtrinsics { r_id: Rotation::identity(), p_id: Vector3::new(0.0, 0.5, 0.0) };
        let zero = preintegrate_dvl(&s, 1.0, &cps, &lever, Vector3::zeros(), Vector3::x(), 0.0).unwrap();
        let si = NavState { dvl_bias: DvlBias { bv: Vector3::x() }, ..si };
        let rm = NavState { rotation: Rotation::about_z(PI / 2.0), ..si };
        assert_relative_eq!(
            dvl_position_residual(&si, &rm, &zero, &lever),
            Vector3::new(-0.5, -0.5, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let imu: Vec<_> = (0..=100)
            .map(|k| ImuSample { t: k as f64 * 0.01, gyro: Vector3::new(0.0, 0.1, 0.4), accel: Vector3::zeros() })
            .collect();
        let imu = ImuStream::new(imu).unwrap();
        let dvl = DvlStream::new(constant_samples(11, 0.1, Vector3::new(1.0, 0.0, 0.0))).unwrap();
        let noise = ImuNoiseSpec { sigma_g: 1e-3, sigma_a: 1e-2, sigma_bg_walk: 0.0, sigma_ba_walk: 0.0 };
        let pm = imu.preintegrate(0.0, 1.0, ImuBias::zero(), noise, &dvl.times_between(0.0, 1.0)).unwrap();
        let pre = dvl.preintegrate(0.0, 1.0, &pm, &DvlExtrinsics::default(), Vector3::zeros(), &Rotation::identity(), 0.02, 0.15).unwrap();
        assert_relative_eq!(pre.cov, pre.cov.transpose(), epsilon = 1e-18);
        let eig = pre.cov.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0));
        // The DVL white-noise floor alone is 10 * (0.02 * 0.1)^2 per axis.
        assert!(pre.cov[(0, 0)] >= 10.0 * (0.002f64).powi(2) * 0.999);
    }

    #[test]
    fn interpolated_measurement() {
        let s = DvlStream::new(vec![
            DvlSample { t: 0.0, vel: Vector3::new(0.0, 0.0, 0.0) },
            DvlSample { t: 0.1, vel: Vector3::new(1.0, 0.0, 0.0) },
        ])
        .unwrap();
        assert_relative_eq!(s.measurement_at(0.025, 0.15).unwrap(), Vector3::new(0.25, 0.0, 0.0), epsilon = 1e-12);
        assert!(s.measurement_at(0.05, 0.05).is_none());
        assert!(s.measurement_at(-0.01, 0.15).is_none());
        assert_eq!(s.measurement_at(0.1, 0.15).unwrap(), Vector3::x());
    }

    #[test]
    fn cut_periods_integrate_a_linear_velocity_exactly() {
        // [DERIVED] samples are period means of v(t) = a + b t; endpoints cut
        // the first and last periods, yet the displacement is the exact integral.
        let (a, b) = (Vector3::new(1.0, -0.5, 0.2), Vector3::new(0.3, 0.1, -0.4));
        let dvl: Vec<_> = (0..10).map(|k| DvlSample { t: k as f64 * 0.1, vel: a + b * (k as f64 * 0.1 + 0.05) }).collect();
        let imu: Vec<_> = (0..=100)
            .map(|k| ImuSample { t: k as f64 * 0.01, gyro: Vector3::zeros(), accel: Vector3::zeros() })
            .collect();
        let (imu, dvl) = (ImuStream::new(imu).unwrap(), DvlStream::new(dvl).unwrap());
        let (t0, t1) = (0.03, 0.47);
        let pm = imu.preintegrate(t0, t1, ImuBias::zero(), ImuNoiseSpec::zero(), &dvl.times_between(t0, t1)).unwrap();
        let pre = dvl.preintegrate(t0, t1, &pm, &DvlExtrinsics::default(), Vector3::zeros(), &Rotation::identity(), 0.0, 0.15);
        let exact = a * (t1 - t0) + b * (0.5 * (t1 * t1 - t0 * t0));
        assert_relative_eq!(pre.unwrap().dp, exact, epsilon = 1e-14);
    }

    #[test]
    fn lead_rotation_moves_the_held_sample_into_the_start_frame() {
        // [DERIVED] the held sample was taken at an attitude rotated by `lead`.
        let dvl = DvlStream::new(constant_samples(10, 0.1, Vector3::new(1.0, 0.0, 0.0))).unwrap();
        let imu: Vec<_> = (0..=100)
            .map(|k| ImuSample { t: k as f64 * 0.01, gyro: Vector3::zeros(), accel: Vector3::zeros() })
            .collect();
        let imu = ImuStream::new(imu).unwrap();
        let lead = Rotation::exp(&Vector3::new(0.0, 0.0, 0.1));
        let pm = imu.preintegrate(0.05, 0.1, ImuBias::zero(), ImuNoiseSpec::zero(), &[]).unwrap();
        let pre = dvl.preintegrate(0.05, 0.1, &pm, &DvlExtrinsics::default(), Vector3::zeros(), &lead, 0.0, 0.15).unwrap();
        assert_relative_eq!(pre.dp, lead.inverse_rotate(&Vector3::new(0.05, 0.0, 0.0)), epsilon = 1e-15);
    }
}
