//! IMU preintegration on the rotation manifold.
//!
//! Samples are zero-order held: sample `k` drives the interval `[t_k, t_{k+1})`
//! and the last sample of a sequence drives `[t_last, t_end)`. Preintegrated
//! quantities are the left Riemann sums
//!
//! ```text
//! dR = prod Exp((w_k - bg) dt)
//! dv = sum dR_k (a_k - ba) dt
//! dp = sum [dv_k dt + 1/2 dR_k (a_k - ba) dt^2]
//! ```
//!
//! together with their first-order bias Jacobians and the covariance of
//! `(dphi, dv, dp)`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{hat, right_jacobian, right_jacobian_inv, Rotation};
use crate::scalar::{lit, Real};
use crate::state::{idx, NavState, STATE_DIM};

/// Gravity in the z-down world frame, m/s^2.
pub fn gravity<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), lit(9.81))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImuError {
    #[error("no IMU samples to integrate")]
    Empty,
    #[error("IMU timestamps not strictly increasing at sample {index}")]
    NonMonotonic { index: usize },
    #[error("integration end time {t_end} precedes the last sample at {t_last}")]
    EndBeforeLastSample { t_end: f64, t_last: f64 },
    #[error("IMU stream does not cover time {t}")]
    Coverage { t: f64 },
    #[error("empty integration interval [{t0}, {t1}]")]
    EmptyInterval { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ImuSample<T: Real> {
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vector3<T>,
    /// Specific force, m/s^2.
    pub accel: Vector3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ImuBias<T: Real> {
    pub bg: Vector3<T>,
    pub ba: Vector3<T>,
}

impl<T: Real> ImuBias<T> {
    pub fn zero() -> Self {
        Self { bg: Vector3::zeros(), ba: Vector3::zeros() }
    }
}

impl<T: Real> Default for ImuBias<T> {
    fn default() -> Self {
        Self::zero()
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ImuNoiseSpec<T: Real> {
    /// Gyro white noise, rad/s/sqrt(Hz).
    pub sigma_g: T,
    /// Accelerometer white noise, m/s^2/sqrt(Hz).
    pub sigma_a: T,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub sigma_bg_walk: T,
    /// Accelerometer bias random walk, m/s^3/sqrt(Hz).
    pub sigma_ba_walk: T,
}

impl<T: Real> ImuNoiseSpec<T> {
    pub fn zero() -> Self {
        Self { sigma_g: T::zero(), sigma_a: T::zero(), sigma_bg_walk: T::zero(), sigma_ba_walk: T::zero() }
    }

    pub fn is_valid(&self) -> bool {
        [self.sigma_g, self.sigma_a, self.sigma_bg_walk, self.sigma_ba_walk]
            .iter()
            .all(|s| s.is_finite() && *s >= T::zero())
    }
}

/// Preintegrated rotation at an intermediate time, consumed by DVL preintegration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationCheckpoint<T: Real> {
    pub t: f64,
    /// `dR` from the start of the interval to `t`.
    pub delta_r: Rotation<T>,
    /// Right-perturbation Jacobian of `delta_r` with respect to the gyro bias.
    pub d_rot_d_bg: Matrix3<T>,
    /// Covariance of the rotation noise `dphi` at `t`.
    pub cov_phi: Matrix3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuPreintegrated<T: Real> {
    pub t_start: f64,
    pub t_end: f64,
    pub delta_r: Rotation<T>,
    pub delta_v: Vector3<T>,
    pub delta_p: Vector3<T>,
    pub dt_total: T,
    pub lin_bias: ImuBias<T>,
    /// Covariance ordered `(dphi, dv, dp)`.
    pub cov: SMatrix<T, 9, 9>,
    pub j_r_bg: Matrix3<T>,
    pub j_v_bg: Matrix3<T>,
    pub j_v_ba: Matrix3<T>,
    pub j_p_bg: Matrix3<T>,
    pub j_p_ba: Matrix3<T>,
    /// One checkpoint at `t_start`, one at the end of every integration step and
    /// one at every extra time requested from [`ImuStream::preintegrate`].
    pub checkpoints: Vec<RotationCheckpoint<T>>,
}

impl<T: Real> ImuPreintegrated<T> {
    /// Checkpoint recorded at exactly `t` (within 1 ns).
    pub fn checkpoint_at(&self, t: f64) -> Option<&RotationCheckpoint<T>> {
        let i = self.checkpoints.partition_point(|c| c.t < t - 1e-9);
        self.checkpoints.get(i).filter(|c| (c.t - t).abs() <= 1e-9)
    }
}

/// Incremental builder for [`ImuPreintegrated`].
#[derive(Debug, Clone)]
pub struct ImuPreintegrator<T: Real> {
    pm: ImuPreintegrated<T>,
    noise: ImuNoiseSpec<T>,
    elapsed: f64,
}

impl<T: Real> ImuPreintegrator<T> {
    pub fn new(t_start: f64, lin_bias: ImuBias<T>, noise: ImuNoiseSpec<T>) -> Self {
        let z = Matrix3::zeros();
        Self {
            pm: ImuPreintegrated {
                t_start,
                t_end: t_start,
                delta_r: Rotation::identity(),
                delta_v: Vector3::zeros(),
                delta_p: Vector3::zeros(),
                dt_total: T::zero(),
                lin_bias,
                cov: SMatrix::zeros(),
                j_r_bg: z,
                j_v_bg: z,
                j_v_ba: z,
                j_p_bg: z,
                j_p_ba: z,
                checkpoints: vec![RotationCheckpoint {
                    t: t_start,
                    delta_r: Rotation::identity(),
                    d_rot_d_bg: z,
                    cov_phi: z,
                }],
            },
            noise,
            elapsed: 0.0,
        }
    }

    /// Integrates one zero-order-held step of length `dt` seconds.
    pub fn integrate(&mut self, gyro: &Vector3<T>, accel: &Vector3<T>, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let pm = &mut self.pm;
        let h: T = lit(dt);
        let half = lit::<T>(0.5);
        let w = gyro - pm.lin_bias.bg;
        let a = accel - pm.lin_bias.ba;
        let step = Rotation::exp(&(w * h));
        let jr = right_jacobian(&(w * h));
        let dr = *pm.delta_r.matrix();
        let a_hat = hat(&a);

        // Covariance, ordered (phi, v, p).
        let mut f = SMatrix::<T, 9, 9>::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(dr * a_hat) * h));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-(dr * a_hat) * (half * h * h)));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * h));
        let mut g = SMatrix::<T, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * h));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dr * h));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dr * (half * h * h)));
        let qg = self.noise.sigma_g * self.noise.sigma_g / h;
        let qa = self.noise.sigma_a * self.noise.sigma_a / h;
        let q = SVector::<T, 6>::from_column_slice(&[qg, qg, qg, qa, qa, qa]);
        let cov = f * pm.cov * f.transpose() + g * SMatrix::from_diagonal(&q) * g.transpose();
        pm.cov = (cov + cov.transpose()) * half;

        // Bias Jacobians: position first, it needs the old velocity terms.
        pm.j_p_ba += pm.j_v_ba * h - dr * (half * h * h);
        pm.j_p_bg += pm.j_v_bg * h - dr * a_hat * pm.j_r_bg * (half * h * h);
        pm.j_v_ba -= dr * h;
        pm.j_v_bg -= dr * a_hat * pm.j_r_bg * h;
        pm.j_r_bg = step.matrix().transpose() * pm.j_r_bg - jr * h;

        pm.delta_p += pm.delta_v * h + dr * a * (half * h * h);
        pm.delta_v += dr * a * h;
        pm.delta_r = pm.delta_r * step;

        self.elapsed += dt;
        pm.dt_total = lit(self.elapsed);
        pm.t_end += dt;
        pm.checkpoints.push(RotationCheckpoint {
            t: pm.t_end,
            delta_r: pm.delta_r,
            d_rot_d_bg: pm.j_r_bg,
            cov_phi: pm.cov.fixed_view::<3, 3>(0, 0).into_owned(),
        });
    }

    /// Integrates up to absolute time `t`, snapping the stored end time to `t`.
    fn integrate_to(&mut self, gyro: &Vector3<T>, accel: &Vector3<T>, t: f64) {
        let dt = t - self.pm.t_end;
        self.integrate(gyro, accel, dt);
        self.pm.t_end = t;
        if let Some(last) = self.pm.checkpoints.last_mut() {
            last.t = t;
        }
    }

    /// Records a rotation checkpoint at absolute time `t` ahead of the current
    /// end, assuming `gyro` is held until then. The integration state is untouched.
    pub fn checkpoint_ahead(&mut self, gyro: &Vector3<T>, t: f64) {
        let tau: T = lit(t - self.pm.t_end);
        let w = gyro - self.pm.lin_bias.bg;
        let step = Rotation::exp(&(w * tau));
        let step_t = step.matrix().transpose();
        let jr = right_jacobian(&(w * tau));
        let cov_phi = self.pm.cov.fixed_view::<3, 3>(0, 0).into_owned();
        let qg = self.noise.sigma_g * self.noise.sigma_g * tau;
        self.pm.checkpoints.push(RotationCheckpoint {
            t,
            delta_r: self.pm.delta_r * step,
            d_rot_d_bg: step_t * self.pm.j_r_bg - jr * tau,
            cov_phi: step_t * cov_phi * step_t.transpose() + jr * jr.transpose() * qg,
        });
    }

    pub fn finish(self) -> ImuPreintegrated<T> {
        self.pm
    }
}

fn check_monotonic<T: Real>(samples: &[ImuSample<T>]) -> Result<(), ImuError> {
    if samples.is_empty() {
        return Err(ImuError::Empty);
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].t <= w[0].t || !w[1].t.is_finite() {
            return Err(ImuError::NonMonotonic { index: i + 1 });
        }
    }
    Ok(())
}

/// Preintegrates `samples` over `[samples[0].t, t_end]`.
pub fn integrate_imu<T: Real>(
    samples: &[ImuSample<T>],
    t_end: f64,
    lin_bias: ImuBias<T>,
    noise: ImuNoiseSpec<T>,
) -> Result<ImuPreintegrated<T>, ImuError> {
    check_monotonic(samples)?;
    let t_last = samples[samples.len() - 1].t;
    if t_end < t_last {
        return Err(ImuError::EndBeforeLastSample { t_end, t_last });
    }
    let mut pre = ImuPreintegrator::new(samples[0].t, lin_bias, noise);
    for (k, s) in samples.iter().enumerate() {
        let next = samples.get(k + 1).map_or(t_end, |n| n.t);
        if next > s.t {
            pre.integrate_to(&s.gyro, &s.accel, next);
        }
    }
    Ok(pre.finish())
}

/// First-order bias correction of the preintegrated measurements.
pub fn correct_imu_bias<T: Real>(
    pm: &ImuPreintegrated<T>,
    new_bias: &ImuBias<T>,
) -> (Rotation<T>, Vector3<T>, Vector3<T>) {
    let dbg = new_bias.bg - pm.lin_bias.bg;
    let dba = new_bias.ba - pm.lin_bias.ba;
    let dr = pm.delta_r.retract(&(pm.j_r_bg * dbg));
    let dv = pm.delta_v + pm.j_v_bg * dbg + pm.j_v_ba * dba;
    let dp = pm.delta_p + pm.j_p_bg * dbg + pm.j_p_ba * dba;
    (dr, dv, dp)
}

/// Propagates `state_i` through the preintegrated interval. Biases are carried forward.
pub fn predict_state_imu<T: Real>(
    state_i: &NavState<T>,
    pm: &ImuPreintegrated<T>,
    gravity: &Vector3<T>,
) -> NavState<T> {
    let (dr, dv, dp) = correct_imu_bias(pm, &state_i.imu_bias);
    let dt = pm.dt_total;
    let r = &state_i.rotation;
    NavState {
        rotation: r * &dr,
        velocity: state_i.velocity + gravity * dt + r.rotate(&dv),
        position: state_i.position
            + state_i.velocity * dt
            + gravity * (lit::<T>(0.5) * dt * dt)
            + r.rotate(&dp),
        imu_bias: state_i.imu_bias,
        dvl_bias: state_i.dvl_bias,
    }
}

/// Inertial residual `(E_dR, E_dv, E_dp)` between two states.
pub fn imu_residual<T: Real>(
    state_i: &NavState<T>,
    state_j: &NavState<T>,
    pm: &ImuPreintegrated<T>,
    gravity: &Vector3<T>,
) -> SVector<T, 9> {
    imu_residual_terms(state_i, state_j, pm, gravity).0
}

struct ImuTerms<T: Real> {
    dv_world: Vector3<T>,
    dp_world: Vector3<T>,
    j_r_dbg: Vector3<T>,
}

fn imu_residual_terms<T: Real>(
    si: &NavState<T>,
    sj: &NavState<T>,
    pm: &ImuPreintegrated<T>,
    g: &Vector3<T>,
) -> (SVector<T, 9>, ImuTerms<T>) {
    let (dr, dv, dp) = correct_imu_bias(pm, &si.imu_bias);
    let dt = pm.dt_total;
    let ri = &si.rotation;
    let e_r = dr.local(&(ri.inverse() * sj.rotation));
    let dv_world = sj.velocity - si.velocity - g * dt;
    let dp_world = sj.position - si.position - si.velocity * dt - g * (lit::<T>(0.5) * dt * dt);
    let e_v = ri.inverse_rotate(&dv_world) - dv;
    let e_p = ri.inverse_rotate(&dp_world) - dp;
    let mut r = SVector::<T, 9>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&e_r);
    r.fixed_rows_mut::<3>(3).copy_from(&e_v);
    r.fixed_rows_mut::<3>(6).copy_from(&e_p);
    let j_r_dbg = pm.j_r_bg * (si.imu_bias.bg - pm.lin_bias.bg);
    (r, ImuTerms { dv_world, dp_world, j_r_dbg })
}

/// Residual with its Jacobians with respect to the tangents of `state_i` and `state_j`.
pub fn imu_residual_jacobians<T: Real>(
    si: &NavState<T>,
    sj: &NavState<T>,
    pm: &ImuPreintegrated<T>,
    g: &Vector3<T>,
) -> (SVector<T, 9>, SMatrix<T, 9, STATE_DIM>, SMatrix<T, 9, STATE_DIM>) {
    let (r, terms) = imu_residual_terms(si, sj, pm, g);
    let e_r = Vector3::new(r[0], r[1], r[2]);
    let jr_inv = right_jacobian_inv(&e_r);
    let ri_t = si.rotation.matrix().transpose();
    let dt = pm.dt_total;

    let mut ji = SMatrix::<T, 9, STATE_DIM>::zeros();
    let mut jj = SMatrix::<T, 9, STATE_DIM>::zeros();

    let rel = sj.rotation.matrix().transpose() * si.rotation.matrix();
    ji.fixed_view_mut::<3, 3>(0, idx::ROT).copy_from(&(-jr_inv * rel));
    let exp_e = Rotation::exp(&e_r);
    ji.fixed_view_mut::<3, 3>(0, idx::BG)
        .copy_from(&(-jr_inv * exp_e.matrix().transpose() * right_jacobian(&terms.j_r_dbg) * pm.j_r_bg));
    ji.fixed_view_mut::<3, 3>(3, idx::ROT).copy_from(&hat(&(ri_t * terms.dv_world)));
    ji.fixed_view_mut::<3, 3>(3, idx::VEL).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(3, idx::BG).copy_from(&(-pm.j_v_bg));
    ji.fixed_view_mut::<3, 3>(3, idx::BA).copy_from(&(-pm.j_v_ba));
    ji.fixed_view_mut::<3, 3>(6, idx::ROT).copy_from(&hat(&(ri_t * terms.dp_world)));
    ji.fixed_view_mut::<3, 3>(6, idx::POS).copy_from(&(-ri_t));
    ji.fixed_view_mut::<3, 3>(6, idx::VEL).copy_from(&(-ri_t * dt));
    ji.fixed_view_mut::<3, 3>(6, idx::BG).copy_from(&(-pm.j_p_bg));
    ji.fixed_view_mut::<3, 3>(6, idx::BA).copy_from(&(-pm.j_p_ba));

    jj.fixed_view_mut::<3, 3>(0, idx::ROT).copy_from(&jr_inv);
    jj.fixed_view_mut::<3, 3>(3, idx::VEL).copy_from(&ri_t);
    jj.fixed_view_mut::<3, 3>(6, idx::POS).copy_from(&ri_t);
    (r, ji, jj)
}

/// A time-sorted IMU stream with interval queries.
#[derive(Debug, Clone, Default)]
pub struct ImuStream<T: Real> {
    samples: Vec<ImuSample<T>>,
}

impl<T: Real> ImuStream<T> {
    pub fn new(samples: Vec<ImuSample<T>>) -> Result<Self, ImuError> {
        check_monotonic(&samples)?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ImuSample<T>] {
        &self.samples
    }

    /// Index of the sample held at time `t`.
    fn held_index(&self, t: f64) -> Result<usize, ImuError> {
        let n = self.samples.partition_point(|s| s.t <= t);
        if n == 0 {
            return Err(ImuError::Coverage { t });
        }
        Ok(n - 1)
    }

    /// Gyro reading in effect at `t` (zero-order hold).
    pub fn gyro_at(&self, t: f64) -> Result<Vector3<T>, ImuError> {
        Ok(self.samples[self.held_index(t)?].gyro)
    }

    /// Preintegrates `[t0, t1]`, with integration steps at every sample time.
    /// Rotation checkpoints are additionally recorded at each requested time by
    /// propagating the latest step with the gyro reading held there, so
    /// [`ImuPreintegrated::checkpoint_at`] answers for them without changing
    /// the integration itself.
    pub fn preintegrate(
        &self,
        t0: f64,
        t1: f64,
        lin_bias: ImuBias<T>,
        noise: ImuNoiseSpec<T>,
        checkpoint_times: &[f64],
    ) -> Result<ImuPreintegrated<T>, ImuError> {
        if t1 < t0 {
            return Err(ImuError::EmptyInterval { t0, t1 });
        }
        let first = self.held_index(t0)?;
        let mut extra: Vec<f64> = checkpoint_times.iter().copied().filter(|&t| t > t0 && t < t1).collect();
        extra.sort_by(|a, b| a.total_cmp(b));
        let mut extra = extra.into_iter().peekable();

        let mut pre = ImuPreintegrator::new(t0, lin_bias, noise);
        let mut start = t0;
        for k in first..self.samples.len() {
            let s = &self.samples[k];
            let end = self.samples.get(k + 1).map_or(t1, |n| n.t.min(t1));
            while let Some(&c) = extra.peek() {
                if c >= end {
                    break;
                }
                if c > start {
                    pre.checkpoint_ahead(&s.gyro, c);
                }
                extra.next();
            }
            if end > start {
                pre.integrate_to(&s.gyro, &s.accel, end);
            }
            start = end;
            if start >= t1 {
                break;
            }
        }
        Ok(pre.finish())
    }
}
