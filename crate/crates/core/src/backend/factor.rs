//! Residual blocks of the local window cost.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::depth::{pressure_residual_jacobians, DepthExtrinsics};
use crate::dvl::{
    dvl_position_residual_jacobians, dvl_velocity_residual_jacobians, DvlExtrinsics, DvlPreintegrated,
};
use crate::imu::{imu_residual_jacobians, ImuPreintegrated};
use crate::manifold::{hat, right_jacobian_inv, Pose};
use crate::state::{idx, NavState, STATE_DIM};
use crate::visual::{
    photometric_terms, reprojection_jacobians, CameraModel, IntensityField, LandmarkObservation, PatchPattern,
    VisualError,
};

/// Identifies an optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKey {
    State(u64),
    Landmark(u64),
}

impl VarKey {
    pub fn dim(&self) -> usize {
        match self {
            VarKey::State(_) => STATE_DIM,
            VarKey::Landmark(_) => 3,
        }
    }
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::State(id) => write!(f, "x{id}"),
            VarKey::Landmark(id) => write!(f, "l{id}"),
        }
    }
}

/// Current estimate of every variable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values {
    pub states: BTreeMap<u64, NavState<f64>>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
}

impl Values {
    /// Applies a tangent increment to one variable.
    pub fn retract(&mut self, key: VarKey, delta: &[f64]) {
        match key {
            VarKey::State(id) => {
                if let Some(s) = self.states.get_mut(&id) {
                    *s = s.retract(&SMatrix::<f64, STATE_DIM, 1>::from_column_slice(delta));
                }
            }
            VarKey::Landmark(id) => {
                if let Some(l) = self.landmarks.get_mut(&id) {
                    *l += Vector3::from_column_slice(delta);
                }
            }
        }
    }

    pub fn contains(&self, key: VarKey) -> bool {
        match key {
            VarKey::State(id) => self.states.contains_key(&id),
            VarKey::Landmark(id) => self.landmarks.contains_key(&id),
        }
    }
}

/// Sensor calibration and world constants shared by all factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub camera: CameraModel<f64>,
    /// Camera pose in the IMU frame.
    pub t_ic: Pose<f64>,
    pub dvl: DvlExtrinsics<f64>,
    pub depth: DepthExtrinsics<f64>,
    pub gravity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    Reprojection,
    Photometric,
    Imu,
    DvlVelocity,
    DvlPosition,
    Pressure,
    FixedPrior,
}

impl FactorKind {
    pub fn is_visual(&self) -> bool {
        matches!(self, FactorKind::Reprojection | FactorKind::Photometric)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Reprojection => "reprojection",
            FactorKind::Photometric => "photometric",
            FactorKind::Imu => "imu",
            FactorKind::DvlVelocity => "dvl_velocity",
            FactorKind::DvlPosition => "dvl_position",
            FactorKind::Pressure => "pressure",
            FactorKind::FixedPrior => "fixed_prior",
        }
    }
}

pub type SharedField = Arc<dyn IntensityField<f64> + Send + Sync>;

/// Measurement payload of a factor.
#[derive(Clone)]
pub enum Measurement {
    /// Keys: `[State(kf), Landmark(l)]`.
    Reprojection { pixel: Vector2<f64> },
    /// Keys: `[State(host), State(target)]`; the host pixel and its depth are fixed.
    Photometric {
        pixel: Vector2<f64>,
        depth: f64,
        host: SharedField,
        target: SharedField,
        pattern: Arc<PatchPattern<f64>>,
    },
    /// Keys: `[State(i), State(j)]`. Rows: preintegration (9) then bias continuity (9).
    Imu { preint: Arc<ImuPreintegrated<f64>> },
    /// Keys: `[State(i), State(m)]`.
    DvlVelocity { gyro_i: Vector3<f64>, gyro_m: Vector3<f64>, meas_i: Vector3<f64>, meas_m: Vector3<f64> },
    /// Keys: `[State(i), State(m)]`.
    DvlPosition { preint: Arc<DvlPreintegrated<f64>> },
    /// Keys: `[State(i), State(n)]`.
    Pressure { depth_i: f64, depth_n: f64 },
    /// Keys: `[State(k)]`.
    FixedPrior { anchor: NavState<f64> },
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measurement::Reprojection { pixel } => write!(f, "Reprojection({pixel:?})"),
            Measurement::Photometric { pixel, depth, .. } => write!(f, "Photometric({pixel:?}, {depth})"),
            Measurement::Imu { preint } => write!(f, "Imu(dt={})", preint.dt_total),
            Measurement::DvlVelocity { meas_i, meas_m, .. } => write!(f, "DvlVelocity({meas_i:?}, {meas_m:?})"),
            Measurement::DvlPosition { preint } => write!(f, "DvlPosition({:?})", preint.dp),
            Measurement::Pressure { depth_i, depth_n } => write!(f, "Pressure({depth_i}, {depth_n})"),
            Measurement::FixedPrior { .. } => write!(f, "FixedPrior"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FactorError {
    #[error("factor refers to unknown variable {0}")]
    MissingVariable(VarKey),
    #[error(transparent)]
    Visual(#[from] VisualError),
}

/// Residual and per-variable Jacobian blocks (not whitened).
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Factor {
    pub kind: FactorKind,
    pub keys: Vec<VarKey>,
    pub measurement: Measurement,
    /// Upper-triangular square root `W` of the information matrix (`W^T W`).
    pub sqrt_info: DMatrix<f64>,
    /// Huber threshold on the whitened residual norm, if robustified.
    pub huber: Option<f64>,
}

/// Square root of an information matrix given a covariance, flooring the
/// covariance diagonal at `floor`.
pub fn sqrt_info_from_cov(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = cov.nrows();
    let mut c = (cov + cov.transpose()) * 0.5;
    for i in 0..n {
        c[(i, i)] = c[(i, i)].max(floor) + floor;
    }
    let info = c.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(n, n) / floor);
    sqrt_info(&((&info + info.transpose()) * 0.5))
}

/// `W` with `W^T W = info`.
pub fn sqrt_info(info: &DMatrix<f64>) -> DMatrix<f64> {
    match info.clone().cholesky() {
        Some(ch) => ch.l().transpose(),
        None => {
            let eig = info.clone().symmetric_eigen();
            let d = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
            DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        }
    }
}

pub fn isotropic_sqrt_info(dim: usize, sigma: f64) -> DMatrix<f64> {
    DMatrix::identity(dim, dim) / sigma
}

fn state<'a>(values: &'a Values, key: VarKey) -> Result<&'a NavState<f64>, FactorError> {
    match key {
        VarKey::State(id) => values.states.get(&id).ok_or(FactorError::MissingVariable(key)),
        VarKey::Landmark(_) => Err(FactorError::MissingVariable(key)),
    }
}

fn landmark(values: &Values, key: VarKey) -> Result<&Vector3<f64>, FactorError> {
    match key {
        VarKey::Landmark(id) => values.landmarks.get(&id).ok_or(FactorError::MissingVariable(key)),
        VarKey::State(_) => Err(FactorError::MissingVariable(key)),
    }
}

fn dm<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Pose of camera `i` in camera `j`, built from the position difference so
/// that it does not depend on where the world origin is.
pub fn relative_camera_pose(si: &NavState<f64>, sj: &NavState<f64>, calib: &Calibration) -> Pose<f64> {
    let r_wci = si.rotation * calib.t_ic.rotation;
    let r_wcj = sj.rotation * calib.t_ic.rotation;
    let p_ic = &calib.t_ic.translation;
    let d = (si.position - sj.position) + (si.rotation.rotate(p_ic) - sj.rotation.rotate(p_ic));
    Pose::new(r_wcj.inverse() * r_wci, r_wcj.inverse_rotate(&d))
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    /// Residual only.
    pub fn evaluate(&self, values: &Values, calib: &Calibration) -> Result<DVector<f64>, FactorError> {
        self.linearize(values, calib).map(|l| l.residual)
    }

    /// Residual and Jacobians with respect to each key's tangent.
    pub fn linearize(&self, values: &Values, calib: &Calibration) -> Result<Linearization, FactorError> {
        match &self.measurement {
            Measurement::Reprojection { pixel } => {
                let s = state(values, self.keys[0])?;
                let l = landmark(values, self.keys[1])?;
                // Landmark relative to the camera centre, differenced first so a
                // common world shift cancels exactly.
                let rel = (l - s.position) - s.rotation.rotate(&calib.t_ic.translation);
                let r_wc = Pose::new(s.rotation * calib.t_ic.rotation, Vector3::zeros());
                let obs = LandmarkObservation { frame_id: 0, landmark_id: 0, pixel: *pixel, disparity: None };
                let j = reprojection_jacobians(&calib.camera, &r_wc, &rel, &obs)?;
                let r_ic_t = calib.t_ic.rotation.matrix().transpose();
                let lever = s.rotation.matrix() * hat(&calib.t_ic.translation);
                let mut js = SMatrix::<f64, 2, STATE_DIM>::zeros();
                js.fixed_view_mut::<2, 3>(0, idx::ROT).copy_from(&(j.d_rot * r_ic_t - j.d_pos * lever));
                js.fixed_view_mut::<2, 3>(0, idx::POS).copy_from(&j.d_pos);
                Ok(Linearization {
                    residual: DVector::from_column_slice(j.residual.as_slice()),
                    jacobians: vec![dm(&js), dm(&j.d_landmark)],
                })
            }
            Measurement::Photometric { pixel, depth, host, target, pattern } => {
                let si = state(values, self.keys[0])?;
                let sj = state(values, self.keys[1])?;
                let t_ji = relative_camera_pose(si, sj, calib);
                let (e, terms) =
                    photometric_terms(host.as_ref(), target.as_ref(), &calib.camera, &t_ji, pixel, *depth, pattern)?;
                let r_ic = calib.t_ic.rotation.matrix();
                let p_ic = calib.t_ic.translation;
                let ri = si.rotation.matrix();
                let rj_t = sj.rotation.matrix().transpose();
                let mut ji = SMatrix::<f64, 1, STATE_DIM>::zeros();
                let mut jj = SMatrix::<f64, 1, STATE_DIM>::zeros();
                for t in &terms {
                    let xb = r_ic * t.x_host + p_ic;
                    let xw = ri * xb + si.position;
                    let z = rj_t * (xw - sj.position);
                    // d e / d z, through y = R_IC^T (z - p_IC).
                    let de_dz = t.d_e_d_y * r_ic.transpose();
                    let de_dxw = de_dz * rj_t;
                    let mut a = ji.fixed_view_mut::<1, 3>(0, idx::ROT);
                    a += de_dxw * (-(ri * hat(&xb)));
                    let mut a = ji.fixed_view_mut::<1, 3>(0, idx::POS);
                    a += de_dxw;
                    let mut b = jj.fixed_view_mut::<1, 3>(0, idx::ROT);
                    b += de_dz * hat(&z);
                    let mut b = jj.fixed_view_mut::<1, 3>(0, idx::POS);
                    b -= de_dxw;
                }
                Ok(Linearization { residual: DVector::from_element(1, e), jacobians: vec![dm(&ji), dm(&jj)] })
            }
            Measurement::Imu { preint } => {
                let si = state(values, self.keys[0])?;
                let sj = state(values, self.keys[1])?;
                let (r9, ji9, jj9) = imu_residual_jacobians(si, sj, preint, &calib.gravity);
                let mut r = DVector::zeros(18);
                r.rows_mut(0, 9).copy_from(&r9);
                r.rows_mut(9, 3).copy_from(&(sj.imu_bias.bg - si.imu_bias.bg));
                r.rows_mut(12, 3).copy_from(&(sj.imu_bias.ba - si.imu_bias.ba));
                r.rows_mut(15, 3).copy_from(&(sj.dvl_bias.bv - si.dvl_bias.bv));
                let mut ji = DMatrix::zeros(18, STATE_DIM);
                let mut jj = DMatrix::zeros(18, STATE_DIM);
                ji.view_mut((0, 0), (9, STATE_DIM)).copy_from(&ji9);
                jj.view_mut((0, 0), (9, STATE_DIM)).copy_from(&jj9);
                for (row, col) in [(9, idx::BG), (12, idx::BA), (15, idx::BV)] {
                    ji.view_mut((row, col), (3, 3)).copy_from(&(-Matrix3::identity()));
                    jj.view_mut((row, col), (3, 3)).copy_from(&Matrix3::identity());
                }
                Ok(Linearization { residual: r, jacobians: vec![ji, jj] })
            }
            Measurement::DvlVelocity { gyro_i, gyro_m, meas_i, meas_m } => {
                let si = state(values, self.keys[0])?;
                let sm = state(values, self.keys[1])?;
                let (r, ji, jm) = dvl_velocity_residual_jacobians(si, sm, gyro_i, gyro_m, meas_i, meas_m, &calib.dvl);
                Ok(Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![dm(&ji), dm(&jm)] })
            }
            Measurement::DvlPosition { preint } => {
                let si = state(values, self.keys[0])?;
                let sm = state(values, self.keys[1])?;
                let (r, ji, jm) = dvl_position_residual_jacobians(si, sm, preint, &calib.dvl);
                Ok(Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![dm(&ji), dm(&jm)] })
            }
            Measurement::Pressure { depth_i, depth_n } => {
                let si = state(values, self.keys[0])?;
                let sn = state(values, self.keys[1])?;
                let (r, ji, jn) = pressure_residual_jacobians(si, sn, *depth_i, *depth_n, &calib.depth);
                Ok(Linearization { residual: DVector::from_element(1, r), jacobians: vec![dm(&ji), dm(&jn)] })
            }
            Measurement::FixedPrior { anchor } => {
                let s = state(values, self.keys[0])?;
                let d = anchor.local(s);
                let e_r = Vector3::new(d[0], d[1], d[2]);
                let mut j = DMatrix::identity(STATE_DIM, STATE_DIM);
                j.view_mut((0, 0), (3, 3)).copy_from(&right_jacobian_inv(&e_r));
                Ok(Linearization { residual: DVector::from_column_slice(d.as_slice()), jacobians: vec![j] })
            }
        }
    }

    /// Squared whitened residual norm.
    pub fn whitened_sq_norm(&self, residual: &DVector<f64>) -> f64 {
        (&self.sqrt_info * residual).norm_squared()
    }

    /// Robust cost contribution `rho(s)` of a squared whitened norm `s`.
    pub fn robust_cost(&self, s: f64) -> f64 {
        match self.huber {
            Some(d) if s > d * d => 2.0 * d * s.sqrt() - d * d,
            _ => s,
        }
    }
}

/// Huber weight for squared (Mahalanobis) residual `r2`: 1 inside the knee,
/// `delta / sqrt(r2)` outside.
pub fn robust_weight(r2: f64, delta: f64) -> f64 {
    let r = r2.max(0.0).sqrt();
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// Central-difference Jacobian of `factor` with respect to one of its keys.
pub fn numeric_jacobian(
    factor: &Factor,
    values: &Values,
    calib: &Calibration,
    key_index: usize,
    h: f64,
) -> Result<DMatrix<f64>, FactorError> {
    let key = factor.keys[key_index];
    let n = key.dim();
    let m = factor.dim();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut d = vec![0.0; n];
        d[c] = h;
        let mut plus = values.clone();
        plus.retract(key, &d);
        d[c] = -h;
        let mut minus = values.clone();
        minus.retract(key, &d);
        let col = (factor.evaluate(&plus, calib)? - factor.evaluate(&minus, calib)?) / (2.0 * h);
        j.set_column(c, &col);
    }
    Ok(j)
}
