//! Per-frame pose tracking: feature-based coarse pose, direct photometric
//! refinement, acoustic-inertial prediction and the keyframe policy.

use std::collections::BTreeMap;

use nalgebra::{Matrix6, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::factor::{robust_weight, Calibration, Factor, FactorKind, Measurement, Values, VarKey};
use crate::dvl::{correct_dvl_bias, DvlExtrinsics, DvlPreintegrated};
use crate::imu::{correct_imu_bias, ImuPreintegrated};
use crate::manifold::{Pose, Rotation};
use crate::state::NavState;
use crate::visual::{photometric_residual_gradient, IntensityField, LandmarkObservation, PatchPattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingStatus {
    VisualOk,
    Degraded,
}

impl TrackingStatus {
    pub fn name(&self) -> &'static str {
        match self {
            TrackingStatus::VisualOk => "visual-ok",
            TrackingStatus::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub frame_id: u64,
    pub t: f64,
    /// Body (IMU) pose in the world.
    pub pose: Pose<f64>,
    pub status: TrackingStatus,
    pub tracked_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Below this many tracked features a frame counts as visually degraded.
    pub min_tracked_features: usize,
    /// Consecutive good frames needed to leave the degraded state.
    pub reentry_frames: usize,
    /// Huber threshold on reprojection error, pixels.
    pub coarse_huber_px: f64,
    pub coarse_iterations: usize,
    /// Huber threshold on patch intensity residuals.
    pub photometric_huber: f64,
    pub refine_iterations: usize,
    pub keyframe_translation_m: f64,
    pub keyframe_rotation_rad: f64,
    pub keyframe_interval_s: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            min_tracked_features: 8,
            reentry_frames: 3,
            coarse_huber_px: 2.0,
            coarse_iterations: 20,
            photometric_huber: 20.0,
            refine_iterations: 10,
            keyframe_translation_m: 0.3,
            keyframe_rotation_rad: 0.2,
            keyframe_interval_s: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn is_valid(&self) -> bool {
        self.min_tracked_features > 0
            && self.coarse_huber_px > 0.0
            && self.photometric_huber > 0.0
            && self.keyframe_translation_m > 0.0
            && self.keyframe_rotation_rad > 0.0
            && self.keyframe_interval_s > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("{found} associated observations, at least {needed} needed")]
    TooFewObservations { found: usize, needed: usize },
}

/// Minimum associated observations for a pose-only fit.
pub const MIN_COARSE_OBSERVATIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseResult {
    pub pose: Pose<f64>,
    pub cost: f64,
    pub used: usize,
}

fn huber_cost(s: f64, d: f64) -> f64 {
    if s <= d * d {
        s
    } else {
        2.0 * d * s.sqrt() - d * d
    }
}

/// Applies a body-pose increment `[dphi, dp]` (rotation on the right).
fn retract_pose(pose: &Pose<f64>, d: &Vector6<f64>) -> Pose<f64> {
    Pose::new(
        pose.rotation.retract(&Vector3::new(d[0], d[1], d[2])),
        pose.translation + Vector3::new(d[3], d[4], d[5]),
    )
}

/// Pose-only fit of the robustified reprojection error starting from `init`.
pub fn track_coarse(
    init: &Pose<f64>,
    observations: &[LandmarkObservation<f64>],
    map: &BTreeMap<u64, Vector3<f64>>,
    calib: &Calibration,
    cfg: &TrackerConfig,
) -> Result<CoarseResult, TrackError> {
    let factors: Vec<Factor> = observations
        .iter()
        .filter(|o| map.contains_key(&o.landmark_id))
        .map(|o| Factor {
            kind: FactorKind::Reprojection,
            keys: vec![VarKey::State(0), VarKey::Landmark(o.landmark_id)],
            measurement: Measurement::Reprojection { pixel: o.pixel },
            sqrt_info: nalgebra::DMatrix::identity(2, 2),
            huber: Some(cfg.coarse_huber_px),
        })
        .collect();
    if factors.len() < MIN_COARSE_OBSERVATIONS {
        return Err(TrackError::TooFewObservations { found: factors.len(), needed: MIN_COARSE_OBSERVATIONS });
    }
    let mut values = Values::default();
    values.states.insert(0, NavState::from_pose(init));
    for f in &factors {
        if let VarKey::Landmark(l) = f.keys[1] {
            values.landmarks.insert(l, map[&l]);
        }
    }
    let d = cfg.coarse_huber_px;
    let cost_at = |v: &Values| -> (f64, usize) {
        let mut c = 0.0;
        let mut used = 0;
        for f in &factors {
            if let Ok(r) = f.evaluate(v, calib) {
                c += huber_cost(r.norm_squared(), d);
                used += 1;
            }
        }
        (c, used)
    };
    let (mut cost, mut used) = cost_at(&values);
    let mut lambda = 1e-4;
    for _ in 0..cfg.coarse_iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for f in &factors {
            let Ok(lin) = f.linearize(&values, calib) else { continue };
            let w = robust_weight(lin.residual.norm_squared(), d);
            let j: SMatrix<f64, 2, 6> = SMatrix::from_fn(|r, c| lin.jacobians[0][(r, c)]);
            let r = Vector2::new(lin.residual[0], lin.residual[1]);
            h += j.transpose() * j * w;
            g -= j.transpose() * r * w;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = values.clone();
            let pose = retract_pose(&values.states[&0].pose(), &step);
            trial.states.insert(0, NavState::from_pose(&pose));
            let (c, u) = cost_at(&trial);
            if c < cost && u >= MIN_COARSE_OBSERVATIONS {
                let rel = (cost - c) / cost.max(1e-300);
                values = trial;
                cost = c;
                used = u;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12 && step.norm() > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(CoarseResult { pose: values.states[&0].pose(), cost, used })
}

/// A host-frame pixel with its depth in the host camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostPoint {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineResult {
    pub pose: Pose<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Nothing usable to align (no valid points or no gradient); pose unchanged.
    pub noop: bool,
}

struct PhotometricProblem<'a> {
    host: &'a dyn IntensityField<f64>,
    target: &'a dyn IntensityField<f64>,
    points: &'a [HostPoint],
    calib: &'a Calibration,
    pattern: &'a PatchPattern<f64>,
    huber: f64,
}

impl PhotometricProblem<'_> {
    fn cost(&self, t_ji: &Pose<f64>) -> (f64, usize) {
        let mut c = 0.0;
        let mut n = 0;
        for p in self.points {
            if let Ok((e, _)) = photometric_residual_gradient(
                self.host,
                self.target,
                &self.calib.camera,
                t_ji,
                &p.pixel,
                p.depth,
                self.pattern,
            ) {
                c += huber_cost(e * e, self.huber);
                n += 1;
            }
        }
        (c, n)
    }

    fn normal(&self, t_ji: &Pose<f64>) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for p in self.points {
            let Ok((e, j)) = photometric_residual_gradient(
                self.host,
                self.target,
                &self.calib.camera,
                t_ji,
                &p.pixel,
                p.depth,
                self.pattern,
            ) else {
                continue;
            };
            let w = robust_weight(e * e, self.huber);
            h += j.transpose() * j * w;
            g -= j.transpose() * e * w;
        }
        (h, g)
    }
}

/// Direct alignment of the current frame against a host keyframe.
///
/// `host_pose` and `coarse` are body poses; the result never has a higher
/// robustified photometric cost than `coarse`.
#[allow(clippy::too_many_arguments)]
pub fn refine_photometric(
    coarse: &Pose<f64>,
    host_pose: &Pose<f64>,
    host_field: &dyn IntensityField<f64>,
    points: &[HostPoint],
    target_field: &dyn IntensityField<f64>,
    calib: &Calibration,
    pattern: &PatchPattern<f64>,
    cfg: &TrackerConfig,
) -> RefineResult {
    let t_wci = host_pose.compose(&calib.t_ic);
    let to_t_ji = |body_j: &Pose<f64>| body_j.compose(&calib.t_ic).inverse().compose(&t_wci);
    let problem = PhotometricProblem {
        host: host_field,
        target: target_field,
        points,
        calib,
        pattern,
        huber: cfg.photometric_huber,
    };
    let mut t_ji = to_t_ji(coarse);
    let (initial_cost, n) = problem.cost(&t_ji);
    let noop = RefineResult { pose: *coarse, initial_cost, final_cost: initial_cost, noop: true };
    if n < MIN_COARSE_OBSERVATIONS {
        return noop;
    }
    let (h, _) = problem.normal(&t_ji);
    if h.trace() <= 1e-12 {
        return noop;
    }
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    let mut changed = false;
    for _ in 0..cfg.refine_iterations {
        let (h, g) = problem.normal(&t_ji);
        let mut accepted = false;
        while lambda < 1e10 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = Pose::new(
                t_ji.rotation.retract(&Vector3::new(step[0], step[1], step[2])),
                t_ji.translation + Vector3::new(step[3], step[4], step[5]),
            );
            let (c, m) = problem.cost(&trial);
            // The point set must not shrink, or a lower cost means nothing.
            if m == n && c < cost {
                t_ji = trial;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                changed = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    if !changed {
        return RefineResult { noop: false, ..noop };
    }
    // T_WC_j = T_WC_i T_ji^-1, then back to the body.
    let t_wcj = t_wci.compose(&t_ji.inverse());
    let pose = t_wcj.compose(&calib.t_ic.inverse());
    RefineResult { pose, initial_cost, final_cost: cost, noop: false }
}

/// Acoustic-inertial prediction of pose `j` from state `i`: rotation from the
/// IMU, translation from the DVL increment corrected for the lever arm.
pub fn predict_state_degraded(
    state_i: &NavState<f64>,
    imu: &ImuPreintegrated<f64>,
    dvl: &DvlPreintegrated<f64>,
    ext: &DvlExtrinsics<f64>,
) -> Pose<f64> {
    let (dr, _, _) = correct_imu_bias(imu, &state_i.imu_bias);
    let dp = correct_dvl_bias(dvl, &state_i.imu_bias.bg, &state_i.dvl_bias.bv);
    let ri = state_i.rotation;
    let rj: Rotation<f64> = ri * dr;
    let lever = rj.rotate(&ext.p_id) - ri.rotate(&ext.p_id);
    Pose::new(rj, ri.rotate(&dp) + state_i.position - lever)
}

/// Whether `cur` should become a keyframe after `last_kf`.
pub fn keyframe_decision(cur: &FrameState, last_kf: &FrameState, cfg: &TrackerConfig) -> bool {
    if cur.status != last_kf.status {
        return true;
    }
    let rel = last_kf.pose.inverse().compose(&cur.pose);
    rel.translation.norm() > cfg.keyframe_translation_m
        || rel.rotation.angle() > cfg.keyframe_rotation_rad
        || cur.t - last_kf.t > cfg.keyframe_interval_s
}
