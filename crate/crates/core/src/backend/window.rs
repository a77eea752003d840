//! Assembly of the local optimization window.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::factor::{
    isotropic_sqrt_info, relative_camera_pose, sqrt_info_from_cov, Calibration, Factor, FactorKind, Measurement, SharedField, Values, VarKey,
};
use super::solver::LocalWindow;
use crate::dvl::DvlPreintegrated;
use crate::imu::{ImuNoiseSpec, ImuPreintegrated};
use crate::manifold::Pose;
use crate::state::{NavState, STATE_DIM};
use crate::visual::{photometric_residual, stereo_depth, CameraModel, LandmarkObservation, PatchPattern};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WindowError {
    #[error("no IMU preintegration covers keyframe interval [{t0}, {t1}]")]
    Gap { t0: f64, t1: f64 },
    #[error("window has no keyframes")]
    Empty,
}

/// Preintegrated measurements from the previous keyframe to this one.
#[derive(Debug, Clone)]
pub struct KeyframeLink {
    pub from: u64,
    pub imu: Option<Arc<ImuPreintegrated<f64>>>,
    pub dvl: Option<Arc<DvlPreintegrated<f64>>>,
}

/// Everything the window needs to know about one keyframe.
#[derive(Clone)]
pub struct KeyframeInput {
    pub id: u64,
    pub t: f64,
    pub state: NavState<f64>,
    pub fixed: bool,
    /// Square-root information of a prior pulling this keyframe towards
    /// `state`; ignored when the keyframe is fixed.
    pub prior: Option<DMatrix<f64>>,
    pub observations: Vec<LandmarkObservation<f64>>,
    pub field: Option<SharedField>,
    /// Held gyro reading at `t`, bias-corrected at the linearization point.
    pub gyro: Option<Vector3<f64>>,
    pub dvl_velocity: Option<Vector3<f64>>,
    pub depth: Option<f64>,
    pub link: Option<KeyframeLink>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub use_reprojection: bool,
    pub use_photometric: bool,
    pub use_imu: bool,
    pub use_dvl: bool,
    pub use_pressure: bool,
    pub sigma_pixel: f64,
    pub sigma_intensity: f64,
    pub sigma_dvl_velocity: f64,
    pub sigma_pressure: f64,
    pub sigma_bv_walk: f64,
    pub imu_noise: ImuNoiseSpec<f64>,
    /// Huber threshold on whitened visual residual norms.
    pub huber: Option<f64>,
    /// Landmarks need at least this many observations inside the window.
    pub min_observations: usize,
    pub photometric_points_per_pair: usize,
    /// Photometric points need this much room, in pixels, to the image border
    /// and to every other observed feature in both images, so that a
    /// neighbouring blob at a different depth does not leak into the patch.
    pub photometric_isolation_px: f64,
    /// Covariance floor applied to preintegrated covariances before inversion.
    pub covariance_floor: f64,
    /// Standard deviation of the anchoring prior used when no state is fixed.
    pub prior_sigma: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            use_reprojection: true,
            use_photometric: true,
            use_imu: true,
            use_dvl: true,
            use_pressure: true,
            sigma_pixel: 1.0,
            sigma_intensity: 2.0,
            sigma_dvl_velocity: 0.02,
            sigma_pressure: 0.01,
            sigma_bv_walk: 1e-3,
            imu_noise: ImuNoiseSpec { sigma_g: 1.7e-4, sigma_a: 2e-3, sigma_bg_walk: 1.9e-5, sigma_ba_walk: 3e-3 },
            huber: Some(1.345),
            min_observations: 2,
            photometric_points_per_pair: 24,
            photometric_isolation_px: 30.0,
            covariance_floor: 1e-12,
            prior_sigma: 1e-6,
        }
    }
}

fn imu_factor(i: u64, j: u64, pre: &Arc<ImuPreintegrated<f64>>, cfg: &WindowConfig) -> Factor {
    let dt = pre.dt_total.max(1e-6);
    let mut cov = DMatrix::zeros(18, 18);
    cov.view_mut((0, 0), (9, 9)).copy_from(&pre.cov);
    let walks = [cfg.imu_noise.sigma_bg_walk, cfg.imu_noise.sigma_ba_walk, cfg.sigma_bv_walk];
    for (b, s) in walks.iter().enumerate() {
        for k in 0..3 {
            let r = 9 + 3 * b + k;
            cov[(r, r)] = s * s * dt;
        }
    }
    Factor {
        kind: FactorKind::Imu,
        keys: vec![VarKey::State(i), VarKey::State(j)],
        measurement: Measurement::Imu { preint: pre.clone() },
        sqrt_info: sqrt_info_from_cov(&cov, cfg.covariance_floor),
        huber: None,
    }
}

fn prior_factor(kf: &KeyframeInput, sqrt_info: DMatrix<f64>) -> Factor {
    Factor {
        kind: FactorKind::FixedPrior,
        keys: vec![VarKey::State(kf.id)],
        measurement: Measurement::FixedPrior { anchor: kf.state },
        sqrt_info,
        huber: None,
    }
}

/// Builds the window: one IMU factor, DVL velocity and position factors and a
/// pressure factor per linked consecutive pair, one reprojection factor per
/// observation of a retained landmark and photometric factors between linked
/// pairs. Keyframes may carry their own prior; when nothing is fixed and no
/// prior is given, the earliest keyframe gets a tight one.
pub fn assemble_window(
    keyframes: &[KeyframeInput],
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    calib: &Calibration,
    cfg: &WindowConfig,
) -> Result<LocalWindow, WindowError> {
    if keyframes.is_empty() {
        return Err(WindowError::Empty);
    }
    let mut kfs: Vec<&KeyframeInput> = keyframes.iter().collect();
    kfs.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
    let by_id: BTreeMap<u64, &KeyframeInput> = kfs.iter().map(|k| (k.id, *k)).collect();

    let mut values = Values::default();
    let mut fixed_states = BTreeSet::new();
    for k in &kfs {
        values.states.insert(k.id, k.state);
        if k.fixed {
            fixed_states.insert(k.id);
        }
    }
    let mut factors = Vec::new();
    for k in kfs.iter().filter(|k| !k.fixed) {
        if let Some(info) = &k.prior {
            factors.push(prior_factor(k, info.clone()));
        }
    }
    if fixed_states.is_empty() && factors.is_empty() {
        factors.push(prior_factor(kfs[0], isotropic_sqrt_info(STATE_DIM, cfg.prior_sigma)));
    }

    // Pairwise sensor factors.
    for cur in &kfs {
        let Some(link) = &cur.link else { continue };
        let Some(prev) = by_id.get(&link.from) else { continue };
        if prev.fixed && cur.fixed {
            continue;
        }
        let keys = vec![VarKey::State(prev.id), VarKey::State(cur.id)];
        if cfg.use_imu {
            let pre = link.imu.as_ref().ok_or(WindowError::Gap { t0: prev.t, t1: cur.t })?;
            factors.push(imu_factor(prev.id, cur.id, pre, cfg));
        }
        if cfg.use_dvl {
            if let Some(pre) = &link.dvl {
                factors.push(Factor {
                    kind: FactorKind::DvlPosition,
                    keys: keys.clone(),
                    measurement: Measurement::DvlPosition { preint: pre.clone() },
                    sqrt_info: sqrt_info_from_cov(&DMatrix::from_column_slice(3, 3, pre.cov.as_slice()), cfg.covariance_floor),
                    huber: None,
                });
            }
            if let (Some(gi), Some(gm), Some(mi), Some(mm)) = (prev.gyro, cur.gyro, prev.dvl_velocity, cur.dvl_velocity) {
                factors.push(Factor {
                    kind: FactorKind::DvlVelocity,
                    keys: keys.clone(),
                    measurement: Measurement::DvlVelocity { gyro_i: gi, gyro_m: gm, meas_i: mi, meas_m: mm },
                    sqrt_info: isotropic_sqrt_info(3, cfg.sigma_dvl_velocity * 2f64.sqrt()),
                    huber: None,
                });
            }
        }
        if cfg.use_pressure {
            if let (Some(di), Some(dn)) = (prev.depth, cur.depth) {
                factors.push(Factor {
                    kind: FactorKind::Pressure,
                    keys: keys.clone(),
                    measurement: Measurement::Pressure { depth_i: di, depth_n: dn },
                    sqrt_info: isotropic_sqrt_info(1, cfg.sigma_pressure * 2f64.sqrt()),
                    huber: None,
                });
            }
        }
        if cfg.use_photometric {
            photometric_factors(prev, cur, landmarks, calib, cfg, &mut factors);
        }
    }

    // Landmarks with enough support that are seen by at least one free keyframe.
    if cfg.use_reprojection {
        let mut seen: BTreeMap<u64, (usize, bool)> = BTreeMap::new();
        for k in &kfs {
            for o in &k.observations {
                if landmarks.contains_key(&o.landmark_id) {
                    let e = seen.entry(o.landmark_id).or_insert((0, false));
                    e.0 += 1;
                    e.1 |= !k.fixed;
                }
            }
        }
        for (&l, &(count, free)) in &seen {
            if count >= cfg.min_observations && free {
                values.landmarks.insert(l, landmarks[&l]);
            }
        }
        let sqrt_info = isotropic_sqrt_info(2, cfg.sigma_pixel);
        for k in &kfs {
            for o in &k.observations {
                if !values.landmarks.contains_key(&o.landmark_id) {
                    continue;
                }
                let f = Factor {
                    kind: FactorKind::Reprojection,
                    keys: vec![VarKey::State(k.id), VarKey::Landmark(o.landmark_id)],
                    measurement: Measurement::Reprojection { pixel: o.pixel },
                    sqrt_info: sqrt_info.clone(),
                    huber: cfg.huber,
                };
                // Drop observations whose landmark currently sits behind the camera.
                if f.evaluate(&values, calib).is_ok() {
                    factors.push(f);
                }
            }
        }
    }

    Ok(LocalWindow { values, fixed_states, factors, calib: *calib })
}

fn photometric_factors(
    host: &KeyframeInput,
    target: &KeyframeInput,
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    calib: &Calibration,
    cfg: &WindowConfig,
    out: &mut Vec<Factor>,
) {
    let (Some(hf), Some(tf)) = (&host.field, &target.field) else { return };
    if cfg.photometric_points_per_pair == 0 {
        return;
    }
    let clear_in_target: BTreeSet<u64> =
        isolated_observations(&target.observations, &calib.camera, cfg.photometric_isolation_px)
            .map(|o| o.landmark_id)
            .collect();
    let candidates: Vec<&LandmarkObservation<f64>> =
        isolated_observations(&host.observations, &calib.camera, cfg.photometric_isolation_px)
            .filter(|o| o.disparity.is_some() && clear_in_target.contains(&o.landmark_id))
            .collect();
    if candidates.is_empty() {
        return;
    }
    let pattern = Arc::new(PatchPattern::spread8());
    let t_ji = relative_camera_pose(&host.state, &target.state, calib);
    let t_cw = host.state.pose().compose(&calib.t_ic).inverse();
    let stride = candidates.len().div_ceil(cfg.photometric_points_per_pair).max(1);
    for o in candidates.iter().step_by(stride) {
        let Some(depth) = host_depth(o, &t_cw, landmarks, calib) else { continue };
        if photometric_residual(hf.as_ref(), tf.as_ref(), &calib.camera, &t_ji, &o.pixel, depth, &pattern).is_err() {
            continue;
        }
        let wsum: f64 = pattern
            .offsets
            .iter()
            .map(|off| pattern.weight(&hf.gradient(&(o.pixel + off))).powi(2))
            .sum();
        let sigma = cfg.sigma_intensity * (2.0 * wsum).sqrt();
        out.push(Factor {
            kind: FactorKind::Photometric,
            keys: vec![VarKey::State(host.id), VarKey::State(target.id)],
            measurement: Measurement::Photometric {
                pixel: Vector2::new(o.pixel.x, o.pixel.y),
                depth,
                host: hf.clone(),
                target: tf.clone(),
                pattern: pattern.clone(),
            },
            sqrt_info: isotropic_sqrt_info(1, sigma),
            huber: cfg.huber,
        });
    }
}

/// Depth of a host point: from the mapped landmark when there is one, since
/// it pools every observation, otherwise from the stereo disparity.
pub fn host_depth(
    o: &LandmarkObservation<f64>,
    t_cw: &Pose<f64>,
    landmarks: &BTreeMap<u64, Vector3<f64>>,
    calib: &Calibration,
) -> Option<f64> {
    match landmarks.get(&o.landmark_id) {
        Some(l) => Some(t_cw.transform_point(l).z).filter(|z| *z > 0.0),
        None => stereo_depth(&calib.camera, o.disparity?).ok(),
    }
}

/// Observations at least `radius` pixels from every other observation and
/// from the image border.
pub fn isolated_observations<'a>(
    obs: &'a [LandmarkObservation<f64>],
    camera: &CameraModel<f64>,
    radius: f64,
) -> impl Iterator<Item = &'a LandmarkObservation<f64>> + 'a {
    let (w, h) = (f64::from(camera.width) - 1.0, f64::from(camera.height) - 1.0);
    let r2 = radius * radius;
    obs.iter().enumerate().filter_map(move |(i, o)| {
        let u = o.pixel;
        let inside = u.x >= radius && u.y >= radius && u.x <= w - radius && u.y <= h - radius;
        let alone = obs.iter().enumerate().all(|(k, q)| k == i || (q.pixel - u).norm_squared() >= r2);
        (inside && alone).then_some(o)
    })
}

/// Counts factors by kind.
pub fn factor_counts(w: &LocalWindow) -> BTreeMap<FactorKind, usize> {
    let mut out = BTreeMap::new();
    for f in &w.factors {
        *out.entry(f.kind).or_insert(0) += 1;
    }
    out
}

/// Writes one line per factor: kind, variable ids, whitened residual norm.
pub fn dump_factors<W: Write>(w: &LocalWindow, out: &mut W) -> io::Result<()> {
    for f in &w.factors {
        let keys: Vec<String> = f.keys.iter().map(|k| k.to_string()).collect();
        let norm = match f.evaluate(&w.values, &w.calib) {
            Ok(r) => f.whitened_sq_norm(&r).sqrt(),
            Err(_) => f64::NAN,
        };
        writeln!(out, "{} {} {:e}", f.kind.name(), keys.join(","), norm)?;
    }
    Ok(())
}
