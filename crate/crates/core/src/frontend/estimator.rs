//! Sequential estimator: per-frame tracking, keyframe insertion and local
//! window optimization over a recorded dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tracking::{
    keyframe_decision, predict_state_degraded, refine_photometric, track_coarse, FrameState, HostPoint,
    TrackerConfig, TrackingStatus,
};
use crate::backend::factor::SharedField;
use crate::backend::window::{factor_counts, host_depth, isolated_observations};
use crate::backend::{
    assemble_window, solve, state_covariances, Calibration, FactorKind, KeyframeInput, KeyframeLink, SolverConfig, WindowConfig,
};
use crate::depth::PressureStream;
use crate::dvl::{DvlError, DvlPreintegrated, DvlStream};
use crate::imu::{gravity, predict_state_imu, ImuError, ImuNoiseSpec, ImuPreintegrated, ImuStream};
use crate::manifold::{Pose, Rotation};
use crate::sim::{ScenarioConfig, SensorDataset};
use crate::state::{NavState, STATE_DIM};
use crate::visual::{backproject, stereo_depth, LandmarkObservation, PatchPattern};

/// Which sensors the estimator fuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Vision, IMU, DVL and pressure.
    Full,
    /// Vision and IMU only.
    VisualInertialOnly,
    /// IMU, DVL and pressure only.
    AcousticInertialDepthOnly,
    /// IMU rotation with DVL translation, no optimization.
    DvlDeadreckonOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] =
        [Mode::Full, Mode::VisualInertialOnly, Mode::AcousticInertialDepthOnly, Mode::DvlDeadreckonOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::VisualInertialOnly => "visual-inertial-only",
            Mode::AcousticInertialDepthOnly => "acoustic-inertial-depth-only",
            Mode::DvlDeadreckonOnly => "dvl-deadreckon-only",
        }
    }

    pub fn uses_vision(&self) -> bool {
        matches!(self, Mode::Full | Mode::VisualInertialOnly)
    }

    pub fn uses_dvl(&self) -> bool {
        !matches!(self, Mode::VisualInertialOnly)
    }

    pub fn uses_pressure(&self) -> bool {
        matches!(self, Mode::Full | Mode::AcousticInertialDepthOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected one of full, visual-inertial-only, acoustic-inertial-depth-only, dvl-deadreckon-only)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: Mode,
    pub tracker: TrackerConfig,
    pub window: WindowConfig,
    pub solver: SolverConfig,
    /// Free keyframes per window.
    pub window_size: usize,
    /// Older keyframes sharing landmarks with the window, held fixed.
    pub max_covisible_fixed: usize,
    /// Host points used by the per-frame photometric refinement.
    pub refine_points: usize,
    /// Per-axis DVL velocity noise used for preintegration, m/s.
    pub sigma_dvl: f64,
    /// Largest sample spacing bridged when associating DVL/pressure to a time, s.
    pub dvl_max_gap_s: f64,
    pub pressure_max_gap_s: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            tracker: TrackerConfig::default(),
            window: WindowConfig::default(),
            solver: SolverConfig::default(),
            window_size: 10,
            max_covisible_fixed: 5,
            refine_points: 30,
            sigma_dvl: 0.02,
            dvl_max_gap_s: 0.15,
            pressure_max_gap_s: 0.15,
        }
    }
}

impl EstimatorConfig {
    /// Noise model taken from the dataset description, floored so that a
    /// noiseless dataset still yields finite weights.
    pub fn for_scenario(meta: &ScenarioConfig, mode: Mode) -> Self {
        let mut cfg = Self { mode, ..Default::default() };
        let w = &mut cfg.window;
        w.sigma_pixel = meta.sigma_pixel_px.max(0.5);
        w.sigma_dvl_velocity = meta.sigma_v_m_s.max(0.005);
        w.sigma_pressure = meta.sigma_p_m.max(0.005);
        // The bias process must also cover the injected periodic drift.
        let bv_rate = meta.bv_sine_amplitude_m_s.iter().fold(0.0f64, |m, a| m.max(a.abs()))
            * (2.0 * std::f64::consts::PI / meta.bv_sine_period_s);
        w.sigma_bv_walk = meta.sigma_bv_walk_m_s2_sqrt_hz.max(bv_rate).max(1e-4);
        w.imu_noise = ImuNoiseSpec {
            sigma_g: meta.sigma_g_rad_s_sqrt_hz.max(1e-4),
            sigma_a: meta.sigma_a_m_s2_sqrt_hz.max(1e-3),
            sigma_bg_walk: meta.sigma_bg_walk_rad_s2_sqrt_hz.max(1e-5),
            sigma_ba_walk: meta.sigma_ba_walk_m_s3_sqrt_hz.max(1e-4),
        };
        w.use_reprojection = mode.uses_vision();
        w.use_photometric = mode.uses_vision();
        w.use_dvl = mode.uses_dvl();
        w.use_pressure = mode.uses_pressure();
        cfg.sigma_dvl = w.sigma_dvl_velocity;
        cfg.dvl_max_gap_s = 1.5 / meta.dvl_hz;
        cfg.pressure_max_gap_s = 1.5 / meta.pressure_hz;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("dataset has no camera frames")]
    NoFrames,
    #[error("no ground truth at the first frame time {t} for initialization")]
    NoInitialState { t: f64 },
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Dvl(#[from] DvlError),
    #[error("invalid stream: {0}")]
    Stream(String),
}

/// One output pose per camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub frame_id: u64,
    pub rotation: Rotation<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bv: Vector3<f64>,
    pub status: TrackingStatus,
    pub keyframe: bool,
    /// Final window cost when this frame triggered an optimization.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub frames: usize,
    pub keyframes: usize,
    pub degraded_frames: usize,
    pub window_solves: usize,
    pub solver_iterations: usize,
    pub failed_solves: usize,
    pub landmarks: usize,
    pub factors: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub frames: Vec<FrameState>,
    pub stats: EstimatorStats,
}

/// Where a frame's output pose comes from once keyframes are final.
struct FrameRecord {
    frame: FrameState,
    reference: usize,
    /// Body pose relative to the reference keyframe.
    relative: Pose<f64>,
    velocity: Vector3<f64>,
    keyframe: bool,
    cost: Option<f64>,
}

struct Estimator<'a> {
    ds: &'a SensorDataset,
    cfg: &'a EstimatorConfig,
    calib: Calibration,
    imu: ImuStream<f64>,
    dvl: Option<DvlStream<f64>>,
    pressure: PressureStream<f64>,
    keyframes: Vec<KeyframeInput>,
    kf_status: Vec<TrackingStatus>,
    landmarks: BTreeMap<u64, Vector3<f64>>,
    /// Square-root information priors for keyframes that have left the window.
    boundary_priors: BTreeMap<u64, DMatrix<f64>>,
    pattern: PatchPattern<f64>,
    stats: EstimatorStats,
}

type LinkPreints = (Arc<ImuPreintegrated<f64>>, Option<Arc<DvlPreintegrated<f64>>>);

impl Estimator<'_> {
    fn state_at_keyframe(&self, k: usize) -> &NavState<f64> {
        &self.keyframes[k].state
    }

    fn link_preints(
        &self,
        from: &KeyframeInput,
        t: f64,
    ) -> Result<LinkPreints, EstimatorError> {
        let dvl_times = self.dvl.as_ref().map(|d| d.times_between(from.t, t)).unwrap_or_default();
        let pm = self.imu.preintegrate(from.t, t, from.state.imu_bias, self.cfg.window.imu_noise, &dvl_times)?;
        let dvl = if let Some(stream) = &self.dvl {
            let lead = match stream.held_time(from.t) {
                Some(held) if held < from.t => {
                    self.imu.preintegrate(held, from.t, from.state.imu_bias, ImuNoiseSpec::zero(), &[])?.delta_r
                }
                _ => Rotation::identity(),
            };
            match stream.preintegrate(
                from.t,
                t,
                &pm,
                &self.calib.dvl,
                from.state.dvl_bias.bv,
                &lead,
                self.cfg.sigma_dvl,
                self.cfg.dvl_max_gap_s,
            ) {
                Ok(d) => Some(Arc::new(d)),
                Err(DvlError::Coverage { .. }) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        Ok((Arc::new(pm), dvl))
    }

    /// Host points of `kf` for refining against a frame with observations
    /// `target`; only features standing clear of others in both images.
    fn host_points(&self, kf: &KeyframeInput, target: &[LandmarkObservation<f64>]) -> Vec<HostPoint> {
        let radius = self.cfg.window.photometric_isolation_px;
        let clear: BTreeSet<u64> =
            isolated_observations(target, &self.calib.camera, radius).map(|o| o.landmark_id).collect();
        let t_cw = kf.state.pose().compose(&self.calib.t_ic).inverse();
        let pts: Vec<HostPoint> = isolated_observations(&kf.observations, &self.calib.camera, radius)
            .filter(|o| clear.contains(&o.landmark_id))
            .filter_map(|o| {
                let depth = host_depth(o, &t_cw, &self.landmarks, &self.calib)?;
                Some(HostPoint { pixel: o.pixel, depth })
            })
            .collect();
        let stride = pts.len().div_ceil(self.cfg.refine_points.max(1)).max(1);
        pts.into_iter().step_by(stride).collect()
    }

    fn add_landmarks(&mut self, k: usize) {
        let kf = &self.keyframes[k];
        let t_wc = kf.state.pose().compose(&self.calib.t_ic);
        let mut new = Vec::new();
        for o in &kf.observations {
            if self.landmarks.contains_key(&o.landmark_id) {
                continue;
            }
            let Some(d) = o.disparity else { continue };
            let Ok(z) = stereo_depth(&self.calib.camera, d) else { continue };
            let Ok(xc) = backproject(&self.calib.camera, &o.pixel, z) else { continue };
            new.push((o.landmark_id, t_wc.transform_point(&xc)));
        }
        self.landmarks.extend(new);
    }

    /// Optimizes the window ending at the newest keyframe.
    ///
    /// The keyframe just before the window enters with the prior left by
    /// marginalizing its predecessor (see [`Self::marginalize_boundary`]), or
    /// fixed when it has none. Older co-visible keyframes are held fixed.
    fn optimize(&mut self) -> Option<f64> {
        let n = self.keyframes.len();
        let first_free = n.saturating_sub(self.cfg.window_size);
        let mut inputs: Vec<KeyframeInput> = Vec::new();
        let mut window_landmarks = BTreeSet::new();
        for kf in &self.keyframes[first_free..] {
            inputs.push(KeyframeInput { fixed: false, ..kf.clone() });
            window_landmarks.extend(kf.observations.iter().map(|o| o.landmark_id));
        }
        if first_free > 0 {
            let boundary = &self.keyframes[first_free - 1];
            let prior = self.boundary_priors.get(&boundary.id).cloned();
            // Its link is summarized by the prior.
            inputs.push(KeyframeInput { fixed: prior.is_none(), prior, link: None, ..boundary.clone() });
            let mut added = 0;
            for kf in self.keyframes[..first_free - 1].iter().rev() {
                if added >= self.cfg.max_covisible_fixed {
                    break;
                }
                if kf.observations.iter().any(|o| window_landmarks.contains(&o.landmark_id)) {
                    inputs.push(KeyframeInput { fixed: true, ..kf.clone() });
                    added += 1;
                }
            }
        }
        let mut w = match assemble_window(&inputs, &self.landmarks, &self.calib, &self.cfg.window) {
            Ok(w) => w,
            Err(e) => {
                warn!("window assembly failed: {e}");
                self.stats.failed_solves += 1;
                return None;
            }
        };
        for (kind, c) in factor_counts(&w) {
            *self.stats.factors.entry(kind.name().to_string()).or_insert(0) += c;
        }
        if w.factors.iter().all(|f| f.kind == FactorKind::FixedPrior) {
            return None;
        }
        match solve(&mut w, &self.cfg.solver) {
            Ok(report) => {
                self.stats.window_solves += 1;
                self.stats.solver_iterations += report.iterations;
                debug!(
                    "window of {} keyframes: cost {:.3e} -> {:.3e} in {} iterations",
                    inputs.len(),
                    report.initial_cost,
                    report.final_cost,
                    report.iterations
                );
                for kf in &mut self.keyframes[first_free.saturating_sub(1)..] {
                    if let Some(s) = w.values.states.get(&kf.id) {
                        kf.state = *s;
                    }
                }
                for (id, p) in &w.values.landmarks {
                    self.landmarks.insert(*id, *p);
                }
                if first_free > 0 {
                    self.marginalize_boundary(first_free);
                }
                Some(report.final_cost)
            }
            Err(e) => {
                warn!("window solve failed: {e}");
                self.stats.failed_solves += 1;
                None
            }
        }
    }

    /// Prior for keyframe `k`, which leaves the window next: the marginal of
    /// the prior on `k - 1` carried through the sensor factors linking the
    /// two. Visual factors of `k - 1` are dropped rather than marginalized.
    fn marginalize_boundary(&mut self, k: usize) {
        let strip = |kf: &KeyframeInput| KeyframeInput { observations: Vec::new(), field: None, ..kf.clone() };
        let prev = &self.keyframes[k - 1];
        let prior = self.boundary_priors.get(&prev.id).cloned();
        let cur = &self.keyframes[k];
        let inputs = [
            KeyframeInput { fixed: prior.is_none(), prior, link: None, ..strip(prev) },
            KeyframeInput { fixed: false, prior: None, ..strip(cur) },
        ];
        let result = assemble_window(&inputs, &BTreeMap::new(), &self.calib, &self.cfg.window)
            .map_err(|e| e.to_string())
            .and_then(|w| state_covariances(&w).map_err(|e| e.to_string()));
        match result.map(|c| c.get(&cur.id).and_then(sqrt_information)) {
            Ok(Some(info)) => {
                self.boundary_priors.insert(cur.id, info);
            }
            Ok(None) => warn!("keyframe {} has a singular marginal covariance", cur.id),
            Err(e) => warn!("cannot marginalize keyframe {}: {e}", prev.id),
        }
    }
}

/// Upper-triangular `R` with `R^T R = cov^-1`.
fn sqrt_information(cov: &SMatrix<f64, STATE_DIM, STATE_DIM>) -> Option<DMatrix<f64>> {
    let c = DMatrix::from_fn(STATE_DIM, STATE_DIM, |r, k| 0.5 * (cov[(r, k)] + cov[(k, r)]));
    let info = c.cholesky()?.inverse();
    let l = Cholesky::new((&info + info.transpose()) * 0.5)?.unpack();
    Some(l.transpose())
}

/// Runs the estimator over every camera frame of `ds`.
pub fn run_estimator(ds: &SensorDataset, cfg: &EstimatorConfig) -> Result<EstimateOutput, EstimatorError> {
    let first = ds.frames.first().ok_or(EstimatorError::NoFrames)?;
    let init = *ds.truth_at(first.t).ok_or(EstimatorError::NoInitialState { t: first.t })?;
    let mode = cfg.mode;
    let mut est = Estimator {
        ds,
        cfg,
        calib: ds.config.calibration(),
        imu: ImuStream::new(ds.imu.clone())?,
        dvl: if mode.uses_dvl() { Some(DvlStream::new(ds.dvl.clone())?) } else { None },
        pressure: PressureStream::new(if mode.uses_pressure() { ds.pressure.clone() } else { Vec::new() })
            .map_err(|e| EstimatorError::Stream(e.to_string()))?,
        keyframes: Vec::new(),
        kf_status: Vec::new(),
        landmarks: BTreeMap::new(),
        boundary_priors: BTreeMap::new(),
        pattern: PatchPattern::spread8(),
        stats: EstimatorStats::default(),
    };
    let g = gravity::<f64>();
    let mut records: Vec<FrameRecord> = Vec::with_capacity(ds.frames.len());
    let mut status = TrackingStatus::VisualOk;
    let mut good_streak = 0usize;

    for (fi, frame) in est.ds.frames.iter().enumerate() {
        let visible = if mode.uses_vision() { frame.observations.len() } else { 0 };
        let enough = visible >= cfg.tracker.min_tracked_features;
        if fi == 0 {
            status = if enough { TrackingStatus::VisualOk } else { TrackingStatus::Degraded };
        } else if status == TrackingStatus::VisualOk && !enough {
            status = TrackingStatus::Degraded;
            good_streak = 0;
        } else if status == TrackingStatus::Degraded {
            good_streak = if enough { good_streak + 1 } else { 0 };
            if good_streak >= cfg.tracker.reentry_frames {
                status = TrackingStatus::VisualOk;
            }
        }
        if status == TrackingStatus::Degraded {
            est.stats.degraded_frames += 1;
        }
        let use_vision = mode.uses_vision() && status == TrackingStatus::VisualOk;

        let gyro_at = |est: &Estimator, state: &NavState<f64>| -> Option<Vector3<f64>> {
            est.imu.gyro_at(frame.t).ok().map(|w| w - state.imu_bias.bg)
        };
        let field: Option<SharedField> =
            if use_vision { Some(Arc::new(frame.field.clone()) as SharedField) } else { None };

        if fi == 0 {
            let kf = KeyframeInput {
                id: frame.id,
                t: frame.t,
                state: init,
                fixed: false,
                prior: None,
                observations: if use_vision { frame.observations.clone() } else { Vec::new() },
                field,
                gyro: gyro_at(&est, &init),
                dvl_velocity: est.dvl.as_ref().and_then(|d| d.measurement_at(frame.t, cfg.dvl_max_gap_s)),
                depth: est.pressure.depth_at(frame.t, cfg.pressure_max_gap_s),
                link: None,
            };
            est.keyframes.push(kf);
            est.kf_status.push(status);
            if use_vision {
                est.add_landmarks(0);
            }
            let fs = FrameState { frame_id: frame.id, t: frame.t, pose: init.pose(), status, tracked_features: visible };
            records.push(FrameRecord {
                frame: fs,
                reference: 0,
                relative: Pose::identity(),
                velocity: init.velocity,
                keyframe: true,
                cost: None,
            });
            continue;
        }

        let last = est.keyframes.len() - 1;
        let last_kf = est.keyframes[last].clone();
        let (pm, dvl_pre) = est.link_preints(&last_kf, frame.t)?;
        let predicted = predict_state_imu(&last_kf.state, &pm, &g);
        let mut force_keyframe = false;
        // The keyframe seed stays on the geometric estimate: photometric
        // refinement against a single host is only locally consistent, and its
        // small bias would otherwise compound through chained keyframes.
        let (pose, seed) = if use_vision {
            match track_coarse(&predicted.pose(), &frame.observations, &est.landmarks, &est.calib, &cfg.tracker) {
                Ok(coarse) => match &last_kf.field {
                    Some(host) => {
                        let points = est.host_points(&last_kf, &frame.observations);
                        let r = refine_photometric(
                            &coarse.pose,
                            &last_kf.state.pose(),
                            host.as_ref(),
                            &points,
                            &frame.field,
                            &est.calib,
                            &est.pattern,
                            &cfg.tracker,
                        );
                        (r.pose, coarse.pose)
                    }
                    None => (coarse.pose, coarse.pose),
                },
                Err(_) => {
                    // Features are visible but not yet mapped: trust the
                    // prediction and map them through a new keyframe.
                    force_keyframe = true;
                    (predicted.pose(), predicted.pose())
                }
            }
        } else {
            let p = match &dvl_pre {
                Some(d) => predict_state_degraded(&last_kf.state, &pm, d, &est.calib.dvl),
                None => predicted.pose(),
            };
            (p, p)
        };
        let mut state = predicted;
        state.set_pose(&seed);

        let fs = FrameState { frame_id: frame.id, t: frame.t, pose, status, tracked_features: visible };
        let last_fs = FrameState {
            frame_id: last_kf.id,
            t: last_kf.t,
            pose: last_kf.state.pose(),
            status: est.kf_status[last],
            tracked_features: 0,
        };
        let is_kf = force_keyframe || keyframe_decision(&fs, &last_fs, &cfg.tracker);
        if is_kf {
            let kf = KeyframeInput {
                id: frame.id,
                t: frame.t,
                state,
                fixed: false,
                prior: None,
                observations: if use_vision { frame.observations.clone() } else { Vec::new() },
                field,
                gyro: gyro_at(&est, &state),
                dvl_velocity: est.dvl.as_ref().and_then(|d| d.measurement_at(frame.t, cfg.dvl_max_gap_s)),
                depth: est.pressure.depth_at(frame.t, cfg.pressure_max_gap_s),
                link: Some(KeyframeLink { from: last_kf.id, imu: Some(pm), dvl: dvl_pre }),
            };
            est.keyframes.push(kf);
            est.kf_status.push(status);
            let k = est.keyframes.len() - 1;
            let cost = if mode != Mode::DvlDeadreckonOnly { est.optimize() } else { None };
            // New landmarks hang off the optimized pose.
            if use_vision {
                est.add_landmarks(k);
            }
            records.push(FrameRecord {
                frame: fs,
                reference: k,
                relative: Pose::identity(),
                velocity: state.velocity,
                keyframe: true,
                cost,
            });
        } else {
            let relative = last_kf.state.pose().inverse().compose(&pose);
            records.push(FrameRecord {
                frame: fs,
                reference: last,
                relative,
                velocity: state.velocity,
                keyframe: false,
                cost: None,
            });
        }
    }

    let trajectory = records
        .iter()
        .map(|r| {
            let kf = est.state_at_keyframe(r.reference);
            let pose = kf.pose().compose(&r.relative);
            TrajectoryPoint {
                t: r.frame.t,
                frame_id: r.frame.frame_id,
                rotation: pose.rotation,
                position: pose.translation,
                velocity: if r.keyframe { kf.velocity } else { r.velocity },
                bv: kf.dvl_bias.bv,
                status: r.frame.status,
                keyframe: r.keyframe,
                cost: r.cost,
            }
        })
        .collect();
    let mut stats = est.stats;
    stats.frames = records.len();
    stats.keyframes = est.keyframes.len();
    stats.landmarks = est.landmarks.len();
    Ok(EstimateOutput { trajectory, frames: records.into_iter().map(|r| r.frame).collect(), stats })
}
