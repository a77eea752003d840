//! Random problem generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use aquafuse::backend::factor::{
    numeric_jacobian, Calibration, Factor, FactorKind, Measurement, SharedField, Values, VarKey,
};
use aquafuse::backend::{KeyframeInput, KeyframeLink, WindowConfig};
use aquafuse::depth::PressureStream;
use aquafuse::dvl::{preintegrate_dvl, DvlBias, DvlSample, DvlStream};
use aquafuse::frontend::{EstimatorConfig, Mode};
use aquafuse::imu::{integrate_imu, ImuBias, ImuNoiseSpec, ImuSample, ImuStream};
use aquafuse::manifold::Rotation;
use aquafuse::sim::{
    generate, generate_landmarks, MotionConfig, ScenarioConfig, SensorDataset, Trajectory as SimTrajectory,
    TrajectoryKind,
};
use aquafuse::state::NavState;
use aquafuse::visual::{project, Blob, BlobField, PatchPattern};
use nalgebra::{DMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

/// Rounds every component to a multiple of 2^-20 so that adding a power-of-two
/// shift and subtracting it again is exact.
pub fn dyadic(v: Vector3<f64>) -> Vector3<f64> {
    v.map(|x| (x * 1048576.0).round() / 1048576.0)
}

pub fn rotation(rng: &mut ChaCha8Rng) -> Rotation<f64> {
    let axis = vec3(rng, 1.0).normalize();
    Rotation::from_axis_angle(&axis, rng.random_range(-3.0..3.0))
}

pub fn state(rng: &mut ChaCha8Rng) -> NavState<f64> {
    NavState {
        rotation: rotation(rng),
        position: dyadic(vec3(rng, 10.0)),
        velocity: vec3(rng, 2.0),
        imu_bias: ImuBias { bg: vec3(rng, 0.01), ba: vec3(rng, 0.1) },
        dvl_bias: DvlBias { bv: vec3(rng, 0.05) },
    }
}

pub fn calibration() -> Calibration {
    ScenarioConfig::default().calibration()
}

/// One factor with the values it reads.
pub struct Case {
    pub factor: Factor,
    pub values: Values,
    pub calib: Calibration,
}

impl Case {
    /// Largest relative Frobenius difference between analytic and central
    /// finite-difference Jacobians over the factor's keys.
    pub fn jacobian_error(&self, h: f64) -> f64 {
        let lin = self.factor.linearize(&self.values, &self.calib).expect("linearize");
        let mut worst: f64 = 0.0;
        for (k, ja) in lin.jacobians.iter().enumerate() {
            let jn = numeric_jacobian(&self.factor, &self.values, &self.calib, k, h).expect("numeric");
            let scale = jn.norm().max(ja.norm()).max(1e-6);
            worst = worst.max((ja - &jn).norm() / scale);
        }
        worst
    }
}

fn pair_values(si: NavState<f64>, sj: NavState<f64>) -> Values {
    let mut v = Values::default();
    v.states.insert(0, si);
    v.states.insert(1, sj);
    v
}

fn pair_factor(kind: FactorKind, dim: usize, measurement: Measurement) -> Factor {
    Factor {
        kind,
        keys: vec![VarKey::State(0), VarKey::State(1)],
        measurement,
        sqrt_info: DMatrix::identity(dim, dim),
        huber: None,
    }
}

/// Random IMU samples at 100 Hz over `n` steps.
pub fn imu_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImuSample<f64>> {
    let w = vec3(rng, 0.6);
    let a = vec3(rng, 1.0) + Vector3::new(0.0, 0.0, -9.81);
    (0..n)
        .map(|k| ImuSample { t: k as f64 * 0.01, gyro: w + vec3(rng, 0.1), accel: a + vec3(rng, 0.3) })
        .collect()
}

/// A camera state looking at a seabed point from 2-8 m, and that point.
fn viewed_point(rng: &mut ChaCha8Rng, calib: &Calibration, s: &NavState<f64>) -> Vector3<f64> {
    let cam = &calib.camera;
    let u = Vector2::new(rng.random_range(40.0..cam.width as f64 - 40.0), rng.random_range(40.0..cam.height as f64 - 40.0));
    let z = rng.random_range(2.0..8.0);
    let xc = Vector3::new((u.x - cam.cx) / cam.fx * z, (u.y - cam.cy) / cam.fy * z, z);
    let t_wc = s.pose().compose(&calib.t_ic);
    t_wc.transform_point(&xc)
}

fn render(calib: &Calibration, s: &NavState<f64>, points: &[(Vector3<f64>, f64)]) -> BlobField {
    let cam = &calib.camera;
    let t_cw = s.pose().compose(&calib.t_ic).inverse();
    let blobs = points
        .iter()
        .filter_map(|(p, amp)| {
            let xc = t_cw.transform_point(p);
            let u = project(cam, &xc).ok()?;
            let sig = 0.06 * cam.fx / xc.z;
            Some(Blob { center: [u.x, u.y], sigma: [sig, sig], amplitude: *amp })
        })
        .collect();
    BlobField { width: cam.width, height: cam.height, background: 20.0, blobs }
}

pub fn case(kind: FactorKind, rng: &mut ChaCha8Rng) -> Case {
    let calib = calibration();
    match kind {
        FactorKind::Reprojection => {
            let s = state(rng);
            let l = dyadic(viewed_point(rng, &calib, &s));
            let mut values = Values::default();
            values.states.insert(0, s);
            values.landmarks.insert(0, l);
            // Observation off the true projection so the residual is non-zero.
            let t_cw = s.pose().compose(&calib.t_ic).inverse();
            let pixel = project(&calib.camera, &t_cw.transform_point(&l)).unwrap() + Vector2::new(1.5, -0.7);
            let factor = Factor {
                kind,
                keys: vec![VarKey::State(0), VarKey::Landmark(0)],
                measurement: Measurement::Reprojection { pixel },
                sqrt_info: DMatrix::identity(2, 2),
                huber: None,
            };
            Case { factor, values, calib }
        }
        FactorKind::Photometric => loop {
            let si = state(rng);
            let mut sj = si.retract(&nalgebra::SVector::<f64, 18>::from_fn(|_, _| rng.random_range(-0.03..0.03)));
            sj.position = dyadic(sj.position);
            let points: Vec<(Vector3<f64>, f64)> =
                (0..12).map(|_| (viewed_point(rng, &calib, &si), rng.random_range(60.0..120.0))).collect();
            let host = render(&calib, &si, &points);
            let target = render(&calib, &sj, &points);
            let t_cw = si.pose().compose(&calib.t_ic).inverse();
            let xc = t_cw.transform_point(&points[0].0);
            // A point on the flank of the blob, where the gradient is large.
            let pixel = project(&calib.camera, &xc).unwrap() + Vector2::new(2.0, 1.0);
            let factor = pair_factor(
                kind,
                1,
                Measurement::Photometric {
                    pixel,
                    depth: xc.z,
                    host: Arc::new(host),
                    target: Arc::new(target),
                    pattern: Arc::new(PatchPattern::spread8()),
                },
            );
            let c = Case { factor, values: pair_values(si, sj), calib };
            if c.factor.linearize(&c.values, &c.calib).is_ok() {
                break c;
            }
        },
        FactorKind::Imu => {
            let si = state(rng);
            let samples = imu_samples(rng, 40);
            let lin = ImuBias { bg: si.imu_bias.bg + vec3(rng, 0.002), ba: si.imu_bias.ba + vec3(rng, 0.02) };
            let noise = ImuNoiseSpec { sigma_g: 1e-3, sigma_a: 1e-2, sigma_bg_walk: 1e-4, sigma_ba_walk: 1e-3 };
            let pre = integrate_imu(&samples, 0.4, lin, noise).unwrap();
            let mut sj = state(rng);
            sj.position = dyadic(si.position + vec3(rng, 1.0));
            let factor = pair_factor(kind, 18, Measurement::Imu { preint: Arc::new(pre) });
            Case { factor, values: pair_values(si, sj), calib }
        }
        FactorKind::DvlVelocity => {
            let si = state(rng);
            let sj = state(rng);
            let factor = pair_factor(
                kind,
                3,
                Measurement::DvlVelocity {
                    gyro_i: vec3(rng, 0.5),
                    gyro_m: vec3(rng, 0.5),
                    meas_i: vec3(rng, 1.5),
                    meas_m: vec3(rng, 1.5),
                },
            );
            Case { factor, values: pair_values(si, sj), calib }
        }
        FactorKind::DvlPosition => {
            let si = state(rng);
            let samples = imu_samples(rng, 40);
            let lin_bg = si.imu_bias.bg + vec3(rng, 0.002);
            let pm = integrate_imu(&samples, 0.4, ImuBias { bg: lin_bg, ba: si.imu_bias.ba }, ImuNoiseSpec::zero()).unwrap();
            let dvl: Vec<DvlSample<f64>> =
                (0..8).map(|k| DvlSample { t: k as f64 * 0.05, vel: vec3(rng, 1.5) }).collect();
            let lin_bv = si.dvl_bias.bv + vec3(rng, 0.01);
            let pre = preintegrate_dvl(&dvl, 0.4, &pm.checkpoints, &calib.dvl, lin_bg, lin_bv, 0.01).unwrap();
            let mut sj = state(rng);
            sj.position = dyadic(si.position + vec3(rng, 1.0));
            let factor = pair_factor(kind, 3, Measurement::DvlPosition { preint: Arc::new(pre) });
            Case { factor, values: pair_values(si, sj), calib }
        }
        FactorKind::Pressure => {
            let si = state(rng);
            let sj = state(rng);
            let factor = pair_factor(
                kind,
                1,
                Measurement::Pressure { depth_i: rng.random_range(5.0..15.0), depth_n: rng.random_range(5.0..15.0) },
            );
            Case { factor, values: pair_values(si, sj), calib }
        }
        FactorKind::FixedPrior => {
            let s = state(rng);
            let anchor = state(rng);
            let mut values = Values::default();
            values.states.insert(0, s);
            let factor = Factor {
                kind,
                keys: vec![VarKey::State(0)],
                measurement: Measurement::FixedPrior { anchor },
                sqrt_info: DMatrix::identity(18, 18),
                huber: None,
            };
            Case { factor, values, calib }
        }
    }
}

/// The six measurement residual kinds (the prior is an anchoring device).
pub const RESIDUAL_KINDS: [FactorKind; 6] = [
    FactorKind::Reprojection,
    FactorKind::Photometric,
    FactorKind::Imu,
    FactorKind::DvlVelocity,
    FactorKind::DvlPosition,
    FactorKind::Pressure,
];

/// Adds `shift` to every state position and landmark.
pub fn shift_world(values: &Values, shift: &Vector3<f64>) -> Values {
    let mut out = values.clone();
    for s in out.states.values_mut() {
        s.position += shift;
    }
    for l in out.landmarks.values_mut() {
        *l += shift;
    }
    out
}

/// Noiseless constant-velocity line: every sensor factor is exact at the
/// truth when keyframes sit on DVL sample times.
pub fn line_scenario(duration_s: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration_s,
        trajectory: TrajectoryKind::Line { speed_m_s: 0.5, heading_rad: 0.3 },
        motion: MotionConfig {
            depth_amplitude_m: 0.0,
            roll_amplitude_rad: 0.0,
            pitch_amplitude_rad: 0.0,
            ..Default::default()
        },
        camera_hz: 10.0,
        ..Default::default()
    }
    .noiseless()
}

/// A dataset with its true landmark map.
pub struct Fixture {
    pub ds: SensorDataset,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub calib: Calibration,
    pub window: WindowConfig,
}

impl Fixture {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        let ds = generate(cfg).unwrap();
        let traj = SimTrajectory::new(cfg.trajectory, cfg.motion);
        let landmarks = generate_landmarks(cfg, &traj).into_iter().map(|l| (l.id, l.position)).collect();
        // Weights from the default noise model, data from `cfg`.
        let window = EstimatorConfig::for_scenario(&ScenarioConfig::default(), Mode::Full).window;
        Fixture { calib: cfg.calibration(), ds, landmarks, window }
    }

    /// Keyframes at the given frame indices, at their true states and linked
    /// in order.
    pub fn keyframes(&self, frames: &[usize]) -> Vec<KeyframeInput> {
        let imu = ImuStream::new(self.ds.imu.clone()).unwrap();
        let dvl = DvlStream::new(self.ds.dvl.clone()).unwrap();
        let pressure = PressureStream::new(self.ds.pressure.clone()).unwrap();
        let gap = 1.5 / self.ds.config.dvl_hz;
        let mut out: Vec<KeyframeInput> = Vec::new();
        for &fi in frames {
            let frame = &self.ds.frames[fi];
            let state = *self.ds.truth_at(frame.t).unwrap();
            let link = out.last().map(|prev| {
                let pm = imu
                    .preintegrate(prev.t, frame.t, prev.state.imu_bias, self.window.imu_noise, &dvl.times_between(prev.t, frame.t))
                    .unwrap();
                let pd = dvl
                    .preintegrate(prev.t, frame.t, &pm, &self.calib.dvl, prev.state.dvl_bias.bv, &Rotation::identity(), 0.01, gap)
                    .unwrap();
                KeyframeLink { from: prev.id, imu: Some(Arc::new(pm)), dvl: Some(Arc::new(pd)) }
            });
            out.push(KeyframeInput {
                id: frame.id,
                t: frame.t,
                state,
                fixed: false,
                prior: None,
                observations: frame.observations.clone(),
                field: Some(Arc::new(frame.field.clone()) as SharedField),
                gyro: Some(imu.gyro_at(frame.t).unwrap() - state.imu_bias.bg),
                dvl_velocity: dvl.measurement_at(frame.t, gap),
                depth: pressure.depth_at(frame.t, gap),
                link,
            });
        }
        out
    }
}

/// Largest position and rotation error of the window states against the truth.
pub fn state_errors(ds: &SensorDataset, values: &Values, kfs: &[KeyframeInput]) -> (f64, f64) {
    let mut worst: (f64, f64) = (0.0, 0.0);
    for kf in kfs {
        let est = values.states[&kf.id];
        let truth = ds.truth_at(kf.t).unwrap();
        worst.0 = worst.0.max((est.position - truth.position).norm());
        worst.1 = worst.1.max(est.rotation.local(&truth.rotation).norm());
    }
    worst
}
