//! Sensor synthesis on a shared IMU clock.
//!
//! Every sensor timestamp is an IMU tick `k / imu_hz`, so any two sensor times
//! bound a whole number of IMU intervals. Ground truth is the zero-order-hold
//! chain the estimator integrates: rotation and velocity are sampled from the
//! analytic trajectory at each tick, the IMU reading over `[t_k, t_k+1)` is the
//! constant rate and specific force that carry tick `k` exactly to tick `k+1`,
//! and position follows `p_k+1 = p_k + (v_k + v_k+1) dt / 2`.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ScenarioConfig;
use super::dataset::{Frame, SensorDataset, TruthRecord};
use super::trajectory::Trajectory;
use super::SimError;
use crate::depth::PressureSample;
use crate::dvl::{DvlBias, DvlSample};
use crate::imu::{gravity, ImuBias, ImuSample};
use crate::state::NavState;
use crate::visual::{project, Blob, BlobField, LandmarkObservation};

/// Independent random streams so that changing one noise level leaves the
/// draws of the others untouched.
mod stream {
    pub const IMU: u64 = 1;
    pub const IMU_BIAS: u64 = 2;
    pub const DVL: u64 = 3;
    pub const DVL_BIAS: u64 = 4;
    pub const PRESSURE: u64 = 5;
    pub const LANDMARKS: u64 = 6;
    pub const PIXELS: u64 = 7;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let n = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    n * sigma
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    n * sigma
}

/// Tick indices of a sensor running at `hz` on an IMU clock of `imu_hz`,
/// restricted to `0..=last`.
fn sensor_ticks(hz: f64, imu_hz: f64, last: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for j in 0.. {
        let k = (j as f64 * imu_hz / hz).round() as usize;
        if k > last {
            break;
        }
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    out
}

/// A seabed point feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub amplitude: f64,
}

/// Scatters landmarks over the seabed below the trajectory footprint.
pub fn generate_landmarks(cfg: &ScenarioConfig, traj: &Trajectory) -> Vec<Landmark> {
    let mut rng = rng_for(cfg.seed, stream::LANDMARKS);
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    let mut deepest = f64::NEG_INFINITY;
    let steps = (cfg.duration_s * 4.0).ceil() as usize;
    for i in 0..=steps {
        let p = traj.at(cfg.duration_s * i as f64 / steps as f64).position;
        lo = lo.inf(&p.xy());
        hi = hi.sup(&p.xy());
        deepest = deepest.max(p.z);
    }
    let m = cfg.landmark_margin_m;
    lo -= Vector2::repeat(m);
    hi += Vector2::repeat(m);
    let area = (hi.x - lo.x) * (hi.y - lo.y);
    let count = cfg.landmark_count.unwrap_or((area * cfg.landmark_density_per_m2).round() as usize);
    let floor = deepest + cfg.seabed_offset_m;
    let min_sep2 = cfg.landmark_min_separation_m * cfg.landmark_min_separation_m;
    let mut out: Vec<Landmark> = Vec::with_capacity(count);
    // Rejection sampling; gives up quietly if the density cannot be packed.
    let mut attempts = 0usize;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let x = rng.random_range(lo.x..=hi.x);
        let y = rng.random_range(lo.y..=hi.y);
        let relief = if cfg.seabed_relief_m > 0.0 {
            rng.random_range(-cfg.seabed_relief_m..=cfg.seabed_relief_m)
        } else {
            0.0
        };
        let amplitude = rng.random_range(cfg.blob_amplitude[0]..=cfg.blob_amplitude[1]);
        let position = Vector3::new(x, y, floor + relief);
        if out.iter().any(|l| (l.position.xy() - position.xy()).norm_squared() < min_sep2) {
            continue;
        }
        out.push(Landmark { id: out.len() as u64, position, amplitude });
    }
    out
}

/// Closest landmark distance along the optical axis for which observations are kept.
const MIN_VIEW_DEPTH: f64 = 0.5;

fn render_frame(
    cfg: &ScenarioConfig,
    id: u64,
    t: f64,
    state: &NavState<f64>,
    landmarks: &[Landmark],
    rng: &mut ChaCha8Rng,
) -> Frame {
    let cam = &cfg.camera;
    let degraded = cfg.is_degraded(t);
    let mut field = BlobField { width: cam.width, height: cam.height, background: cfg.image_background, blobs: vec![] };
    let mut observations = Vec::new();
    if degraded {
        return Frame { id, t, degraded, observations, field };
    }
    let t_wc = state.pose() * cfg.t_ic();
    let t_cw = t_wc.inverse();
    for lm in landmarks {
        let xc = t_cw.transform_point(&lm.position);
        if xc.z < MIN_VIEW_DEPTH {
            continue;
        }
        let Ok(u) = project(cam, &xc) else { continue };
        let sigma = [cfg.blob_radius_m * cam.fx / xc.z, cfg.blob_radius_m * cam.fy / xc.z];
        // Keep every blob that can reach the image so the field is seamless.
        let reach = 8.0 * sigma[0].max(sigma[1]);
        let w = f64::from(cam.width);
        let h = f64::from(cam.height);
        if u.x < -reach || u.y < -reach || u.x > w - 1.0 + reach || u.y > h - 1.0 + reach {
            continue;
        }
        field.blobs.push(Blob { center: [u.x, u.y], sigma, amplitude: lm.amplitude });
        if !cam.contains(&u) {
            continue;
        }
        let pixel = u + Vector2::new(gauss(rng, cfg.sigma_pixel_px), gauss(rng, cfg.sigma_pixel_px));
        let disparity = cam.fx * cam.baseline / xc.z + gauss(rng, cfg.sigma_disparity_px);
        observations.push(LandmarkObservation { frame_id: id, landmark_id: lm.id, pixel, disparity: Some(disparity) });
    }
    Frame { id, t, degraded, observations, field }
}

/// Generates a full dataset; identical configs give identical datasets.
pub fn generate(cfg: &ScenarioConfig) -> Result<SensorDataset, SimError> {
    cfg.validate()?;
    let traj = Trajectory::new(cfg.trajectory, cfg.motion);
    let dt = 1.0 / cfg.imu_hz;
    let n = (cfg.duration_s * cfg.imu_hz + 1e-9).floor() as usize;
    if n < 2 {
        return Err(SimError::InvalidConfig("duration shorter than two IMU periods".into()));
    }
    let tick = |k: usize| k as f64 / cfg.imu_hz;
    let g = gravity::<f64>();
    let noise = cfg.imu_noise();
    let r_id = cfg.dvl_extrinsics();
    let depth_ext = cfg.depth_extrinsics();

    let mut rng_imu = rng_for(cfg.seed, stream::IMU);
    let mut rng_imu_bias = rng_for(cfg.seed, stream::IMU_BIAS);
    let mut rng_dvl_bias = rng_for(cfg.seed, stream::DVL_BIAS);

    // Truth chain over ticks 0..=n.
    let analytic: Vec<_> = (0..=n).map(|k| traj.at(tick(k))).collect();
    let mut truth = Vec::with_capacity(n + 1);
    let mut omegas = Vec::with_capacity(n);
    let mut imu = Vec::with_capacity(n);
    let mut bias = ImuBias { bg: Vector3::from(cfg.initial_bg_rad_s), ba: Vector3::from(cfg.initial_ba_m_s2) };
    let mut bv_walk = Vector3::zeros();
    let bv_at = |t: f64, walk: &Vector3<f64>| {
        let w = 2.0 * std::f64::consts::PI / cfg.bv_sine_period_s;
        Vector3::from_fn(|i, _| {
            cfg.bv_constant_m_s[i] + cfg.bv_sine_amplitude_m_s[i] * (w * t + cfg.bv_sine_phase_rad[i]).sin()
        }) + walk
    };
    let mut position = analytic[0].position;
    for k in 0..=n {
        let a = &analytic[k];
        let state = NavState {
            rotation: a.rotation,
            position,
            velocity: a.velocity,
            imu_bias: bias,
            dvl_bias: DvlBias { bv: bv_at(a.t, &bv_walk) },
        };
        truth.push(TruthRecord { t: a.t, state });
        if k == n {
            break;
        }
        let b = &analytic[k + 1];
        let omega = a.rotation.local(&b.rotation) / dt;
        let force = a.rotation.inverse_rotate(&((b.velocity - a.velocity) / dt - g));
        omegas.push(omega);
        let sd = 1.0 / dt.sqrt();
        imu.push(ImuSample {
            t: a.t,
            gyro: omega + bias.bg + gauss3(&mut rng_imu, noise.sigma_g * sd),
            accel: force + bias.ba + gauss3(&mut rng_imu, noise.sigma_a * sd),
        });
        position += (a.velocity + b.velocity) * (0.5 * dt);
        bias.bg += gauss3(&mut rng_imu_bias, noise.sigma_bg_walk * dt.sqrt());
        bias.ba += gauss3(&mut rng_imu_bias, noise.sigma_ba_walk * dt.sqrt());
        bv_walk += gauss3(&mut rng_dvl_bias, cfg.sigma_bv_walk_m_s2_sqrt_hz * dt.sqrt());
    }

    let last = n - 1;
    // Each DVL ping reports the mean velocity of the transducer over its own
    // sample period, so holding it over that period reproduces the truth.
    let mut rng_dvl = rng_for(cfg.seed, stream::DVL);
    let dvl_ticks = sensor_ticks(cfg.dvl_hz, cfg.imu_hz, last);
    let dvl_step = ((cfg.imu_hz / cfg.dvl_hz).round() as usize).max(1);
    let transducer = |k: usize| {
        let s = &truth[k].state;
        s.position + s.rotation.rotate(&r_id.p_id)
    };
    let dvl = dvl_ticks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let e = dvl_ticks.get(i + 1).copied().unwrap_or(k + dvl_step).min(n);
            let s = &truth[k].state;
            let mean = (transducer(e) - transducer(k)) / (truth[e].t - truth[k].t);
            let body = s.rotation.inverse_rotate(&mean);
            let vel = r_id.r_id.inverse_rotate(&body) + s.dvl_bias.bv + gauss3(&mut rng_dvl, cfg.sigma_v_m_s);
            DvlSample { t: truth[k].t, vel }
        })
        .collect();

    let mut rng_p = rng_for(cfg.seed, stream::PRESSURE);
    let pressure = sensor_ticks(cfg.pressure_hz, cfg.imu_hz, last)
        .into_iter()
        .map(|k| {
            let s = &truth[k].state;
            let z = (s.position + s.rotation.rotate(&depth_ext.p_ip)).z;
            PressureSample { t: truth[k].t, depth: z + gauss(&mut rng_p, cfg.sigma_p_m) }
        })
        .collect();

    let landmarks = generate_landmarks(cfg, &traj);
    let mut rng_px = rng_for(cfg.seed, stream::PIXELS);
    let frames = sensor_ticks(cfg.camera_hz, cfg.imu_hz, last)
        .into_iter()
        .enumerate()
        .map(|(id, k)| render_frame(cfg, id as u64, truth[k].t, &truth[k].state, &landmarks, &mut rng_px))
        .collect();

    Ok(SensorDataset { config: cfg.clone(), imu, dvl, pressure, frames, truth })
}
