//! Scenario configuration.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::trajectory::{MotionConfig, TrajectoryKind};
use super::SimError;
use crate::backend::Calibration;
use crate::depth::DepthExtrinsics;
use crate::dvl::DvlExtrinsics;
use crate::imu::{gravity, ImuNoiseSpec};
use crate::manifold::{Pose, Rotation};
use crate::visual::CameraModel;

/// Everything needed to generate one dataset. Field names carry their units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub trajectory: TrajectoryKind,
    pub motion: MotionConfig,
    pub duration_s: f64,
    pub camera_hz: f64,
    pub imu_hz: f64,
    pub dvl_hz: f64,
    pub pressure_hz: f64,

    pub sigma_g_rad_s_sqrt_hz: f64,
    pub sigma_a_m_s2_sqrt_hz: f64,
    pub sigma_bg_walk_rad_s2_sqrt_hz: f64,
    pub sigma_ba_walk_m_s3_sqrt_hz: f64,
    pub initial_bg_rad_s: [f64; 3],
    pub initial_ba_m_s2: [f64; 3],

    pub sigma_v_m_s: f64,
    pub sigma_bv_walk_m_s2_sqrt_hz: f64,
    /// Injected DVL bias: `constant + amplitude * sin(2 pi t / period + phase)` plus the random walk.
    pub bv_constant_m_s: [f64; 3],
    pub bv_sine_amplitude_m_s: [f64; 3],
    pub bv_sine_period_s: f64,
    pub bv_sine_phase_rad: [f64; 3],

    pub sigma_p_m: f64,

    pub camera: CameraModel<f64>,
    pub sigma_pixel_px: f64,
    pub sigma_disparity_px: f64,
    /// Landmarks per square metre of seabed; ignored when `landmark_count` is set.
    pub landmark_density_per_m2: f64,
    pub landmark_count: Option<usize>,
    /// Seabed distance below the deepest point of the trajectory.
    pub seabed_offset_m: f64,
    pub seabed_relief_m: f64,
    pub landmark_margin_m: f64,
    /// Smallest horizontal distance between two landmarks, so that blobs stay apart.
    pub landmark_min_separation_m: f64,
    /// Metric radius of the intensity blob attached to each landmark.
    pub blob_radius_m: f64,
    pub blob_amplitude: [f64; 2],
    pub image_background: f64,

    pub degradation_windows_s: Vec<[f64; 2]>,

    pub r_ic_rotvec_rad: [f64; 3],
    pub p_ic_m: [f64; 3],
    pub r_id_rotvec_rad: [f64; 3],
    pub p_id_m: [f64; 3],
    pub p_ip_m: [f64; 3],

    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "figure_eight".into(),
            trajectory: TrajectoryKind::default(),
            motion: MotionConfig::default(),
            duration_s: 60.0,
            camera_hz: 15.0,
            imu_hz: 100.0,
            dvl_hz: 10.0,
            pressure_hz: 10.0,
            sigma_g_rad_s_sqrt_hz: 1.7e-4,
            sigma_a_m_s2_sqrt_hz: 2.0e-3,
            sigma_bg_walk_rad_s2_sqrt_hz: 2.0e-5,
            sigma_ba_walk_m_s3_sqrt_hz: 3.0e-4,
            initial_bg_rad_s: [0.0; 3],
            initial_ba_m_s2: [0.0; 3],
            sigma_v_m_s: 0.01,
            sigma_bv_walk_m_s2_sqrt_hz: 1.0e-4,
            bv_constant_m_s: [0.0; 3],
            bv_sine_amplitude_m_s: [0.0; 3],
            bv_sine_period_s: 60.0,
            bv_sine_phase_rad: [0.0; 3],
            sigma_p_m: 0.01,
            camera: CameraModel {
                fx: 400.0,
                fy: 400.0,
                cx: 319.5,
                cy: 239.5,
                width: 640,
                height: 480,
                baseline: 0.12,
            },
            sigma_pixel_px: 0.5,
            sigma_disparity_px: 0.2,
            landmark_density_per_m2: 1.5,
            landmark_count: None,
            seabed_offset_m: 4.0,
            seabed_relief_m: 0.5,
            landmark_margin_m: 5.0,
            landmark_min_separation_m: 0.5,
            blob_radius_m: 0.06,
            blob_amplitude: [60.0, 120.0],
            image_background: 20.0,
            degradation_windows_s: Vec::new(),
            r_ic_rotvec_rad: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
            p_ic_m: [0.2, 0.0, 0.1],
            r_id_rotvec_rad: [0.0, 0.0, std::f64::consts::FRAC_PI_4],
            p_id_m: [-0.3, 0.0, 0.25],
            p_ip_m: [-0.5, 0.0, -0.1],
            seed: 7,
        }
    }
}

fn positive(name: &str, x: f64) -> Result<(), SimError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(SimError::InvalidConfig(format!("{name} must be positive, got {x}")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<(), SimError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(SimError::InvalidConfig(format!("{name} must be non-negative, got {x}")))
    }
}

impl ScenarioConfig {
    /// Parses a JSON config, rejecting unknown fields.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        positive("duration_s", self.duration_s)?;
        positive("camera_hz", self.camera_hz)?;
        positive("imu_hz", self.imu_hz)?;
        positive("dvl_hz", self.dvl_hz)?;
        positive("pressure_hz", self.pressure_hz)?;
        for (name, x) in [
            ("sigma_g_rad_s_sqrt_hz", self.sigma_g_rad_s_sqrt_hz),
            ("sigma_a_m_s2_sqrt_hz", self.sigma_a_m_s2_sqrt_hz),
            ("sigma_bg_walk_rad_s2_sqrt_hz", self.sigma_bg_walk_rad_s2_sqrt_hz),
            ("sigma_ba_walk_m_s3_sqrt_hz", self.sigma_ba_walk_m_s3_sqrt_hz),
            ("sigma_v_m_s", self.sigma_v_m_s),
            ("sigma_bv_walk_m_s2_sqrt_hz", self.sigma_bv_walk_m_s2_sqrt_hz),
            ("sigma_p_m", self.sigma_p_m),
            ("sigma_pixel_px", self.sigma_pixel_px),
            ("sigma_disparity_px", self.sigma_disparity_px),
            ("landmark_density_per_m2", self.landmark_density_per_m2),
            ("seabed_relief_m", self.seabed_relief_m),
            ("landmark_margin_m", self.landmark_margin_m),
            ("landmark_min_separation_m", self.landmark_min_separation_m),
        ] {
            non_negative(name, x)?;
        }
        positive("seabed_offset_m", self.seabed_offset_m)?;
        positive("blob_radius_m", self.blob_radius_m)?;
        positive("bv_sine_period_s", self.bv_sine_period_s)?;
        self.camera.validate().map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        for w in &self.degradation_windows_s {
            if !(0.0 <= w[0] && w[0] <= w[1] && w[1] <= self.duration_s) {
                return Err(SimError::InvalidConfig(format!(
                    "degradation window [{}, {}] outside [0, {}]",
                    w[0], w[1], self.duration_s
                )));
            }
        }
        let periods = match self.trajectory {
            TrajectoryKind::Line { .. } => vec![],
            TrajectoryKind::Circle { period_s, .. } => vec![period_s],
            TrajectoryKind::FigureEight { period_s, .. } => vec![period_s],
            TrajectoryKind::Lawnmower { leg_period_s, .. } => vec![leg_period_s],
        };
        for p in periods {
            positive("trajectory period", p)?;
        }
        Ok(())
    }

    pub fn is_degraded(&self, t: f64) -> bool {
        self.degradation_windows_s.iter().any(|w| w[0] <= t && t <= w[1])
    }

    pub fn imu_noise(&self) -> ImuNoiseSpec<f64> {
        ImuNoiseSpec {
            sigma_g: self.sigma_g_rad_s_sqrt_hz,
            sigma_a: self.sigma_a_m_s2_sqrt_hz,
            sigma_bg_walk: self.sigma_bg_walk_rad_s2_sqrt_hz,
            sigma_ba_walk: self.sigma_ba_walk_m_s3_sqrt_hz,
        }
    }

    /// Camera-to-IMU transform.
    pub fn t_ic(&self) -> Pose<f64> {
        Pose::new(Rotation::exp(&Vector3::from(self.r_ic_rotvec_rad)), Vector3::from(self.p_ic_m))
    }

    pub fn dvl_extrinsics(&self) -> DvlExtrinsics<f64> {
        DvlExtrinsics { r_id: Rotation::exp(&Vector3::from(self.r_id_rotvec_rad)), p_id: Vector3::from(self.p_id_m) }
    }

    pub fn depth_extrinsics(&self) -> DepthExtrinsics<f64> {
        DepthExtrinsics { p_ip: Vector3::from(self.p_ip_m) }
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            camera: self.camera,
            t_ic: self.t_ic(),
            dvl: self.dvl_extrinsics(),
            depth: self.depth_extrinsics(),
            gravity: gravity(),
        }
    }

    /// Sets every noise and bias term to zero.
    pub fn noiseless(mut self) -> Self {
        self.sigma_g_rad_s_sqrt_hz = 0.0;
        self.sigma_a_m_s2_sqrt_hz = 0.0;
        self.sigma_bg_walk_rad_s2_sqrt_hz = 0.0;
        self.sigma_ba_walk_m_s3_sqrt_hz = 0.0;
        self.initial_bg_rad_s = [0.0; 3];
        self.initial_ba_m_s2 = [0.0; 3];
        self.sigma_v_m_s = 0.0;
        self.sigma_bv_walk_m_s2_sqrt_hz = 0.0;
        self.bv_constant_m_s = [0.0; 3];
        self.bv_sine_amplitude_m_s = [0.0; 3];
        self.sigma_p_m = 0.0;
        self.sigma_pixel_px = 0.0;
        self.sigma_disparity_px = 0.0;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = ScenarioConfig { imu_hz: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig { degradation_windows_s: vec![[50.0, 70.0]], ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::from_json(r#"{"trajectory": {"kind": "spiral"}}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"imu_rate": 100}"#).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"duration_s": 12.5, "seed": 3}"#).unwrap();
        assert_eq!(cfg.duration_s, 12.5);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.imu_hz, 100.0);
    }
}
