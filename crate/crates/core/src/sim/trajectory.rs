//! Analytic ground-truth trajectories.
//!
//! Horizontal motion comes from the chosen shape, depth and roll/pitch from
//! slow sinusoids, and yaw follows the horizontal velocity heading.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::manifold::{hat, vee, Rotation};

/// Horizontal path shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Straight line along `heading_rad` at constant speed.
    Line { speed_m_s: f64, heading_rad: f64 },
    /// Circle of `radius_m` centred on the start offset, one revolution per `period_s`.
    Circle { radius_m: f64, period_s: f64 },
    /// `x = a sin(wt)`, `y = b sin(2wt)` with `w = 2 pi / period_s`.
    FigureEight { amplitude_x_m: f64, amplitude_y_m: f64, period_s: f64 },
    /// Sinusoidal sweeps of `leg_length_m` along x, stepping `spacing_m` in y per leg.
    Lawnmower { leg_length_m: f64, spacing_m: f64, leg_period_s: f64 },
}

impl Default for TrajectoryKind {
    fn default() -> Self {
        TrajectoryKind::FigureEight { amplitude_x_m: 12.0, amplitude_y_m: 6.0, period_s: 60.0 }
    }
}

/// Depth and attitude oscillations superimposed on every shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub depth_mean_m: f64,
    pub depth_amplitude_m: f64,
    pub depth_period_s: f64,
    pub roll_amplitude_rad: f64,
    pub roll_period_s: f64,
    pub pitch_amplitude_rad: f64,
    pub pitch_period_s: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            depth_mean_m: 10.0,
            depth_amplitude_m: 0.5,
            depth_period_s: 25.0,
            roll_amplitude_rad: 0.03,
            roll_period_s: 11.0,
            pitch_amplitude_rad: 0.02,
            pitch_period_s: 13.0,
        }
    }
}

/// Ground truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPoint {
    pub t: f64,
    pub rotation: Rotation<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
}

/// A continuous-time trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub motion: MotionConfig,
}

/// Value and first two derivatives of a scalar signal.
type Jet = (f64, f64, f64);

fn sine(amp: f64, period: f64, phase: f64, t: f64) -> Jet {
    if period <= 0.0 || amp == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let w = 2.0 * PI / period;
    let a = w * t + phase;
    (amp * a.sin(), amp * w * a.cos(), -amp * w * w * a.sin())
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind, motion: MotionConfig) -> Self {
        Self { kind, motion }
    }

    fn horizontal(&self, t: f64) -> (Jet, Jet) {
        match self.kind {
            TrajectoryKind::Line { speed_m_s, heading_rad } => {
                let (c, s) = (heading_rad.cos(), heading_rad.sin());
                ((speed_m_s * t * c, speed_m_s * c, 0.0), (speed_m_s * t * s, speed_m_s * s, 0.0))
            }
            TrajectoryKind::Circle { radius_m, period_s } => {
                let w = 2.0 * PI / period_s;
                let a = w * t;
                let r = radius_m;
                // Starts at the origin heading along +y.
                (
                    (r * a.cos() - r, -r * w * a.sin(), -r * w * w * a.cos()),
                    (r * a.sin(), r * w * a.cos(), -r * w * w * a.sin()),
                )
            }
            TrajectoryKind::FigureEight { amplitude_x_m, amplitude_y_m, period_s } => {
                (sine(amplitude_x_m, period_s, 0.0, t), sine(amplitude_y_m, period_s / 2.0, 0.0, t))
            }
            TrajectoryKind::Lawnmower { leg_length_m, spacing_m, leg_period_s } => {
                let x = sine(leg_length_m / 2.0, 2.0 * leg_period_s, 0.0, t);
                let w = 2.0 * PI / leg_period_s;
                let k = spacing_m / leg_period_s;
                let y = (
                    k * (t - (w * t).sin() / w),
                    k * (1.0 - (w * t).cos()),
                    k * w * (w * t).sin(),
                );
                (x, y)
            }
        }
    }

    fn default_heading(&self) -> f64 {
        match self.kind {
            TrajectoryKind::Line { heading_rad, .. } => heading_rad,
            _ => 0.0,
        }
    }

    pub fn at(&self, t: f64) -> TruthPoint {
        let m = &self.motion;
        let (x, y) = self.horizontal(t);
        let dz = sine(m.depth_amplitude_m, m.depth_period_s, 0.0, t);
        let z = (m.depth_mean_m + dz.0, dz.1, dz.2);
        let roll = sine(m.roll_amplitude_rad, m.roll_period_s, 0.0, t);
        let pitch = sine(m.pitch_amplitude_rad, m.pitch_period_s, 0.5, t);

        let speed2 = x.1 * x.1 + y.1 * y.1;
        let (yaw, yaw_rate) = if speed2 > 1e-18 {
            (y.1.atan2(x.1), (x.1 * y.2 - y.1 * x.2) / speed2)
        } else {
            (self.default_heading(), 0.0)
        };

        let rz = Rotation::about_z(yaw);
        let ry = Rotation::about_y(pitch.0);
        let rx = Rotation::about_x(roll.0);
        let rotation = rz * ry * rx;
        // R^T dR/dt for R = Rz Ry Rx.
        let (mz, my, mx) = (rz.matrix(), ry.matrix(), rx.matrix());
        let dr: Matrix3<f64> = mz * hat(&Vector3::z()) * my * mx * yaw_rate
            + mz * my * hat(&Vector3::y()) * mx * pitch.1
            + mz * my * mx * hat(&Vector3::x()) * roll.1;
        let omega = vee(&(rotation.matrix().transpose() * dr));

        TruthPoint {
            t,
            rotation,
            position: Vector3::new(x.0, y.0, z.0),
            velocity: Vector3::new(x.1, y.1, z.1),
            acceleration: Vector3::new(x.2, y.2, z.2),
            omega,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat() -> MotionConfig {
        MotionConfig { depth_amplitude_m: 0.0, roll_amplitude_rad: 0.0, pitch_amplitude_rad: 0.0, ..Default::default() }
    }

    #[test]
    fn line_endpoint() {
        let tr = Trajectory::new(TrajectoryKind::Line { speed_m_s: 1.0, heading_rad: 0.3 }, flat());
        let d = tr.at(10.0).position - tr.at(0.0).position;
        assert_relative_eq!(d.norm(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let tr = Trajectory::new(TrajectoryKind::Circle { radius_m: 5.0, period_s: 20.0 }, flat());
        let expect = (2.0 * PI / 20.0f64).powi(2) * 5.0;
        for k in 0..40 {
            let p = tr.at(k as f64 * 0.77);
            assert_relative_eq!(p.acceleration.norm(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn figure_eight_closes() {
        let tr = Trajectory::new(
            TrajectoryKind::FigureEight { amplitude_x_m: 12.0, amplitude_y_m: 6.0, period_s: 60.0 },
            MotionConfig::default(),
        );
        let a = tr.at(0.0).position;
        let b = tr.at(60.0).position;
        assert!((a.xy() - b.xy()).norm() < 1e-9);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let kinds = [
            TrajectoryKind::default(),
            TrajectoryKind::Circle { radius_m: 8.0, period_s: 50.0 },
            TrajectoryKind::Lawnmower { leg_length_m: 20.0, spacing_m: 4.0, leg_period_s: 30.0 },
        ];
        let h = 1e-5;
        for kind in kinds {
            let tr = Trajectory::new(kind, MotionConfig::default());
            for t in [1.3, 17.9, 42.0] {
                let (a, b, c) = (tr.at(t - h), tr.at(t), tr.at(t + h));
                assert_relative_eq!((c.position - a.position) / (2.0 * h), b.velocity, epsilon = 1e-6);
                assert_relative_eq!((c.velocity - a.velocity) / (2.0 * h), b.acceleration, epsilon = 1e-6);
                let w = a.rotation.local(&c.rotation) / (2.0 * h);
                assert_relative_eq!(w, b.omega, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn yaw_follows_heading() {
        let tr = Trajectory::new(TrajectoryKind::Circle { radius_m: 5.0, period_s: 20.0 }, flat());
        let p = tr.at(3.0);
        let fwd = p.rotation.rotate(&Vector3::x());
        assert_relative_eq!(fwd, p.velocity.normalize(), epsilon = 1e-12);
    }
}
