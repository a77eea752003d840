mod common;

use std::collections::BTreeMap;

use aquafuse::backend::solver::accepted_step_violations;
use aquafuse::backend::{assemble_window, robust_weight, solve, FactorKind, SolveError, SolverConfig, WindowConfig};
use aquafuse::backend::window::factor_counts;
use nalgebra::{Vector2, Vector3};
use rand::Rng;

use common::{case, dyadic, rng, shift_world, state_errors, vec3, Fixture, RESIDUAL_KINDS};

fn no_vision(w: &WindowConfig) -> WindowConfig {
    WindowConfig { use_photometric: false, ..*w }
}

/// Frames 2 s apart from t = 2 s; every one falls on a DVL sample.
fn frames(n: usize) -> Vec<usize> {
    (1..=n).map(|k| 20 * k).collect()
}

#[test]
fn factor_jacobians_match_central_differences() {
    // [DERIVED] analytic vs central differences under right perturbations.
    let mut r = rng(1);
    for kind in RESIDUAL_KINDS.into_iter().chain([FactorKind::FixedPrior]) {
        for _ in 0..100 {
            let c = case(kind, &mut r);
            let err = c.jacobian_error(1e-6);
            assert!(err < 1e-5, "{kind:?}: {err:e}");
        }
    }
}

#[test]
fn pairwise_residuals_ignore_world_translation() {
    // [DERIVED] every measurement residual depends on relative positions only.
    let mut r = rng(2);
    for kind in RESIDUAL_KINDS {
        for _ in 0..20 {
            let c = case(kind, &mut r);
            let shift = dyadic(vec3(&mut r, 64.0));
            let a = c.factor.evaluate(&c.values, &c.calib).unwrap();
            let b = c.factor.evaluate(&shift_world(&c.values, &shift), &c.calib).unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
    }
}

#[test]
fn huber_weight_examples() {
    // [TRIVIAL] / [DERIVED] weight is min(1, delta / |r|).
    assert_eq!(robust_weight(0.0, 1.5), 1.0);
    assert_eq!(robust_weight(2.25, 1.5), 1.0);
    assert!((robust_weight(9.0, 1.5) - 0.5).abs() < 1e-15);
}

#[test]
fn two_keyframes_five_landmarks_count() {
    // [DERIVED] 1 IMU, DVL velocity and position, 1 pressure, 2 x 5
    // reprojection factors, and the anchoring prior.
    let fx = Fixture::new(&common::line_scenario(6.0));
    let mut kfs = fx.keyframes(&[20, 22]);
    let shared: Vec<u64> = kfs[0]
        .observations
        .iter()
        .map(|o| o.landmark_id)
        .filter(|id| kfs[1].observations.iter().any(|o| o.landmark_id == *id))
        .take(5)
        .collect();
    assert_eq!(shared.len(), 5);
    for kf in &mut kfs {
        kf.observations.retain(|o| shared.contains(&o.landmark_id));
    }
    let w = assemble_window(&kfs, &fx.landmarks, &fx.calib, &no_vision(&fx.window)).unwrap();
    let counts = factor_counts(&w);
    let expect = BTreeMap::from([
        (FactorKind::Reprojection, 10),
        (FactorKind::Imu, 1),
        (FactorKind::DvlVelocity, 1),
        (FactorKind::DvlPosition, 1),
        (FactorKind::Pressure, 1),
        (FactorKind::FixedPrior, 1),
    ]);
    assert_eq!(counts, expect);
    assert_eq!(w.values.landmarks.len(), 5);
}

#[test]
fn single_keyframe_has_only_a_prior() {
    // [TRIVIAL]
    let fx = Fixture::new(&common::line_scenario(4.0));
    let w = assemble_window(&fx.keyframes(&[20]), &fx.landmarks, &fx.calib, &fx.window).unwrap();
    assert_eq!(factor_counts(&w), BTreeMap::from([(FactorKind::FixedPrior, 1)]));
}

#[test]
fn unanchored_window_is_a_gauge_error() {
    // [TRIVIAL]
    let fx = Fixture::new(&common::line_scenario(6.0));
    let mut w = assemble_window(&fx.keyframes(&frames(2)), &fx.landmarks, &fx.calib, &no_vision(&fx.window)).unwrap();
    w.factors.retain(|f| f.kind != FactorKind::FixedPrior);
    assert_eq!(solve(&mut w, &SolverConfig::default()).unwrap_err(), SolveError::Gauge);
}

#[test]
fn noiseless_window_at_truth_is_already_converged() {
    // [TRIVIAL] photometric factors are left out: the blob rendering is not
    // exactly warp-consistent, so their cost at the truth is small but not zero.
    let fx = Fixture::new(&common::line_scenario(12.0));
    let kfs = fx.keyframes(&frames(5));
    let mut w = assemble_window(&kfs, &fx.landmarks, &fx.calib, &no_vision(&fx.window)).unwrap();
    let report = solve(&mut w, &SolverConfig::default()).unwrap();
    assert!(report.iterations <= 2, "{report:?}");
    assert!(report.final_cost < 1e-16, "{report:?}");
}

#[test]
fn perturbed_noiseless_window_recovers_truth() {
    // [DERIVED] simulator oracle: the first keyframe carries the prior, the
    // rest start 0.1 m / 0.05 rad away.
    let fx = Fixture::new(&common::line_scenario(12.0));
    let mut kfs = fx.keyframes(&frames(5));
    let mut r = rng(3);
    for kf in kfs.iter_mut().skip(1) {
        kf.state.position += vec3(&mut r, 1.0).normalize() * 0.1;
        kf.state.rotation = kf.state.rotation.retract(&(vec3(&mut r, 1.0).normalize() * 0.05));
    }
    let mut w = assemble_window(&kfs, &fx.landmarks, &fx.calib, &no_vision(&fx.window)).unwrap();
    let report = solve(&mut w, &SolverConfig::default()).unwrap();
    let (dp, dr) = state_errors(&fx.ds, &w.values, &kfs);
    assert!(dp < 1e-6 && dr < 1e-6, "{dp:e} {dr:e} {report:?}");
    assert!(report.cost_history.windows(2).all(|c| c[1] <= c[0]));
}

#[test]
fn fixed_states_are_bit_identical_after_solve() {
    // [TRIVIAL]
    let fx = Fixture::new(&common::line_scenario(12.0));
    let mut kfs = fx.keyframes(&frames(4));
    kfs[0].fixed = true;
    kfs[0].state.position += Vector3::new(0.01, 0.0, 0.0);
    for kf in kfs.iter_mut().skip(1) {
        kf.state.position += Vector3::new(0.05, -0.03, 0.02);
    }
    let mut w = assemble_window(&kfs, &fx.landmarks, &fx.calib, &fx.window).unwrap();
    let before = w.values.states[&kfs[0].id];
    solve(&mut w, &SolverConfig::default()).unwrap();
    assert_eq!(w.values.states[&kfs[0].id], before);
}

#[test]
fn degraded_window_is_solvable_without_vision() {
    // [DERIVED] no landmarks: only the inertial, acoustic and depth factors.
    let fx = Fixture::new(&common::line_scenario(12.0));
    let mut kfs = fx.keyframes(&frames(5));
    let mut r = rng(4);
    for kf in kfs.iter_mut() {
        kf.observations.clear();
        kf.field = None;
    }
    for kf in kfs.iter_mut().skip(1) {
        kf.state.position += vec3(&mut r, 0.05);
    }
    let mut w = assemble_window(&kfs, &BTreeMap::new(), &fx.calib, &fx.window).unwrap();
    let counts = factor_counts(&w);
    assert!(counts.keys().all(|k| !matches!(k, FactorKind::Reprojection | FactorKind::Photometric)));
    assert_eq!(counts[&FactorKind::Imu], 4);
    assert_eq!(counts[&FactorKind::DvlPosition], 4);
    assert_eq!(counts[&FactorKind::Pressure], 4);
    solve(&mut w, &SolverConfig::default()).unwrap();
    let (dp, _) = state_errors(&fx.ds, &w.values, &kfs);
    assert!(dp < 1e-6, "{dp:e}");
}

/// Window of vision and IMU only, with pixel noise and optionally one 50 px outlier.
fn outlier_run(huber: bool, outlier: bool) -> f64 {
    let mut cfg = common::line_scenario(12.0);
    cfg.sigma_pixel_px = 0.5;
    let fx = Fixture::new(&cfg);
    let mut kfs = fx.keyframes(&frames(5));
    if outlier {
        kfs[2].observations[0].pixel += Vector2::new(50.0, 0.0);
    }
    let mut r = rng(5);
    for kf in kfs.iter_mut().skip(1) {
        kf.state.position += vec3(&mut r, 0.02);
    }
    let window = WindowConfig {
        use_dvl: false,
        use_pressure: false,
        use_photometric: false,
        sigma_pixel: 0.5,
        huber: if huber { Some(1.345) } else { None },
        ..fx.window
    };
    let mut w = assemble_window(&kfs, &fx.landmarks, &fx.calib, &window).unwrap();
    solve(&mut w, &SolverConfig::default()).unwrap();
    state_errors(&fx.ds, &w.values, &kfs).0
}

#[test]
fn huber_bounds_a_gross_outlier() {
    // [DERIVED] controlled A/B run.
    let clean = outlier_run(true, false);
    let robust = outlier_run(true, true);
    let plain = outlier_run(false, true);
    assert!(robust <= 2.0 * clean, "clean {clean:e} robust {robust:e}");
    assert!(plain > 2.0 * clean, "clean {clean:e} plain {plain:e}");
}

#[test]
fn accepted_steps_never_raise_cost() {
    // [DERIVED] solver contract over random perturbations of a visual window.
    let fx = Fixture::new(&common::line_scenario(12.0));
    let mut r = rng(6);
    for _ in 0..5 {
        let mut kfs = fx.keyframes(&frames(4));
        for kf in kfs.iter_mut().skip(1) {
            kf.state.position += vec3(&mut r, 0.1);
            kf.state.rotation = kf.state.rotation.retract(&vec3(&mut r, 0.03));
            kf.state.velocity += vec3(&mut r, 0.05);
        }
        let mut landmarks = fx.landmarks.clone();
        for p in landmarks.values_mut() {
            let scale = r.random_range(0.01..0.05);
            *p += vec3(&mut r, scale);
        }
        let mut w = assemble_window(&kfs, &landmarks, &fx.calib, &fx.window).unwrap();
        let report = solve(&mut w, &SolverConfig::default()).unwrap();
        assert!(report.cost_history.windows(2).all(|c| c[1] <= c[0]), "{:?}", report.cost_history);
        assert!(report.final_cost <= report.initial_cost);
    }
    assert_eq!(accepted_step_violations(), 0);
}
