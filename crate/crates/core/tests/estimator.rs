use aquafuse::cli::{estimate_trajectory, truth_trajectory};
use aquafuse::eval;
use aquafuse::frontend::{run_estimator, EstimatorConfig, Mode};
use aquafuse::sim::{generate, ScenarioConfig, SensorDataset};

fn rmse(ds: &SensorDataset, mode: Mode) -> f64 {
    let out = run_estimator(ds, &EstimatorConfig::for_scenario(&ds.config, mode)).unwrap();
    let est = estimate_trajectory(&out).unwrap();
    let truth = truth_trajectory(&ds.truth).unwrap();
    eval::evaluate(&est, &truth, 0.5 / ds.config.camera_hz, "run").unwrap().translation_rmse_m
}

#[test]
fn acoustic_and_depth_factors_bridge_a_vision_dropout() {
    // [PAPER] with vision lost for 8 s, fusing DVL and pressure keeps the
    // error well below visual-inertial odometry alone.
    let cfg = ScenarioConfig { duration_s: 30.0, degradation_windows_s: vec![[12.0, 20.0]], ..Default::default() };
    let ds = generate(&cfg).unwrap();
    let full = rmse(&ds, Mode::Full);
    let vi = rmse(&ds, Mode::VisualInertialOnly);
    assert!(full < 0.7 * vi, "full {full:.4} m, visual-inertial {vi:.4} m");
}

#[test]
fn noiseless_full_mode_stays_on_the_truth() {
    // [DERIVED] simulator oracle, shorter than the acceptance run.
    let cfg = ScenarioConfig { duration_s: 15.0, ..Default::default() }.noiseless();
    let ds = generate(&cfg).unwrap();
    let e = rmse(&ds, Mode::Full);
    assert!(e < 1e-3, "{e:e}");
}
