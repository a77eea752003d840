//! Trajectory evaluation: common-start preprocessing, rigid alignment to the
//! ground truth and translation/rotation error statistics.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{Pose, Rotation};
use crate::sim::Stamp;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    Empty,
    #[error("timestamps must strictly increase (sample {index} at t = {t})")]
    Unsorted { index: usize, t: f64 },
    #[error("non-finite pose at sample {index}")]
    NonFinite { index: usize },
    #[error("trajectories do not overlap in time")]
    NoOverlap,
    #[error("only {found} associated pose pairs, need at least {needed}")]
    TooFewPairs { found: usize, needed: usize },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    /// Body (IMU) pose in the world frame.
    pub pose: Pose<f64>,
}

/// Time-sorted poses with unique timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Result<Self, EvalError> {
        if poses.is_empty() {
            return Err(EvalError::Empty);
        }
        for (i, p) in poses.iter().enumerate() {
            if !(p.t.is_finite() && p.pose.rotation.is_finite() && p.pose.translation.iter().all(|x| x.is_finite())) {
                return Err(EvalError::NonFinite { index: i });
            }
            if i > 0 && p.t <= poses[i - 1].t {
                return Err(EvalError::Unsorted { index: i, t: p.t });
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.poses[0].t
    }

    pub fn end(&self) -> f64 {
        self.poses[self.poses.len() - 1].t
    }

    /// Applies `g` on the world side of every pose.
    pub fn transformed(&self, g: &Pose<f64>) -> Self {
        Self { poses: self.poses.iter().map(|p| StampedPose { t: p.t, pose: g.compose(&p.pose) }).collect() }
    }
}

/// Truncates every trajectory to the latest common start time and translates
/// its first position to the origin.
pub fn preprocess(trajs: &[Trajectory]) -> Result<Vec<Trajectory>, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::Empty);
    }
    let start = trajs.iter().map(Trajectory::start).fold(f64::NEG_INFINITY, f64::max);
    let end = trajs.iter().map(Trajectory::end).fold(f64::INFINITY, f64::min);
    if start > end {
        return Err(EvalError::NoOverlap);
    }
    Ok(trajs
        .iter()
        .map(|tr| {
            let kept = &tr.poses[tr.poses.partition_point(|p| p.t < start)..];
            let origin = kept[0].pose.translation;
            Trajectory {
                poses: kept
                    .iter()
                    .map(|p| StampedPose { t: p.t, pose: Pose::new(p.pose.rotation, p.pose.translation - origin) })
                    .collect(),
            }
        })
        .collect())
}

/// Index pairs `(est, truth)` matched by nearest timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    /// Estimate samples with no truth sample within the tolerance.
    pub unmatched: usize,
}

/// Pairs every estimate sample with the nearest truth sample, keeping pairs no
/// more than `max_dt` apart.
pub fn associate(est: &Trajectory, truth: &Trajectory, max_dt: f64) -> Association {
    let mut pairs = Vec::with_capacity(est.len());
    let mut unmatched = 0;
    for (i, e) in est.poses.iter().enumerate() {
        let k = truth.poses.partition_point(|p| p.t < e.t);
        let nearest = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < truth.len())
            .min_by(|&a, &b| (truth.poses[a].t - e.t).abs().total_cmp(&(truth.poses[b].t - e.t).abs()));
        match nearest {
            Some(j) if (truth.poses[j].t - e.t).abs() <= max_dt => pairs.push((i, j)),
            _ => unmatched += 1,
        }
    }
    Association { pairs, unmatched }
}

/// Rigid transform `(R, t)` minimizing `sum |R src_i + t - dst_i|^2`, without scale.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose<f64> {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = src.iter().zip(dst).map(|(s, d)| (d - mu_d) * (s - mu_s).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_nearest(u * sign * v_t);
    let t = mu_d - r.rotate(&mu_s);
    Pose::new(r, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub trajectory: Trajectory,
    /// Transform applied on the world side of the estimate.
    pub transform: Pose<f64>,
    pub association: Association,
}

pub const MIN_ALIGNMENT_PAIRS: usize = 3;

/// Least-squares rigid alignment of the estimated positions onto the truth.
///
/// Both inputs are expected to be preprocessed, so their start points
/// already coincide; the identity is then a candidate and alignment can only
/// lower the position RMSE.
pub fn align_to_truth(est: &Trajectory, truth: &Trajectory, max_dt: f64) -> Result<Alignment, EvalError> {
    let association = associate(est, truth, max_dt);
    if association.pairs.len() < MIN_ALIGNMENT_PAIRS {
        return Err(EvalError::TooFewPairs { found: association.pairs.len(), needed: MIN_ALIGNMENT_PAIRS });
    }
    let (src, dst): (Vec<_>, Vec<_>) = association
        .pairs
        .iter()
        .map(|&(i, j)| (est.poses[i].pose.translation, truth.poses[j].pose.translation))
        .unzip();
    let transform = umeyama(&src, &dst);
    Ok(Alignment { trajectory: est.transformed(&transform), transform, association })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

/// Error statistics of one estimate against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub sequence: String,
    /// Truth path length over the associated span.
    pub length_m: f64,
    pub translation_rmse_m: f64,
    pub translation_std_m: f64,
    pub rotation_rmse_deg: f64,
    pub rotation_std_deg: f64,
    pub pairs: usize,
    pub unmatched: usize,
    #[serde(skip)]
    pub series: Vec<ErrorSample>,
}

/// Root mean square and standard deviation about the mean.
fn rmse_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let rmse = (xs.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (rmse, std)
}

/// Per-pair translation distance and geodesic rotation angle, with their
/// RMSE and STD. No alignment is applied here.
pub fn error_metrics(est: &Trajectory, truth: &Trajectory, max_dt: f64) -> Result<ErrorReport, EvalError> {
    let association = associate(est, truth, max_dt);
    if association.pairs.is_empty() {
        return Err(EvalError::TooFewPairs { found: 0, needed: 1 });
    }
    let series: Vec<ErrorSample> = association
        .pairs
        .iter()
        .map(|&(i, j)| {
            let (e, g) = (&est.poses[i].pose, &truth.poses[j].pose);
            ErrorSample {
                t: est.poses[i].t,
                translation_m: (e.translation - g.translation).norm(),
                rotation_deg: e.rotation.local(&g.rotation).norm().to_degrees(),
            }
        })
        .collect();
    let length_m = association
        .pairs
        .windows(2)
        .map(|w| (truth.poses[w[1].1].pose.translation - truth.poses[w[0].1].pose.translation).norm())
        .sum();
    let (translation_rmse_m, translation_std_m) = rmse_std(&series.iter().map(|s| s.translation_m).collect::<Vec<_>>());
    let (rotation_rmse_deg, rotation_std_deg) = rmse_std(&series.iter().map(|s| s.rotation_deg).collect::<Vec<_>>());
    Ok(ErrorReport {
        sequence: String::new(),
        length_m,
        translation_rmse_m,
        translation_std_m,
        rotation_rmse_deg,
        rotation_std_deg,
        pairs: association.pairs.len(),
        unmatched: association.unmatched,
        series,
    })
}

/// Preprocesses, aligns and scores one estimate.
pub fn evaluate(est: &Trajectory, truth: &Trajectory, max_dt: f64, sequence: &str) -> Result<ErrorReport, EvalError> {
    let pre = preprocess(&[est.clone(), truth.clone()])?;
    let aligned = align_to_truth(&pre[0], &pre[1], max_dt)?;
    let mut report = error_metrics(&aligned.trajectory, &pre[1], max_dt)?;
    report.sequence = sequence.to_string();
    Ok(report)
}

#[derive(Serialize)]
struct TableRow<'a> {
    sequence: &'a str,
    length: f64,
    t_rmse: f64,
    t_std: f64,
    r_rmse: f64,
    r_std: f64,
}

/// Comparison table with one row per report.
pub fn write_table_csv<W: Write>(reports: &[ErrorReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(TableRow {
            sequence: &r.sequence,
            length: r.length_m,
            t_rmse: r.translation_rmse_m,
            t_std: r.translation_std_m,
            r_rmse: r.rotation_rmse_deg,
            r_std: r.rotation_std_deg,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series_csv<W: Write>(report: &ErrorReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in &report.series {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct PoseLine {
    t: Stamp,
    /// Row-major rotation matrix.
    rotation: [f64; 9],
    position: [f64; 3],
}

/// Reads poses from JSON lines with `t`, `rotation` and `position` fields;
/// other fields are ignored, so both estimates and ground truth files load.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, EvalError> {
    let io = |e: std::io::Error| EvalError::Io { path: path.to_path_buf(), message: e.to_string() };
    let file = fs::File::open(path).map_err(io)?;
    let mut poses = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| EvalError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: PoseLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let rotation =
            Rotation::from_matrix(Matrix3::from_row_slice(&rec.rotation)).map_err(|e| parse(e.to_string()))?;
        poses.push(StampedPose { t: rec.t.0, pose: Pose::new(rotation, Vector3::from(rec.position)) });
    }
    Trajectory::new(poses).map_err(|e| EvalError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn traj(points: impl IntoIterator<Item = (f64, Pose<f64>)>) -> Trajectory {
        Trajectory::new(points.into_iter().map(|(t, pose)| StampedPose { t, pose }).collect()).unwrap()
    }

    /// A wandering 3-D path, rich enough to fix all rotation axes.
    fn wander(n: usize, dt: f64) -> Trajectory {
        traj((0..n).map(|i| {
            let s = i as f64 * dt;
            let rot = Rotation::exp(&Vector3::new(0.1 * s.sin(), 0.05 * s, 0.3 * s));
            (s, Pose::new(rot, Vector3::new(3.0 * s.cos(), 2.0 * (0.7 * s).sin(), 0.5 * s)))
        }))
    }

    fn random_pose(rng: &mut impl Rng, scale: f64) -> Pose<f64> {
        let v = |rng: &mut dyn rand::RngCore| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Pose::new(Rotation::exp(&(v(rng) * 3.0)), v(rng) * scale)
    }

    #[test]
    fn preprocess_moves_start_to_origin() {
        // [TRIVIAL]
        let tr = traj([(0.0, Pose::new(Rotation::identity(), Vector3::new(3.0, 4.0, 5.0))), (1.0, Pose::identity())]);
        let out = preprocess(&[tr]).unwrap();
        assert_eq!(out[0].poses()[0].pose.translation, Vector3::zeros());
        assert_eq!(out[0].poses()[1].pose.translation, Vector3::new(-3.0, -4.0, -5.0));
    }

    #[test]
    fn preprocess_starts_at_the_later_start() {
        // [TRIVIAL]
        let a = traj((0..10).map(|i| (i as f64, Pose::identity())));
        let b = traj((0..10).map(|i| (2.5 + i as f64, Pose::identity())));
        let out = preprocess(&[a, b]).unwrap();
        assert_eq!(out[0].start(), 3.0);
        assert_eq!(out[1].start(), 2.5);
        assert!(out.iter().all(|t| t.start() >= 2.5));
    }

    #[test]
    fn preprocess_rejects_disjoint_ranges() {
        // [TRIVIAL]
        let a = traj((0..3).map(|i| (i as f64, Pose::identity())));
        let b = traj((0..3).map(|i| (10.0 + i as f64, Pose::identity())));
        assert_eq!(preprocess(&[a, b]), Err(EvalError::NoOverlap));
    }

    #[test]
    fn trajectory_rejects_repeated_timestamps() {
        // [TRIVIAL]
        let poses = vec![StampedPose { t: 1.0, pose: Pose::identity() }; 2];
        assert!(matches!(Trajectory::new(poses), Err(EvalError::Unsorted { index: 1, .. })));
        assert_eq!(Trajectory::new(Vec::new()), Err(EvalError::Empty));
    }

    #[test]
    fn association_respects_tolerance() {
        // [TRIVIAL]
        let est = traj([(0.0, Pose::identity()), (0.52, Pose::identity()), (5.0, Pose::identity())]);
        let truth = traj((0..20).map(|i| (i as f64 * 0.1, Pose::identity())));
        let a = associate(&est, &truth, 0.05);
        assert_eq!(a.pairs, vec![(0, 0), (1, 5)]);
        assert_eq!(a.unmatched, 1);
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        // [TRIVIAL]
        let tr = wander(50, 0.2);
        let a = align_to_truth(&tr, &tr, 0.01).unwrap();
        assert_relative_eq!(a.transform.rotation.matrix(), &Matrix3::identity(), epsilon = 1e-12);
        assert!(a.transform.translation.norm() < 1e-12);
        let r = error_metrics(&a.trajectory, &tr, 0.01).unwrap();
        assert!(r.translation_rmse_m < 1e-12 && r.rotation_rmse_deg < 1e-6);
    }

    #[test]
    fn known_rigid_transform_is_inverted() {
        // [DERIVED] est = G * truth, so alignment must recover G^-1.
        let truth = wander(80, 0.1);
        let g = Pose::new(Rotation::exp(&Vector3::new(0.4, -1.1, 2.0)), Vector3::new(5.0, -3.0, 12.0));
        let est = truth.transformed(&g);
        let a = align_to_truth(&est, &truth, 0.01).unwrap();
        let composed = a.transform.compose(&g);
        assert!(composed.rotation.angle() < 1e-9);
        assert!(composed.translation.norm() < 1e-9);
        let inv = g.inverse();
        assert!((a.transform.translation - inv.translation).norm() < 1e-9);
    }

    #[test]
    fn white_noise_rmse_stays_near_sigma() {
        // [DERIVED] Monte Carlo: isotropic noise whose norm has RMS sigma.
        // Fitting six parameters to N = 1000 points shrinks the residual RMS
        // slightly below sigma, so 1.1 sigma is a safe ceiling.
        let sigma = 0.05;
        let truth = wander(1000, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = traj(truth.poses().iter().map(|p| {
            let n: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            (p.t, Pose::new(p.pose.rotation, p.pose.translation + n * (sigma / 3f64.sqrt())))
        }));
        let a = align_to_truth(&est, &truth, 0.01).unwrap();
        let r = error_metrics(&a.trajectory, &truth, 0.01).unwrap();
        assert!(r.translation_rmse_m <= 1.1 * sigma, "{}", r.translation_rmse_m);
        assert!(r.translation_rmse_m >= 0.9 * sigma, "{}", r.translation_rmse_m);
    }

    #[test]
    fn constant_offset_gives_flat_error() {
        // [TRIVIAL]
        let truth = wander(40, 0.1);
        let est = traj(truth.poses().iter().map(|p| {
            (p.t, Pose::new(p.pose.rotation, p.pose.translation + Vector3::new(0.3, 0.4, 0.0)))
        }));
        let r = error_metrics(&est, &truth, 0.01).unwrap();
        assert_relative_eq!(r.translation_rmse_m, 0.5, epsilon = 1e-12);
        assert!(r.translation_std_m < 1e-12);
        assert_eq!(r.pairs, 40);
    }

    #[test]
    fn constant_yaw_offset_is_ten_degrees() {
        // [DERIVED] the geodesic angle of a pure yaw is the yaw itself.
        let truth = wander(40, 0.1);
        let yaw = Rotation::about_z(10f64.to_radians());
        let est = traj(truth.poses().iter().map(|p| (p.t, Pose::new(p.pose.rotation * yaw, p.pose.translation))));
        let r = error_metrics(&est, &truth, 0.01).unwrap();
        assert_relative_eq!(r.rotation_rmse_deg, 10.0, epsilon = 1e-9);
        assert!(r.rotation_std_deg < 1e-9);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        // [TRIVIAL]
        let tr = wander(2, 0.1);
        assert_eq!(align_to_truth(&tr, &tr, 0.01).unwrap_err(), EvalError::TooFewPairs { found: 2, needed: 3 });
    }

    #[test]
    fn csv_outputs_have_expected_columns() {
        // [TRIVIAL]
        let tr = wander(5, 0.1);
        let mut r = error_metrics(&tr, &tr, 0.01).unwrap();
        r.sequence = "seq".into();
        let mut buf = Vec::new();
        write_table_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sequence,length,t_rmse,t_std,r_rmse,r_std\nseq,"));
        let mut buf = Vec::new();
        write_series_csv(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("series").is_none());
    }

    #[test]
    fn reads_pose_lines_and_ignores_extra_fields() {
        // [TRIVIAL]
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let lines = [
            serde_json::json!({"t": "0.5", "rotation": id, "position": [1.0, 2.0, 3.0], "status": "visual-ok"}),
            serde_json::json!({"t": "0.75", "rotation": id, "position": [1.0, 2.0, 4.0]}),
        ];
        fs::write(&path, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
        let tr = read_trajectory(&path).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.poses()[1].t, 0.75);
        fs::write(&path, "{\"t\": \"1\"}\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(EvalError::Parse { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_invariant_to_a_shared_rigid_motion(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = traj((0..20).map(|i| (i as f64, random_pose(&mut rng, 10.0))));
            let est = traj(truth.poses().iter().map(|p| (p.t, p.pose.compose(&random_pose(&mut rng, 0.3)))));
            let g = random_pose(&mut rng, 100.0);
            let a = error_metrics(&est, &truth, 0.1).unwrap();
            let b = error_metrics(&est.transformed(&g), &truth.transformed(&g), 0.1).unwrap();
            prop_assert!((a.translation_rmse_m - b.translation_rmse_m).abs() < 1e-9);
            prop_assert!((a.rotation_rmse_deg - b.rotation_rmse_deg).abs() < 1e-6);
        }

        #[test]
        fn alignment_never_increases_position_rmse(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = traj((0..15).map(|i| (i as f64, random_pose(&mut rng, 5.0))));
            let est = traj(truth.poses().iter().map(|p| (p.t, p.pose.compose(&random_pose(&mut rng, 1.0)))));
            let pre = preprocess(&[est, truth]).unwrap();
            let raw = error_metrics(&pre[0], &pre[1], 0.1).unwrap();
            let aligned = align_to_truth(&pre[0], &pre[1], 0.1).unwrap();
            let after = error_metrics(&aligned.trajectory, &pre[1], 0.1).unwrap();
            prop_assert!(after.translation_rmse_m <= raw.translation_rmse_m + 1e-12);
        }

        #[test]
        fn std_and_mean_recompose_rmse(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = traj((0..25).map(|i| (i as f64, random_pose(&mut rng, 5.0))));
            let est = traj(truth.poses().iter().map(|p| (p.t, p.pose.compose(&random_pose(&mut rng, 1.0)))));
            let r = error_metrics(&est, &truth, 0.1).unwrap();
            let mean = r.series.iter().map(|s| s.translation_m).sum::<f64>() / r.series.len() as f64;
            prop_assert!((r.translation_std_m.powi(2) + mean * mean - r.translation_rmse_m.powi(2)).abs() < 1e-12);
            prop_assert!(r.translation_std_m <= r.translation_rmse_m + 1e-15);
            let mean = r.series.iter().map(|s| s.rotation_deg).sum::<f64>() / r.series.len() as f64;
            prop_assert!((r.rotation_std_deg.powi(2) + mean * mean - r.rotation_rmse_deg.powi(2)).abs() < 1e-8);
        }
    }
}
