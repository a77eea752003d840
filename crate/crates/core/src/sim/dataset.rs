//! Dataset container and its on-disk JSON-lines format.
//!
//! A dataset directory holds `meta.json` (the scenario config) and one
//! `.jsonl` file per stream. Each record carries `t` as a decimal string so
//! that every platform parses the same bits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::ScenarioConfig;
use super::SimError;
use crate::depth::PressureSample;
use crate::dvl::{DvlBias, DvlSample};
use crate::imu::{ImuBias, ImuSample};
use crate::manifold::Rotation;
use crate::state::NavState;
use crate::visual::{Blob, BlobField, LandmarkObservation};

/// One camera frame: observations plus the analytic image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub t: f64,
    pub degraded: bool,
    pub observations: Vec<LandmarkObservation<f64>>,
    pub field: BlobField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    pub state: NavState<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDataset {
    pub config: ScenarioConfig,
    pub imu: Vec<ImuSample<f64>>,
    pub dvl: Vec<DvlSample<f64>>,
    pub pressure: Vec<PressureSample<f64>>,
    pub frames: Vec<Frame>,
    pub truth: Vec<TruthRecord>,
}

impl SensorDataset {
    /// Ground truth at exactly `t`, if it was recorded.
    pub fn truth_at(&self, t: f64) -> Option<&NavState<f64>> {
        let i = self.truth.partition_point(|r| r.t < t);
        self.truth.get(i).filter(|r| r.t == t).map(|r| &r.state)
    }
}

/// Seconds written with the shortest round-trip decimal representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamp(pub f64);

impl Serialize for Stamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}", self.0))
    }
}

impl<'de> Deserialize<'de> for Stamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let t: f64 = s.parse().map_err(|_| serde::de::Error::custom(format!("invalid timestamp {s:?}")))?;
        if !t.is_finite() {
            return Err(serde::de::Error::custom(format!("non-finite timestamp {s:?}")));
        }
        Ok(Stamp(t))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImuRecord {
    t: Stamp,
    gyro: [f64; 3],
    accel: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DvlRecord {
    t: Stamp,
    vel: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PressureRecord {
    t: Stamp,
    depth: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    landmark: u64,
    pixel: [f64; 2],
    disparity: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: Stamp,
    id: u64,
    degraded: bool,
    observations: Vec<ObservationRecord>,
    background: f64,
    blobs: Vec<Blob>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthLine {
    t: Stamp,
    /// Row-major rotation matrix.
    rotation: [f64; 9],
    position: [f64; 3],
    velocity: [f64; 3],
    bg: [f64; 3],
    ba: [f64; 3],
    bv: [f64; 3],
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn write_lines<R: Serialize>(path: &Path, records: impl Iterator<Item = R>) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Io { path: path.to_path_buf(), message: e.to_string() };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| SimError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a JSON-lines file, checking that `t` strictly increases.
fn read_lines<R: DeserializeOwned>(path: &Path, stamp: impl Fn(&R) -> f64) -> Result<Vec<R>, SimError> {
    let io = |e: std::io::Error| SimError::Io { path: path.to_path_buf(), message: e.to_string() };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(&line).map_err(|e| SimError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let t = stamp(&rec);
        if t <= prev {
            return Err(SimError::OutOfOrder { path: path.to_path_buf(), line: i + 1, t });
        }
        prev = t;
        out.push(rec);
    }
    Ok(out)
}

fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Writes `ds` into `dir`, creating it if needed.
pub fn write_dataset(ds: &SensorDataset, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| SimError::Io { path: dir.to_path_buf(), message: e.to_string() })?;
    let meta = serde_json::to_string_pretty(&ds.config).expect("config serializes");
    let meta_path = file(dir, "meta.json");
    fs::write(&meta_path, meta + "\n").map_err(|e| SimError::Io { path: meta_path, message: e.to_string() })?;

    write_lines(
        &file(dir, "imu.jsonl"),
        ds.imu.iter().map(|s| ImuRecord { t: Stamp(s.t), gyro: arr3(&s.gyro), accel: arr3(&s.accel) }),
    )?;
    write_lines(&file(dir, "dvl.jsonl"), ds.dvl.iter().map(|s| DvlRecord { t: Stamp(s.t), vel: arr3(&s.vel) }))?;
    write_lines(
        &file(dir, "pressure.jsonl"),
        ds.pressure.iter().map(|s| PressureRecord { t: Stamp(s.t), depth: s.depth }),
    )?;
    write_lines(
        &file(dir, "frames.jsonl"),
        ds.frames.iter().map(|f| FrameRecord {
            t: Stamp(f.t),
            id: f.id,
            degraded: f.degraded,
            observations: f
                .observations
                .iter()
                .map(|o| ObservationRecord {
                    landmark: o.landmark_id,
                    pixel: [o.pixel.x, o.pixel.y],
                    disparity: o.disparity,
                })
                .collect(),
            background: f.field.background,
            blobs: f.field.blobs.clone(),
        }),
    )?;
    write_lines(
        &file(dir, "groundtruth.jsonl"),
        ds.truth.iter().map(|r| {
            let m = r.state.rotation.matrix();
            TruthLine {
                t: Stamp(r.t),
                rotation: [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]],
                position: arr3(&r.state.position),
                velocity: arr3(&r.state.velocity),
                bg: arr3(&r.state.imu_bias.bg),
                ba: arr3(&r.state.imu_bias.ba),
                bv: arr3(&r.state.dvl_bias.bv),
            }
        }),
    )
}

/// Reads only the scenario config of a dataset.
pub fn read_meta(dir: &Path) -> Result<ScenarioConfig, SimError> {
    let path = file(dir, "meta.json");
    let text = fs::read_to_string(&path).map_err(|e| SimError::Io { path: path.clone(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| SimError::Parse { path, line: e.line(), message: e.to_string() })
}

/// Reads only the ground truth of a dataset.
pub fn read_groundtruth(dir: &Path) -> Result<Vec<TruthRecord>, SimError> {
    let lines: Vec<TruthLine> = read_lines(&file(dir, "groundtruth.jsonl"), |r: &TruthLine| r.t.0)?;
    Ok(lines
        .into_iter()
        .map(|r| TruthRecord {
            t: r.t.0,
            state: NavState {
                rotation: Rotation::from_matrix_unchecked(Matrix3::from_row_slice(&r.rotation)),
                position: Vector3::from(r.position),
                velocity: Vector3::from(r.velocity),
                imu_bias: ImuBias { bg: Vector3::from(r.bg), ba: Vector3::from(r.ba) },
                dvl_bias: DvlBias { bv: Vector3::from(r.bv) },
            },
        })
        .collect())
}

pub fn read_dataset(dir: &Path) -> Result<SensorDataset, SimError> {
    let config = read_meta(dir)?;
    let imu = read_lines(&file(dir, "imu.jsonl"), |r: &ImuRecord| r.t.0)?
        .into_iter()
        .map(|r| ImuSample { t: r.t.0, gyro: Vector3::from(r.gyro), accel: Vector3::from(r.accel) })
        .collect();
    let dvl = read_lines(&file(dir, "dvl.jsonl"), |r: &DvlRecord| r.t.0)?
        .into_iter()
        .map(|r| DvlSample { t: r.t.0, vel: Vector3::from(r.vel) })
        .collect();
    let pressure = read_lines(&file(dir, "pressure.jsonl"), |r: &PressureRecord| r.t.0)?
        .into_iter()
        .map(|r| PressureSample { t: r.t.0, depth: r.depth })
        .collect();
    let frames = read_lines(&file(dir, "frames.jsonl"), |r: &FrameRecord| r.t.0)?
        .into_iter()
        .map(|r| Frame {
            id: r.id,
            t: r.t.0,
            degraded: r.degraded,
            observations: r
                .observations
                .iter()
                .map(|o| LandmarkObservation {
                    frame_id: r.id,
                    landmark_id: o.landmark,
                    pixel: Vector2::from(o.pixel),
                    disparity: o.disparity,
                })
                .collect(),
            field: BlobField {
                width: config.camera.width,
                height: config.camera.height,
                background: r.background,
                blobs: r.blobs,
            },
        })
        .collect();
    let truth = read_groundtruth(dir)?;
    Ok(SensorDataset { config, imu, dvl, pressure, frames, truth })
}
