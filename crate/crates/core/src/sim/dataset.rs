//! Dataset directory layout: CSV files with header rows plus a config
//! snapshot. Floats are written with Rust's shortest round-trip formatting
//! so re-reading is lossless and runs are byte-reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{CgParams, NormalizedImagePoint};
use crate::imu_preint::ImuSample;

use super::observe::{FeatureObs, FrameObservations};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}:{line}: {msg}")]
    Schema { file: String, line: usize, msg: String },
    #[error("missing dataset file {0}")]
    Missing(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Ground-truth pose/velocity record at a camera epoch (and IMU epochs in
/// groundtruth.csv, which is written at IMU rate).
#[derive(Debug, Clone, Copy)]
pub struct GtRecord {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
}

/// Per-frame true camera-ground parameters, stored in file units
/// (degrees) so writes and reads are bit-lossless.
#[derive(Debug, Clone, Copy)]
pub struct CgTruthRecord {
    pub t: f64,
    pub h: f64,
    pub theta_deg: f64,
    pub alpha_deg: f64,
}

impl CgTruthRecord {
    pub fn from_cg(t: f64, cg: &CgParams) -> Self {
        Self { t, h: cg.h, theta_deg: cg.theta.to_degrees(), alpha_deg: cg.alpha.to_degrees() }
    }
    pub fn cg(&self) -> CgParams {
        CgParams {
            h: self.h,
            theta: self.theta_deg.to_radians(),
            alpha: self.alpha_deg.to_radians(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameObservations>,
    pub groundtruth: Vec<GtRecord>,
    pub cg_truth: Vec<CgTruthRecord>,
    pub config_text: String,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), DatasetError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| DatasetError::Io(path.display().to_string(), e))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::Io(dir.display().to_string(), e))?;

    let mut s = String::from("t,gx,gy,gz,ax,ay,az\n");
    for r in &ds.imu {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.t, r.gyro.x, r.gyro.y, r.gyro.z, r.accel.x, r.accel.y, r.accel.z
        );
    }
    write_file(dir, "imu.csv", &s)?;

    let mut s =
        String::from("t,frame_id,feature_id,x_norm,y_norm,is_ground_oracle,is_outlier_oracle\n");
    for f in &ds.frames {
        for o in &f.features {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                f.t,
                f.frame_id,
                o.id,
                o.uv.x,
                o.uv.y,
                o.is_ground as u8,
                o.is_outlier as u8
            );
        }
    }
    write_file(dir, "features.csv", &s)?;

    let mut s = String::from("t,px,py,pz,qx,qy,qz,qw,vx,vy,vz\n");
    for r in &ds.groundtruth {
        let q = r.q.quaternion();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.p.x, r.p.y, r.p.z, q.i, q.j, q.k, q.w, r.v.x, r.v.y, r.v.z
        );
    }
    write_file(dir, "groundtruth.csv", &s)?;

    let mut s = String::from("t,h,theta_deg,alpha_deg\n");
    for r in &ds.cg_truth {
        let _ = writeln!(s, "{},{},{},{}", r.t, r.h, r.theta_deg, r.alpha_deg);
    }
    write_file(dir, "cg_truth.csv", &s)?;

    write_file(dir, "config.txt", &ds.config_text)
}

struct CsvReader {
    file: String,
    header: Vec<String>,
}

impl CsvReader {
    fn read(
        dir: &Path,
        name: &str,
        expected: &[&str],
    ) -> Result<(Self, Vec<(usize, Vec<f64>)>), DatasetError> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(DatasetError::Missing(path.display().to_string()));
        }
        let text =
            fs::read_to_string(&path).map_err(|e| DatasetError::Io(path.display().to_string(), e))?;
        let file = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines.next().ok_or_else(|| DatasetError::Schema {
            file: file.clone(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let header: Vec<String> = header_line.split(',').map(|h| h.trim().to_string()).collect();
        if header != expected {
            return Err(DatasetError::Schema {
                file,
                line: 1,
                msg: format!("header {header:?}, expected {expected:?}"),
            });
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut vals = Vec::with_capacity(header.len());
            for cell in line.split(',') {
                let v: f64 = cell.trim().parse().map_err(|e| DatasetError::Schema {
                    file: file.clone(),
                    line: idx + 1,
                    msg: format!("bad number {cell:?}: {e}"),
                })?;
                vals.push(v);
            }
            if vals.len() != header.len() {
                return Err(DatasetError::Schema {
                    file: file.clone(),
                    line: idx + 1,
                    msg: format!("{} fields, expected {}", vals.len(), header.len()),
                });
            }
            rows.push((idx + 1, vals));
        }
        Ok((Self { file, header }, rows))
    }
}

/// Read a standalone groundtruth.csv-format file (any file name).
pub fn read_groundtruth_file(path: &Path) -> Result<Vec<GtRecord>, DatasetError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DatasetError::Missing(path.display().to_string()))?;
    let (_, rows) = CsvReader::read(
        dir,
        name,
        &["t", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz"],
    )?;
    Ok(rows
        .into_iter()
        .map(|(_, v)| GtRecord {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            q: UnitQuaternion::new_unchecked(Quaternion::new(v[7], v[4], v[5], v[6])),
            v: Vector3::new(v[8], v[9], v[10]),
        })
        .collect())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let (_, imu_rows) = CsvReader::read(dir, "imu.csv", &["t", "gx", "gy", "gz", "ax", "ay", "az"])?;
    let imu = imu_rows
        .into_iter()
        .map(|(_, v)| ImuSample {
            t: v[0],
            gyro: Vector3::new(v[1], v[2], v[3]),
            accel: Vector3::new(v[4], v[5], v[6]),
        })
        .collect();

    let (rdr, feat_rows) = CsvReader::read(
        dir,
        "features.csv",
        &["t", "frame_id", "feature_id", "x_norm", "y_norm", "is_ground_oracle", "is_outlier_oracle"],
    )?;
    let mut frames: Vec<FrameObservations> = Vec::new();
    for (line, v) in feat_rows {
        let frame_id = v[1] as u64;
        let obs = FeatureObs {
            id: v[2] as u64,
            uv: NormalizedImagePoint::new(v[3], v[4]),
            is_ground: v[5] != 0.0,
            is_outlier: v[6] != 0.0,
        };
        match frames.last_mut() {
            Some(f) if f.frame_id == frame_id => f.features.push(obs),
            Some(f) if frame_id < f.frame_id => {
                return Err(DatasetError::Schema {
                    file: rdr.file.clone(),
                    line,
                    msg: format!("frame_id {} out of order after {}", frame_id, f.frame_id),
                });
            }
            _ => frames.push(FrameObservations { t: v[0], frame_id, features: vec![obs] }),
        }
    }
    let _ = &rdr.header;

    let (_, gt_rows) = CsvReader::read(
        dir,
        "groundtruth.csv",
        &["t", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz"],
    )?;
    let groundtruth = gt_rows
        .into_iter()
        .map(|(_, v)| GtRecord {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            // Written from unit quaternions with round-trip float formatting;
            // renormalizing here would perturb the last ulp.
            q: UnitQuaternion::new_unchecked(Quaternion::new(v[7], v[4], v[5], v[6])),
            v: Vector3::new(v[8], v[9], v[10]),
        })
        .collect();

    let (_, cg_rows) = CsvReader::read(dir, "cg_truth.csv", &["t", "h", "theta_deg", "alpha_deg"])?;
    let cg_truth = cg_rows
        .into_iter()
        .map(|(_, v)| CgTruthRecord { t: v[0], h: v[1], theta_deg: v[2], alpha_deg: v[3] })
        .collect();

    let cfg_path = dir.join("config.txt");
    let config_text = fs::read_to_string(&cfg_path)
        .map_err(|e| DatasetError::Io(cfg_path.display().to_string(), e))?;

    Ok(Dataset { imu, frames, groundtruth, cg_truth, config_text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Keyframes};
    use crate::sim::trajectory::camera_extrinsics;
    use crate::sim::{generate_trajectory, generate_world, synthesize_imu, synthesize_observations};

    fn small_dataset() -> Dataset {
        let mut cfg = Config::default();
        cfg.sim.duration_s = 3.0;
        cfg.sim.speed_keyframes = Keyframes(vec![(0.0, 5.0)]);
        let traj = generate_trajectory(&cfg.sim).unwrap();
        let world = generate_world(&cfg.sim, &traj).unwrap();
        let ext = camera_extrinsics(&cfg.sim.cg_true(), cfg.sim.lever_arm_x_m);
        let imu = synthesize_imu(&traj, &cfg.sim);
        let out = synthesize_observations(&world, &traj, &cfg.sim, &ext);
        let groundtruth = traj
            .states
            .iter()
            .map(|s| GtRecord { t: s.t, p: s.p, q: s.q, v: s.v })
            .collect();
        Dataset {
            imu,
            frames: out.frames,
            groundtruth,
            cg_truth: out
                .cg_truth
                .iter()
                .map(|(t, cg)| CgTruthRecord::from_cg(*t, cg))
                .collect(),
            config_text: cfg.to_text(),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();

        assert_eq!(ds.imu.len(), back.imu.len());
        for (a, b) in ds.imu.iter().zip(&back.imu) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            assert_eq!(a.gyro, b.gyro);
            assert_eq!(a.accel, b.accel);
        }
        assert_eq!(ds.frames.len(), back.frames.len());
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.features.len(), b.features.len());
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x.id, y.id);
                assert_eq!(x.uv.x.to_bits(), y.uv.x.to_bits());
                assert_eq!(x.uv.y.to_bits(), y.uv.y.to_bits());
                assert_eq!(x.is_ground, y.is_ground);
                assert_eq!(x.is_outlier, y.is_outlier);
            }
        }
        assert_eq!(ds.groundtruth.len(), back.groundtruth.len());
        for (a, b) in ds.groundtruth.iter().zip(&back.groundtruth) {
            assert_eq!(a.p, b.p);
            assert_eq!(a.q.quaternion().coords, b.q.quaternion().coords);
        }
        assert_eq!(ds.config_text, back.config_text);

        // Re-writing reproduces the bytes exactly.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back).unwrap();
        for name in ["imu.csv", "features.csv", "groundtruth.csv", "cg_truth.csv", "config.txt"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn schema_errors_name_file_and_line() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("imu.csv");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("not,a,valid,row,x,y,z\n");
        std::fs::write(&path, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("imu.csv"), "{msg}");
        assert!(msg.contains("bad number"), "{msg}");
    }

    #[test]
    fn missing_file_reported() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("cg_truth.csv")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Missing(_))));
    }
}
