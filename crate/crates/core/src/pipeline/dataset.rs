//! On-disk dataset layout: trajectories, per-frame images and camera-frame
//! point samples with per-point covariances.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use super::PipelineError;
use crate::geom::{read_trajectory, Camera, Pose, StampedPose};
use crate::image::{read_pfm, read_png, GrayImage, RgbImage};
use crate::ply::{Ply, PlyElement, PlyFormat, ScalarType};
use crate::voxel_pca::WorldPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub camera: Camera,
    /// Frames per second.
    pub rate: f64,
    pub frame_count: usize,
    pub range_sigma: f64,
    /// Coordinate frame of the stored points; always `"camera"`.
    pub points_frame: String,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

/// A point as written to a frame's point file.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFile {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub sigma: f64,
}

pub fn frame_path(root: &Path, k: usize, suffix: &str) -> PathBuf {
    root.join("frames").join(format!("{k:06}_{suffix}"))
}

/// Writes `NNNNNN_points.ply` (ASCII, camera frame) and the matching
/// `NNNNNN_points.cov` holding nine little-endian f64 per point.
pub fn write_points(root: &Path, k: usize, points: &[FrameFile]) -> Result<(), PipelineError> {
    let mut el = PlyElement::new(
        "vertex",
        &[
            ("x", ScalarType::Float),
            ("y", ScalarType::Float),
            ("z", ScalarType::Float),
            ("red", ScalarType::UChar),
            ("green", ScalarType::UChar),
            ("blue", ScalarType::UChar),
        ],
    );
    el.rows = points
        .iter()
        .map(|p| {
            vec![
                p.position.x,
                p.position.y,
                p.position.z,
                f64::from(p.color[0]),
                f64::from(p.color[1]),
                f64::from(p.color[2]),
            ]
        })
        .collect();
    let ply = Ply {
        format: PlyFormat::Ascii,
        comments: vec!["points in the camera frame".into()],
        elements: vec![el],
    };
    ply.write(&frame_path(root, k, "points.ply"))?;
    let mut w = BufWriter::new(fs::File::create(frame_path(root, k, "points.cov"))?);
    for p in points {
        let v = p.sigma * p.sigma;
        let cov = Matrix3::from_diagonal_element(v);
        for c in cov.iter() {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Camera-frame points of frame `k` with their covariances.
pub fn read_points(root: &Path, k: usize) -> Result<Vec<WorldPoint>, PipelineError> {
    let ply = Ply::read(&frame_path(root, k, "points.ply"))?;
    let el = ply.element("vertex")?;
    let idx = |name: &str| el.property_index(name);
    let cols = [idx("x")?, idx("y")?, idx("z")?, idx("red")?, idx("green")?, idx("blue")?];
    let cov_bytes = fs::read(frame_path(root, k, "points.cov"))?;
    if cov_bytes.len() != el.rows.len() * 72 {
        return Err(PipelineError::Dataset(format!(
            "frame {k}: covariance file holds {} bytes for {} points",
            cov_bytes.len(),
            el.rows.len()
        )));
    }
    Ok(el
        .rows
        .iter()
        .zip(cov_bytes.chunks_exact(72))
        .map(|(row, bytes)| {
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            WorldPoint {
                position: Vector3::new(row[cols[0]], row[cols[1]], row[cols[2]]),
                color: Vector3::new(row[cols[3]], row[cols[4]], row[cols[5]]) / 255.0,
                covariance: Matrix3::from_column_slice(&vals),
            }
        })
        .collect())
}

/// One frame loaded from disk.
pub struct RawFrame {
    pub index: usize,
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: GrayImage,
    /// Points in the camera frame.
    pub points: Vec<WorldPoint>,
}

/// Moves camera-frame points into the world with `pose`.
pub fn points_to_world(points: &[WorldPoint], pose: &Pose) -> Vec<WorldPoint> {
    let r = pose.rotation_matrix();
    points
        .iter()
        .map(|p| WorldPoint {
            position: pose.transform_point(&p.position),
            color: p.color,
            covariance: r * p.covariance * r.transpose(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub ground_truth: Vec<StampedPose>,
    pub odometry: Vec<StampedPose>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(root.join("meta.json"))?)?;
        if meta.points_frame != "camera" {
            return Err(PipelineError::Dataset(format!(
                "unsupported points frame {:?}",
                meta.points_frame
            )));
        }
        let ground_truth = read_trajectory(&root.join("poses_gt.tsv"))?;
        let odometry = read_trajectory(&root.join("poses_odom.tsv"))?;
        if ground_truth.len() != meta.frame_count || odometry.len() != meta.frame_count {
            return Err(PipelineError::Dataset(format!(
                "expected {} poses, found {} ground truth and {} odometry",
                meta.frame_count,
                ground_truth.len(),
                odometry.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            ground_truth,
            odometry,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.frame_count == 0
    }

    pub fn camera(&self) -> &Camera {
        &self.meta.camera
    }

    /// Seconds covered by the stream.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.meta.rate
    }

    pub fn load_rgb(&self, k: usize) -> Result<RgbImage, PipelineError> {
        Ok(read_png(&frame_path(&self.root, k, "rgb.png"))?)
    }

    pub fn load_frame(&self, k: usize) -> Result<RawFrame, PipelineError> {
        let cam = self.camera();
        let rgb = self.load_rgb(k)?;
        let depth = read_pfm(&frame_path(&self.root, k, "depth.pfm"))?;
        if rgb.width != cam.width || rgb.height != cam.height || !rgb.same_size(&depth) {
            return Err(PipelineError::Dataset(format!("frame {k}: image size does not match the camera")));
        }
        Ok(RawFrame {
            index: k,
            timestamp: self.odometry[k].timestamp,
            rgb,
            depth,
            points: read_points(&self.root, k)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{synth_generate, NoiseSpec, SynthConfig, TrajectorySpec};

    fn tiny() -> SynthConfig {
        SynthConfig {
            camera: Camera::with_hfov(32, 24, 80f64.to_radians()),
            points_per_frame: 200,
            trajectory: TrajectorySpec {
                laps: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let meta = synth_generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.len(), cfg.frame_count());
        let f = ds.load_frame(1).unwrap();
        assert_eq!(f.rgb.width, 32);
        assert!(!f.points.is_empty() && f.points.len() <= 200);
        let s2 = cfg.noise.range_sigma.powi(2);
        for p in &f.points {
            assert!((p.covariance - Matrix3::from_diagonal_element(s2)).norm() < 1e-15);
            assert!(p.position.z > 0.0);
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny();
        synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        let mut names: Vec<PathBuf> = fs::read_dir(a.path().join("frames"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        names.push(a.path().join("poses_odom.tsv"));
        names.push(a.path().join("poses_gt.tsv"));
        names.push(a.path().join("meta.json"));
        for p in names {
            let rel = p.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    #[test]
    fn zero_drift_dataset_has_odometry_equal_to_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            noise: NoiseSpec {
                range_sigma: 0.0,
                drift_translation: 0.0,
                drift_rotation: 0.0,
            },
            ..tiny()
        };
        synth_generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.odometry, ds.ground_truth);
    }

    #[test]
    fn world_points_follow_the_pose() {
        let pose = Pose::new(
            crate::geom::so3_exp(&Vector3::new(0.1, -0.3, 0.7)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let p = WorldPoint {
            position: Vector3::new(0.5, -0.2, 2.0),
            color: Vector3::zeros(),
            covariance: Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
        };
        let w = points_to_world(std::slice::from_ref(&p), &pose);
        let r = pose.rotation_matrix();
        assert!((w[0].position - (r * p.position + pose.translation)).norm() < 1e-12);
        assert!((w[0].covariance.trace() - 6.0).abs() < 1e-12);
    }
}
