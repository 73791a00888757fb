//! Splat checkpoint: a binary little-endian PLY in the usual splat attribute
//! layout plus a JSON sidecar holding segment metadata and configuration.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SegmentMeta;
use crate::gaussian::{sh_coeff_count, Gaussian, InitSource};
use crate::ply::{Ply, PlyElement, PlyError, PlyFormat, ScalarType};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported f_rest count {0}")]
    ShLayout(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sh_degree: usize,
    pub gaussian_count: usize,
    pub segments: Vec<SegmentMeta>,
    /// Index of the first Gaussian of each segment in the PLY, plus the total.
    pub segment_offsets: Vec<usize>,
    pub config: serde_json::Value,
}

pub fn sidecar_path(ply: &Path) -> PathBuf {
    ply.with_extension("json")
}

fn source_code(s: InitSource) -> f64 {
    match s {
        InitSource::Model => 0.0,
        InitSource::Pca => 1.0,
        InitSource::Heuristic => 2.0,
    }
}

fn source_from(code: f64) -> InitSource {
    match code as u8 {
        0 => InitSource::Model,
        1 => InitSource::Pca,
        _ => InitSource::Heuristic,
    }
}

/// Builds the PLY document. All Gaussians must share one SH degree.
pub fn gaussians_to_ply(gaussians: &[Gaussian], sh_degree: usize) -> Ply {
    let n_rest = sh_coeff_count(sh_degree) - 1;
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * n_rest).map(|k| format!("f_rest_{k}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut props: Vec<(&str, ScalarType)> = names.iter().map(|n| (n.as_str(), ScalarType::Float)).collect();
    props.push(("segment_id", ScalarType::UInt));
    props.push(("source", ScalarType::UChar));
    props.push(("frozen", ScalarType::UChar));
    let mut e = PlyElement::new("vertex", &props);
    e.rows = gaussians
        .iter()
        .map(|g| {
            assert_eq!(g.sh.len(), n_rest + 1, "mixed SH degrees");
            let mut row = Vec::with_capacity(props.len());
            row.extend_from_slice(g.mean.as_slice());
            row.extend_from_slice(&[0.0, 0.0, 0.0]);
            row.extend_from_slice(g.sh[0].as_slice());
            for c in 0..3 {
                for k in 1..=n_rest {
                    row.push(g.sh[k][c]);
                }
            }
            row.push(g.opacity_logit);
            row.extend_from_slice(g.log_scale.as_slice());
            let q = g.rotation.quaternion();
            row.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            row.push(g.segment_id as f64);
            row.push(source_code(g.source));
            row.push(if g.frozen { 1.0 } else { 0.0 });
            row
        })
        .collect();
    Ply {
        format: PlyFormat::BinaryLittleEndian,
        comments: vec!["splatslam map".into()],
        elements: vec![e],
    }
}

/// Reads Gaussians from any PLY with the splat attribute layout. Optional
/// bookkeeping properties default to segment 0, heuristic source, unfrozen.
pub fn gaussians_from_ply(ply: &Ply) -> Result<Vec<Gaussian>, CheckpointError> {
    let e = ply.element("vertex")?;
    let idx = |n: &str| e.property_index(n);
    let n_rest_total = e.properties.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    let n_rest = n_rest_total / 3;
    if n_rest_total % 3 != 0 || ![0, 3, 8, 15].contains(&n_rest) {
        return Err(CheckpointError::ShLayout(n_rest_total));
    }
    let pos = [idx("x")?, idx("y")?, idx("z")?];
    let dc = [idx("f_dc_0")?, idx("f_dc_1")?, idx("f_dc_2")?];
    let rest: Vec<usize> = (0..n_rest_total)
        .map(|k| idx(&format!("f_rest_{k}")))
        .collect::<Result<_, _>>()?;
    let op = idx("opacity")?;
    let sc = [idx("scale_0")?, idx("scale_1")?, idx("scale_2")?];
    let rot = [idx("rot_0")?, idx("rot_1")?, idx("rot_2")?, idx("rot_3")?];
    let seg = e.has_property("segment_id").then(|| idx("segment_id")).transpose()?;
    let src = e.has_property("source").then(|| idx("source")).transpose()?;
    let frz = e.has_property("frozen").then(|| idx("frozen")).transpose()?;
    Ok(e
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut sh = vec![Vector3::new(r[dc[0]], r[dc[1]], r[dc[2]])];
            for k in 0..n_rest {
                sh.push(Vector3::new(r[rest[k]], r[rest[n_rest + k]], r[rest[2 * n_rest + k]]));
            }
            Gaussian {
                mean: Vector3::new(r[pos[0]], r[pos[1]], r[pos[2]]),
                log_scale: Vector3::new(r[sc[0]], r[sc[1]], r[sc[2]]),
                rotation: UnitQuaternion::from_quaternion(Quaternion::new(r[rot[0]], r[rot[1]], r[rot[2]], r[rot[3]])),
                opacity_logit: r[op],
                sh,
                segment_id: seg.map_or(0, |k| r[k] as u32),
                frozen: frz.is_some_and(|k| r[k] != 0.0),
                source: src.map_or(InitSource::Heuristic, |k| source_from(r[k])),
                id: i as u64,
            }
        })
        .collect())
}

pub fn write_checkpoint(
    path: &Path,
    gaussians: &[Gaussian],
    segments: &[SegmentMeta],
    sh_degree: usize,
    config: serde_json::Value,
) -> Result<(), CheckpointError> {
    gaussians_to_ply(gaussians, sh_degree).write(path)?;
    let mut offsets: Vec<usize> = segments
        .iter()
        .map(|s| gaussians.partition_point(|g| g.segment_id < s.id))
        .collect();
    offsets.push(gaussians.len());
    let side = Sidecar {
        sh_degree,
        gaussian_count: gaussians.len(),
        segments: segments.to_vec(),
        segment_offsets: offsets,
        config,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Loads the Gaussians and, when present, the sidecar.
pub fn read_checkpoint(path: &Path) -> Result<(Vec<Gaussian>, Option<Sidecar>), CheckpointError> {
    let gaussians = gaussians_from_ply(&Ply::read(path)?)?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        Some(serde_json::from_slice(&fs::read(side)?)?)
    } else {
        None
    };
    Ok((gaussians, sidecar))
}
