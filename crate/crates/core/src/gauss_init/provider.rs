//! Per-pixel Gaussian attribute maps and the providers that produce them.
//!
//! A provider stands in for a feed-forward network run on a pair of
//! loopframe images. Two ship here: a deterministic image-gradient stub and a
//! directory reader for maps exported offline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::InitError;
use crate::gaussian::{color_to_dc, logit, sh_coeff_count};
use crate::image::RgbImage;

/// Per-pixel attribute planes, float32 so that the on-disk form is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMaps {
    pub width: usize,
    pub height: usize,
    /// SH coefficients per channel, DC included.
    pub sh_coeffs: usize,
    /// Camera-frame unit quaternion `(w, x, y, z)`.
    pub rotation: Vec<[f32; 4]>,
    /// Axis-wise shape proportions, positive.
    pub scale_shape: Vec<[f32; 3]>,
    pub opacity_logit: Vec<f32>,
    /// `sh_coeffs * 3` values per pixel, coefficient-major.
    pub sh: Vec<f32>,
    pub valid: Vec<bool>,
}

impl AttributeMaps {
    pub fn invalid(width: usize, height: usize, sh_coeffs: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            sh_coeffs,
            rotation: vec![[1.0, 0.0, 0.0, 0.0]; n],
            scale_shape: vec![[1.0; 3]; n],
            opacity_logit: vec![0.0; n],
            sh: vec![0.0; n * sh_coeffs * 3],
            valid: vec![false; n],
        }
    }

    pub fn pixel_sh(&self, idx: usize) -> &[f32] {
        let stride = self.sh_coeffs * 3;
        &self.sh[idx * stride..(idx + 1) * stride]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn plane_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["rot_w", "rot_x", "rot_y", "rot_z", "scale_0", "scale_1", "scale_2", "opacity"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for k in 0..self.sh_coeffs {
            for ch in ["r", "g", "b"] {
                names.push(format!("sh_{k}_{ch}"));
            }
        }
        names.push("valid".into());
        names
    }

    fn planes(&self) -> Vec<Vec<f32>> {
        let n = self.width * self.height;
        let mut planes = Vec::new();
        for c in 0..4 {
            planes.push(self.rotation.iter().map(|q| q[c]).collect());
        }
        for c in 0..3 {
            planes.push(self.scale_shape.iter().map(|a| a[c]).collect());
        }
        planes.push(self.opacity_logit.clone());
        let stride = self.sh_coeffs * 3;
        for j in 0..stride {
            planes.push((0..n).map(|i| self.sh[i * stride + j]).collect());
        }
        planes.push(self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
        planes
    }

    fn from_planes(header: &MapsHeader, planes: Vec<Vec<f32>>) -> Self {
        let n = header.width * header.height;
        let stride = header.sh_coeffs * 3;
        let mut maps = Self::invalid(header.width, header.height, header.sh_coeffs);
        for i in 0..n {
            maps.rotation[i] = [planes[0][i], planes[1][i], planes[2][i], planes[3][i]];
            maps.scale_shape[i] = [planes[4][i], planes[5][i], planes[6][i]];
            maps.opacity_logit[i] = planes[7][i];
            for j in 0..stride {
                maps.sh[i * stride + j] = planes[8 + j][i];
            }
            maps.valid[i] = planes[8 + stride][i] != 0.0;
        }
        maps
    }
}

/// JSON header describing the binary planes of a map pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsHeader {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub endianness: String,
    pub sh_coeffs: usize,
    pub planes: Vec<String>,
}

pub trait AttributeProvider: Send + Sync {
    /// Maps for the previous and current loopframe images, or `None` when
    /// the provider has no prediction (all pixels invalid).
    fn predict(
        &self,
        prev: (usize, &RgbImage),
        cur: (usize, &RgbImage),
    ) -> Result<Option<(AttributeMaps, AttributeMaps)>, InitError>;
}

/// Provider that never predicts; every point falls through to the geometric
/// branches.
pub struct NoProvider;

impl AttributeProvider for NoProvider {
    fn predict(
        &self,
        _prev: (usize, &RgbImage),
        _cur: (usize, &RgbImage),
    ) -> Result<Option<(AttributeMaps, AttributeMaps)>, InitError> {
        Ok(None)
    }
}

/// Deterministic stand-in: rotation about the optical axis follows the local
/// image gradient, shape is a fixed `(2, 2, 1)` disk, opacity 0.7, DC from
/// the pixel color. Pixels whose 3×3 neighbourhood has less contrast than
/// the threshold are invalid.
#[derive(Clone, Debug)]
pub struct StubProvider {
    pub contrast_threshold: f64,
    pub sh_degree: usize,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.04,
            sh_degree: 1,
        }
    }
}

impl StubProvider {
    pub fn maps_for(&self, rgb: &RgbImage) -> AttributeMaps {
        let (w, h) = (rgb.width, rgb.height);
        let gray = rgb.to_gray();
        let coeffs = sh_coeff_count(self.sh_degree);
        let mut maps = AttributeMaps::invalid(w, h, coeffs);
        let at = |x: isize, y: isize| -> f64 {
            let xc = x.clamp(0, w as isize - 1) as usize;
            let yc = y.clamp(0, h as isize - 1) as usize;
            *gray.get(xc, yc)
        };
        let opacity = logit(0.7) as f32;
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let v = at(xi + dx, yi + dy);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let i = y * w + x;
                if hi - lo < self.contrast_threshold {
                    continue;
                }
                let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
                let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
                let half = 0.5 * gy.atan2(gx);
                maps.rotation[i] = [half.cos() as f32, 0.0, 0.0, half.sin() as f32];
                maps.scale_shape[i] = [2.0, 2.0, 1.0];
                maps.opacity_logit[i] = opacity;
                let c = rgb.get(x, y);
                let dc = color_to_dc(&Vector3::new(c[0], c[1], c[2]));
                let base = i * coeffs * 3;
                for ch in 0..3 {
                    maps.sh[base + ch] = dc[ch] as f32;
                }
                maps.valid[i] = true;
            }
        }
        maps
    }
}

impl AttributeProvider for StubProvider {
    fn predict(
        &self,
        prev: (usize, &RgbImage),
        cur: (usize, &RgbImage),
    ) -> Result<Option<(AttributeMaps, AttributeMaps)>, InitError> {
        if !prev.1.same_size(cur.1) {
            return Err(InitError::DimensionMismatch);
        }
        Ok(Some((self.maps_for(prev.1), self.maps_for(cur.1))))
    }
}

/// Reads maps exported offline: one directory per loopframe pair named
/// `{prev:06}_{cur:06}` holding `header.json`, `prev.bin` and `cur.bin`.
#[derive(Clone, Debug)]
pub struct DirProvider {
    pub root: PathBuf,
}

pub fn pair_dir(root: &Path, prev: usize, cur: usize) -> PathBuf {
    root.join(format!("{prev:06}_{cur:06}"))
}

fn write_planes(path: &Path, planes: &[Vec<f32>]) -> Result<(), InitError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for plane in planes {
        for v in plane {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_planes(path: &Path, header: &MapsHeader) -> Result<Vec<Vec<f32>>, InitError> {
    let raw = fs::read(path)?;
    let n = header.width * header.height;
    let expected = n * header.planes.len() * 4;
    if raw.len() != expected {
        return Err(InitError::MapsFormat(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            raw.len()
        )));
    }
    Ok(raw
        .chunks_exact(n * 4)
        .map(|plane| {
            plane
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

/// Writes a map pair in the layout [`DirProvider`] reads.
pub fn save_maps(
    root: &Path,
    prev_index: usize,
    cur_index: usize,
    prev: &AttributeMaps,
    cur: &AttributeMaps,
) -> Result<PathBuf, InitError> {
    if prev.width != cur.width || prev.height != cur.height || prev.sh_coeffs != cur.sh_coeffs {
        return Err(InitError::DimensionMismatch);
    }
    let dir = pair_dir(root, prev_index, cur_index);
    fs::create_dir_all(&dir)?;
    let header = MapsHeader {
        width: cur.width,
        height: cur.height,
        dtype: "float32".into(),
        endianness: "little".into(),
        sh_coeffs: cur.sh_coeffs,
        planes: cur.plane_names(),
    };
    fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    write_planes(&dir.join("prev.bin"), &prev.planes())?;
    write_planes(&dir.join("cur.bin"), &cur.planes())?;
    Ok(dir)
}

pub fn load_maps(root: &Path, prev_index: usize, cur_index: usize) -> Result<(AttributeMaps, AttributeMaps), InitError> {
    let dir = pair_dir(root, prev_index, cur_index);
    let header: MapsHeader = serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
    if header.dtype != "float32" || header.endianness != "little" {
        return Err(InitError::MapsFormat(format!(
            "unsupported dtype {} / {}",
            header.dtype, header.endianness
        )));
    }
    let expected = AttributeMaps::invalid(0, 0, header.sh_coeffs).plane_names();
    if header.planes != expected {
        return Err(InitError::MapsFormat("unexpected plane order".into()));
    }
    let prev = AttributeMaps::from_planes(&header, read_planes(&dir.join("prev.bin"), &header)?);
    let cur = AttributeMaps::from_planes(&header, read_planes(&dir.join("cur.bin"), &header)?);
    Ok((prev, cur))
}

impl AttributeProvider for DirProvider {
    fn predict(
        &self,
        prev: (usize, &RgbImage),
        cur: (usize, &RgbImage),
    ) -> Result<Option<(AttributeMaps, AttributeMaps)>, InitError> {
        if !pair_dir(&self.root, prev.0, cur.0).exists() {
            return Ok(None);
        }
        let (p, c) = load_maps(&self.root, prev.0, cur.0)?;
        if p.width != cur.1.width || p.height != cur.1.height {
            return Err(InitError::DimensionMismatch);
        }
        Ok(Some((p, c)))
    }
}

/// Parses the `--ffm` option: `stub`, `off` or `dir:<path>`.
pub fn provider_from_spec(spec: &str, sh_degree: usize) -> Result<Box<dyn AttributeProvider>, InitError> {
    match spec {
        "stub" => Ok(Box::new(StubProvider {
            sh_degree,
            ..Default::default()
        })),
        "off" => Ok(Box::new(NoProvider)),
        s if s.starts_with("dir:") => Ok(Box::new(DirProvider {
            root: PathBuf::from(&s[4..]),
        })),
        other => Err(InitError::MapsFormat(format!("unknown provider {other:?}"))),
    }
}
