//! Dense row-major images plus PNG (8-bit RGB) and PFM (float32) I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("pfm: {0}")]
    Pfm(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type GrayImage = Image<f64>;
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl RgbImage {
    pub fn to_gray(&self) -> GrayImage {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
                .collect(),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(img.len() * 3);
    for c in &img.data {
        buf.extend_from_slice(&[to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer size matches dimensions");
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbImage, ImageError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Writes a single-channel little-endian PFM. Rows are stored bottom-to-top
/// as the format requires.
pub fn write_pfm(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            out.write_all(&(*img.get(x, y) as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<GrayImage, ImageError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    let mut line = String::new();
    while header.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(ImageError::Pfm("truncated header".into()));
        }
        for tok in line.split_whitespace() {
            header.push(tok.to_string());
        }
    }
    if header[0] != "Pf" {
        return Err(ImageError::Pfm(format!(
            "unsupported magic {:?}, only single-channel Pf",
            header[0]
        )));
    }
    let parse = |s: &str| -> Result<usize, ImageError> {
        s.parse().map_err(|_| ImageError::Pfm(format!("bad dimension {s}")))
    };
    let (w, h) = (parse(&header[1])?, parse(&header[2])?);
    let scale: f64 = header
        .get(3)
        .ok_or_else(|| ImageError::Pfm("missing scale".into()))?
        .parse()
        .map_err(|_| ImageError::Pfm("bad scale".into()))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * 4];
    r.read_exact(&mut raw)?;
    let mut img = Image::filled(w, h, 0.0);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (x, yr) = (i % w, i / w);
        *img.get_mut(x, h - 1 - yr) = v as f64;
    }
    Ok(img)
}
