//! Minimal PLY reader and writer for scalar-property elements, in ASCII or
//! binary little-endian encoding.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("malformed PLY body: {0}")]
    Body(String),
    #[error("missing element or property `{0}`")]
    Missing(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::Char,
            "uchar" | "uint8" => Self::UChar,
            "short" | "int16" => Self::Short,
            "ushort" | "uint16" => Self::UShort,
            "int" | "int32" => Self::Int,
            "uint" | "uint32" => Self::UInt,
            "float" | "float32" => Self::Float,
            "double" | "float64" => Self::Double,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Char => "char",
            Self::UChar => "uchar",
            Self::Short => "short",
            Self::UShort => "ushort",
            Self::Int => "int",
            Self::UInt => "uint",
            Self::Float => "float",
            Self::Double => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::Char | Self::UChar => 1,
            Self::Short | Self::UShort => 2,
            Self::Int | Self::UInt | Self::Float => 4,
            Self::Double => 8,
        }
    }

    fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::Char => out.extend_from_slice(&(v as i8).to_le_bytes()),
            Self::UChar => out.extend_from_slice(&(v as u8).to_le_bytes()),
            Self::Short => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::UShort => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::Int => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::UInt => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::Double => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::Char => b[0] as i8 as f64,
            Self::UChar => b[0] as f64,
            Self::Short => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::UShort => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::Int => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::UInt => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::Float => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::Double => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            Self::Float => format!("{}", v as f32),
            Self::Double => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

/// One element block; every row holds one value per property.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyElement {
    pub name: String,
    pub properties: Vec<(String, ScalarType)>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyElement {
    pub fn new(name: &str, properties: &[(&str, ScalarType)]) -> Self {
        Self {
            name: name.into(),
            properties: properties.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
            rows: Vec::new(),
        }
    }

    pub fn property_index(&self, name: &str) -> Result<usize, PlyError> {
        self.properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| PlyError::Missing(format!("{}.{name}", self.name)))
    }

    pub fn has_property(&self, name: &str) -> bool {
        self.properties.iter().any(|(n, _)| n == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ply {
    pub format: PlyFormat,
    pub comments: Vec<String>,
    pub elements: Vec<PlyElement>,
}

impl Ply {
    pub fn element(&self, name: &str) -> Result<&PlyElement, PlyError> {
        self.elements
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| PlyError::Missing(name.into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let fmt = match self.format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        };
        let mut header = format!("ply\nformat {fmt} 1.0\n");
        for c in &self.comments {
            header.push_str(&format!("comment {c}\n"));
        }
        for e in &self.elements {
            header.push_str(&format!("element {} {}\n", e.name, e.rows.len()));
            for (n, t) in &e.properties {
                header.push_str(&format!("property {} {n}\n", t.name()));
            }
        }
        header.push_str("end_header\n");
        out.extend_from_slice(header.as_bytes());
        for e in &self.elements {
            for row in &e.rows {
                match self.format {
                    PlyFormat::BinaryLittleEndian => {
                        for ((_, t), v) in e.properties.iter().zip(row) {
                            t.write_le(*v, &mut out);
                        }
                    }
                    PlyFormat::Ascii => {
                        let line: Vec<String> =
                            e.properties.iter().zip(row).map(|((_, t), v)| t.format_ascii(*v)).collect();
                        out.extend_from_slice(line.join(" ").as_bytes());
                        out.push(b'\n');
                    }
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), PlyError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PlyError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::from_reader(&mut r)
    }

    pub fn from_reader(r: &mut impl BufRead) -> Result<Self, PlyError> {
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String, PlyError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(PlyError::Header("unexpected end of file".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        if next_line(r)? != "ply" {
            return Err(PlyError::Header("missing magic".into()));
        }
        let mut format = None;
        let mut comments = Vec::new();
        let mut elements: Vec<(PlyElement, usize)> = Vec::new();
        loop {
            let l = next_line(r)?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.as_slice() {
                ["end_header"] => break,
                ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
                ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
                ["format", other, ..] => return Err(PlyError::Header(format!("unsupported format {other}"))),
                ["comment", ..] => comments.push(l.trim_start_matches("comment").trim().to_string()),
                ["obj_info", ..] => {}
                ["element", name, count] => {
                    let n = count.parse().map_err(|_| PlyError::Header(format!("bad count in `{l}`")))?;
                    elements.push((PlyElement::new(name, &[]), n));
                }
                ["property", "list", ..] => return Err(PlyError::Header("list properties are not supported".into())),
                ["property", ty, name] => {
                    let t = ScalarType::parse(ty).ok_or_else(|| PlyError::Header(format!("unknown type {ty}")))?;
                    let (e, _) = elements
                        .last_mut()
                        .ok_or_else(|| PlyError::Header("property before element".into()))?;
                    e.properties.push((name.to_string(), t));
                }
                _ => return Err(PlyError::Header(format!("unrecognized line `{l}`"))),
            }
        }
        let format = format.ok_or_else(|| PlyError::Header("missing format".into()))?;
        let mut out = Vec::with_capacity(elements.len());
        match format {
            PlyFormat::BinaryLittleEndian => {
                for (mut e, n) in elements {
                    let stride: usize = e.properties.iter().map(|(_, t)| t.size()).sum();
                    let mut buf = vec![0u8; stride * n];
                    r.read_exact(&mut buf)
                        .map_err(|_| PlyError::Body(format!("element {} truncated", e.name)))?;
                    e.rows = buf
                        .chunks_exact(stride.max(1))
                        .take(n)
                        .map(|chunk| {
                            let mut off = 0;
                            e.properties
                                .iter()
                                .map(|(_, t)| {
                                    let v = t.read_le(&chunk[off..]);
                                    off += t.size();
                                    v
                                })
                                .collect()
                        })
                        .collect();
                    out.push(e);
                }
            }
            PlyFormat::Ascii => {
                let mut rest = String::new();
                r.read_to_string(&mut rest)?;
                let mut lines = rest.lines().filter(|l| !l.trim().is_empty());
                for (mut e, n) in elements {
                    for _ in 0..n {
                        let l = lines
                            .next()
                            .ok_or_else(|| PlyError::Body(format!("element {} truncated", e.name)))?;
                        let row: Vec<f64> = l
                            .split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<Result<_, _>>()
                            .map_err(|_| PlyError::Body(format!("bad number in `{l}`")))?;
                        if row.len() != e.properties.len() {
                            return Err(PlyError::Body(format!("expected {} values in `{l}`", e.properties.len())));
                        }
                        e.rows.push(row);
                    }
                    out.push(e);
                }
            }
        }
        Ok(Self {
            format,
            comments,
            elements: out,
        })
    }
}
