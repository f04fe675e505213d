//! CAD model loading: PLY (ASCII and binary little-endian) and OBJ vertex
//! lists, with keypoint annotations from a JSON sidecar.
//!
//! Sidecar schema: `{"keypoints": [[x,y,z], ...], "diameter": <optional>}`.
//! When the diameter is absent it is computed as the max pairwise distance
//! over the loaded vertices.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3xX, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{max_pairwise_distance, CadModel, KeypointSet};

#[derive(Debug, Deserialize)]
pub struct KeypointSidecar {
    pub keypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub diameter: Option<f64>,
}

pub fn load_keypoint_sidecar(path: &Path) -> Result<KeypointSidecar> {
    let text = fs::read_to_string(path)?;
    let sidecar: KeypointSidecar = serde_json::from_str(&text)?;
    if sidecar.keypoints.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "sidecar {} lists {} keypoints, need at least 3",
            path.display(),
            sidecar.keypoints.len()
        )));
    }
    Ok(sidecar)
}

/// Loads vertex positions from `.ply` or `.obj`.
pub fn load_vertices(path: &Path) -> Result<Matrix3xX<f64>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "ply" => load_ply_vertices(path),
        "obj" => load_obj_vertices(path),
        other => Err(Error::InvalidInput(format!(
            "unsupported model format '{other}' ({})",
            path.display()
        ))),
    }
}

/// Loads a CAD model from a mesh file plus its keypoint sidecar.
pub fn load_cad_model(model_path: &Path, sidecar_path: &Path) -> Result<CadModel> {
    let vertices = load_vertices(model_path)?;
    let sidecar = load_keypoint_sidecar(sidecar_path)?;
    let kps = KeypointSet::from_columns(
        &sidecar
            .keypoints
            .iter()
            .map(|k| Vector3::new(k[0], k[1], k[2]))
            .collect::<Vec<_>>(),
    )?;
    match sidecar.diameter {
        Some(d) => CadModel::with_diameter(vertices, kps, d),
        None => {
            let d = max_pairwise_distance(&vertices)?;
            CadModel::with_diameter(vertices, kps, d)
        }
    }
}

fn load_obj_vertices(path: &Path) -> Result<Matrix3xX<f64>> {
    let text = fs::read_to_string(path)?;
    let mut cols = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            *c = parts
                .next()
                .ok_or_else(|| {
                    Error::Parse(format!("obj line {}: truncated vertex", lineno + 1))
                })?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("obj line {}: {e}", lineno + 1)))?;
        }
        cols.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    if cols.is_empty() {
        return Err(Error::Parse(format!(
            "no vertices found in {}",
            path.display()
        )));
    }
    Ok(Matrix3xX::from_columns(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            other => return Err(Error::Parse(format!("unknown ply scalar type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => {
                i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::U32 => {
                u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F32 => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            ScalarType::F64 => f64::from_le_bytes([
                bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
            ]),
        }
    }
}

fn load_ply_vertices(path: &Path) -> Result<Matrix3xX<f64>> {
    let data = fs::read(path)?;
    // Header is ASCII regardless of the body format.
    let header_end = find_header_end(&data)
        .ok_or_else(|| Error::Parse(format!("{}: missing end_header", path.display())))?;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| Error::Parse(format!("{}: header is not valid UTF-8", path.display())))?;

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Parse(format!(
            "{}: missing 'ply' magic",
            path.display()
        )));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties: Vec<(ScalarType, String)> = Vec::new();
    let mut in_vertex_element = false;
    let mut saw_prior_element = false;
    for line in lines {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                format = Some(match parts.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::Parse(format!(
                            "{}: unsupported ply format {:?}",
                            path.display(),
                            other
                        )))
                    }
                });
            }
            Some("element") => {
                let name = parts.next().unwrap_or("");
                if name == "vertex" {
                    if saw_prior_element {
                        return Err(Error::Parse(format!(
                            "{}: vertex element must come first",
                            path.display()
                        )));
                    }
                    in_vertex_element = true;
                    vertex_count = Some(
                        parts
                            .next()
                            .and_then(|v| v.parse::<usize>().ok())
                            .ok_or_else(|| {
                                Error::Parse(format!("{}: bad vertex count", path.display()))
                            })?,
                    );
                } else {
                    in_vertex_element = false;
                    if vertex_count.is_none() {
                        saw_prior_element = true;
                    }
                }
            }
            Some("property") if in_vertex_element => {
                let ty = parts.next().unwrap_or("");
                if ty == "list" {
                    return Err(Error::Parse(format!(
                        "{}: list property on vertex element is unsupported",
                        path.display()
                    )));
                }
                let name = parts.next().unwrap_or("").to_string();
                properties.push((ScalarType::parse(ty)?, name));
            }
            _ => {}
        }
    }
    let format = format
        .ok_or_else(|| Error::Parse(format!("{}: missing format line", path.display())))?;
    let count = vertex_count
        .ok_or_else(|| Error::Parse(format!("{}: missing vertex element", path.display())))?;
    if count == 0 {
        return Err(Error::Parse(format!("{}: zero vertices", path.display())));
    }
    let coord_idx: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            properties
                .iter()
                .position(|(_, name)| name == axis)
                .ok_or_else(|| {
                    Error::Parse(format!("{}: vertex property '{axis}' missing", path.display()))
                })
        })
        .collect::<Result<_>>()?;

    let body = &data[header_end..];
    let mut cols = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| {
                Error::Parse(format!("{}: ascii body is not UTF-8", path.display()))
            })?;
            for line in text.lines().filter(|l| !l.trim().is_empty()).take(count) {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < properties.len() {
                    return Err(Error::Parse(format!(
                        "{}: short vertex line '{line}'",
                        path.display()
                    )));
                }
                let mut c = [0.0; 3];
                for (k, &pi) in coord_idx.iter().enumerate() {
                    c[k] = fields[pi]
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
                }
                cols.push(Vector3::new(c[0], c[1], c[2]));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = properties.iter().map(|(t, _)| t.size()).sum();
            let offsets: Vec<usize> = properties
                .iter()
                .scan(0usize, |acc, (t, _)| {
                    let off = *acc;
                    *acc += t.size();
                    Some(off)
                })
                .collect();
            if body.len() < stride * count {
                return Err(Error::Parse(format!(
                    "{}: binary body truncated ({} < {} bytes)",
                    path.display(),
                    body.len(),
                    stride * count
                )));
            }
            for v in 0..count {
                let base = v * stride;
                let mut c = [0.0; 3];
                for (k, &pi) in coord_idx.iter().enumerate() {
                    let (ty, _) = properties[pi];
                    c[k] = ty.read_le(&body[base + offsets[pi]..]);
                }
                cols.push(Vector3::new(c[0], c[1], c[2]));
            }
        }
    }
    if cols.len() != count {
        return Err(Error::Parse(format!(
            "{}: expected {count} vertices, read {}",
            path.display(),
            cols.len()
        )));
    }
    Ok(Matrix3xX::from_columns(&cols))
}

fn find_header_end(data: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let pos = data
        .windows(needle.len())
        .position(|w| w == needle)?;
    // Skip to just past the newline terminating the end_header line.
    let mut end = pos + needle.len();
    while end < data.len() && data[end] != b'\n' {
        end += 1;
    }
    Some((end + 1).min(data.len()))
}
