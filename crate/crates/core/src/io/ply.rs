//! PLY storage for featurized point clouds.
//!
//! The on-disk layout is one `vertex` element with `float` (32-bit)
//! properties `x, y, z, opacity_logit, f_0 .. f_{K-1}`, written as binary
//! little-endian. Two header comments record the feature dimension and the
//! shared footprint radius. The reader additionally accepts ASCII files and
//! bare `x, y, z` clouds from external tools, which load with zero features
//! and the default opacity logit.

use std::io::Write;
use std::path::Path;

use crate::cloud::{CloudError, FeaturizedPointCloud, DEFAULT_OPACITY_LOGIT};

/// Feature dimension assumed for external clouds that carry no features.
pub const DEFAULT_FEATURE_DIM: usize = 27;
/// Footprint radius assumed when the file records none.
pub const DEFAULT_RADIUS: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("ply i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("ply parse at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported ply feature: {0}")]
    UnsupportedProperty(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

fn parse_err(offset: usize, message: impl Into<String>) -> PlyError {
    PlyError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    X,
    Y,
    Z,
    OpacityLogit,
    Feature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    BinaryLittleEndian,
    Ascii,
}

/// Writes a cloud in the crate's canonical binary little-endian layout.
/// Writing is deterministic: the same cloud always produces the same bytes.
pub fn write_ply(path: impl AsRef<Path>, cloud: &FeaturizedPointCloud) -> Result<(), PlyError> {
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment feature_dim {}\n", cloud.feature_dim()));
    header.push_str(&format!("comment radius {}\n", cloud.radius()));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "opacity_logit"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for k in 0..cloud.feature_dim() {
        header.push_str(&format!("property float f_{k}\n"));
    }
    header.push_str("end_header\n");

    let mut payload =
        Vec::with_capacity(header.len() + cloud.len() * (4 + cloud.feature_dim()) * 4);
    payload.extend_from_slice(header.as_bytes());
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        for value in [p.x, p.y, p.z, cloud.opacity_logits()[i]] {
            payload.extend_from_slice(&(value as f32).to_le_bytes());
        }
        for &f in cloud.feature(i) {
            payload.extend_from_slice(&(f as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a cloud written by [`write_ply`], or a plain `x, y, z` PLY from an
/// external tool (loaded with zero features, dimension
/// [`DEFAULT_FEATURE_DIM`], and the default opacity logit).
pub fn read_ply(path: impl AsRef<Path>) -> Result<FeaturizedPointCloud, PlyError> {
    let bytes = std::fs::read(path)?;
    let mut offset = 0usize;

    let next_line = |offset: &mut usize| -> Result<(usize, String), PlyError> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(start, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        *offset = start + end + 1;
        Ok((start, line))
    };

    let (at, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(parse_err(at, "missing ply magic"));
    }

    let mut format = None;
    let mut vertex_count: Option<usize> = None;
    let mut comment_feature_dim: Option<usize> = None;
    let mut radius = DEFAULT_RADIUS;
    let mut slots: Vec<Slot> = Vec::new();
    let mut in_vertex_element = false;

    loop {
        let (at, line) = next_line(&mut offset)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, "1.0"] => {
                format = Some(match *fmt {
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    "ascii" => Format::Ascii,
                    other => {
                        return Err(PlyError::UnsupportedProperty(format!(
                            "format {other}"
                        )))
                    }
                });
            }
            ["comment", "feature_dim", n] => {
                comment_feature_dim =
                    Some(n.parse().map_err(|_| {
                        parse_err(at, format!("bad feature_dim comment: {n}"))
                    })?);
            }
            ["comment", "radius", r] => {
                radius = r
                    .parse()
                    .map_err(|_| parse_err(at, format!("bad radius comment: {r}")))?;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count =
                    Some(n.parse().map_err(|_| {
                        parse_err(at, format!("bad vertex count: {n}"))
                    })?);
                in_vertex_element = true;
            }
            ["element", name, ..] => {
                return Err(PlyError::UnsupportedProperty(format!("element {name}")));
            }
            ["property", ty, name] => {
                if !in_vertex_element {
                    return Err(parse_err(at, "property before any element"));
                }
                if *ty != "float" && *ty != "float32" {
                    return Err(PlyError::UnsupportedProperty(format!(
                        "property type {ty} for {name}"
                    )));
                }
                let slot = match *name {
                    "x" => Slot::X,
                    "y" => Slot::Y,
                    "z" => Slot::Z,
                    "opacity_logit" => Slot::OpacityLogit,
                    other => {
                        if let Some(idx) = other.strip_prefix("f_") {
                            Slot::Feature(idx.parse().map_err(|_| {
                                PlyError::UnsupportedProperty(format!("property {other}"))
                            })?)
                        } else {
                            return Err(PlyError::UnsupportedProperty(format!(
                                "property {other}"
                            )));
                        }
                    }
                };
                slots.push(slot);
            }
            ["property", ..] => {
                return Err(PlyError::UnsupportedProperty(format!(
                    "list property: {line}"
                )));
            }
            [] => {}
            _ => return Err(parse_err(at, format!("unrecognized header line: {line}"))),
        }
    }

    let format = format.ok_or_else(|| parse_err(0, "header missing format line"))?;
    let n = vertex_count.ok_or_else(|| parse_err(0, "header missing vertex element"))?;
    for required in [Slot::X, Slot::Y, Slot::Z] {
        if !slots.contains(&required) {
            return Err(parse_err(0, "vertex element missing x/y/z properties"));
        }
    }

    let feature_indices: Vec<usize> = slots
        .iter()
        .filter_map(|s| match s {
            Slot::Feature(k) => Some(*k),
            _ => None,
        })
        .collect();
    let feature_dim = if feature_indices.is_empty() {
        comment_feature_dim.unwrap_or(DEFAULT_FEATURE_DIM)
    } else {
        let max = *feature_indices.iter().max().unwrap();
        let dim = max + 1;
        let mut seen = vec![false; dim];
        for k in &feature_indices {
            seen[*k] = true;
        }
        if feature_indices.len() != dim || seen.iter().any(|s| !s) {
            return Err(parse_err(0, "feature properties must be contiguous f_0.."));
        }
        if let Some(c) = comment_feature_dim {
            if c != dim {
                return Err(parse_err(
                    0,
                    format!("feature_dim comment {c} disagrees with {dim} f_* properties"),
                ));
            }
        }
        dim
    };

    let mut positions = vec![0.0f64; n * 3];
    let mut features = vec![0.0f64; n * feature_dim];
    let mut logits = vec![DEFAULT_OPACITY_LOGIT; n];

    let mut store = |row: usize, slot: Slot, value: f64| match slot {
        Slot::X => positions[row * 3] = value,
        Slot::Y => positions[row * 3 + 1] = value,
        Slot::Z => positions[row * 3 + 2] = value,
        Slot::OpacityLogit => logits[row] = value,
        Slot::Feature(k) => features[row * feature_dim + k] = value,
    };

    match format {
        Format::BinaryLittleEndian => {
            let need = n * slots.len() * 4;
            if bytes.len() - offset < need {
                return Err(parse_err(
                    bytes.len(),
                    format!("payload truncated: need {need} bytes after header"),
                ));
            }
            for row in 0..n {
                for &slot in &slots {
                    let raw: [u8; 4] = bytes[offset..offset + 4].try_into().unwrap();
                    store(row, slot, f32::from_le_bytes(raw) as f64);
                    offset += 4;
                }
            }
        }
        Format::Ascii => {
            let text = std::str::from_utf8(&bytes[offset..])
                .map_err(|_| parse_err(offset, "ascii payload is not valid UTF-8"))?;
            let mut tokens = text.split_whitespace();
            for row in 0..n {
                for &slot in &slots {
                    let token = tokens.next().ok_or_else(|| {
                        parse_err(bytes.len(), format!("ascii payload ends at row {row}"))
                    })?;
                    let value: f32 = token.parse().map_err(|_| {
                        parse_err(offset, format!("bad ascii value: {token}"))
                    })?;
                    store(row, slot, value as f64);
                }
            }
        }
    }

    Ok(FeaturizedPointCloud::from_parts(
        positions,
        features,
        logits,
        feature_dim,
        radius,
    )?)
}
