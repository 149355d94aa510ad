//! PFM float images and the depth-map convention built on them.
//!
//! Standard portable float maps: header `Pf` (grayscale) or `PF` (color),
//! dimensions line, and a scale line whose sign encodes endianness (always
//! written negative, little-endian, here). Rows are stored bottom-to-top.
//!
//! Depth maps are grayscale PFMs where validity is encoded in the sign:
//! pixels with depth <= 0 are invalid. A JSON sidecar next to the PFM
//! records the owning camera index and the resolution stride.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{CloudError, DepthMap};
use crate::geometry::Camera;
use crate::img::ImageBuf;

#[derive(Debug, thiserror::Error)]
pub enum PfmError {
    #[error("pfm i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("pfm parse: {0}")]
    Parse(String),
    #[error("pfm sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Writes a 1- or 3-channel float image as a little-endian PFM.
pub fn write_pfm(path: impl AsRef<Path>, image: &ImageBuf) -> Result<(), PfmError> {
    let channels = image.channels();
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        other => {
            return Err(PfmError::Parse(format!(
                "pfm supports 1 or 3 channels, not {other}"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(64 + image.data.len() * 4);
    bytes.extend_from_slice(
        format!("{magic}\n{} {}\n-1.0\n", image.width(), image.height()).as_bytes(),
    );
    // Bottom-to-top row order.
    for y in (0..image.height()).rev() {
        for x in 0..image.width() {
            for c in 0..channels {
                bytes.extend_from_slice(&(image.get(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a PFM into a top-down row-major [`ImageBuf`].
pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuf, PfmError> {
    let bytes = std::fs::read(path)?;
    let mut offset = 0usize;
    let mut token = || -> Result<String, PfmError> {
        while offset < bytes.len() && bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let start = offset;
        while offset < bytes.len() && !bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        if start == offset {
            return Err(PfmError::Parse("truncated header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..offset])
            .map_err(|_| PfmError::Parse("header is not ASCII".into()))?
            .to_string();
        // Consume exactly one whitespace separator after the token.
        if offset < bytes.len() {
            offset += 1;
        }
        Ok(s)
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(PfmError::Parse(format!("bad magic {other:?}"))),
    };
    let width: usize = token()?
        .parse()
        .map_err(|_| PfmError::Parse("bad width".into()))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| PfmError::Parse("bad height".into()))?;
    let scale: f64 = token()?
        .parse()
        .map_err(|_| PfmError::Parse("bad scale".into()))?;
    let little_endian = scale < 0.0;

    let need = width * height * channels * 4;
    if bytes.len() < offset + need {
        return Err(PfmError::Parse(format!(
            "payload truncated: need {need} bytes"
        )));
    }
    let mut image = ImageBuf::new(width, height, channels);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let raw: [u8; 4] = bytes[offset..offset + 4].try_into().unwrap();
                offset += 4;
                let value = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                image.set(x, y, c, value as f64);
            }
        }
    }
    Ok(image)
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthSidecar {
    camera_index: usize,
    stride: usize,
}

fn sidecar_path(pfm_path: &Path) -> PathBuf {
    pfm_path.with_extension("json")
}

/// Writes a depth map as `Pf` PFM (invalid pixels stored as 0) plus a JSON
/// sidecar naming the camera it belongs to.
pub fn write_depth_map(
    pfm_path: impl AsRef<Path>,
    map: &DepthMap,
    camera_index: usize,
) -> Result<(), PfmError> {
    let pfm_path = pfm_path.as_ref();
    let mut image = ImageBuf::new(map.map_width(), map.map_height(), 1);
    for row in 0..map.map_height() {
        for col in 0..map.map_width() {
            image.set(col, row, 0, map.value(col, row).unwrap_or(0.0));
        }
    }
    write_pfm(pfm_path, &image)?;
    let sidecar = DepthSidecar {
        camera_index,
        stride: map.stride(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| PfmError::Sidecar(e.to_string()))?;
    text.push('\n');
    std::fs::write(sidecar_path(pfm_path), text)?;
    Ok(())
}

/// Reads a depth map and resolves its camera from the sidecar's index.
/// Returns the map together with that camera index.
pub fn read_depth_map(
    pfm_path: impl AsRef<Path>,
    cameras: &[Camera],
) -> Result<(DepthMap, usize), PfmError> {
    let pfm_path = pfm_path.as_ref();
    let image = read_pfm(pfm_path)?;
    if image.channels() != 1 {
        return Err(PfmError::Parse("depth maps must be grayscale".into()));
    }
    let text = std::fs::read_to_string(sidecar_path(pfm_path))?;
    let sidecar: DepthSidecar =
        serde_json::from_str(&text).map_err(|e| PfmError::Sidecar(e.to_string()))?;
    let camera = cameras.get(sidecar.camera_index).ok_or_else(|| {
        PfmError::Sidecar(format!(
            "camera index {} out of range ({} cameras)",
            sidecar.camera_index,
            cameras.len()
        ))
    })?;
    let valid: Vec<bool> = image.data.iter().map(|&d| d > 0.0).collect();
    let values: Vec<f64> = image
        .data
        .iter()
        .map(|&d| if d > 0.0 { d } else { 0.0 })
        .collect();
    let map = DepthMap::new(camera.clone(), sidecar.stride, values, valid)?;
    Ok((map, sidecar.camera_index))
}
