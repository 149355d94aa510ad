//! Point sculpting: consistency pruning and error-driven point adding.
//!
//! Pruning removes floaters, points hanging in free space in front of the
//! observed surfaces. A point survives when no depth map contradicts it:
//! for every view where it projects onto a valid depth pixel, its
//! camera-frame depth must reach at least `delta_d` times the mapped
//! surface depth. Views it leaves, falls behind, or hits an invalid pixel
//! in impose no constraint. A classic reprojection-error check
//! ([`colmap_consistency_error`]) is included as a baseline filter.
//!
//! Adding fills coverage gaps. After optimizing the existing points,
//! per-view photometric error maps are rendered; every pixel whose error
//! reaches `delta_e_factor` times the global mean error walks candidate
//! depths along its camera ray, keeps candidates that occlude no view's
//! mapped surface, and stops after `max_per_pixel` acceptances. Accepted
//! points join the cloud with zero features and a fresh opacity logit.

use rayon::prelude::*;

use crate::cloud::{self, CloudError, DepthMap, DepthSample, FeaturizedPointCloud};
use crate::geometry::{self, GeometryError, PixelDepth, Point3};
use crate::img::ImageBuf;
use crate::optim::TrainView;
use crate::raster::{self, RasterError, RenderConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SculptError {
    #[error("invalid sculpt parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("view index {index} out of range ({count} depth maps)")]
    ViewIndex { index: usize, count: usize },
    #[error("correspondence leaves the target image")]
    OutOfImage,
    #[error("no valid depth at the queried pixel")]
    InvalidDepth,
    #[error("view image resolution does not match its camera")]
    ViewShape,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// How candidate depths are spaced along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSampling {
    Linear,
    InverseDepth,
}

/// Depth extent of the scene plus the candidate binning for point adding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneBounds {
    pub z_near: f64,
    /// May be infinite in inverse-depth mode.
    pub z_far: f64,
    pub n_bins: usize,
    pub sampling: DepthSampling,
}

impl SceneBounds {
    pub fn linear(z_near: f64, z_far: f64) -> Self {
        Self {
            z_near,
            z_far,
            n_bins: 100,
            sampling: DepthSampling::Linear,
        }
    }

    pub fn inverse(z_near: f64, z_far: f64) -> Self {
        Self {
            z_near,
            z_far,
            n_bins: 100,
            sampling: DepthSampling::InverseDepth,
        }
    }

    pub fn validate(&self) -> Result<(), SculptError> {
        if !(self.z_near > 0.0 && self.z_near.is_finite() && self.z_far > self.z_near) {
            return Err(SculptError::InvalidParameter(
                "bounds require 0 < z_near < z_far",
            ));
        }
        if self.sampling == DepthSampling::Linear && !self.z_far.is_finite() {
            return Err(SculptError::InvalidParameter(
                "linear sampling requires a finite z_far",
            ));
        }
        if self.n_bins < 2 {
            return Err(SculptError::InvalidParameter("n_bins must be at least 2"));
        }
        Ok(())
    }

    /// Candidate depths, ascending. Linear mode spaces depth itself with
    /// both endpoints included. Inverse mode spaces 1/z; with an infinite
    /// z_far the progression stops one bin short of zero inverse depth, so
    /// every candidate stays finite.
    pub fn depths(&self) -> Result<Vec<f64>, SculptError> {
        self.validate()?;
        let n = self.n_bins;
        Ok(match self.sampling {
            DepthSampling::Linear => {
                let step = (self.z_far - self.z_near) / (n - 1) as f64;
                (0..n).map(|k| self.z_near + k as f64 * step).collect()
            }
            DepthSampling::InverseDepth => {
                let inv_near = 1.0 / self.z_near;
                if self.z_far.is_finite() {
                    let inv_far = 1.0 / self.z_far;
                    let step = (inv_near - inv_far) / (n - 1) as f64;
                    (0..n).map(|k| 1.0 / (inv_near - k as f64 * step)).collect()
                } else {
                    (0..n)
                        .map(|k| 1.0 / (inv_near * (1.0 - k as f64 / n as f64)))
                        .collect()
                }
            }
        })
    }
}

fn check_delta_d(delta_d: f64) -> Result<(), SculptError> {
    if !(delta_d > 0.0 && delta_d <= 1.0) {
        return Err(SculptError::InvalidParameter("delta_d must lie in (0, 1]"));
    }
    Ok(())
}

fn passes_consistency(p: &Point3, maps: &[DepthMap], delta_d: f64) -> bool {
    for map in maps {
        let camera = map.camera();
        let z = geometry::depth_in_view(p, camera);
        if z <= 0.0 {
            continue;
        }
        let Ok(pd) = geometry::project(p, camera) else {
            continue;
        };
        if let DepthSample::Depth(d) = map.sample(pd.u, pd.v) {
            if z < delta_d * d {
                return false;
            }
        }
    }
    true
}

/// Keep-mask over arbitrary cloud points: a point is kept unless some view
/// sees it undercut the mapped surface depth by more than factor
/// `delta_d`.
pub fn consistency_keep_mask(
    cloud: &FeaturizedPointCloud,
    maps: &[DepthMap],
    delta_d: f64,
) -> Result<Vec<bool>, SculptError> {
    check_delta_d(delta_d)?;
    Ok((0..cloud.len())
        .into_par_iter()
        .map(|i| passes_consistency(&cloud.position(i), maps, delta_d))
        .collect())
}

/// Keep-mask over the points a depth-map fusion would produce, in fusion
/// order (map-major, then row-major over valid pixels).
pub fn forward_consistency_prune(
    maps: &[DepthMap],
    delta_d: f64,
) -> Result<Vec<bool>, SculptError> {
    let fused = cloud::fuse_depth_maps(maps, 9, 0.01, 0.0)?;
    consistency_keep_mask(&fused, maps, delta_d)
}

/// Applies [`consistency_keep_mask`] and returns the surviving cloud along
/// with the mask.
pub fn prune_cloud(
    cloud: &FeaturizedPointCloud,
    maps: &[DepthMap],
    delta_d: f64,
) -> Result<(FeaturizedPointCloud, Vec<bool>), SculptError> {
    let keep = consistency_keep_mask(cloud, maps, delta_d)?;
    Ok((cloud.filter(&keep), keep))
}

/// Two-view reprojection consistency error at a full-resolution pixel of
/// view `i`: round-trip the pixel through view `j`'s depth map and measure
/// how far it lands from where it started, in pixels.
pub fn colmap_consistency_error(
    maps: &[DepthMap],
    view_i: usize,
    view_j: usize,
    pixel: (f64, f64),
) -> Result<f64, SculptError> {
    let count = maps.len();
    let map_i = maps.get(view_i).ok_or(SculptError::ViewIndex {
        index: view_i,
        count,
    })?;
    let map_j = maps.get(view_j).ok_or(SculptError::ViewIndex {
        index: view_j,
        count,
    })?;
    let (u, v) = pixel;
    let DepthSample::Depth(d_p) = map_i.sample(u, v) else {
        return Err(SculptError::InvalidDepth);
    };
    let world = geometry::unproject(&PixelDepth::new(u, v, d_p), map_i.camera());
    let q = geometry::project(&world, map_j.camera()).map_err(|_| SculptError::OutOfImage)?;
    if !map_j.camera().contains(q.u, q.v) {
        return Err(SculptError::OutOfImage);
    }
    let d_q = match map_j.sample(q.u, q.v) {
        DepthSample::Depth(d) => d,
        DepthSample::OutOfImage => return Err(SculptError::OutOfImage),
        DepthSample::Invalid => return Err(SculptError::InvalidDepth),
    };
    let corrected = geometry::unproject(&PixelDepth::new(q.u, q.v, d_q), map_j.camera());
    let back = geometry::project(&corrected, map_i.camera())?;
    Ok(((back.u - u).powi(2) + (back.v - v).powi(2)).sqrt())
}

/// Per-view photometric error maps: the rendered image versus the
/// reference, summed |difference| across channels per pixel. Renders with
/// dropout disabled so the error reflects the full model.
pub fn compute_error_maps(
    cloud: &FeaturizedPointCloud,
    views: &[TrainView],
    config: &RenderConfig,
) -> Result<Vec<ImageBuf>, SculptError> {
    let clean = RenderConfig {
        dropout_rate: 0.0,
        ..config.clone()
    };
    let mut maps = Vec::with_capacity(views.len());
    for view in views {
        let (w, h) = (view.camera.width() as usize, view.camera.height() as usize);
        if view.image.width() != w
            || view.image.height() != h
            || view.image.channels() != cloud.channels()
        {
            return Err(SculptError::ViewShape);
        }
        let out = raster::rasterize(cloud, &view.camera, &clean, None)?;
        let mut error = ImageBuf::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let e: f64 = out
                    .image
                    .pixel(x, y)
                    .iter()
                    .zip(view.image.pixel(x, y))
                    .map(|(r, t)| (r - t).abs())
                    .sum();
                error.set(x, y, 0, e);
            }
        }
        maps.push(error);
    }
    Ok(maps)
}

/// Candidate positions along the pixel's camera ray, ascending in depth.
pub fn sample_candidates(
    camera: &geometry::Camera,
    pixel: (f64, f64),
    bounds: &SceneBounds,
) -> Result<Vec<Point3>, SculptError> {
    let depths = bounds.depths()?;
    Ok(depths
        .into_iter()
        .map(|d| geometry::unproject(&PixelDepth::new(pixel.0, pixel.1, d), camera))
        .collect())
}

/// True when the candidate occludes no view: in every depth map where it
/// projects onto a valid pixel, its depth is not in front of the mapped
/// surface (with slack `eps_occ`).
pub fn evaluate_candidate(candidate: &Point3, maps: &[DepthMap], eps_occ: f64) -> bool {
    for map in maps {
        let camera = map.camera();
        let z = geometry::depth_in_view(candidate, camera);
        if z <= 0.0 {
            continue;
        }
        let Ok(pd) = geometry::project(candidate, camera) else {
            continue;
        };
        if let DepthSample::Depth(d) = map.sample(pd.u, pd.v) {
            if z < (1.0 - eps_occ) * d {
                return false;
            }
        }
    }
    true
}

/// Point-adding knobs. Defaults: threshold at 5x the mean error, keep the
/// 5 nearest accepted candidates per pixel, strict occlusion test.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AddParams {
    pub delta_e_factor: f64,
    pub max_per_pixel: usize,
    pub eps_occ: f64,
    pub initial_logit: f64,
}

impl Default for AddParams {
    fn default() -> Self {
        Self {
            delta_e_factor: 5.0,
            max_per_pixel: 5,
            eps_occ: 0.0,
            initial_logit: cloud::DEFAULT_OPACITY_LOGIT,
        }
    }
}

/// Result of one adding round.
#[derive(Debug, Clone)]
pub struct AddOutcome {
    pub cloud: FeaturizedPointCloud,
    pub added: usize,
    pub triggering_pixels: usize,
}

/// Appends new points under high-error pixels. Pixels trigger when their
/// photometric error reaches `delta_e_factor` times the mean over all
/// pixels of all views; each walks its ray's candidates front to back,
/// keeping non-occluding ones until `max_per_pixel` accepted. A run whose
/// error maps are identically zero adds nothing (the threshold would
/// otherwise be zero and trigger everywhere). Deterministic: pixels are
/// visited in (view, row, column) order, candidates in depth order.
pub fn add_points(
    cloud: &FeaturizedPointCloud,
    views: &[TrainView],
    maps: &[DepthMap],
    bounds: &SceneBounds,
    config: &RenderConfig,
    params: &AddParams,
) -> Result<AddOutcome, SculptError> {
    if params.delta_e_factor <= 0.0 || !params.delta_e_factor.is_finite() {
        return Err(SculptError::InvalidParameter(
            "delta_e_factor must be positive",
        ));
    }
    if params.max_per_pixel == 0 {
        return Err(SculptError::InvalidParameter(
            "max_per_pixel must be at least 1",
        ));
    }
    bounds.validate()?;
    let error_maps = compute_error_maps(cloud, views, config)?;
    let total_pixels: usize = error_maps.iter().map(|m| m.data.len()).sum();
    let total_error: f64 = error_maps.iter().map(|m| m.data.iter().sum::<f64>()).sum();
    if total_pixels == 0 || total_error == 0.0 {
        return Ok(AddOutcome {
            cloud: cloud.clone(),
            added: 0,
            triggering_pixels: 0,
        });
    }
    let threshold = params.delta_e_factor * total_error / total_pixels as f64;

    let mut positions = Vec::new();
    let mut triggering = 0usize;
    for (view, error) in views.iter().zip(&error_maps) {
        for y in 0..error.height() {
            for x in 0..error.width() {
                if error.get(x, y, 0) < threshold {
                    continue;
                }
                triggering += 1;
                let candidates =
                    sample_candidates(&view.camera, (x as f64, y as f64), bounds)?;
                let mut accepted = 0;
                for candidate in candidates {
                    if !evaluate_candidate(&candidate, maps, params.eps_occ) {
                        continue;
                    }
                    positions.extend_from_slice(&[candidate.x, candidate.y, candidate.z]);
                    accepted += 1;
                    if accepted == params.max_per_pixel {
                        break;
                    }
                }
            }
        }
    }

    let added = positions.len() / 3;
    let additions = FeaturizedPointCloud::from_parts(
        positions,
        vec![0.0; added * cloud.feature_dim()],
        vec![params.initial_logit; added],
        cloud.feature_dim(),
        cloud.radius(),
    )?;
    let merged = cloud::merge(cloud, &additions)?;
    Ok(AddOutcome {
        cloud: merged,
        added,
        triggering_pixels: triggering,
    })
}
