//! Differentiable soft rasterization of featurized point clouds.
//!
//! Every point projects to a disc footprint of shared radius. A pixel
//! blends the points whose footprints cover its center with softmax-style
//! weights that favor nearby, opaque, well-centered points:
//!
//! - coverage `c = 1 - (rho / r_px)^2` falls off quadratically with the
//!   distance `rho` from the pixel center to the splat center;
//! - normalized closeness `z_hat = (z_far - d) / (z_far - z_near)` is 1 at
//!   the near bound and 0 at the far bound;
//! - the raw weight is `sigmoid(opacity_logit) * c * exp(z_hat / gamma)`,
//!   and a constant background weight `exp(0 / gamma) = 1` competes in the
//!   same normalization, so empty pixels return the background exactly.
//!
//! Small `gamma` approaches a hard z-buffer; the default `1e-3` keeps the
//! blend differentiable. Weights are normalized with the usual
//! max-subtraction trick so extreme `z_hat / gamma` never overflows.
//!
//! Rendering walks the image in 16x16 tiles, binning points by footprint
//! first. Outputs are deterministic regardless of thread count, and every
//! pixel stores its surviving contributors for the backward pass in
//! [`crate::optim::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::FeaturizedPointCloud;
use crate::geometry::{Camera, GeometryError, Point3};
use crate::img::ImageBuf;
use crate::sh;

/// Side length of the square pixel tiles the rasterizer works in.
pub const TILE: usize = 16;
/// Hard cap on blended contributors per pixel; beyond it, the entries with
/// the largest raw weights win.
pub const MAX_CONTRIBUTORS: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("invalid depth bounds: z_near = {z_near}, z_far = {z_far}")]
    InvalidBounds { z_near: f64, z_far: f64 },
    #[error("invalid render config: {0}")]
    InvalidConfig(&'static str),
    #[error("background has {got} channels but the cloud renders {expected}")]
    BackgroundDim { got: usize, expected: usize },
    #[error("active mask length {mask} does not match point count {points}")]
    MaskLength { mask: usize, points: usize },
}

/// Rendering parameters shared by the forward and backward passes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Blend temperature; smaller values approach a hard z-buffer.
    pub gamma: f64,
    /// Point footprint radius in normalized device units; the pixel-space
    /// radius is `radius * min(width, height) / 2`.
    pub radius: f64,
    /// Per-point dropout probability for ensemble rendering.
    pub dropout_rate: f64,
    /// Number of dropout subsets averaged by [`rasterize_ensemble`].
    pub subsets: usize,
    /// Background color, one entry per rendered channel.
    pub background: Vec<f64>,
    pub z_near: f64,
    pub z_far: f64,
    /// Seed for dropout subset sampling.
    pub seed: u64,
}

impl Default for RenderConfig {
    /// [`RenderConfig::new`] with generic depth bounds `(0.5, 100.0)`.
    fn default() -> Self {
        Self::new(0.5, 100.0)
    }
}

impl RenderConfig {
    /// Defaults: `gamma = 1e-3`, dropout `0.5` over `2` subsets, radius
    /// `0.01`, black 3-channel background.
    pub fn new(z_near: f64, z_far: f64) -> Self {
        Self {
            gamma: 1e-3,
            radius: 0.01,
            dropout_rate: 0.5,
            subsets: 2,
            background: vec![0.0; 3],
            z_near,
            z_far,
            seed: 0,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<(), RasterError> {
        if !(self.z_near > 0.0 && self.z_far > self.z_near && self.z_far.is_finite()) {
            return Err(RasterError::InvalidBounds {
                z_near: self.z_near,
                z_far: self.z_far,
            });
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(RasterError::InvalidConfig("gamma must be positive"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(RasterError::InvalidConfig("radius must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(RasterError::InvalidConfig(
                "dropout_rate must lie in [0, 1)",
            ));
        }
        if self.subsets == 0 {
            return Err(RasterError::InvalidConfig("subsets must be at least 1"));
        }
        if self.background.len() != channels {
            return Err(RasterError::BackgroundDim {
                got: self.background.len(),
                expected: channels,
            });
        }
        Ok(())
    }
}

/// Footprint radius in pixels for a normalized-device-unit radius.
pub fn pixel_radius(radius: f64, width: u32, height: u32) -> f64 {
    radius * width.min(height) as f64 / 2.0
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projected disc footprint of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub u: f64,
    pub v: f64,
    pub radius_px: f64,
    pub depth: f64,
}

impl Footprint {
    /// Integer pixels whose centers lie within the disc (distance
    /// inclusive), clipped to the image.
    pub fn covered_pixels(&self, width: u32, height: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        let r2 = self.radius_px * self.radius_px;
        let x0 = (self.u - self.radius_px).ceil().max(0.0) as i64;
        let x1 = (self.u + self.radius_px).floor().min(width as f64 - 1.0) as i64;
        let y0 = (self.v - self.radius_px).ceil().max(0.0) as i64;
        let y1 = (self.v + self.radius_px).floor().min(height as f64 - 1.0) as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let du = self.u - x as f64;
                let dv = self.v - y as f64;
                if du * du + dv * dv <= r2 {
                    out.push((x as u32, y as u32));
                }
            }
        }
        out
    }
}

/// Projects one point and attaches the shared pixel-space radius.
pub fn splat_footprint(
    p: &Point3,
    camera: &Camera,
    radius: f64,
) -> Result<Footprint, GeometryError> {
    let pd = crate::geometry::project(p, camera)?;
    Ok(Footprint {
        u: pd.u,
        v: pd.v,
        radius_px: pixel_radius(radius, camera.width(), camera.height()),
        depth: pd.depth,
    })
}

/// One blended point at one pixel, as saved for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    /// Point index in the cloud.
    pub point: u32,
    /// Normalized blend weight.
    pub weight: f64,
    /// Splat center minus pixel center, in pixels.
    pub du: f64,
    pub dv: f64,
    /// Camera-frame depth of the point.
    pub depth: f64,
}

/// Forward-pass result. Contributors are stored per pixel in depth order so
/// the backward pass can re-walk the exact blend.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuf,
    /// Per-pixel sum of point weights; the background weight is
    /// `1 - weight_sums[i]`.
    pub weight_sums: Vec<f64>,
    /// Depth of the nearest contributor, `f64::INFINITY` where none.
    pub nearest_depth: Vec<f64>,
    contributors: Vec<Contributor>,
    offsets: Vec<u32>,
    pub(crate) fingerprint: u64,
    pub(crate) has_graph: bool,
}

impl RenderOutput {
    /// Contributors of one pixel, nearest first.
    pub fn contributors(&self, x: usize, y: usize) -> &[Contributor] {
        let i = y * self.image.width() + x;
        let lo = self.offsets[i] as usize;
        let hi = self.offsets[i + 1] as usize;
        &self.contributors[lo..hi]
    }

    pub fn contributor_count(&self) -> usize {
        self.contributors.len()
    }

    /// Whether this output still carries the saved per-pixel blend graph
    /// (ensemble averages do not).
    pub fn has_graph(&self) -> bool {
        self.has_graph
    }
}

/// Best-effort consistency stamp over the cloud, camera, and blend
/// parameters, used to reject backward passes against mutated inputs.
pub(crate) fn blend_fingerprint(
    cloud: &FeaturizedPointCloud,
    camera: &Camera,
    config: &RenderConfig,
) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    eat(cloud.len() as u64);
    eat(cloud.feature_dim() as u64);
    eat(cloud.radius().to_bits());
    eat(config.gamma.to_bits());
    eat(config.z_near.to_bits());
    eat(config.z_far.to_bits());
    eat(u64::from(camera.width()) << 32 | u64::from(camera.height()));
    for m in [camera.intrinsics(), camera.rotation()] {
        for value in m.iter() {
            eat(value.to_bits());
        }
    }
    for value in camera.translation().iter() {
        eat(value.to_bits());
    }
    let n = cloud.len();
    let step = (n / 64).max(1);
    for i in (0..n).step_by(step) {
        eat(cloud.positions_flat()[3 * i].to_bits());
        eat(cloud.opacity_logits()[i].to_bits());
        eat(cloud.features_flat()[i * cloud.feature_dim()].to_bits());
    }
    h
}

/// Draws `subsets` independent keep-masks, each keeping a point with
/// probability `1 - dropout_rate`. Deterministic in the seed; the first
/// masks coincide for any subset count, matching the convention that the
/// same subsets are reused across frames.
pub fn sample_subsets(
    n_points: usize,
    dropout_rate: f64,
    subsets: usize,
    seed: u64,
) -> Result<Vec<Vec<bool>>, RasterError> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(RasterError::InvalidConfig(
            "dropout_rate must lie in [0, 1)",
        ));
    }
    if subsets == 0 {
        return Err(RasterError::InvalidConfig("subsets must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..subsets)
        .map(|_| {
            (0..n_points)
                .map(|_| rng.gen::<f64>() >= dropout_rate)
                .collect()
        })
        .collect())
}

struct Splat {
    idx: u32,
    u: f64,
    v: f64,
    depth: f64,
    /// `z_hat / gamma`, the closeness exponent.
    eps: f64,
    sigma: f64,
}

#[derive(Clone, Copy)]
struct Cand {
    splat: u32,
    du: f64,
    dv: f64,
    coverage: f64,
}

struct TileOut {
    x0: usize,
    y0: usize,
    w: usize,
    values: Vec<f64>,
    weight_sums: Vec<f64>,
    nearest_depth: Vec<f64>,
    contributors: Vec<Contributor>,
    pixel_offsets: Vec<u32>,
}

/// Renders the cloud into the camera, blending only the points whose mask
/// entry is true (all points when `active` is `None`).
pub fn rasterize(
    cloud: &FeaturizedPointCloud,
    camera: &Camera,
    config: &RenderConfig,
    active: Option<&[bool]>,
) -> Result<RenderOutput, RasterError> {
    let channels = cloud.channels();
    config.validate(channels)?;
    if let Some(mask) = active {
        if mask.len() != cloud.len() {
            return Err(RasterError::MaskLength {
                mask: mask.len(),
                points: cloud.len(),
            });
        }
    }

    let width = camera.width() as usize;
    let height = camera.height() as usize;
    let r_px = pixel_radius(config.radius, camera.width(), camera.height());
    let span = config.z_far - config.z_near;
    let rotation = *camera.rotation();
    let translation = *camera.translation();
    let intrinsics = *camera.intrinsics();
    let eye = camera.center();

    // Project every active point and keep those that land on the image
    // within the depth bounds.
    let projected: Vec<Option<Splat>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if let Some(mask) = active {
                if !mask[i] {
                    return None;
                }
            }
            let p = cloud.position(i);
            let x = rotation * p + translation;
            if x.z <= 0.0 || x.z < config.z_near || x.z > config.z_far {
                return None;
            }
            let h = intrinsics * x;
            let u = h.x / h.z;
            let v = h.y / h.z;
            if u + r_px < 0.0
                || u - r_px > width as f64 - 1.0
                || v + r_px < 0.0
                || v - r_px > height as f64 - 1.0
            {
                return None;
            }
            let z_hat = (config.z_far - x.z) / span;
            Some(Splat {
                idx: i as u32,
                u,
                v,
                depth: x.z,
                eps: z_hat / config.gamma,
                sigma: sigmoid(cloud.opacity_logits()[i]),
            })
        })
        .collect();
    let splats: Vec<Splat> = projected.into_iter().flatten().collect();

    // View-dependent colors, one row per surviving splat.
    let mut colors = vec![0.0f64; splats.len() * channels];
    colors
        .par_chunks_mut(channels)
        .zip(splats.par_iter())
        .for_each(|(row, s)| {
            let p = cloud.position(s.idx as usize);
            let dir = eye - p;
            let dir = dir / dir.norm();
            let basis = sh::basis_unit(&dir);
            sh::modulate_into(cloud.feature(s.idx as usize), &basis, row);
        });

    // Bin splats into tiles by footprint bounding box.
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let n_tiles = tiles_x * tiles_y;
    let tile_range = |s: &Splat| {
        let x0 = ((s.u - r_px).ceil().max(0.0) as usize).min(width - 1) / TILE;
        let x1 = ((s.u + r_px).floor().min(width as f64 - 1.0).max(0.0) as usize) / TILE;
        let y0 = ((s.v - r_px).ceil().max(0.0) as usize).min(height - 1) / TILE;
        let y1 = ((s.v + r_px).floor().min(height as f64 - 1.0).max(0.0) as usize) / TILE;
        (x0, x1, y0, y1)
    };
    let mut tile_counts = vec![0u32; n_tiles + 1];
    for s in &splats {
        let (x0, x1, y0, y1) = tile_range(s);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 1..=n_tiles {
        tile_counts[t] += tile_counts[t - 1];
    }
    let mut tile_lists = vec![0u32; tile_counts[n_tiles] as usize];
    let mut cursor = tile_counts.clone();
    for (si, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_range(s);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                let t = ty * tiles_x + tx;
                tile_lists[cursor[t] as usize] = si as u32;
                cursor[t] += 1;
            }
        }
    }

    let r2 = r_px * r_px;
    let background = &config.background;
    let tile_outputs: Vec<TileOut> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let tx = t % tiles_x;
            let ty = t / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let w = TILE.min(width - x0);
            let h = TILE.min(height - y0);
            let n_px = w * h;
            let mut cands: Vec<Vec<Cand>> = vec![Vec::new(); n_px];
            let list =
                &tile_lists[tile_counts[t] as usize..tile_counts[t + 1] as usize];
            for &si in list {
                let s = &splats[si as usize];
                let px0 = ((s.u - r_px).ceil().max(x0 as f64) as usize).max(x0);
                let px1 = (s.u + r_px).floor().min((x0 + w - 1) as f64) as usize;
                let py0 = ((s.v - r_px).ceil().max(y0 as f64) as usize).max(y0);
                let py1 = (s.v + r_px).floor().min((y0 + h - 1) as f64) as usize;
                if px1 < px0 || py1 < py0 {
                    continue;
                }
                for py in py0..=py1 {
                    for px in px0..=px1 {
                        let du = s.u - px as f64;
                        let dv = s.v - py as f64;
                        let rho2 = du * du + dv * dv;
                        if rho2 > r2 {
                            continue;
                        }
                        let coverage = 1.0 - rho2 / r2;
                        if coverage <= 0.0 {
                            continue;
                        }
                        cands[(py - y0) * w + (px - x0)].push(Cand {
                            splat: si,
                            du,
                            dv,
                            coverage,
                        });
                    }
                }
            }

            let mut out = TileOut {
                x0,
                y0,
                w,
                values: vec![0.0; n_px * channels],
                weight_sums: vec![0.0; n_px],
                nearest_depth: vec![f64::INFINITY; n_px],
                contributors: Vec::new(),
                pixel_offsets: vec![0u32; n_px + 1],
            };
            let mut keep_order: Vec<u32> = Vec::new();
            for (local, pixel_cands) in cands.iter_mut().enumerate() {
                let values = &mut out.values[local * channels..(local + 1) * channels];
                if pixel_cands.is_empty() {
                    values.copy_from_slice(background);
                    out.pixel_offsets[local + 1] = out.contributors.len() as u32;
                    continue;
                }
                // Depth order with the point index breaking ties keeps the
                // result independent of insertion order.
                pixel_cands.sort_unstable_by(|a, b| {
                    let (sa, sb) = (&splats[a.splat as usize], &splats[b.splat as usize]);
                    sa.depth
                        .partial_cmp(&sb.depth)
                        .unwrap()
                        .then(sa.idx.cmp(&sb.idx))
                });
                keep_order.clear();
                keep_order.extend(0..pixel_cands.len() as u32);
                if pixel_cands.len() > MAX_CONTRIBUTORS {
                    // Keep the largest raw weights; compare in log space so
                    // huge closeness exponents cannot overflow.
                    keep_order.sort_by(|&a, &b| {
                        let ca = &pixel_cands[a as usize];
                        let cb = &pixel_cands[b as usize];
                        let ka = splats[ca.splat as usize].eps
                            + (splats[ca.splat as usize].sigma * ca.coverage).ln();
                        let kb = splats[cb.splat as usize].eps
                            + (splats[cb.splat as usize].sigma * cb.coverage).ln();
                        kb.partial_cmp(&ka).unwrap().then(a.cmp(&b))
                    });
                    keep_order.truncate(MAX_CONTRIBUTORS);
                    keep_order.sort_unstable();
                }

                let mut max_eps = 0.0f64;
                for &k in &keep_order {
                    max_eps = max_eps.max(splats[pixel_cands[k as usize].splat as usize].eps);
                }
                let bg_mass = (-max_eps).exp();
                let mut total = bg_mass;
                for &k in &keep_order {
                    let cand = &pixel_cands[k as usize];
                    let s = &splats[cand.splat as usize];
                    total += s.sigma * cand.coverage * (s.eps - max_eps).exp();
                }
                let mut weight_sum = 0.0;
                for &k in &keep_order {
                    let cand = &pixel_cands[k as usize];
                    let s = &splats[cand.splat as usize];
                    let weight = s.sigma * cand.coverage * (s.eps - max_eps).exp() / total;
                    weight_sum += weight;
                    let color =
                        &colors[cand.splat as usize * channels..(cand.splat as usize + 1) * channels];
                    for c in 0..channels {
                        values[c] += weight * color[c];
                    }
                    out.contributors.push(Contributor {
                        point: s.idx,
                        weight,
                        du: cand.du,
                        dv: cand.dv,
                        depth: s.depth,
                    });
                }
                let bg_weight = bg_mass / total;
                for c in 0..channels {
                    values[c] += bg_weight * background[c];
                }
                out.weight_sums[local] = weight_sum;
                out.nearest_depth[local] =
                    splats[pixel_cands[keep_order[0] as usize].splat as usize].depth;
                out.pixel_offsets[local + 1] = out.contributors.len() as u32;
            }
            out
        })
        .collect();

    // Stitch tiles back into row-major buffers.
    let mut image = ImageBuf::new(width, height, channels);
    let mut weight_sums = vec![0.0f64; width * height];
    let mut nearest_depth = vec![f64::INFINITY; width * height];
    let total_contribs: usize = tile_outputs.iter().map(|t| t.contributors.len()).sum();
    let mut contributors = Vec::with_capacity(total_contribs);
    let mut offsets = vec![0u32; width * height + 1];
    for y in 0..height {
        for x in 0..width {
            let t = (y / TILE) * tiles_x + x / TILE;
            let tile = &tile_outputs[t];
            let local = (y - tile.y0) * tile.w + (x - tile.x0);
            let global = y * width + x;
            image.pixel_mut(x, y).copy_from_slice(
                &tile.values[local * channels..(local + 1) * channels],
            );
            weight_sums[global] = tile.weight_sums[local];
            nearest_depth[global] = tile.nearest_depth[local];
            let lo = tile.pixel_offsets[local] as usize;
            let hi = tile.pixel_offsets[local + 1] as usize;
            contributors.extend_from_slice(&tile.contributors[lo..hi]);
            offsets[global + 1] = contributors.len() as u32;
        }
    }

    Ok(RenderOutput {
        image,
        weight_sums,
        nearest_depth,
        contributors,
        offsets,
        fingerprint: blend_fingerprint(cloud, camera, config),
        has_graph: true,
    })
}

/// Averages independent dropout-subset renders. With `dropout_rate == 0`
/// this is exactly one full rasterization (bit for bit). Ensemble averages
/// drop the saved blend graph; train against single-subset renders instead.
pub fn rasterize_ensemble(
    cloud: &FeaturizedPointCloud,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<RenderOutput, RasterError> {
    config.validate(cloud.channels())?;
    if config.dropout_rate == 0.0 {
        return rasterize(cloud, camera, config, None);
    }
    let masks = sample_subsets(
        cloud.len(),
        config.dropout_rate,
        config.subsets,
        config.seed,
    )?;
    let mut first = rasterize(cloud, camera, config, Some(&masks[0]))?;
    for mask in &masks[1..] {
        let next = rasterize(cloud, camera, config, Some(mask))?;
        first.image.accumulate(&next.image, 1.0);
    }
    first.image.scale(1.0 / config.subsets as f64);
    if config.subsets > 1 {
        first.has_graph = false;
        first.contributors.clear();
        first.offsets.iter_mut().for_each(|o| *o = 0);
    }
    Ok(first)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cloud::tests::test_camera;
    use crate::geometry;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-pixel blend: no tiling, no binning, same math.
    pub(crate) fn naive_rasterize(
        cloud: &FeaturizedPointCloud,
        camera: &Camera,
        config: &RenderConfig,
    ) -> ImageBuf {
        let channels = cloud.channels();
        let width = camera.width() as usize;
        let height = camera.height() as usize;
        let r_px = pixel_radius(config.radius, camera.width(), camera.height());
        let eye = camera.center();
        let mut image = ImageBuf::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                // (sigma * coverage, eps, color, depth, idx)
                let mut entries: Vec<(f64, f64, Vec<f64>, f64, usize)> = Vec::new();
                for i in 0..cloud.len() {
                    let p = cloud.position(i);
                    let Ok(pd) = geometry::project(&p, camera) else {
                        continue;
                    };
                    if pd.depth < config.z_near || pd.depth > config.z_far {
                        continue;
                    }
                    let du = pd.u - x as f64;
                    let dv = pd.v - y as f64;
                    let rho2 = du * du + dv * dv;
                    if rho2 > r_px * r_px {
                        continue;
                    }
                    let coverage = 1.0 - rho2 / (r_px * r_px);
                    if coverage <= 0.0 {
                        continue;
                    }
                    let z_hat = (config.z_far - pd.depth) / (config.z_far - config.z_near);
                    let dir = (eye - p).normalize();
                    let color = crate::sh::modulate(cloud.feature(i), &dir).unwrap();
                    entries.push((
                        sigmoid(cloud.opacity_logits()[i]) * coverage,
                        z_hat / config.gamma,
                        color,
                        pd.depth,
                        i,
                    ));
                }
                entries.sort_by(|a, b| a.3.partial_cmp(&b.3).unwrap().then(a.4.cmp(&b.4)));
                if entries.len() > MAX_CONTRIBUTORS {
                    let mut order: Vec<usize> = (0..entries.len()).collect();
                    order.sort_by(|&a, &b| {
                        let ka = entries[a].1 + entries[a].0.ln();
                        let kb = entries[b].1 + entries[b].0.ln();
                        kb.partial_cmp(&ka).unwrap().then(a.cmp(&b))
                    });
                    order.truncate(MAX_CONTRIBUTORS);
                    order.sort_unstable();
                    entries = order.into_iter().map(|i| entries[i].clone()).collect();
                }
                let max_eps = entries.iter().fold(0.0f64, |m, e| m.max(e.1));
                let mut total = (-max_eps).exp();
                for e in &entries {
                    total += e.0 * (e.1 - max_eps).exp();
                }
                let px = image.pixel_mut(x, y);
                for e in &entries {
                    let w = e.0 * (e.1 - max_eps).exp() / total;
                    for c in 0..channels {
                        px[c] += w * e.2[c];
                    }
                }
                let w_bg = (-max_eps).exp() / total;
                for c in 0..channels {
                    px[c] += w_bg * config.background[c];
                }
            }
        }
        image
    }

    fn single_point_cloud(p: Point3, features: Vec<f64>, logit: f64, radius: f64) -> FeaturizedPointCloud {
        let dim = features.len();
        FeaturizedPointCloud::from_parts(vec![p.x, p.y, p.z], features, vec![logit], dim, radius)
            .unwrap()
    }

    /// Features that render a constant color regardless of view direction.
    pub(crate) fn flat_color_features(color: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; color.len() * 9];
        for (c, &value) in color.iter().enumerate() {
            f[c * 9] = value / 0.282_094_791_773_878_14;
        }
        f
    }

    #[test]
    fn empty_cloud_renders_background_exactly() {
        let camera = test_camera(20, 10);
        let cloud = FeaturizedPointCloud::empty(27, 0.05).unwrap();
        let mut config = RenderConfig::new(1.0, 10.0);
        config.background = vec![0.25, 0.5, 0.75];
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(out.image.pixel(x, y), &[0.25, 0.5, 0.75]);
            }
        }
        assert!(out.weight_sums.iter().all(|&w| w == 0.0));
        assert!(out.nearest_depth.iter().all(|&d| d.is_infinite()));
        assert_eq!(out.contributor_count(), 0);
    }

    #[test]
    fn footprint_covers_expected_pixel_counts() {
        let camera = test_camera(64, 64);
        // Principal point sits on pixel center (31.5, 31.5)? No: width 64
        // puts it at 31.5, between pixels. Use a point that projects onto an
        // exact pixel center instead.
        let target = geometry::unproject(&geometry::PixelDepth::new(32.0, 32.0, 2.0), &camera);
        // radius_px = 2 with min-dim 64 means radius = 4 / 64.
        let fp = splat_footprint(&target, &camera, 2.0 * 2.0 / 64.0).unwrap();
        assert_relative_eq!(fp.radius_px, 2.0, epsilon = 1e-12);
        assert_relative_eq!(fp.u, 32.0, epsilon = 1e-9);
        assert_eq!(fp.covered_pixels(64, 64).len(), 13);
        let small = splat_footprint(&target, &camera, 0.4 * 2.0 / 64.0).unwrap();
        assert_eq!(small.covered_pixels(64, 64).len(), 1);
        // Off-center small footprints may cover no pixel at all.
        let off = geometry::unproject(&geometry::PixelDepth::new(32.5, 32.5, 2.0), &camera);
        let none = splat_footprint(&off, &camera, 0.4 * 2.0 / 64.0).unwrap();
        assert_eq!(none.covered_pixels(64, 64).len(), 0);
    }

    #[test]
    fn behind_camera_footprint_errors() {
        let camera = test_camera(8, 8);
        let err = splat_footprint(&Point3::new(0.0, 0.0, -1.0), &camera, 0.1).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn one_nearly_opaque_point_dominates_its_pixel() {
        let camera = test_camera(16, 16);
        let color = [0.8, 0.3, 0.1];
        let target = geometry::unproject(&geometry::PixelDepth::new(8.0, 8.0, 1.0), &camera);
        let cloud = single_point_cloud(target, flat_color_features(&color), 4.0, 0.2);
        let mut config = RenderConfig::new(1.0, 10.0);
        config.background = vec![0.0, 0.0, 0.0];
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        let px = out.image.pixel(8, 8);
        for c in 0..3 {
            assert!((px[c] - color[c]).abs() < 1e-6, "channel {c}: {px:?}");
        }
        let contribs = out.contributors(8, 8);
        assert_eq!(contribs.len(), 1);
        assert!(contribs[0].weight > 1.0 - 1e-9);
        assert_relative_eq!(out.nearest_depth[8 * 16 + 8], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coincident_points_blend_symmetrically() {
        let camera = test_camera(16, 16);
        let target = geometry::unproject(&geometry::PixelDepth::new(8.0, 8.0, 1.0), &camera);
        let fa = flat_color_features(&[1.0, 0.0, 0.0]);
        let fb = flat_color_features(&[0.0, 1.0, 0.0]);
        let positions = vec![target.x, target.y, target.z, target.x, target.y, target.z];
        let mut features = fa.clone();
        features.extend_from_slice(&fb);
        let cloud = FeaturizedPointCloud::from_parts(
            positions,
            features,
            vec![4.0, 4.0],
            27,
            0.2,
        )
        .unwrap();
        let config = RenderConfig::new(1.0, 10.0);
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        let px = out.image.pixel(8, 8);
        assert_relative_eq!(px[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(px[1], 0.5, epsilon = 1e-9);
        let contribs = out.contributors(8, 8);
        assert_eq!(contribs.len(), 2);
        assert_relative_eq!(contribs[0].weight, contribs[1].weight, epsilon = 1e-15);
    }

    #[test]
    fn weights_normalize_to_one_with_background() {
        // Background sensitivity recovers the background weight without
        // touching internals: rendering with bg = 0 and bg = 1 differs by
        // exactly w_bg per channel.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for scene in 0..20 {
            let camera = test_camera(24, 16);
            let n = rng.gen_range(1..60);
            let cloud = scene_cloud(&mut rng, &camera, n, 9);
            let mut config = RenderConfig::new(1.0, 8.0);
            config.gamma = *[1e-3, 0.05, 1.0].iter().nth(scene % 3).unwrap();
            config.radius = rng.gen_range(0.05..0.5);
            config.background = vec![0.0];
            let dark = rasterize(&cloud, &camera, &config, None).unwrap();
            config.background = vec![1.0];
            let light = rasterize(&cloud, &camera, &config, None).unwrap();
            for i in 0..(24 * 16) {
                let w_bg = light.image.data[i] - dark.image.data[i];
                assert!(
                    (dark.weight_sums[i] + w_bg - 1.0).abs() < 1e-12,
                    "scene {scene} pixel {i}: sum {} bg {w_bg}",
                    dark.weight_sums[i]
                );
            }
            // Saved contributors agree with the reported sums.
            for y in 0..16 {
                for x in 0..24 {
                    let total: f64 =
                        dark.contributors(x, y).iter().map(|c| c.weight).sum();
                    assert!((total - dark.weight_sums[y * 24 + x]).abs() < 1e-13);
                }
            }
        }
    }

    /// Random cloud positioned to project inside the camera.
    pub(crate) fn scene_cloud(
        rng: &mut impl Rng,
        camera: &Camera,
        n: usize,
        feature_dim: usize,
    ) -> FeaturizedPointCloud {
        let mut positions = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let u = rng.gen_range(0.0..camera.width() as f64 - 1.0);
            let v = rng.gen_range(0.0..camera.height() as f64 - 1.0);
            let d = rng.gen_range(1.2..7.5);
            let p = geometry::unproject(&geometry::PixelDepth::new(u, v, d), camera);
            positions.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let features: Vec<f64> = (0..feature_dim * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        FeaturizedPointCloud::from_parts(positions, features, logits, feature_dim, 0.1).unwrap()
    }

    #[test]
    fn tiled_render_matches_naive_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..5 {
            let camera = test_camera(40, 24);
            let cloud = scene_cloud(&mut rng, &camera, 30, 18);
            let mut config = RenderConfig::new(1.0, 8.0);
            config.gamma = 0.02;
            config.radius = 0.6; // footprints span several tiles
            config.background = vec![0.1, 0.9];
            let out = rasterize(&cloud, &camera, &config, None).unwrap();
            let naive = naive_rasterize(&cloud, &camera, &config);
            for (a, b) in out.image.data.iter().zip(&naive.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depth_bounds_gate_contributors() {
        let camera = test_camera(16, 16);
        let near = geometry::unproject(&geometry::PixelDepth::new(8.0, 8.0, 0.5), &camera);
        let inside = geometry::unproject(&geometry::PixelDepth::new(8.0, 8.0, 2.0), &camera);
        let far = geometry::unproject(&geometry::PixelDepth::new(8.0, 8.0, 11.0), &camera);
        let mut positions = Vec::new();
        for p in [near, inside, far] {
            positions.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let cloud = FeaturizedPointCloud::from_parts(
            positions,
            vec![0.5; 3 * 9],
            vec![4.0; 3],
            9,
            0.3,
        )
        .unwrap();
        let config = RenderConfig {
            background: vec![0.0],
            ..RenderConfig::new(1.0, 10.0)
        };
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        let contribs = out.contributors(8, 8);
        assert_eq!(contribs.len(), 1);
        assert_eq!(contribs[0].point, 1);
    }

    #[test]
    fn raising_opacity_never_lowers_own_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let camera = test_camera(16, 16);
        let cloud = scene_cloud(&mut rng, &camera, 12, 9);
        let config = RenderConfig {
            gamma: 0.5,
            radius: 0.4,
            background: vec![0.0],
            ..RenderConfig::new(1.0, 8.0)
        };
        let base = rasterize(&cloud, &camera, &config, None).unwrap();
        let mut logits = cloud.opacity_logits().to_vec();
        logits[3] += 1.0;
        let bumped_cloud = FeaturizedPointCloud::from_parts(
            cloud.positions_flat().to_vec(),
            cloud.features_flat().to_vec(),
            logits,
            9,
            cloud.radius(),
        )
        .unwrap();
        let bumped = rasterize(&bumped_cloud, &camera, &config, None).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let w0 = base
                    .contributors(x, y)
                    .iter()
                    .find(|c| c.point == 3)
                    .map(|c| c.weight);
                let w1 = bumped
                    .contributors(x, y)
                    .iter()
                    .find(|c| c.point == 3)
                    .map(|c| c.weight);
                if let (Some(w0), Some(w1)) = (w0, w1) {
                    assert!(w1 >= w0 - 1e-15, "({x},{y}): {w0} -> {w1}");
                }
            }
        }
    }

    #[test]
    fn tiny_gamma_matches_z_buffer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let camera = test_camera(24, 24);
        let cloud = scene_cloud(&mut rng, &camera, 25, 9);
        let config = RenderConfig {
            gamma: 1e-6,
            radius: 0.3,
            background: vec![0.35],
            ..RenderConfig::new(1.0, 8.0)
        };
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        let gap = 10.0 * config.gamma * (config.z_far - config.z_near);
        let eye = camera.center();
        for y in 0..24 {
            for x in 0..24 {
                // Brute-force nearest covered point with opacity > 0.5.
                let mut best: Option<(f64, usize)> = None;
                let mut second_gap = f64::INFINITY;
                for i in 0..cloud.len() {
                    let pd = geometry::project(&cloud.position(i), &camera).unwrap();
                    if pd.depth < config.z_near || pd.depth > config.z_far {
                        continue;
                    }
                    let rho2 = (pd.u - x as f64).powi(2) + (pd.v - y as f64).powi(2);
                    let r_px = pixel_radius(config.radius, 24, 24);
                    if rho2 >= r_px * r_px {
                        continue;
                    }
                    if sigmoid(cloud.opacity_logits()[i]) <= 0.5 {
                        continue;
                    }
                    match best {
                        None => best = Some((pd.depth, i)),
                        Some((d, _)) if pd.depth < d => {
                            second_gap = d - pd.depth;
                            best = Some((pd.depth, i));
                        }
                        Some((d, _)) => second_gap = second_gap.min(pd.depth - d),
                    }
                }
                let got = out.image.get(x, y, 0);
                match best {
                    None => assert!((got - 0.35).abs() < 1e-12),
                    Some((depth, i)) => {
                        let bg_gap = config.z_far - depth;
                        if second_gap > gap && bg_gap > gap {
                            let dir = (eye - cloud.position(i)).normalize();
                            let expected =
                                crate::sh::modulate(cloud.feature(i), &dir).unwrap()[0];
                            assert!(
                                (got - expected).abs() < 1e-4,
                                "({x},{y}): {got} vs {expected}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn contributor_cap_keeps_strongest() {
        let camera = test_camera(8, 8);
        let n = 40;
        let mut positions = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..n {
            let p = geometry::unproject(
                &geometry::PixelDepth::new(4.0, 4.0, rng.gen_range(2.0..3.0)),
                &camera,
            );
            positions.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let cloud = FeaturizedPointCloud::from_parts(
            positions,
            vec![0.1; n * 9],
            vec![2.0; n],
            9,
            0.3,
        )
        .unwrap();
        let config = RenderConfig {
            gamma: 0.5,
            background: vec![0.0],
            ..RenderConfig::new(1.0, 8.0)
        };
        let out = rasterize(&cloud, &camera, &config, None).unwrap();
        let contribs = out.contributors(4, 4);
        assert_eq!(contribs.len(), MAX_CONTRIBUTORS);
        // Depth-sorted output.
        for pair in contribs.windows(2) {
            assert!(pair[0].depth <= pair[1].depth);
        }
        // Normalization still holds.
        let total: f64 = contribs.iter().map(|c| c.weight).sum();
        assert!((total - out.weight_sums[4 * 8 + 4]).abs() < 1e-13);
    }

    #[test]
    fn full_mask_matches_unmasked_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let camera = test_camera(24, 16);
        let cloud = scene_cloud(&mut rng, &camera, 40, 9);
        let config = RenderConfig {
            background: vec![0.2],
            ..RenderConfig::new(1.0, 8.0)
        };
        let plain = rasterize(&cloud, &camera, &config, None).unwrap();
        let masked =
            rasterize(&cloud, &camera, &config, Some(&vec![true; cloud.len()])).unwrap();
        assert_eq!(plain.image, masked.image);
        assert_eq!(plain.weight_sums, masked.weight_sums);
    }

    #[test]
    fn subsets_are_deterministic_with_expected_rate() {
        let masks = sample_subsets(100_000, 0.5, 2, 123).unwrap();
        let again = sample_subsets(100_000, 0.5, 2, 123).unwrap();
        assert_eq!(masks, again);
        let other = sample_subsets(100_000, 0.5, 2, 124).unwrap();
        assert_ne!(masks, other);
        for mask in &masks {
            let kept = mask.iter().filter(|&&k| k).count() as f64 / 100_000.0;
            assert!((kept - 0.5).abs() < 0.01, "keep rate {kept}");
        }
        // Prefix property: the first subset is the same for any L.
        let one = sample_subsets(100_000, 0.5, 1, 123).unwrap();
        assert_eq!(one[0], masks[0]);
        // Degenerate rates.
        let all = sample_subsets(1000, 0.0, 3, 9).unwrap();
        assert!(all.iter().all(|m| m.iter().all(|&k| k)));
        assert!(sample_subsets(10, 1.0, 1, 0).is_err());
        assert!(sample_subsets(10, -0.1, 1, 0).is_err());
        assert!(sample_subsets(10, 0.5, 0, 0).is_err());
    }

    #[test]
    fn zero_dropout_ensemble_is_bitwise_full_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let camera = test_camera(24, 16);
        let cloud = scene_cloud(&mut rng, &camera, 50, 9);
        let config = RenderConfig {
            dropout_rate: 0.0,
            subsets: 2,
            background: vec![0.1],
            ..RenderConfig::new(1.0, 8.0)
        };
        let full = rasterize(&cloud, &camera, &config, None).unwrap();
        let ensemble = rasterize_ensemble(&cloud, &camera, &config).unwrap();
        assert_eq!(full.image, ensemble.image);
        assert!(ensemble.has_graph());
    }

    #[test]
    fn single_subset_ensemble_equals_masked_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let camera = test_camera(24, 16);
        let cloud = scene_cloud(&mut rng, &camera, 50, 9);
        let config = RenderConfig {
            dropout_rate: 0.5,
            subsets: 1,
            background: vec![0.1],
            ..RenderConfig::new(1.0, 8.0)
        };
        let ensemble = rasterize_ensemble(&cloud, &camera, &config).unwrap();
        let masks =
            sample_subsets(cloud.len(), config.dropout_rate, 1, config.seed).unwrap();
        let masked = rasterize(&cloud, &camera, &config, Some(&masks[0])).unwrap();
        assert_eq!(ensemble.image, masked.image);
        // Multi-subset ensembles avergae the images and drop the graph.
        let config2 = RenderConfig {
            subsets: 2,
            ..config
        };
        let two = rasterize_ensemble(&cloud, &camera, &config2).unwrap();
        assert!(!two.has_graph());
        let masks = sample_subsets(cloud.len(), 0.5, 2, config2.seed).unwrap();
        let a = rasterize(&cloud, &camera, &config2, Some(&masks[0])).unwrap();
        let b = rasterize(&cloud, &camera, &config2, Some(&masks[1])).unwrap();
        for i in 0..two.image.data.len() {
            let mean = (a.image.data[i] + b.image.data[i]) / 2.0;
            assert!((two.image.data[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation_errors() {
        let camera = test_camera(8, 8);
        let cloud = FeaturizedPointCloud::empty(9, 0.1).unwrap();
        let bad_bounds = RenderConfig {
            background: vec![0.0],
            ..RenderConfig::new(5.0, 2.0)
        };
        assert!(matches!(
            rasterize(&cloud, &camera, &bad_bounds, None).unwrap_err(),
            RasterError::InvalidBounds { .. }
        ));
        let bad_bg = RenderConfig::new(1.0, 5.0); // 3 channels vs 1-channel cloud
        assert!(matches!(
            rasterize(&cloud, &camera, &bad_bg, None).unwrap_err(),
            RasterError::BackgroundDim { .. }
        ));
        let good = RenderConfig {
            background: vec![0.0],
            ..RenderConfig::new(1.0, 5.0)
        };
        assert!(matches!(
            rasterize(&cloud, &camera, &good, Some(&[true; 3])).unwrap_err(),
            RasterError::MaskLength { .. }
        ));
    }
}
