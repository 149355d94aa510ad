//! Synthetic scenes, corruption operators, and image-quality metrics.
//!
//! The generator builds small posed scenes (a textured sphere, optionally
//! with a view-dependent lobe, or a plane with a box on it) and renders
//! reference images and exact depth maps by analytic ray tracing. Nothing
//! here touches the soft rasterizer, so these outputs can stand as
//! independent ground truth when testing it.
//!
//! Surface appearance lives directly in the degree-2 spherical-harmonic
//! basis: smooth seeded noise fields give each surface point 27 generating
//! coefficients, and a reference pixel's color is the coefficient dot the
//! basis at the actual viewing direction. View-dependent fixtures are
//! therefore exactly representable by the shading model, with no
//! approximation gap.
//!
//! Corruption operators inject labeled floaters along training rays and
//! carve world-space balls out of clouds or depth maps. Metrics are
//! standard PSNR (peak 1.0, capped at 99 dB) and single-scale SSIM with an
//! 11x11 Gaussian window.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{self, CloudError, DepthMap, FeaturizedPointCloud};
use crate::geometry::{Camera, GeometryError, Point3};
use crate::img::ImageBuf;
use crate::sculpt::{SceneBounds, SculptError};
use crate::sh;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(&'static str),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sculpt(#[from] SculptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Unit sphere with a view-independent albedo texture.
    LambertianSphere,
    /// Unit sphere whose texture adds bounded degree-1/2 coefficients.
    SpecularSphere,
    /// Ground disc with an axis-aligned unit box resting on it.
    PlaneAndBox,
}

/// Scene recipe: geometry kind, a camera ring, image size, and texture
/// seed. All cameras look at the scene anchor from a ring at fixed
/// elevation in a z-up world.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub n_cameras: usize,
    pub ring_radius: f64,
    pub elevation_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Focal length as a multiple of the smaller image side.
    pub focal_multiplier: f64,
    pub texture_seed: u64,
    pub bounds: SceneBounds,
    /// Depth maps are stored at 1/stride resolution.
    pub depth_stride: usize,
    /// Footprint radius given to the generated clouds.
    pub point_radius: f64,
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn lambertian_sphere() -> Self {
        Self {
            kind: SceneKind::LambertianSphere,
            n_cameras: 12,
            ring_radius: 4.0,
            elevation_deg: 20.0,
            width: 64,
            height: 64,
            focal_multiplier: 1.2,
            texture_seed: 7,
            bounds: SceneBounds::linear(2.0, 6.0),
            depth_stride: 2,
            point_radius: 0.04,
            background: [0.0; 3],
        }
    }

    pub fn specular_sphere() -> Self {
        Self {
            kind: SceneKind::SpecularSphere,
            ..Self::lambertian_sphere()
        }
    }

    pub fn plane_and_box() -> Self {
        Self {
            kind: SceneKind::PlaneAndBox,
            ring_radius: 5.0,
            elevation_deg: 35.0,
            bounds: SceneBounds::linear(2.0, 12.0),
            ..Self::lambertian_sphere()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_cameras < 2 {
            return Err(SynthError::InvalidSpec("at least 2 cameras required"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidSpec("image size must be positive"));
        }
        if self.depth_stride == 0
            || self.width as usize % self.depth_stride != 0
            || self.height as usize % self.depth_stride != 0
        {
            return Err(SynthError::InvalidSpec(
                "depth_stride must divide both image dimensions",
            ));
        }
        if !(self.ring_radius > 0.0 && self.focal_multiplier > 0.0 && self.point_radius > 0.0) {
            return Err(SynthError::InvalidSpec(
                "ring radius, focal multiplier, and point radius must be positive",
            ));
        }
        if !(-89.0..=89.0).contains(&self.elevation_deg) {
            return Err(SynthError::InvalidSpec(
                "elevation must stay clear of the poles",
            ));
        }
        self.bounds.validate()?;
        Ok(())
    }

    fn anchor(&self) -> Point3 {
        match self.kind {
            SceneKind::PlaneAndBox => Point3::new(0.0, 0.0, 0.5),
            _ => Point3::new(0.0, 0.0, 0.0),
        }
    }

    /// Ring cameras, evenly spaced in azimuth.
    pub fn cameras(&self) -> Result<Vec<Camera>, SynthError> {
        self.validate()?;
        let f = self.focal_multiplier * self.width.min(self.height) as f64;
        let k = Matrix3::new(
            f,
            0.0,
            (self.width as f64 - 1.0) / 2.0,
            0.0,
            f,
            (self.height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let elevation = self.elevation_deg.to_radians();
        let anchor = self.anchor();
        let mut cameras = Vec::with_capacity(self.n_cameras);
        for i in 0..self.n_cameras {
            let azimuth = 2.0 * std::f64::consts::PI * i as f64 / self.n_cameras as f64;
            let eye = anchor
                + self.ring_radius
                    * Vector3::new(
                        elevation.cos() * azimuth.cos(),
                        elevation.cos() * azimuth.sin(),
                        elevation.sin(),
                    );
            cameras.push(Camera::look_at(
                eye,
                anchor,
                Vector3::new(0.0, 0.0, 1.0),
                k,
                self.width,
                self.height,
            )?);
        }
        Ok(cameras)
    }
}

/// Smooth bounded scalar field: a sum of a few random cosine waves of
/// position, rescaled into [lo, hi].
struct NoiseField {
    waves: Vec<(Vector3<f64>, f64, f64)>,
    amplitude: f64,
    lo: f64,
    hi: f64,
}

impl NoiseField {
    fn new(rng: &mut impl Rng, lo: f64, hi: f64) -> Self {
        let waves: Vec<(Vector3<f64>, f64, f64)> = (0..4)
            .map(|_| {
                let dir = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize()
                    * rng.gen_range(0.8..2.5);
                (dir, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
            })
            .collect();
        let amplitude = waves.iter().map(|w| w.2).sum();
        Self {
            waves,
            amplitude,
            lo,
            hi,
        }
    }

    fn eval(&self, p: &Point3) -> f64 {
        let raw: f64 = self
            .waves
            .iter()
            .map(|(k, phase, amp)| amp * (k.dot(p) + phase).cos())
            .sum();
        self.lo + (self.hi - self.lo) * (raw / self.amplitude + 1.0) / 2.0
    }
}

/// Magnitude bound for the view-dependent coefficients; small enough that
/// colors stay within [0, 1] for any view direction.
const LOBE_MAGNITUDE: f64 = 0.05;

struct Texture {
    albedo: [NoiseField; 3],
    lobes: Option<Vec<NoiseField>>,
}

impl Texture {
    fn new(kind: SceneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let albedo = [
            NoiseField::new(&mut rng, 0.25, 0.75),
            NoiseField::new(&mut rng, 0.25, 0.75),
            NoiseField::new(&mut rng, 0.25, 0.75),
        ];
        let lobes = (kind == SceneKind::SpecularSphere).then(|| {
            (0..24)
                .map(|_| NoiseField::new(&mut rng, -LOBE_MAGNITUDE, LOBE_MAGNITUDE))
                .collect()
        });
        Self { albedo, lobes }
    }

    /// Generating coefficients at a surface point, 9 per channel.
    fn features_at(&self, p: &Point3) -> Vec<f64> {
        let mut f = vec![0.0; 27];
        for c in 0..3 {
            f[9 * c] = self.albedo[c].eval(p) / sh::C0;
        }
        if let Some(lobes) = &self.lobes {
            for c in 0..3 {
                for k in 1..9 {
                    f[9 * c + k] = lobes[8 * c + k - 1].eval(p);
                }
            }
        }
        f
    }
}

const PLANE_DISC_RADIUS: f64 = 4.0;

fn intersect_sphere(origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    let a = dir.dot(dir);
    let b = 2.0 * origin.dot(dir);
    let c = origin.dot(origin) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sqrt = disc.sqrt();
    let near = (-b - sqrt) / (2.0 * a);
    if near > 1e-9 {
        return Some(near);
    }
    let far = (-b + sqrt) / (2.0 * a);
    (far > 1e-9).then_some(far)
}

fn intersect_disc(origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = -origin.z / dir.z;
    if t <= 1e-9 {
        return None;
    }
    let hit = origin + dir * t;
    (hit.x * hit.x + hit.y * hit.y <= PLANE_DISC_RADIUS * PLANE_DISC_RADIUS).then_some(t)
}

fn intersect_box(origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    let lo = [-0.5, -0.5, 0.0];
    let hi = [0.5, 0.5, 1.0];
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[axis] - origin[axis]) / dir[axis];
        let mut t1 = (hi[axis] - origin[axis]) / dir[axis];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_lo = t_lo.max(t0);
        t_hi = t_hi.min(t1);
    }
    (t_hi >= t_lo && t_lo > 1e-9).then_some(t_lo)
}

fn intersect(kind: SceneKind, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    match kind {
        SceneKind::LambertianSphere | SceneKind::SpecularSphere => {
            intersect_sphere(origin, dir)
        }
        SceneKind::PlaneAndBox => match (
            intersect_disc(origin, dir),
            intersect_box(origin, dir),
        ) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        },
    }
}

/// Analytic reference data: oracle images, exact depth maps, and the true
/// surface cloud carrying its generating coefficients.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuf>,
    pub depth_maps: Vec<DepthMap>,
    /// Surface points (fusion order) with ground-truth coefficients.
    pub surface: FeaturizedPointCloud,
    pub background: [f64; 3],
}

/// Ray-traces the scene. Returns the ground truth plus the initial cloud a
/// pipeline would start from: the same surface points with zero features
/// and the default opacity logit.
pub fn generate(spec: &SceneSpec) -> Result<(GroundTruth, FeaturizedPointCloud), SynthError> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let texture = Texture::new(spec.kind, spec.texture_seed);
    let width = spec.width as usize;
    let height = spec.height as usize;
    let stride = spec.depth_stride;

    let mut images = Vec::with_capacity(cameras.len());
    let mut depth_maps = Vec::with_capacity(cameras.len());
    for camera in &cameras {
        let eye = camera.center();
        let rotation_t = camera.rotation().transpose();
        // Camera-frame ray direction with unit z, so the ray parameter is
        // exactly the camera-frame depth.
        let ray_dir = |u: f64, v: f64| rotation_t * (camera.inverse_intrinsics() * Vector3::new(u, v, 1.0));

        let mut image = ImageBuf::new(width, height, 3);
        for y in 0..height {
            for x in 0..width {
                let dir = ray_dir(x as f64, y as f64);
                let px = image.pixel_mut(x, y);
                match intersect(spec.kind, &eye, &dir) {
                    None => px.copy_from_slice(&spec.background),
                    Some(t) => {
                        let p = eye + dir * t;
                        let view = (eye - p).normalize();
                        let basis = sh::basis_unit(&view);
                        sh::modulate_into(&texture.features_at(&p), &basis, px);
                    }
                }
            }
        }
        images.push(image);

        let map_w = width / stride;
        let map_h = height / stride;
        let mut values = vec![0.0f64; map_w * map_h];
        let mut valid = vec![false; map_w * map_h];
        let offset = (stride as f64 - 1.0) / 2.0;
        for row in 0..map_h {
            for col in 0..map_w {
                let u = (col * stride) as f64 + offset;
                let v = (row * stride) as f64 + offset;
                if let Some(t) = intersect(spec.kind, &eye, &ray_dir(u, v)) {
                    values[row * map_w + col] = t;
                    valid[row * map_w + col] = true;
                }
            }
        }
        depth_maps.push(DepthMap::new(camera.clone(), stride, values, valid)?);
    }

    // Fusion gives the blank starting cloud; the surface cloud reuses its
    // positions (identical order) with the generating coefficients.
    let initial = cloud::fuse_depth_maps(
        &depth_maps,
        27,
        spec.point_radius,
        cloud::DEFAULT_OPACITY_LOGIT,
    )?;
    let mut surface_features = Vec::with_capacity(initial.len() * 27);
    for i in 0..initial.len() {
        surface_features.extend_from_slice(&texture.features_at(&initial.position(i)));
    }
    let surface = FeaturizedPointCloud::from_parts(
        initial.positions_flat().to_vec(),
        surface_features,
        initial.opacity_logits().to_vec(),
        27,
        spec.point_radius,
    )?;

    Ok((
        GroundTruth {
            cameras,
            images,
            depth_maps,
            surface,
            background: spec.background,
        },
        initial,
    ))
}

/// Appends `n` floaters at `depth_factor` times the true depth of random
/// valid depth-map pixels. Returns the corrupted cloud and a label per
/// point, true for injected floaters. Floaters carry zero features and an
/// opaque logit, so they visibly corrupt renders.
pub fn inject_floaters(
    cloud: &FeaturizedPointCloud,
    maps: &[DepthMap],
    n: usize,
    depth_factor: f64,
    seed: u64,
) -> Result<(FeaturizedPointCloud, Vec<bool>), SynthError> {
    if maps.is_empty() {
        return Err(SynthError::InvalidSpec(
            "floater injection needs at least one depth map",
        ));
    }
    if !(depth_factor > 0.0 && depth_factor.is_finite()) {
        return Err(SynthError::InvalidSpec("depth_factor must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(3 * n);
    let mut placed = 0;
    while placed < n {
        let map = &maps[rng.gen_range(0..maps.len())];
        let col = rng.gen_range(0..map.map_width());
        let row = rng.gen_range(0..map.map_height());
        let Some(depth) = map.value(col, row) else {
            continue;
        };
        let (u, v) = map.full_res_coords(col, row);
        let p = crate::geometry::unproject(
            &crate::geometry::PixelDepth::new(u, v, depth_factor * depth),
            map.camera(),
        );
        positions.extend_from_slice(&[p.x, p.y, p.z]);
        placed += 1;
    }
    let floaters = FeaturizedPointCloud::from_parts(
        positions,
        vec![0.0; n * cloud.feature_dim()],
        vec![cloud::DEFAULT_OPACITY_LOGIT; n],
        cloud.feature_dim(),
        cloud.radius(),
    )?;
    let merged = cloud::merge(cloud, &floaters)?;
    let mut labels = vec![false; merged.len()];
    for label in labels.iter_mut().skip(cloud.len()) {
        *label = true;
    }
    Ok((merged, labels))
}

/// Removes every point within the world-space ball. Returns the carved
/// cloud and a removed-label per original index.
pub fn carve_hole_in_cloud(
    cloud: &FeaturizedPointCloud,
    center: &Point3,
    radius: f64,
) -> (FeaturizedPointCloud, Vec<bool>) {
    let removed: Vec<bool> = (0..cloud.len())
        .map(|i| (cloud.position(i) - center).norm() <= radius)
        .collect();
    let keep: Vec<bool> = removed.iter().map(|&r| !r).collect();
    (cloud.filter(&keep), removed)
}

/// Invalidates every depth-map pixel whose surface point lies within the
/// ball.
pub fn carve_hole_in_maps(
    maps: &[DepthMap],
    center: &Point3,
    radius: f64,
) -> Result<Vec<DepthMap>, SynthError> {
    let mut out = Vec::with_capacity(maps.len());
    for map in maps {
        let mut values = map.values().to_vec();
        let mut valid = map.validity().to_vec();
        for row in 0..map.map_height() {
            for col in 0..map.map_width() {
                let idx = row * map.map_width() + col;
                if !valid[idx] {
                    continue;
                }
                let (u, v) = map.full_res_coords(col, row);
                let p = crate::geometry::unproject(
                    &crate::geometry::PixelDepth::new(u, v, values[idx]),
                    map.camera(),
                );
                if (p - center).norm() <= radius {
                    valid[idx] = false;
                    values[idx] = 0.0;
                }
            }
        }
        out.push(DepthMap::new(map.camera().clone(), map.stride(), values, valid)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("image shapes differ: {a:?} vs {b:?} (width, height, channels)")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("image side {side} is smaller than the 11-pixel window")]
    TooSmall { side: usize },
}

/// Cap reported for identical images (and any PSNR beyond it).
pub const PSNR_CAP: f64 = 99.0;

fn metric_shapes(a: &ImageBuf, b: &ImageBuf) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch {
            a: (a.width(), a.height(), a.channels()),
            b: (b.width(), b.height(), b.channels()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB against a peak of 1.0, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricError> {
    metric_shapes(a, b)?;
    let n = a.data.len();
    if n == 0 {
        return Ok(PSNR_CAP);
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5f64;
    let mut w = [0.0; SSIM_WINDOW];
    let mut total = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *wi = (-d * d / (2.0 * sigma * sigma)).exp();
        total += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= total;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0, averaged over all fully interior windows
/// and channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricError> {
    metric_shapes(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let side = w.min(h);
    if side < SSIM_WINDOW {
        return Err(MetricError::TooSmall { side });
    }
    let kernel = gaussian_window();
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let weight = kernel[dy] * kernel[dx];
                        let va = a.get(x0 + dx, y0 + dy, c);
                        let vb = b.get(x0 + dx, y0 + dy, c);
                        ma += weight * va;
                        mb += weight * vb;
                        saa += weight * va * va;
                        sbb += weight * vb * vb;
                        sab += weight * va * vb;
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Blends every value toward mid-gray: `x + strength * (0.5 - x)`.
pub fn gray_blend(image: &ImageBuf, strength: f64) -> ImageBuf {
    let mut out = image.clone();
    for v in out.data.iter_mut() {
        *v += strength * (0.5 - *v);
    }
    out
}

/// Circularly shifts the image by whole pixels.
pub fn circular_shift(image: &ImageBuf, dx: isize, dy: isize) -> ImageBuf {
    let (w, h, ch) = (
        image.width() as isize,
        image.height() as isize,
        image.channels(),
    );
    ImageBuf::from_fn(
        image.width(),
        image.height(),
        ch,
        |x, y, c| {
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            image.get(sx, sy, c)
        },
    )
}

/// Outcome of the pixel-misalignment sensitivity experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub shift_psnr: f64,
    pub shift_ssim: f64,
    pub blend_psnr: f64,
    pub blend_ssim: f64,
    /// Whether the one-pixel shift scored a lower PSNR than the full gray
    /// blend; `None` when the input is degenerate (shift changes nothing).
    pub shift_scores_lower: Option<bool>,
}

/// Compares two mild corruptions of a texture: a one-pixel circular shift
/// versus blending every pixel all the way to mid-gray. On detailed
/// textures the imperceptible shift scores far worse, which is the reason
/// pixel-space PSNR undervalues sharp but slightly misaligned renders.
pub fn shift_sensitivity_experiment(texture: &ImageBuf) -> Result<ShiftReport, MetricError> {
    let shifted = circular_shift(texture, 1, 0);
    let blended = gray_blend(texture, 1.0);
    let shift_psnr = psnr(texture, &shifted)?;
    let blend_psnr = psnr(texture, &blended)?;
    let shift_ssim = ssim(texture, &shifted)?;
    let blend_ssim = ssim(texture, &blended)?;
    let shift_scores_lower = (shift_psnr < PSNR_CAP).then_some(shift_psnr < blend_psnr);
    Ok(ShiftReport {
        shift_psnr,
        shift_ssim,
        blend_psnr,
        blend_ssim,
        shift_scores_lower,
    })
}
