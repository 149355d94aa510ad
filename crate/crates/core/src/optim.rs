//! Losses, analytic gradients, and the Adam training loop.
//!
//! The photometric objective is `L = L1 + lambda_tv * TV` between a
//! rasterized image and a reference. [`backward`] propagates an arbitrary
//! image gradient through the saved blend graph of a forward pass and
//! returns exact gradients for point positions, features, and opacity
//! logits. Within one step the set of pixels a footprint covers is held
//! fixed; coverage is differentiated in the footprint interior.
//!
//! For one pixel with contributors `i`, weights `w_i = a_i e^{eps_i} / S`
//! (amplitude `a_i = sigma_i c_i`, background mass `e^0`), and an image
//! gradient `g`, let `D_i = g . s_i` and `G = sum_j w_j D_j + w_bg D_bg`.
//! Then:
//!
//! - `dL/d eps_i   = w_i (D_i - G)`, which reaches depth through
//!   `eps = (z_far - d) / ((z_far - z_near) gamma)`;
//! - `dL/d a_i     = (w_i / a_i)(D_i - G)`, splitting into the opacity
//!   logit via `sigma'` and the coverage via `c = 1 - rho^2 / r_px^2`;
//! - features get `w_i g_c b_k` per spherical-harmonic block, and the
//!   basis itself feeds back into the position through the view direction.
//!
//! Positions collect the pixel-space terms through the projection Jacobian
//! of the pinhole model and the camera rotation.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::FeaturizedPointCloud;
use crate::geometry::Camera;
use crate::img::ImageBuf;
use crate::raster::{self, RenderConfig, RenderOutput};
use crate::sh;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("image shapes differ: {a:?} vs {b:?} (width, height, channels)")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("forward output does not match this cloud/camera/config; re-render before backward")]
    StaleGraph,
    #[error("output carries no saved blend graph (ensemble averages drop it)")]
    NoGraph,
    #[error("training requires at least one view")]
    EmptyTrainingSet,
    #[error("invalid training options: {0}")]
    InvalidOptions(&'static str),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
}

/// Mean absolute difference over all pixel-channel entries.
pub fn l1_loss(rendered: &ImageBuf, target: &ImageBuf) -> Result<f64, OptimError> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| (r - t).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Gradient of [`l1_loss`] with respect to the rendered image.
pub fn l1_loss_gradient(rendered: &ImageBuf, target: &ImageBuf) -> Result<ImageBuf, OptimError> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len().max(1) as f64;
    let mut out = ImageBuf::new(rendered.width(), rendered.height(), rendered.channels());
    for (o, (r, t)) in out.data.iter_mut().zip(rendered.data.iter().zip(&target.data)) {
        *o = sign(r - t) / n;
    }
    Ok(out)
}

/// Total variation: the sum of absolute forward differences along both
/// axes, over all channels. Boundary rows and columns contribute only the
/// differences that exist.
pub fn tv_loss(image: &ImageBuf) -> f64 {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = image.get(x, y, c);
                if x + 1 < w {
                    total += (image.get(x + 1, y, c) - v).abs();
                }
                if y + 1 < h {
                    total += (image.get(x, y + 1, c) - v).abs();
                }
            }
        }
    }
    total
}

/// Gradient of [`tv_loss`] with respect to the image (subgradient 0 at
/// exact ties).
pub fn tv_loss_gradient(image: &ImageBuf) -> ImageBuf {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let mut out = ImageBuf::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = image.get(x, y, c);
                if x + 1 < w {
                    let s = sign(image.get(x + 1, y, c) - v);
                    *out.pixel_mut(x + 1, y).get_mut(c).unwrap() += s;
                    *out.pixel_mut(x, y).get_mut(c).unwrap() -= s;
                }
                if y + 1 < h {
                    let s = sign(image.get(x, y + 1, c) - v);
                    *out.pixel_mut(x, y + 1).get_mut(c).unwrap() += s;
                    *out.pixel_mut(x, y).get_mut(c).unwrap() -= s;
                }
            }
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_shapes(a: &ImageBuf, b: &ImageBuf) -> Result<(), OptimError> {
    if !a.same_shape(b) {
        return Err(OptimError::ShapeMismatch {
            a: (a.width(), a.height(), a.channels()),
            b: (b.width(), b.height(), b.channels()),
        });
    }
    Ok(())
}

/// Parameter gradients, laid out exactly like the cloud buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub positions: Vec<f64>,
    pub features: Vec<f64>,
    pub opacity_logits: Vec<f64>,
}

impl Gradients {
    pub fn zeros(points: usize, feature_dim: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * points],
            features: vec![0.0; feature_dim * points],
            opacity_logits: vec![0.0; points],
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.positions.iter().all(|&g| g == 0.0)
            && self.features.iter().all(|&g| g == 0.0)
            && self.opacity_logits.iter().all(|&g| g == 0.0)
    }
}

struct PointView {
    dir: Vector3<f64>,
    dist: f64,
    basis: [f64; sh::BASIS_LEN],
    color: Vec<f64>,
}

/// Propagates `d_image` (the loss gradient with respect to the rendered
/// image) through the saved blend graph back to the cloud parameters.
///
/// The output must come from [`raster::rasterize`] on exactly this cloud,
/// camera, and config; mutating any of them in between yields
/// [`OptimError::StaleGraph`].
pub fn backward(
    cloud: &FeaturizedPointCloud,
    camera: &Camera,
    config: &RenderConfig,
    output: &RenderOutput,
    d_image: &ImageBuf,
) -> Result<Gradients, OptimError> {
    if !output.has_graph() {
        return Err(OptimError::NoGraph);
    }
    if output.fingerprint != raster::blend_fingerprint(cloud, camera, config) {
        return Err(OptimError::StaleGraph);
    }
    check_shapes(d_image, &output.image)?;
    config.validate(cloud.channels())?;

    let channels = cloud.channels();
    let feature_dim = cloud.feature_dim();
    let width = camera.width() as usize;
    let height = camera.height() as usize;
    let r_px = raster::pixel_radius(config.radius, camera.width(), camera.height());
    let r2 = r_px * r_px;
    let span = config.z_far - config.z_near;
    let eye = camera.center();
    let k = camera.intrinsics();
    let (k00, k01, k02) = (k[(0, 0)], k[(0, 1)], k[(0, 2)]);
    let (k11, k12) = (k[(1, 1)], k[(1, 2)]);
    let rotation_t = camera.rotation().transpose();

    let mut grads = Gradients::zeros(cloud.len(), feature_dim);
    // Per-point view-dependent values are identical across the pixels of
    // one render; cache them lazily.
    let mut cache: Vec<Option<PointView>> = (0..cloud.len()).map(|_| None).collect();
    let point_view = |i: usize, cache: &mut Vec<Option<PointView>>| {
        if cache[i].is_none() {
            let p = cloud.position(i);
            let r = eye - p;
            let dist = r.norm();
            let dir = r / dist;
            let basis = sh::basis_unit(&dir);
            let mut color = vec![0.0; channels];
            sh::modulate_into(cloud.feature(i), &basis, &mut color);
            cache[i] = Some(PointView {
                dir,
                dist,
                basis,
                color,
            });
        }
    };

    for y in 0..height {
        for x in 0..width {
            let contribs = output.contributors(x, y);
            if contribs.is_empty() {
                continue;
            }
            let g = d_image.pixel(x, y);
            let d_bg: f64 = g
                .iter()
                .zip(&config.background)
                .map(|(gi, bi)| gi * bi)
                .sum();
            let w_bg = 1.0 - output.weight_sums[y * width + x];
            let mut blended = w_bg * d_bg;
            for con in contribs {
                let i = con.point as usize;
                point_view(i, &mut cache);
                let pv = cache[i].as_ref().unwrap();
                let d_i: f64 = g.iter().zip(&pv.color).map(|(gi, si)| gi * si).sum();
                blended += con.weight * d_i;
            }

            for con in contribs {
                let i = con.point as usize;
                let pv = cache[i].as_ref().unwrap();
                let d_i: f64 = g.iter().zip(&pv.color).map(|(gi, si)| gi * si).sum();
                let excess = d_i - blended;

                // Opacity logit through dL/da and sigma'.
                let sigma = raster::sigmoid(cloud.opacity_logits()[i]);
                grads.opacity_logits[i] += con.weight * (1.0 - sigma) * excess;

                // Features: dL/df[c*9+k] = w g_c b_k. The same products,
                // contracted against the features instead, give the basis
                // gradient for the view-direction chain.
                let f = cloud.feature(i);
                let mut d_basis = [0.0f64; sh::BASIS_LEN];
                for (c, gi) in g.iter().enumerate() {
                    let gw = con.weight * gi;
                    let block = &f[c * sh::BASIS_LEN..(c + 1) * sh::BASIS_LEN];
                    let grad_block =
                        &mut grads.features[i * feature_dim + c * sh::BASIS_LEN..];
                    for k in 0..sh::BASIS_LEN {
                        grad_block[k] += gw * pv.basis[k];
                        d_basis[k] += gw * block[k];
                    }
                }
                let basis_grad = sh::basis_gradient(&pv.dir);
                let mut d_dir = Vector3::zeros();
                for (k, row) in basis_grad.iter().enumerate() {
                    d_dir += Vector3::new(row[0], row[1], row[2]) * d_basis[k];
                }
                // dir = (eye - p)/dist, so ddir/dp = -(I - dir dir^T)/dist.
                let tangential = d_dir - pv.dir * pv.dir.dot(&d_dir);
                let mut d_p = -tangential / pv.dist;

                // Closeness: eps = (z_far - depth) / (span * gamma).
                let d_depth = -(con.weight * excess) / (config.gamma * span);

                // Coverage: c = 1 - (du^2 + dv^2)/r_px^2.
                let coverage = 1.0 - (con.du * con.du + con.dv * con.dv) / r2;
                let (mut d_u, mut d_v) = (0.0, 0.0);
                if con.weight > 0.0 && coverage > 0.0 {
                    let d_cov = con.weight * excess / coverage;
                    d_u = d_cov * (-2.0 * con.du / r2);
                    d_v = d_cov * (-2.0 * con.dv / r2);
                }

                // Pixel coordinates and depth back to the camera frame,
                // then to world space.
                let z = con.depth;
                let u = con.du + x as f64;
                let v = con.dv + y as f64;
                let d_x_cam = Vector3::new(
                    d_u * k00 / z,
                    (d_u * k01 + d_v * k11) / z,
                    -(d_u * (u - k02) + d_v * (v - k12)) / z + d_depth,
                );
                d_p += rotation_t * d_x_cam;
                grads.positions[3 * i] += d_p.x;
                grads.positions[3 * i + 1] += d_p.y;
                grads.positions[3 * i + 2] += d_p.z;
            }
        }
    }
    Ok(grads)
}

/// Adam moment decay rates and the denominator floor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
    assert_eq!(params.len(), state.m.len(), "param/state length mismatch");
    state.step += 1;
    let bc1 = 1.0 - config.beta1.powi(state.step as i32);
    let bc2 = 1.0 - config.beta2.powi(state.step as i32);
    for j in 0..params.len() {
        state.m[j] = config.beta1 * state.m[j] + (1.0 - config.beta1) * grads[j];
        state.v[j] = config.beta2 * state.v[j] + (1.0 - config.beta2) * grads[j] * grads[j];
        let m_hat = state.m[j] / bc1;
        let v_hat = state.v[j] / bc2;
        params[j] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}

/// Learning-rate schedule, as a multiplier on the per-group base rates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Constant base rates for the whole run.
    Fixed,
    /// Cosine warmup from `base / div_factor` to `base` over the first
    /// `pct_start` of the run, then cosine annealing down to
    /// `base / (div_factor * final_div_factor)`.
    OneCycle {
        pct_start: f64,
        div_factor: f64,
        final_div_factor: f64,
    },
}

impl LrSchedule {
    /// The usual one-cycle shape: warm up over 30%, start 25x lower, end
    /// 10^4 lower than the start.
    pub fn one_cycle() -> Self {
        Self::OneCycle {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    /// Multiplier at `step` (0-based) of a `total`-step run.
    pub fn scale(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Fixed => 1.0,
            LrSchedule::OneCycle {
                pct_start,
                div_factor,
                final_div_factor,
            } => {
                if total <= 1 {
                    return 1.0;
                }
                let t = step as f64 / (total - 1) as f64;
                let start = 1.0 / div_factor;
                let floor = start / final_div_factor;
                if t <= pct_start {
                    let s = if pct_start > 0.0 { t / pct_start } else { 1.0 };
                    start + (1.0 - start) * (1.0 - (std::f64::consts::PI * s).cos()) / 2.0
                } else {
                    let s = (t - pct_start) / (1.0 - pct_start);
                    floor + (1.0 - floor) * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
                }
            }
        }
    }
}

/// One training view: a reference image and the camera that sees it.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageBuf,
}

/// Training-loop knobs. Defaults: 2,000 steps at fixed rates 1e-2
/// (features), 1e-4 (positions), 1e-4 (opacity), TV weight 0.01.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr_features: f64,
    pub lr_positions: f64,
    pub lr_opacity: f64,
    pub tv_weight: f64,
    /// Keep positions and opacity logits fixed; only features train.
    pub freeze_geometry: bool,
    /// Zero the gradients of all non-constant basis coefficients, leaving
    /// a view-independent (degree-0 only) model.
    pub freeze_view_dependence: bool,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_features: 1e-2,
            lr_positions: 1e-4,
            lr_opacity: 1e-4,
            tv_weight: 0.01,
            freeze_geometry: false,
            freeze_view_dependence: false,
            schedule: LrSchedule::Fixed,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<(), OptimError> {
        for lr in [self.lr_features, self.lr_positions, self.lr_opacity] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(OptimError::InvalidOptions(
                    "learning rates must be finite and nonnegative",
                ));
            }
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(OptimError::InvalidOptions(
                "tv_weight must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Per-step loss snapshot; `total = l1 + tv_weight * tv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub tv: f64,
    pub total: f64,
}

/// Writes `step,l1,tv,total` rows. Deterministic byte-for-byte for equal
/// records.
pub fn write_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,l1,tv,total")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.step, r.l1, r.tv, r.total)?;
    }
    out.into_inner()?.sync_all().ok();
    Ok(())
}

/// Optimizes the cloud in place against the training views.
///
/// Each step samples one view uniformly, then one fresh dropout keep-mask
/// (when `config.dropout_rate > 0`), renders, and applies one Adam update
/// per parameter group. Deterministic in `options.seed`.
///
/// The objective is `mean-L1 + tv_weight * tv`, where `tv` is [`tv_loss`]
/// divided by the sample count so both terms are per-sample means and the
/// weight is independent of image resolution. Recorded [`LossRecord`]s use
/// the same per-sample `tv`.
pub fn train(
    cloud: &mut FeaturizedPointCloud,
    views: &[TrainView],
    config: &RenderConfig,
    options: &TrainOptions,
) -> Result<Vec<LossRecord>, OptimError> {
    if views.is_empty() {
        return Err(OptimError::EmptyTrainingSet);
    }
    options.validate()?;
    config.validate(cloud.channels())?;
    for view in views {
        let shape = (
            view.camera.width() as usize,
            view.camera.height() as usize,
            cloud.channels(),
        );
        let got = (view.image.width(), view.image.height(), view.image.channels());
        if shape != got {
            return Err(OptimError::ShapeMismatch { a: got, b: shape });
        }
    }

    let n = cloud.len();
    let feature_dim = cloud.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut feature_state = AdamState::new(n * feature_dim);
    let mut position_state = AdamState::new(3 * n);
    let mut opacity_state = AdamState::new(n);
    let mut records = Vec::with_capacity(options.steps);

    for step in 0..options.steps {
        let view = &views[rng.gen_range(0..views.len())];
        let mask: Option<Vec<bool>> = if config.dropout_rate > 0.0 {
            Some(
                (0..n)
                    .map(|_| rng.gen::<f64>() >= config.dropout_rate)
                    .collect(),
            )
        } else {
            None
        };
        let out = raster::rasterize(cloud, &view.camera, config, mask.as_deref())?;

        let l1 = l1_loss(&out.image, &view.image)?;
        let n_samples = out.image.data.len().max(1) as f64;
        let tv = tv_loss(&out.image) / n_samples;
        let mut d_image = l1_loss_gradient(&out.image, &view.image)?;
        if options.tv_weight != 0.0 {
            d_image.accumulate(&tv_loss_gradient(&out.image), options.tv_weight / n_samples);
        }
        let mut grads = backward(cloud, &view.camera, config, &out, &d_image)?;
        if options.freeze_view_dependence {
            for (j, g) in grads.features.iter_mut().enumerate() {
                if j % sh::BASIS_LEN != 0 {
                    *g = 0.0;
                }
            }
        }

        let scale = options.schedule.scale(step, options.steps);
        adam_step(
            &mut cloud.features,
            &grads.features,
            &mut feature_state,
            &options.adam,
            options.lr_features * scale,
        );
        if !options.freeze_geometry {
            adam_step(
                &mut cloud.positions,
                &grads.positions,
                &mut position_state,
                &options.adam,
                options.lr_positions * scale,
            );
            adam_step(
                &mut cloud.opacity_logits,
                &grads.opacity_logits,
                &mut opacity_state,
                &options.adam,
                options.lr_opacity * scale,
            );
        }
        records.push(LossRecord {
            step,
            l1,
            tv,
            total: l1 + options.tv_weight * tv,
        });
    }
    Ok(records)
}
