//! Pipeline configuration: one JSON file, every field overridable by a
//! matching command-line flag.

use std::fmt;
use std::path::{Path, PathBuf};

use pointsculpt::optim::{LrSchedule, TrainOptions};
use pointsculpt::raster::RenderConfig;
use pointsculpt::sculpt::{AddParams, DepthSampling, SceneBounds};

use crate::CliError;

/// Sculpting knobs: the pruning ratio, the adding trigger, and how
/// candidate depths are drawn along rays.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SculptSettings {
    /// Keep a point only while its depth is at least `delta_d` times every
    /// view's observed depth.
    pub delta_d: f64,
    /// Adding triggers where error >= factor * mean error.
    pub delta_e_factor: f64,
    /// Points accepted per triggering pixel.
    pub max_per_pixel: usize,
    /// Candidate depths per ray.
    pub n_bins: usize,
    pub sampling: DepthSampling,
    /// Occlusion slack when vetting candidates.
    pub eps_occ: f64,
    /// Steps of the feature fit between pruning and adding.
    pub steps: usize,
}

impl Default for SculptSettings {
    fn default() -> Self {
        Self {
            delta_d: 0.8,
            delta_e_factor: 5.0,
            max_per_pixel: 5,
            n_bins: 100,
            sampling: DepthSampling::Linear,
            eps_occ: 0.0,
            steps: 500,
        }
    }
}

/// Training knobs in config-file form.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub steps: usize,
    pub lr_features: f64,
    pub lr_positions: f64,
    pub lr_opacity: f64,
    pub tv_weight: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        let defaults = TrainOptions::default();
        Self {
            steps: defaults.steps,
            lr_features: defaults.lr_features,
            lr_positions: defaults.lr_positions,
            lr_opacity: defaults.lr_opacity,
            tv_weight: defaults.tv_weight,
            schedule: defaults.schedule,
            seed: defaults.seed,
        }
    }
}

/// Synthetic benchmark shape: scenes, variants, corruption strength, and
/// the train/held-out split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub scenes: Vec<String>,
    pub variants: Vec<String>,
    pub n_cameras: usize,
    pub width: u32,
    pub height: u32,
    pub n_floaters: usize,
    pub hole_center: [f64; 3],
    pub hole_radius: f64,
    /// Every k-th view is held out of training.
    pub held_every: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            scenes: vec!["lambertian_sphere".into()],
            variants: vec!["full".into(), "baseline".into()],
            n_cameras: 25,
            width: 64,
            height: 64,
            n_floaters: 150,
            hole_center: [1.0, 0.0, 0.0],
            hole_radius: 0.35,
            held_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Camera JSON file.
    pub cameras: PathBuf,
    /// Directory of depth `.pfm` files with `.json` sidecars.
    pub depth_maps: PathBuf,
    /// Directory of reference `view_NNN.png` images.
    pub images: PathBuf,
    /// Directory receiving every artifact this run writes.
    pub output: PathBuf,
    pub render: RenderConfig,
    pub sculpt: SculptSettings,
    pub optimizer: OptimSettings,
    pub bench: BenchSettings,
    /// Ablation: skip consistency pruning.
    pub no_prune: bool,
    /// Ablation: skip error-driven adding.
    pub no_add: bool,
    /// Ablation: keep positions and opacities fixed while training.
    pub freeze_geometry: bool,
    /// Ablation: disable point dropout everywhere.
    pub no_dropout: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cameras: PathBuf::from("cameras.json"),
            depth_maps: PathBuf::from("depth"),
            images: PathBuf::from("images"),
            output: PathBuf::from("out"),
            render: RenderConfig::default(),
            sculpt: SculptSettings::default(),
            optimizer: OptimSettings::default(),
            bench: BenchSettings::default(),
            no_prune: false,
            no_add: false,
            freeze_geometry: false,
            no_dropout: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format_args!("reading config {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::io(format_args!("parsing config {}", path.display()), e))
    }

    /// Rendering configuration with the dropout ablation applied.
    pub fn render_config(&self) -> RenderConfig {
        let mut render = self.render.clone();
        if self.no_dropout {
            render.dropout_rate = 0.0;
        }
        render
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.optimizer.steps,
            lr_features: self.optimizer.lr_features,
            lr_positions: self.optimizer.lr_positions,
            lr_opacity: self.optimizer.lr_opacity,
            tv_weight: self.optimizer.tv_weight,
            freeze_geometry: self.freeze_geometry,
            freeze_view_dependence: false,
            schedule: self.optimizer.schedule.clone(),
            adam: Default::default(),
            seed: self.optimizer.seed,
        }
    }

    pub fn scene_bounds(&self) -> SceneBounds {
        SceneBounds {
            z_near: self.render.z_near,
            z_far: self.render.z_far,
            n_bins: self.sculpt.n_bins,
            sampling: self.sculpt.sampling,
        }
    }

    pub fn add_params(&self) -> AddParams {
        AddParams {
            delta_e_factor: self.sculpt.delta_e_factor,
            max_per_pixel: self.sculpt.max_per_pixel,
            eps_occ: self.sculpt.eps_occ,
            ..AddParams::default()
        }
    }
}

/// Command-line overrides; any flag that is present replaces the matching
/// config value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Camera JSON file.
    #[arg(long, global = true, value_name = "FILE")]
    pub cameras: Option<PathBuf>,
    /// Directory of depth .pfm files.
    #[arg(long, global = true, value_name = "DIR")]
    pub depth_maps: Option<PathBuf>,
    /// Directory of reference view_NNN.png images.
    #[arg(long, global = true, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short = 'o', global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,

    /// Blend temperature.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Splat radius in normalized device units.
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    /// Per-point dropout probability.
    #[arg(long, global = true)]
    pub dropout_rate: Option<f64>,
    /// Dropout subsets averaged at render time.
    #[arg(long, global = true)]
    pub subsets: Option<usize>,
    /// Background color, comma separated.
    #[arg(long, global = true, value_delimiter = ',', value_name = "R,G,B")]
    pub background: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub z_near: Option<f64>,
    #[arg(long, global = true)]
    pub z_far: Option<f64>,
    /// Seed for dropout subset sampling.
    #[arg(long, global = true)]
    pub render_seed: Option<u64>,

    /// Pruning depth ratio in (0, 1].
    #[arg(long, global = true)]
    pub delta_d: Option<f64>,
    /// Adding threshold factor over the mean error.
    #[arg(long, global = true)]
    pub delta_e_factor: Option<f64>,
    /// Points accepted per triggering pixel.
    #[arg(long, global = true)]
    pub max_per_pixel: Option<usize>,
    /// Candidate depths per ray.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Candidate spacing: linear or inverse_depth.
    #[arg(long, global = true, value_parser = parse_sampling)]
    pub sampling: Option<DepthSampling>,
    /// Occlusion slack for candidate vetting.
    #[arg(long, global = true)]
    pub eps_occ: Option<f64>,
    /// Steps of the feature fit between pruning and adding.
    #[arg(long, global = true)]
    pub sculpt_steps: Option<usize>,

    /// Training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub lr_features: Option<f64>,
    #[arg(long, global = true)]
    pub lr_positions: Option<f64>,
    #[arg(long, global = true)]
    pub lr_opacity: Option<f64>,
    /// Total-variation weight.
    #[arg(long, global = true)]
    pub tv_weight: Option<f64>,
    /// Learning-rate schedule: fixed or one_cycle.
    #[arg(long, global = true, value_parser = parse_schedule)]
    pub schedule: Option<LrSchedule>,
    /// Training seed (view order and dropout masks).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Skip consistency pruning.
    #[arg(long, global = true)]
    pub no_prune: bool,
    /// Skip error-driven adding.
    #[arg(long, global = true)]
    pub no_add: bool,
    /// Keep positions and opacities fixed while training.
    #[arg(long, global = true)]
    pub freeze_geometry: bool,
    /// Disable point dropout everywhere.
    #[arg(long, global = true)]
    pub no_dropout: bool,

    /// Benchmark scenes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub scenes: Option<Vec<String>>,
    /// Benchmark variants, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Cameras on the benchmark ring.
    #[arg(long, global = true)]
    pub bench_cameras: Option<usize>,
    /// Benchmark image side in pixels.
    #[arg(long, global = true)]
    pub bench_size: Option<u32>,
    /// Floaters injected into benchmark clouds.
    #[arg(long, global = true)]
    pub floaters: Option<usize>,
    /// Hole center carved from benchmark clouds.
    #[arg(long, global = true, value_delimiter = ',', value_name = "X,Y,Z")]
    pub hole_center: Option<Vec<f64>>,
    /// Hole radius carved from benchmark clouds.
    #[arg(long, global = true)]
    pub hole_radius: Option<f64>,
    /// Hold out every k-th benchmark view.
    #[arg(long, global = true)]
    pub held_every: Option<usize>,
}

fn parse_sampling(s: &str) -> Result<DepthSampling, String> {
    match s {
        "linear" => Ok(DepthSampling::Linear),
        "inverse_depth" => Ok(DepthSampling::InverseDepth),
        other => Err(format!(
            "unknown sampling {other:?}; expected linear or inverse_depth"
        )),
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    match s {
        "fixed" => Ok(LrSchedule::Fixed),
        "one_cycle" => Ok(LrSchedule::one_cycle()),
        other => Err(format!(
            "unknown schedule {other:?}; expected fixed or one_cycle"
        )),
    }
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($field:expr, $target:expr) => {
                if let Some(v) = &$field {
                    $target = v.clone();
                }
            };
        }
        set!(self.cameras, config.cameras);
        set!(self.depth_maps, config.depth_maps);
        set!(self.images, config.images);
        set!(self.output, config.output);
        set!(self.gamma, config.render.gamma);
        set!(self.radius, config.render.radius);
        set!(self.dropout_rate, config.render.dropout_rate);
        set!(self.subsets, config.render.subsets);
        set!(self.background, config.render.background);
        set!(self.z_near, config.render.z_near);
        set!(self.z_far, config.render.z_far);
        set!(self.render_seed, config.render.seed);
        set!(self.delta_d, config.sculpt.delta_d);
        set!(self.delta_e_factor, config.sculpt.delta_e_factor);
        set!(self.max_per_pixel, config.sculpt.max_per_pixel);
        set!(self.bins, config.sculpt.n_bins);
        set!(self.sampling, config.sculpt.sampling);
        set!(self.eps_occ, config.sculpt.eps_occ);
        set!(self.sculpt_steps, config.sculpt.steps);
        set!(self.steps, config.optimizer.steps);
        set!(self.lr_features, config.optimizer.lr_features);
        set!(self.lr_positions, config.optimizer.lr_positions);
        set!(self.lr_opacity, config.optimizer.lr_opacity);
        set!(self.tv_weight, config.optimizer.tv_weight);
        set!(self.schedule, config.optimizer.schedule);
        set!(self.seed, config.optimizer.seed);
        set!(self.scenes, config.bench.scenes);
        set!(self.variants, config.bench.variants);
        set!(self.bench_cameras, config.bench.n_cameras);
        set!(self.floaters, config.bench.n_floaters);
        set!(self.hole_radius, config.bench.hole_radius);
        set!(self.held_every, config.bench.held_every);
        if let Some(size) = self.bench_size {
            config.bench.width = size;
            config.bench.height = size;
        }
        if let Some(center) = &self.hole_center {
            if center.len() != 3 {
                return Err(CliError::Validation(
                    "--hole-center needs exactly three components".into(),
                ));
            }
            config.bench.hole_center = [center[0], center[1], center[2]];
        }
        config.no_prune |= self.no_prune;
        config.no_add |= self.no_add;
        config.freeze_geometry |= self.freeze_geometry;
        config.no_dropout |= self.no_dropout;
        Ok(())
    }
}

/// Writes one `stage=...` line of key=value pairs to standard error.
pub fn log_stage(stage: &str, fields: fmt::Arguments<'_>) {
    eprintln!("stage={stage} {fields}");
}
