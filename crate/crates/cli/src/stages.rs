//! One function per subcommand plus the shared data loaders. Each stage
//! claims the output-directory lock, does its work, and logs a single
//! structured line to standard error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pointsculpt::cloud::{self, DepthMap, FeaturizedPointCloud, DEFAULT_OPACITY_LOGIT};
use pointsculpt::geometry::{self, Camera, Point3};
use pointsculpt::io;
use pointsculpt::optim::{self, TrainView};
use pointsculpt::raster::{self, RenderConfig};
use pointsculpt::report::{self, BenchRecord, ReportError};
use pointsculpt::sculpt;
use pointsculpt::synth::{self, SceneSpec};

use crate::config::{log_stage, PipelineConfig};
use crate::edit;
use crate::lock::OutputLock;
use crate::CliError;

pub const SWEEP_HEADER: &str = "subsets,psnr,ssim,frame_seconds";

fn view_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

fn depth_name(i: usize) -> String {
    format!("depth_{i:03}.pfm")
}

fn report_err(e: ReportError) -> CliError {
    match &e {
        ReportError::Io(_) | ReportError::MalformedCsv { .. } => CliError::Io(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, CliError> {
    geometry::read_cameras(path)
        .map_err(|e| CliError::io(format_args!("reading cameras {}", path.display()), e))
}

/// Reads every `.pfm` in the depth directory in name order.
pub fn load_depth_maps(dir: &Path, cameras: &[Camera]) -> Result<Vec<DepthMap>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::io(format_args!("reading depth dir {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pfm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io(format!(
            "no .pfm depth maps in {}",
            dir.display()
        )));
    }
    let mut maps = Vec::with_capacity(paths.len());
    for path in &paths {
        let (map, _) = io::read_depth_map(path, cameras)
            .map_err(|e| CliError::io(format_args!("reading {}", path.display()), e))?;
        maps.push(map);
    }
    Ok(maps)
}

/// Pairs camera `i` with `view_NNN.png` from the image directory.
pub fn load_views(dir: &Path, cameras: &[Camera]) -> Result<Vec<TrainView>, CliError> {
    let mut views = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let path = dir.join(view_name(i));
        let image = io::read_png(&path)
            .map_err(|e| CliError::io(format_args!("reading {}", path.display()), e))?;
        views.push(TrainView {
            camera: camera.clone(),
            image,
        });
    }
    Ok(views)
}

fn load_cloud(path: &Path) -> Result<FeaturizedPointCloud, CliError> {
    io::read_ply(path).map_err(|e| CliError::io(format_args!("reading {}", path.display()), e))
}

fn save_cloud(path: &Path, cloud: &FeaturizedPointCloud) -> Result<(), CliError> {
    io::write_ply(path, cloud)
        .map_err(|e| CliError::io(format_args!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format_args!("writing {}", path.display()), e))
}

pub fn run_fuse(config: &PipelineConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let cameras = load_cameras(&config.cameras)?;
    let maps = load_depth_maps(&config.depth_maps, &cameras)?;
    let cloud = cloud::fuse_depth_maps(
        &maps,
        io::DEFAULT_FEATURE_DIM,
        config.render.radius,
        DEFAULT_OPACITY_LOGIT,
    )
    .map_err(CliError::validation)?;
    let path = config.output.join("fused.ply");
    save_cloud(&path, &cloud)?;
    log_stage(
        "fuse",
        format_args!(
            "maps={} points={} seconds={:.3}",
            maps.len(),
            cloud.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_prune(config: &PipelineConfig, cloud_path: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("fused.ply"));
    let cloud = load_cloud(&input)?;
    let cameras = load_cameras(&config.cameras)?;
    let maps = load_depth_maps(&config.depth_maps, &cameras)?;
    let (pruned, keep) =
        sculpt::prune_cloud(&cloud, &maps, config.sculpt.delta_d).map_err(CliError::validation)?;
    let removed = keep.iter().filter(|&&k| !k).count();
    save_cloud(&config.output.join("pruned.ply"), &pruned)?;
    log_stage(
        "prune",
        format_args!(
            "in={} pruned={} out={} seconds={:.3}",
            cloud.len(),
            removed,
            pruned.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_add(config: &PipelineConfig, cloud_path: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("pruned.ply"));
    let cloud = load_cloud(&input)?;
    let cameras = load_cameras(&config.cameras)?;
    let maps = load_depth_maps(&config.depth_maps, &cameras)?;
    let views = load_views(&config.images, &cameras)?;
    let outcome = sculpt::add_points(
        &cloud,
        &views,
        &maps,
        &config.scene_bounds(),
        &config.render_config(),
        &config.add_params(),
    )
    .map_err(CliError::validation)?;
    save_cloud(&config.output.join("added.ply"), &outcome.cloud)?;
    log_stage(
        "add",
        format_args!(
            "in={} added={} trigger_pixels={} out={} seconds={:.3}",
            cloud.len(),
            outcome.added,
            outcome.triggering_pixels,
            outcome.cloud.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_sculpt(config: &PipelineConfig, cloud_path: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("fused.ply"));
    let mut cloud = load_cloud(&input)?;
    let n_input = cloud.len();
    let cameras = load_cameras(&config.cameras)?;
    let maps = load_depth_maps(&config.depth_maps, &cameras)?;
    let views = load_views(&config.images, &cameras)?;

    let mut pruned_count = 0;
    if !config.no_prune {
        let (pruned, keep) = sculpt::prune_cloud(&cloud, &maps, config.sculpt.delta_d)
            .map_err(CliError::validation)?;
        pruned_count = keep.iter().filter(|&&k| !k).count();
        cloud = pruned;
    }
    let mut added_count = 0;
    let mut triggering = 0;
    if !config.no_add {
        // A short feature-only fit so the error maps reflect where geometry
        // is missing rather than where colors are still blank.
        let mut fit = config.train_options();
        fit.steps = config.sculpt.steps;
        fit.freeze_geometry = true;
        optim::train(&mut cloud, &views, &config.render_config(), &fit)
            .map_err(CliError::validation)?;
        let outcome = sculpt::add_points(
            &cloud,
            &views,
            &maps,
            &config.scene_bounds(),
            &config.render_config(),
            &config.add_params(),
        )
        .map_err(CliError::validation)?;
        added_count = outcome.added;
        triggering = outcome.triggering_pixels;
        cloud = outcome.cloud;
    }

    save_cloud(&config.output.join("sculpted.ply"), &cloud)?;
    write_text(
        &config.output.join("sculpt_report.csv"),
        &format!(
            "n_input,pruned,added,n_output\n{},{},{},{}\n",
            n_input,
            pruned_count,
            added_count,
            cloud.len()
        ),
    )?;
    log_stage(
        "sculpt",
        format_args!(
            "in={} pruned={} added={} trigger_pixels={} out={} seconds={:.3}",
            n_input,
            pruned_count,
            added_count,
            triggering,
            cloud.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_train(config: &PipelineConfig, cloud_path: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("sculpted.ply"));
    let mut cloud = load_cloud(&input)?;
    let cameras = load_cameras(&config.cameras)?;
    let views = load_views(&config.images, &cameras)?;
    let records = optim::train(
        &mut cloud,
        &views,
        &config.render_config(),
        &config.train_options(),
    )
    .map_err(CliError::validation)?;
    save_cloud(&config.output.join("trained.ply"), &cloud)?;
    let loss_path = config.output.join("loss.csv");
    optim::write_loss_csv(&loss_path, &records)
        .map_err(|e| CliError::io(format_args!("writing {}", loss_path.display()), e))?;
    let final_l1 = records.last().map_or(f64::NAN, |r| r.l1);
    log_stage(
        "train",
        format_args!(
            "steps={} views={} points={} final_l1={:.6} seconds={:.3}",
            records.len(),
            views.len(),
            cloud.len(),
            final_l1,
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_render(
    config: &PipelineConfig,
    cloud_path: Option<PathBuf>,
    camera_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("trained.ply"));
    let cloud = load_cloud(&input)?;
    let render = config.render_config();

    if let Some(path) = camera_path {
        let cameras = load_cameras(&path)?;
        for (i, camera) in cameras.iter().enumerate() {
            let output =
                raster::rasterize_ensemble(&cloud, camera, &render).map_err(CliError::validation)?;
            let frame = config.output.join(format!("frame_{i:03}.png"));
            io::write_png(&frame, &output.image)
                .map_err(|e| CliError::io(format_args!("writing {}", frame.display()), e))?;
        }
        log_stage(
            "render",
            format_args!(
                "frames={} seconds={:.3}",
                cameras.len(),
                start.elapsed().as_secs_f64()
            ),
        );
        return Ok(());
    }

    let cameras = load_cameras(&config.cameras)?;
    let mut metrics = String::from("view,psnr,ssim\n");
    let mut scored = 0;
    for (i, camera) in cameras.iter().enumerate() {
        let output =
            raster::rasterize_ensemble(&cloud, camera, &render).map_err(CliError::validation)?;
        let png = config.output.join(format!("render_{i:03}.png"));
        io::write_png(&png, &output.image)
            .map_err(|e| CliError::io(format_args!("writing {}", png.display()), e))?;
        let pfm = config.output.join(format!("render_{i:03}.pfm"));
        io::write_pfm(&pfm, &output.image)
            .map_err(|e| CliError::io(format_args!("writing {}", pfm.display()), e))?;
        let reference = config.images.join(view_name(i));
        if reference.exists() {
            let target = io::read_png(&reference)
                .map_err(|e| CliError::io(format_args!("reading {}", reference.display()), e))?;
            let psnr = synth::psnr(&output.image, &target).map_err(CliError::validation)?;
            let ssim = synth::ssim(&output.image, &target).map_err(CliError::validation)?;
            let _ = writeln!(metrics, "{i},{psnr},{ssim}");
            scored += 1;
        }
    }
    if scored > 0 {
        write_text(&config.output.join("render_metrics.csv"), &metrics)?;
    }
    log_stage(
        "render",
        format_args!(
            "views={} scored={} seconds={:.3}",
            cameras.len(),
            scored,
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_edit(config: &PipelineConfig, cloud: PathBuf, script: PathBuf) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = load_cloud(&cloud)?;
    let n_input = input.len();
    let steps = edit::read_script(&script)?;
    let script_dir = script.parent().unwrap_or_else(|| Path::new("."));
    let edited = edit::apply_script(input, &steps, script_dir)?;
    save_cloud(&config.output.join("edited.ply"), &edited)?;
    log_stage(
        "edit",
        format_args!(
            "steps={} in={} out={} seconds={:.3}",
            steps.len(),
            n_input,
            edited.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn scene_spec(name: &str, config: &PipelineConfig) -> Result<SceneSpec, CliError> {
    let mut spec = match name {
        "lambertian_sphere" => SceneSpec::lambertian_sphere(),
        "specular_sphere" => SceneSpec::specular_sphere(),
        "plane_and_box" => SceneSpec::plane_and_box(),
        other => {
            return Err(CliError::Validation(format!(
                "unknown scene {other:?}; expected lambertian_sphere, specular_sphere, or plane_and_box"
            )))
        }
    };
    spec.n_cameras = config.bench.n_cameras;
    spec.width = config.bench.width;
    spec.height = config.bench.height;
    Ok(spec)
}

/// Writes a synthetic dataset (cameras, depth maps, images) into the
/// output directory so the file-based stages can run on it.
pub fn run_synth(config: &PipelineConfig, scene: &str) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let spec = scene_spec(scene, config)?;
    let (gt, _) = synth::generate(&spec).map_err(CliError::validation)?;
    let cameras_path = config.output.join("cameras.json");
    geometry::write_cameras(&cameras_path, &gt.cameras)
        .map_err(|e| CliError::io(format_args!("writing {}", cameras_path.display()), e))?;
    let depth_dir = config.output.join("depth");
    let image_dir = config.output.join("images");
    for dir in [&depth_dir, &image_dir] {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format_args!("creating {}", dir.display()), e))?;
    }
    for (i, map) in gt.depth_maps.iter().enumerate() {
        let path = depth_dir.join(depth_name(i));
        io::write_depth_map(&path, map, i)
            .map_err(|e| CliError::io(format_args!("writing {}", path.display()), e))?;
    }
    for (i, image) in gt.images.iter().enumerate() {
        let path = image_dir.join(view_name(i));
        io::write_png(&path, image)
            .map_err(|e| CliError::io(format_args!("writing {}", path.display()), e))?;
    }
    log_stage(
        "synth",
        format_args!(
            "scene={} cameras={} size={}x{} seconds={:.3}",
            scene,
            gt.cameras.len(),
            spec.width,
            spec.height,
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

struct VariantFlags {
    no_prune: bool,
    no_add: bool,
    freeze_geometry: bool,
    no_dropout: bool,
}

fn variant_flags(name: &str) -> Result<VariantFlags, CliError> {
    let (no_prune, no_add, freeze_geometry, no_dropout) = match name {
        "full" => (false, false, false, false),
        "no_prune" => (true, false, false, false),
        "no_add" => (false, true, false, false),
        "no_prune_no_add" => (true, true, false, false),
        "freeze_geometry" => (false, false, true, false),
        "no_dropout" => (false, false, false, true),
        "baseline" => (true, true, true, false),
        other => {
            return Err(CliError::Validation(format!(
                "unknown variant {other:?}; expected full, no_prune, no_add, no_prune_no_add, \
                 freeze_geometry, no_dropout, or baseline"
            )))
        }
    };
    Ok(VariantFlags {
        no_prune,
        no_add,
        freeze_geometry,
        no_dropout,
    })
}

fn mean_scores(
    cloud: &FeaturizedPointCloud,
    views: &[TrainView],
    render: &RenderConfig,
) -> Result<(f64, f64), CliError> {
    let mut psnr_total = 0.0;
    let mut ssim_total = 0.0;
    for view in views {
        let output =
            raster::rasterize_ensemble(cloud, &view.camera, render).map_err(CliError::validation)?;
        psnr_total += synth::psnr(&output.image, &view.image).map_err(CliError::validation)?;
        ssim_total += synth::ssim(&output.image, &view.image).map_err(CliError::validation)?;
    }
    let n = views.len() as f64;
    Ok((psnr_total / n, ssim_total / n))
}

/// Runs every scene x variant combination on synthetic ground truth with a
/// corrupted starting cloud, and writes one bench CSV row per run.
pub fn run_bench(config: &PipelineConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    if config.bench.held_every < 2 {
        return Err(CliError::Validation(
            "held_every must be at least 2 so both splits are nonempty".into(),
        ));
    }
    let mut records = Vec::new();
    for scene_name in &config.bench.scenes {
        let spec = scene_spec(scene_name, config)?;
        let (gt, initial) = synth::generate(&spec).map_err(CliError::validation)?;
        let (with_floaters, _) = synth::inject_floaters(
            &initial,
            &gt.depth_maps,
            config.bench.n_floaters,
            0.5,
            config.optimizer.seed,
        )
        .map_err(CliError::validation)?;
        let hole = Point3::new(
            config.bench.hole_center[0],
            config.bench.hole_center[1],
            config.bench.hole_center[2],
        );
        let (corrupted, _) =
            synth::carve_hole_in_cloud(&with_floaters, &hole, config.bench.hole_radius);

        let mut train_views = Vec::new();
        let mut test_views = Vec::new();
        for (i, (camera, image)) in gt.cameras.iter().zip(&gt.images).enumerate() {
            let view = TrainView {
                camera: camera.clone(),
                image: image.clone(),
            };
            if i % config.bench.held_every == 0 {
                test_views.push(view);
            } else {
                train_views.push(view);
            }
        }

        for variant in &config.bench.variants {
            let flags = variant_flags(variant)?;
            let variant_start = Instant::now();

            // The scene defines its own footprint size, depth range, and
            // background; ablation-relevant render knobs come from config.
            let mut render = config.render_config();
            render.radius = spec.point_radius;
            render.background = gt.background.to_vec();
            render.z_near = spec.bounds.z_near;
            render.z_far = spec.bounds.z_far;
            if flags.no_dropout {
                render.dropout_rate = 0.0;
            }

            let mut cloud = corrupted.clone();
            let mut pruned_count = 0;
            if !flags.no_prune {
                let (pruned, keep) =
                    sculpt::prune_cloud(&cloud, &gt.depth_maps, config.sculpt.delta_d)
                        .map_err(CliError::validation)?;
                pruned_count = keep.iter().filter(|&&k| !k).count();
                cloud = pruned;
            }
            let mut added_count = 0;
            if !flags.no_add {
                let mut fit = config.train_options();
                fit.steps = config.sculpt.steps;
                fit.freeze_geometry = true;
                optim::train(&mut cloud, &train_views, &render, &fit)
                    .map_err(CliError::validation)?;
                let outcome = sculpt::add_points(
                    &cloud,
                    &train_views,
                    &gt.depth_maps,
                    &spec.bounds,
                    &render,
                    &config.add_params(),
                )
                .map_err(CliError::validation)?;
                added_count = outcome.added;
                cloud = outcome.cloud;
            }
            let mut options = config.train_options();
            options.freeze_geometry = options.freeze_geometry || flags.freeze_geometry;
            optim::train(&mut cloud, &train_views, &render, &options)
                .map_err(CliError::validation)?;

            let (train_psnr, train_ssim) = mean_scores(&cloud, &train_views, &render)?;
            let (test_psnr, test_ssim) = mean_scores(&cloud, &test_views, &render)?;
            let seconds = variant_start.elapsed().as_secs_f64();
            log_stage(
                "bench",
                format_args!(
                    "scene={scene_name} variant={variant} points={} pruned={pruned_count} \
                     added={added_count} test_psnr={test_psnr:.2} seconds={seconds:.3}",
                    cloud.len()
                ),
            );
            records.push(BenchRecord {
                scene: scene_name.clone(),
                variant: variant.clone(),
                n_points: cloud.len(),
                pruned: pruned_count,
                added: added_count,
                train_psnr,
                train_ssim,
                test_psnr,
                test_ssim,
                seconds,
            });
        }
    }
    let path = config.output.join("bench.csv");
    report::write_bench_csv(&path, &records).map_err(report_err)?;
    log_stage(
        "bench_summary",
        format_args!(
            "records={} seconds={:.3}",
            records.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_report(config: &PipelineConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let path = config.output.join("bench.csv");
    let records = report::read_bench_csv(&path).map_err(report_err)?;
    let rows = report::melt_bench_records(&records, config.optimizer.seed);
    let table = report::aggregate(&rows).map_err(report_err)?;
    let text = table.to_text();
    print!("{text}");
    write_text(&config.output.join("report.txt"), &text)?;
    write_text(&config.output.join("report.csv"), &table.to_csv())?;
    log_stage(
        "report",
        format_args!(
            "records={} rows={} seconds={:.3}",
            records.len(),
            rows.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

pub fn run_sweep(
    config: &PipelineConfig,
    cloud_path: Option<PathBuf>,
    subsets: &[usize],
) -> Result<(), CliError> {
    let start = Instant::now();
    let _lock = OutputLock::acquire(&config.output)?;
    let input = cloud_path.unwrap_or_else(|| config.output.join("trained.ply"));
    let cloud = load_cloud(&input)?;
    let cameras = load_cameras(&config.cameras)?;
    let views = load_views(&config.images, &cameras)?;
    let points = report::dropout_sweep(&cloud, &views, &config.render_config(), subsets)
        .map_err(report_err)?;
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for p in &points {
        let _ = writeln!(text, "{},{},{},{}", p.subsets, p.psnr, p.ssim, p.frame_seconds);
    }
    write_text(&config.output.join("sweep.csv"), &text)?;
    log_stage(
        "sweep",
        format_args!(
            "points={} views={} seconds={:.3}",
            points.len(),
            views.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}
