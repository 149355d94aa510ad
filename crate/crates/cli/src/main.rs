//! `pointsculpt`: depth-map fusion, point sculpting, optimization, and
//! rendering as a single deterministic command-line pipeline.
//!
//! Every subcommand reads one JSON config (all fields optional) and accepts
//! flag overrides for each field. Exit codes: 0 success, 1 validation
//! failure, 2 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod config;
mod edit;
mod lock;
mod stages;

use config::{Overrides, PipelineConfig};

/// Errors surfaced to the shell: validation failures exit 1, I/O failures
/// exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn io(context: std::fmt::Arguments<'_>, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Io(msg) => f.write_str(msg),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pointsculpt",
    version,
    about = "Point-based neural rendering: fuse, sculpt, train, render"
)]
struct Cli {
    /// JSON config file; command-line flags override its fields.
    #[arg(long, short = 'c', global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Fuse depth maps into an initial point cloud (fused.ply).
    Fuse,
    /// Drop points that violate multi-view depth consistency (pruned.ply).
    Prune {
        /// Input cloud; defaults to <output>/fused.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
    },
    /// Add points under high-error pixels (added.ply).
    Add {
        /// Input cloud; defaults to <output>/pruned.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
    },
    /// Prune, fit features, then add: one full sculpting pass (sculpted.ply).
    Sculpt {
        /// Input cloud; defaults to <output>/fused.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
    },
    /// Optimize features, positions, and opacities against the view images
    /// (trained.ply, loss.csv).
    Train {
        /// Input cloud; defaults to <output>/sculpted.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
    },
    /// Render every camera (render_NNN.png/.pfm plus render_metrics.csv) or
    /// a camera path (frame_NNN.png).
    Render {
        /// Input cloud; defaults to <output>/trained.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
        /// Camera JSON describing a fly-through; frames are numbered in
        /// file order.
        #[arg(long, value_name = "FILE")]
        camera_path: Option<PathBuf>,
    },
    /// Apply a JSON edit script (merge, transform, erase) to a cloud
    /// (edited.ply).
    Edit {
        /// Input cloud.
        #[arg(long, value_name = "PLY")]
        cloud: PathBuf,
        /// JSON array of edit steps.
        #[arg(long, value_name = "FILE")]
        script: PathBuf,
    },
    /// Write a synthetic dataset (cameras.json, depth/, images/) into the
    /// output directory.
    Synth {
        /// Scene: lambertian_sphere, specular_sphere, or plane_and_box.
        #[arg(long, default_value = "lambertian_sphere")]
        scene: String,
    },
    /// Run scene x variant ablations on synthetic ground truth (bench.csv).
    Bench,
    /// Aggregate bench.csv into a table (stdout, report.txt, report.csv).
    Report,
    /// Measure quality and speed across dropout ensemble sizes (sweep.csv).
    Sweep {
        /// Input cloud; defaults to <output>/trained.ply.
        #[arg(long, value_name = "PLY")]
        cloud: Option<PathBuf>,
        /// Ensemble sizes to test.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
        subsets: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut config)?;
    match cli.command {
        Command::Fuse => stages::run_fuse(&config),
        Command::Prune { cloud } => stages::run_prune(&config, cloud),
        Command::Add { cloud } => stages::run_add(&config, cloud),
        Command::Sculpt { cloud } => stages::run_sculpt(&config, cloud),
        Command::Train { cloud } => stages::run_train(&config, cloud),
        Command::Render { cloud, camera_path } => stages::run_render(&config, cloud, camera_path),
        Command::Edit { cloud, script } => stages::run_edit(&config, cloud, script),
        Command::Synth { scene } => stages::run_synth(&config, &scene),
        Command::Bench => stages::run_bench(&config),
        Command::Report => stages::run_report(&config),
        Command::Sweep { cloud, subsets } => stages::run_sweep(&config, cloud, &subsets),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
