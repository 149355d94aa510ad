//! Point-based view synthesis with sculpted point clouds.
//!
//! The crate covers the full desk-scale pipeline on the CPU:
//!
//! 1. [`cloud::fuse_depth_maps`] lifts per-view depth maps into a featurized
//!    point cloud.
//! 2. [`sculpt`] prunes inconsistent points and adds points where rendering
//!    error stays high.
//! 3. [`sh`] attaches degree-2 spherical-harmonic shading features to every
//!    point, and [`raster`] blends them with a differentiable soft
//!    rasterizer.
//! 4. [`optim`] fits features, positions, and opacities with Adam using
//!    hand-derived analytic gradients.
//! 5. [`synth`] generates analytically ray-traced test scenes plus PSNR/SSIM
//!    metrics, and [`report`] aggregates experiment tables.
//!
//! All geometry runs in double precision; every randomized routine takes an
//! explicit seed and is deterministic across runs and platforms.

pub mod cloud;
pub mod geometry;
pub mod img;
pub mod io;
pub mod optim;
pub mod raster;
pub mod report;
pub mod sculpt;
pub mod sh;
pub mod synth;

/// Runs every code sample in the README and the user guide as a doc-test,
/// so neither can drift from the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cameras.md")]
    mod cameras {}
    #[doc = include_str!("../../../book/src/point-clouds.md")]
    mod point_clouds {}
    #[doc = include_str!("../../../book/src/spherical-harmonics.md")]
    mod spherical_harmonics {}
    #[doc = include_str!("../../../book/src/soft-rasterization.md")]
    mod soft_rasterization {}
    #[doc = include_str!("../../../book/src/gradients-and-training.md")]
    mod gradients_and_training {}
    #[doc = include_str!("../../../book/src/sculpting.md")]
    mod sculpting {}
    #[doc = include_str!("../../../book/src/synthetic-scenes-and-metrics.md")]
    mod synthetic_scenes_and_metrics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
