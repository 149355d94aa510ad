//! File formats: point-cloud PLY, depth-map PFM with JSON sidecars, and
//! 8-bit PNG for final renders.

pub mod pfm;
pub mod ply;
pub mod png;

pub use pfm::{read_depth_map, read_pfm, write_depth_map, write_pfm, PfmError};
pub use ply::{read_ply, write_ply, PlyError, DEFAULT_FEATURE_DIM, DEFAULT_RADIUS};
pub use png::{quantize, read_png, write_png, PngError};
