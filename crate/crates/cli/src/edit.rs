//! Declarative edit scripts: merge, rigid transforms, and region erasure
//! applied to a point cloud from a JSON file.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Unit, Vector3};
use pointsculpt::cloud::{self, FeaturizedPointCloud};
use pointsculpt::geometry::Point3;

use crate::CliError;

/// Region selector shared by transform and erase steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selector {
    /// Every point.
    All,
    /// Points with |p - center| <= radius.
    Ball { center: [f64; 3], radius: f64 },
    /// Points with normal . p < offset.
    HalfSpace { normal: [f64; 3], offset: f64 },
}

impl Selector {
    pub fn contains(&self, p: &Point3) -> bool {
        match self {
            Selector::All => true,
            Selector::Ball { center, radius } => {
                let c = Point3::new(center[0], center[1], center[2]);
                (p - c).norm() <= *radius
            }
            Selector::HalfSpace { normal, offset } => {
                let n = Vector3::new(normal[0], normal[1], normal[2]);
                n.dot(p) < *offset
            }
        }
    }
}

fn default_selector() -> Selector {
    Selector::All
}

fn default_translation() -> [f64; 3] {
    [0.0, 0.0, 0.0]
}

/// One step of an edit script.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditStep {
    /// Union with another cloud loaded from a PLY file.
    Merge { path: PathBuf },
    /// Rigid motion of the selected points: rotation about an axis through
    /// the origin followed by a translation.
    Transform {
        /// Axis-angle rotation; the vector's length is the angle in radians.
        #[serde(default = "default_translation")]
        rotation: [f64; 3],
        #[serde(default = "default_translation")]
        translation: [f64; 3],
        #[serde(default = "default_selector")]
        select: Selector,
    },
    /// Remove the selected points.
    Erase { select: Selector },
}

pub fn read_script(path: &Path) -> Result<Vec<EditStep>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format_args!("reading edit script {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::io(format_args!("parsing edit script {}", path.display()), e))
}

/// Runs a script; an empty script returns the input unchanged.
pub fn apply_script(
    mut cloud: FeaturizedPointCloud,
    steps: &[EditStep],
    script_dir: &Path,
) -> Result<FeaturizedPointCloud, CliError> {
    for step in steps {
        cloud = match step {
            EditStep::Merge { path } => {
                let resolved = if path.is_absolute() {
                    path.clone()
                } else {
                    script_dir.join(path)
                };
                let other = pointsculpt::io::read_ply(&resolved).map_err(|e| {
                    CliError::io(format_args!("reading {}", resolved.display()), e)
                })?;
                cloud::merge(&cloud, &other).map_err(CliError::validation)?
            }
            EditStep::Transform {
                rotation,
                translation,
                select,
            } => {
                let axis = Vector3::new(rotation[0], rotation[1], rotation[2]);
                let angle = axis.norm();
                let r = if angle > 0.0 {
                    nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
                        .into_inner()
                } else {
                    Matrix3::identity()
                };
                let t = Vector3::new(translation[0], translation[1], translation[2]);
                cloud::transform_subset(&cloud, |_, p| select.contains(p), &r, &t)
            }
            EditStep::Erase { select } => cloud::erase(&cloud, |_, p| select.contains(p)),
        };
    }
    Ok(cloud)
}
