//! Pinhole camera model and the projection math shared by every stage.
//!
//! Conventions used throughout the crate:
//!
//! - World-to-camera transform is `X = R * p + t`; the camera looks down +z,
//!   so a point is in front of the camera only when `X.z > 0`.
//! - Pixel coordinates `(u, v)` are (column, row) with the origin at the
//!   center of the top-left pixel; `u` grows rightward, `v` downward.
//! - Depth means the camera-frame z component, not distance along the ray.
//!
//! Projection is `(u, v) = dehom(K * X)` with depth `X.z`; unprojection is
//! its exact inverse `p = R^T * (K^{-1} * d * [u, v, 1]^T - t)`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Point3 = Vector3<f64>;

/// Continuous pixel position plus the camera-frame depth of the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelDepth {
    pub fn new(u: f64, v: f64, depth: f64) -> Self {
        Self { u, v, depth }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("intrinsics matrix is not invertible")]
    SingularIntrinsics,
    #[error("rotation must be orthonormal with determinant +1")]
    NotARotation,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("image dimensions must be positive")]
    EmptyImage,
}

/// Calibrated pinhole camera. Validated on construction: the intrinsics are
/// upper-triangular with positive focal entries and a unit corner, and the
/// rotation is orthonormal with determinant +1 (both checked to 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
    inverse_intrinsics: Matrix3<f64>,
}

impl Camera {
    pub const VALIDATION_TOLERANCE: f64 = 1e-9;

    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage);
        }
        if !intrinsics.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("entries must be finite"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "focal entries must be positive",
            ));
        }
        if intrinsics[(1, 0)] != 0.0 || intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "lower triangle must be zero",
            ));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > Self::VALIDATION_TOLERANCE {
            return Err(GeometryError::InvalidIntrinsics(
                "corner entry must be 1 so projection and unprojection invert",
            ));
        }
        let inverse_intrinsics = intrinsics
            .try_inverse()
            .ok_or(GeometryError::SingularIntrinsics)?;
        if !translation.iter().all(|x| x.is_finite()) || !rotation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation);
        }
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > Self::VALIDATION_TOLERANCE
            || (rotation.determinant() - 1.0).abs() > Self::VALIDATION_TOLERANCE
        {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
            inverse_intrinsics,
        })
    }

    /// Camera placed at `center` looking toward `target`, with the image
    /// "up" as close to `up` as the viewing direction allows.
    pub fn look_at(
        center: Point3,
        target: Point3,
        up: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::NotARotation);
        }
        let z = forward / forward.norm();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(GeometryError::NotARotation);
        }
        let x = x / x.norm();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Self::new(intrinsics, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn inverse_intrinsics(&self) -> &Matrix3<f64> {
        &self.inverse_intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Optical center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Whether a continuous pixel position falls inside the image, pixel
    /// centers inclusive: `0 <= u <= W-1` and `0 <= v <= H-1`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

/// Projects a world point: perspective division of `K (R p + t)` plus the
/// camera-frame depth. Errors when the point is at or behind the camera.
pub fn project(p: &Point3, camera: &Camera) -> Result<PixelDepth, GeometryError> {
    let x = camera.rotation * p + camera.translation;
    if x.z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: x.z });
    }
    let h = camera.intrinsics * x;
    Ok(PixelDepth {
        u: h.x / h.z,
        v: h.y / h.z,
        depth: x.z,
    })
}

/// Lifts a pixel with known depth back to a world point,
/// `R^T (K^{-1} d [u, v, 1]^T - t)`. Exact inverse of [`project`].
pub fn unproject(pixel: &PixelDepth, camera: &Camera) -> Point3 {
    let homogeneous = Vector3::new(pixel.u, pixel.v, 1.0) * pixel.depth;
    camera.rotation.transpose() * (camera.inverse_intrinsics * homogeneous - camera.translation)
}

/// Camera-frame depth of a world point in the given view, `(R p + t).z`.
/// Negative values mean the point is behind the camera.
pub fn depth_in_view(p: &Point3, camera: &Camera) -> f64 {
    (camera.rotation * p + camera.translation).z
}

#[derive(Debug, thiserror::Error)]
pub enum CameraFileError {
    #[error("camera file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("camera record {index}: {source}")]
    Record {
        index: usize,
        source: GeometryError,
    },
    #[error("camera record {index}: field {field} must have {expected} entries")]
    FieldLength {
        index: usize,
        field: &'static str,
        expected: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
    width: u32,
    height: u32,
}

fn row_major(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect()
}

/// Reads a JSON array of camera records (`K`, `R` row-major, `t`, `width`,
/// `height`); every camera is validated on load.
pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>, CameraFileError> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    let mut cameras = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        for (field, len, expected) in [
            ("K", rec.k.len(), 9),
            ("R", rec.r.len(), 9),
            ("t", rec.t.len(), 3),
        ] {
            if len != expected {
                return Err(CameraFileError::FieldLength {
                    index,
                    field,
                    expected,
                });
            }
        }
        let camera = Camera::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::new(rec.t[0], rec.t[1], rec.t[2]),
            rec.width,
            rec.height,
        )
        .map_err(|source| CameraFileError::Record { index, source })?;
        cameras.push(camera);
    }
    Ok(cameras)
}

/// Writes cameras as a JSON array in the same layout `read_cameras` expects.
pub fn write_cameras(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<(), CameraFileError> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            k: row_major(&c.intrinsics),
            r: row_major(&c.rotation),
            t: c.translation.iter().copied().collect(),
            width: c.width,
            height: c.height,
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&records)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple_intrinsics() -> Matrix3<f64> {
        Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0)
    }

    fn identity_camera() -> Camera {
        Camera::new(
            simple_intrinsics(),
            Matrix3::identity(),
            Vector3::zeros(),
            64,
            64,
        )
        .unwrap()
    }

    pub(crate) fn random_camera(rng: &mut impl Rng, width: u32, height: u32) -> Camera {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rotation = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .matrix();
        let translation = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let f = rng.gen_range(50.0..200.0);
        let k = Matrix3::new(
            f,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            f,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(k, rotation, translation, width, height).unwrap()
    }

    #[test]
    fn project_known_point() {
        // (1, 0, 2) through f = 100, principal point (32, 32):
        // u = (100 * 1 + 32 * 2) / 2 = 82, v = 32, depth = 2.
        let camera = identity_camera();
        let pd = project(&Point3::new(1.0, 0.0, 2.0), &camera).unwrap();
        assert_relative_eq!(pd.u, 82.0, max_relative = 1e-15);
        assert_relative_eq!(pd.v, 32.0, max_relative = 1e-15);
        assert_relative_eq!(pd.depth, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let camera = identity_camera();
        let err = project(&Point3::new(0.0, 0.0, -1.0), &camera).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
        let err = project(&Point3::new(0.0, 0.0, 0.0), &camera).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
    }

    #[test]
    fn unproject_inverts_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let camera = random_camera(&mut rng, 64, 48);
            // Points drawn in front of the camera.
            let depth = rng.gen_range(0.1..50.0);
            let u = rng.gen_range(-20.0..84.0);
            let v = rng.gen_range(-20.0..68.0);
            let p = unproject(&PixelDepth::new(u, v, depth), &camera);
            let pd = project(&p, &camera).unwrap();
            assert_relative_eq!(pd.u, u, epsilon = 1e-9);
            assert_relative_eq!(pd.v, v, epsilon = 1e-9);
            assert_relative_eq!(pd.depth, depth, epsilon = 1e-9);
        }
    }

    #[test]
    fn depth_in_view_applies_rotation() {
        // 90 degree rotation about x sends +y to +z.
        let angle = std::f64::consts::FRAC_PI_2;
        let rotation = Matrix3::new(
            1.0,
            0.0,
            0.0,
            0.0,
            angle.cos(),
            -angle.sin(),
            0.0,
            angle.sin(),
            angle.cos(),
        );
        let camera = Camera::new(simple_intrinsics(), rotation, Vector3::zeros(), 64, 64).unwrap();
        let p = Point3::new(0.0, 1.0, 0.0);
        let expected = (rotation * p).z;
        assert_relative_eq!(depth_in_view(&p, &camera), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn depth_matches_projection_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let camera = random_camera(&mut rng, 32, 32);
            let p = Point3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let d = depth_in_view(&p, &camera);
            match project(&p, &camera) {
                Ok(pd) => assert_relative_eq!(pd.depth, d, epsilon = 1e-12),
                Err(GeometryError::BehindCamera { depth }) => {
                    assert!(d <= 0.0);
                    assert_relative_eq!(depth, d, epsilon = 1e-12);
                }
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn camera_rejects_bad_inputs() {
        let k = simple_intrinsics();
        let skewed_rotation = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(
            Camera::new(k, skewed_rotation, Vector3::zeros(), 4, 4).unwrap_err(),
            GeometryError::NotARotation
        );
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(
            Camera::new(k, reflection, Vector3::zeros(), 4, 4).unwrap_err(),
            GeometryError::NotARotation
        );
        let mut negative_focal = k;
        negative_focal[(0, 0)] = -1.0;
        assert!(matches!(
            Camera::new(negative_focal, Matrix3::identity(), Vector3::zeros(), 4, 4).unwrap_err(),
            GeometryError::InvalidIntrinsics(_)
        ));
        let mut lower = k;
        lower[(2, 0)] = 0.5;
        assert!(matches!(
            Camera::new(lower, Matrix3::identity(), Vector3::zeros(), 4, 4).unwrap_err(),
            GeometryError::InvalidIntrinsics(_)
        ));
        assert_eq!(
            Camera::new(k, Matrix3::identity(), Vector3::zeros(), 0, 4).unwrap_err(),
            GeometryError::EmptyImage
        );
    }

    #[test]
    fn look_at_camera_sees_target_at_principal_point() {
        let k = simple_intrinsics();
        let camera = Camera::look_at(
            Point3::new(0.0, -4.0, 1.5),
            Point3::zeros(),
            Vector3::z(),
            k,
            64,
            64,
        )
        .unwrap();
        let pd = project(&Point3::zeros(), &camera).unwrap();
        assert_relative_eq!(pd.u, 32.0, epsilon = 1e-9);
        assert_relative_eq!(pd.v, 32.0, epsilon = 1e-9);
        assert_relative_eq!(pd.depth, camera.center().norm(), epsilon = 1e-9);
        // World up should map to image up (smaller v).
        let above = project(&Point3::new(0.0, 0.0, 0.2), &camera).unwrap();
        assert!(above.v < 32.0);
    }

    #[test]
    fn camera_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cameras: Vec<Camera> = (0..4).map(|_| random_camera(&mut rng, 80, 60)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        write_cameras(&path, &cameras).unwrap();
        let loaded = read_cameras(&path).unwrap();
        assert_eq!(cameras.len(), loaded.len());
        for (a, b) in cameras.iter().zip(&loaded) {
            assert_relative_eq!(a.intrinsics(), b.intrinsics(), epsilon = 1e-15);
            assert_relative_eq!(a.rotation(), b.rotation(), epsilon = 1e-15);
            assert_relative_eq!(a.translation(), b.translation(), epsilon = 1e-15);
            assert_eq!((a.width(), a.height()), (b.width(), b.height()));
        }
        // Same bytes when rewritten: the JSON writer is deterministic.
        let first = std::fs::read(&path).unwrap();
        write_cameras(&path, &loaded).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
