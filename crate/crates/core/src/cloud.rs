//! Featurized point clouds, per-view depth maps, and depth-map fusion.
//!
//! A cloud stores, per point, a world position, `K` shading coefficients
//! (`K` a multiple of 9, see [`crate::sh`]), and an opacity logit. One
//! shared footprint radius in normalized device units applies to every
//! point. Clouds are immutable values: every operation returns a new cloud.

use nalgebra::{Matrix3, Vector3};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{self, Camera, PixelDepth, Point3};

pub use crate::io::ply::{read_ply, write_ply, PlyError};

/// Opacity logit assigned to newly created points; `sigmoid(4) ~= 0.982`,
/// so fresh points start nearly opaque.
pub const DEFAULT_OPACITY_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("feature dimension {dim} must be a positive multiple of 9")]
    FeatureDim { dim: usize },
    #[error("{field} length {len} does not match {expected}")]
    Length {
        field: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("feature dimensions differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("point radius must be positive and finite (got {radius})")]
    BadRadius { radius: f64 },
    #[error("{field} contains a non-finite value")]
    NonFinite { field: &'static str },
    #[error("downsample target {target} exceeds point count {points}")]
    BadTarget { target: usize, points: usize },
    #[error("depth map: {0}")]
    DepthMap(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedPointCloud {
    /// Flat `3 * n` world positions.
    pub(crate) positions: Vec<f64>,
    /// Flat `feature_dim * n` shading coefficients.
    pub(crate) features: Vec<f64>,
    /// One opacity logit per point.
    pub(crate) opacity_logits: Vec<f64>,
    pub(crate) radius: f64,
    pub(crate) feature_dim: usize,
}

impl FeaturizedPointCloud {
    /// Builds a cloud from flat arrays, validating every invariant.
    pub fn from_parts(
        positions: Vec<f64>,
        features: Vec<f64>,
        opacity_logits: Vec<f64>,
        feature_dim: usize,
        radius: f64,
    ) -> Result<Self, CloudError> {
        if feature_dim == 0 || feature_dim % crate::sh::BASIS_LEN != 0 {
            return Err(CloudError::FeatureDim { dim: feature_dim });
        }
        if positions.len() % 3 != 0 {
            return Err(CloudError::Length {
                field: "positions",
                len: positions.len(),
                expected: positions.len() / 3 * 3,
            });
        }
        let n = positions.len() / 3;
        if features.len() != n * feature_dim {
            return Err(CloudError::Length {
                field: "features",
                len: features.len(),
                expected: n * feature_dim,
            });
        }
        if opacity_logits.len() != n {
            return Err(CloudError::Length {
                field: "opacity_logits",
                len: opacity_logits.len(),
                expected: n,
            });
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CloudError::BadRadius { radius });
        }
        for (field, data) in [
            ("positions", &positions),
            ("features", &features),
            ("opacity_logits", &opacity_logits),
        ] {
            if !data.iter().all(|x| x.is_finite()) {
                return Err(CloudError::NonFinite { field });
            }
        }
        Ok(Self {
            positions,
            features,
            opacity_logits,
            radius,
            feature_dim,
        })
    }

    /// Empty cloud with the given feature dimension and radius.
    pub fn empty(feature_dim: usize, radius: f64) -> Result<Self, CloudError> {
        Self::from_parts(Vec::new(), Vec::new(), Vec::new(), feature_dim, radius)
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Color channels rendered from this cloud, `feature_dim / 9`.
    pub fn channels(&self) -> usize {
        self.feature_dim / crate::sh::BASIS_LEN
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Returns a copy with a different shared footprint radius.
    pub fn with_radius(&self, radius: f64) -> Result<Self, CloudError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CloudError::BadRadius { radius });
        }
        let mut out = self.clone();
        out.radius = radius;
        Ok(out)
    }

    #[inline]
    pub fn position(&self, i: usize) -> Point3 {
        Point3::new(
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        )
    }

    pub fn positions_flat(&self) -> &[f64] {
        &self.positions
    }

    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn opacity_logits(&self) -> &[f64] {
        &self.opacity_logits
    }

    /// Keeps exactly the points whose mask entry is true.
    ///
    /// # Panics
    /// Panics when the mask length differs from the point count.
    pub fn filter(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.len(), "mask length must match point count");
        let mut positions = Vec::new();
        let mut features = Vec::new();
        let mut opacity_logits = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                positions.extend_from_slice(&self.positions[3 * i..3 * i + 3]);
                features.extend_from_slice(self.feature(i));
                opacity_logits.push(self.opacity_logits[i]);
            }
        }
        Self {
            positions,
            features,
            opacity_logits,
            radius: self.radius,
            feature_dim: self.feature_dim,
        }
    }
}

/// How the point the mask or predicate sees is identified.
pub type PointPredicate<'a> = &'a dyn Fn(usize, &Point3) -> bool;

/// Appends `b`'s points to `a`'s; the merged cloud keeps `a`'s radius.
pub fn merge(
    a: &FeaturizedPointCloud,
    b: &FeaturizedPointCloud,
) -> Result<FeaturizedPointCloud, CloudError> {
    if a.feature_dim != b.feature_dim {
        return Err(CloudError::DimMismatch {
            a: a.feature_dim,
            b: b.feature_dim,
        });
    }
    let mut out = a.clone();
    out.positions.extend_from_slice(&b.positions);
    out.features.extend_from_slice(&b.features);
    out.opacity_logits.extend_from_slice(&b.opacity_logits);
    Ok(out)
}

/// Applies a rigid transform `p -> R p + t` to the points selected by the
/// predicate; everything else (features, opacities) is untouched.
pub fn transform_subset(
    cloud: &FeaturizedPointCloud,
    selector: impl Fn(usize, &Point3) -> bool,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> FeaturizedPointCloud {
    debug_assert!(
        ((rotation.transpose() * rotation) - Matrix3::identity())
            .abs()
            .max()
            < 1e-6,
        "transform_subset expects an orthonormal rotation"
    );
    let mut out = cloud.clone();
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        if selector(i, &p) {
            let q = rotation * p + translation;
            out.positions[3 * i] = q.x;
            out.positions[3 * i + 1] = q.y;
            out.positions[3 * i + 2] = q.z;
        }
    }
    out
}

/// Removes the points selected by the predicate.
pub fn erase(
    cloud: &FeaturizedPointCloud,
    selector: impl Fn(usize, &Point3) -> bool,
) -> FeaturizedPointCloud {
    let keep: Vec<bool> = (0..cloud.len())
        .map(|i| !selector(i, &cloud.position(i)))
        .collect();
    cloud.filter(&keep)
}

/// Draws a uniform random subset of exactly `target` points, deterministic
/// in the seed. The surviving points keep their original relative order.
pub fn downsample(
    cloud: &FeaturizedPointCloud,
    target: usize,
    seed: u64,
) -> Result<FeaturizedPointCloud, CloudError> {
    let n = cloud.len();
    if target > n {
        return Err(CloudError::BadTarget { target, points: n });
    }
    if target == n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices.truncate(target);
    indices.sort_unstable();
    let mut keep = vec![false; n];
    for i in indices {
        keep[i] = true;
    }
    Ok(cloud.filter(&keep))
}

/// Result of a nearest-neighbor depth-map lookup at a full-resolution pixel
/// position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthSample {
    /// The position projects outside the image bounds.
    OutOfImage,
    /// Inside the image but the nearest stored pixel holds no depth.
    Invalid,
    /// Depth stored at the nearest map pixel.
    Depth(f64),
}

/// Per-view depth map, possibly stored at a coarser resolution than the
/// camera image (`stride` full-resolution pixels per map pixel).
///
/// Map pixel `(col, row)` corresponds to the center of its `stride x stride`
/// block of full-resolution pixels: `u = col * s + (s - 1) / 2` and likewise
/// for `v`. Lookups invert that mapping with nearest-neighbor rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    camera: Camera,
    stride: usize,
    /// Row-major `map_height x map_width` depths; meaningful only where
    /// `valid` is set.
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(
        camera: Camera,
        stride: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, CloudError> {
        if stride == 0 {
            return Err(CloudError::DepthMap("stride must be positive"));
        }
        if camera.width() as usize % stride != 0 || camera.height() as usize % stride != 0 {
            return Err(CloudError::DepthMap(
                "camera dimensions must be divisible by the stride",
            ));
        }
        let expected = (camera.width() as usize / stride) * (camera.height() as usize / stride);
        if values.len() != expected || valid.len() != expected {
            return Err(CloudError::DepthMap(
                "value and validity buffers must match the map resolution",
            ));
        }
        for (v, &ok) in values.iter().zip(&valid) {
            if ok && !(v.is_finite() && *v > 0.0) {
                return Err(CloudError::DepthMap(
                    "valid pixels must hold positive finite depths",
                ));
            }
        }
        Ok(Self {
            camera,
            stride,
            values,
            valid,
        })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn map_width(&self) -> usize {
        self.camera.width() as usize / self.stride
    }

    pub fn map_height(&self) -> usize {
        self.camera.height() as usize / self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Depth at a map pixel, or `None` when invalid.
    pub fn value(&self, col: usize, row: usize) -> Option<f64> {
        let i = row * self.map_width() + col;
        self.valid[i].then(|| self.values[i])
    }

    /// Full-resolution pixel coordinates of a map pixel's center.
    pub fn full_res_coords(&self, col: usize, row: usize) -> (f64, f64) {
        let offset = (self.stride as f64 - 1.0) / 2.0;
        (
            col as f64 * self.stride as f64 + offset,
            row as f64 * self.stride as f64 + offset,
        )
    }

    /// Nearest-neighbor lookup at a full-resolution pixel position. Bounds
    /// are tested against the full-resolution image first; in-bounds
    /// positions are then rounded to the nearest map pixel.
    pub fn sample(&self, u: f64, v: f64) -> DepthSample {
        if !self.camera.contains(u, v) {
            return DepthSample::OutOfImage;
        }
        let s = self.stride as f64;
        let offset = (s - 1.0) / 2.0;
        let col = (((u - offset) / s).round() as isize).clamp(0, self.map_width() as isize - 1)
            as usize;
        let row = (((v - offset) / s).round() as isize).clamp(0, self.map_height() as isize - 1)
            as usize;
        match self.value(col, row) {
            Some(d) => DepthSample::Depth(d),
            None => DepthSample::Invalid,
        }
    }

    /// Number of valid pixels.
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Unprojects every valid depth pixel of every map into one point cloud.
/// Points are ordered map by map, row-major within a map. Features start at
/// zero and opacities at `initial_logit`.
pub fn fuse_depth_maps(
    maps: &[DepthMap],
    feature_dim: usize,
    radius: f64,
    initial_logit: f64,
) -> Result<FeaturizedPointCloud, CloudError> {
    let total: usize = maps.iter().map(|m| m.valid_count()).sum();
    let mut positions = Vec::with_capacity(total * 3);
    for map in maps {
        for row in 0..map.map_height() {
            for col in 0..map.map_width() {
                let Some(depth) = map.value(col, row) else {
                    continue;
                };
                let (u, v) = map.full_res_coords(col, row);
                let p = geometry::unproject(&PixelDepth::new(u, v, depth), map.camera());
                positions.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
    }
    FeaturizedPointCloud::from_parts(
        positions,
        vec![0.0; total * feature_dim],
        vec![initial_logit; total],
        feature_dim,
        radius,
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_camera(width: u32, height: u32) -> Camera {
        let k = Matrix3::new(
            60.0,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            60.0,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(k, Matrix3::identity(), Vector3::zeros(), width, height).unwrap()
    }

    pub(crate) fn random_cloud(rng: &mut impl Rng, n: usize, feature_dim: usize) -> FeaturizedPointCloud {
        let positions: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let features: Vec<f64> = (0..feature_dim * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..4.0)).collect();
        FeaturizedPointCloud::from_parts(positions, features, logits, feature_dim, 0.05).unwrap()
    }

    #[test]
    fn from_parts_validates() {
        assert_eq!(
            FeaturizedPointCloud::from_parts(vec![0.0; 3], vec![0.0; 8], vec![0.0], 8, 0.1)
                .unwrap_err(),
            CloudError::FeatureDim { dim: 8 }
        );
        assert!(matches!(
            FeaturizedPointCloud::from_parts(vec![0.0; 3], vec![0.0; 9], vec![0.0], 9, -1.0)
                .unwrap_err(),
            CloudError::BadRadius { .. }
        ));
        assert!(matches!(
            FeaturizedPointCloud::from_parts(vec![0.0; 3], vec![0.0; 18], vec![0.0], 9, 0.1)
                .unwrap_err(),
            CloudError::Length { .. }
        ));
        assert!(matches!(
            FeaturizedPointCloud::from_parts(vec![f64::NAN, 0.0, 0.0], vec![0.0; 9], vec![0.0], 9, 0.1)
                .unwrap_err(),
            CloudError::NonFinite { .. }
        ));
    }

    #[test]
    fn merge_concatenates_and_checks_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(&mut rng, 3, 9);
        let b = random_cloud(&mut rng, 2, 9);
        let m = merge(&a, &b).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.position(3), b.position(0));
        assert_eq!(m.feature(4), b.feature(1));
        assert_relative_eq!(m.radius(), a.radius());
        let c = random_cloud(&mut rng, 2, 18);
        assert_eq!(
            merge(&a, &c).unwrap_err(),
            CloudError::DimMismatch { a: 9, b: 18 }
        );
    }

    #[test]
    fn transform_moves_only_selected_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 10, 9);
        let rotation = Matrix3::identity();
        let shift = Vector3::new(0.0, 0.0, 5.0);
        let moved = transform_subset(&cloud, |i, _| i % 2 == 0, &rotation, &shift);
        for i in 0..cloud.len() {
            let expected = if i % 2 == 0 {
                cloud.position(i) + shift
            } else {
                cloud.position(i)
            };
            assert_relative_eq!(moved.position(i), expected, epsilon = 1e-15);
            assert_eq!(moved.feature(i), cloud.feature(i));
        }
    }

    #[test]
    fn erase_removes_selected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 20, 9);
        let cut = erase(&cloud, |_, p| p.z < 0.0);
        assert!(cut.len() < cloud.len());
        for i in 0..cut.len() {
            assert!(cut.position(i).z >= 0.0);
        }
        let survivors = (0..cloud.len()).filter(|&i| cloud.position(i).z >= 0.0).count();
        assert_eq!(cut.len(), survivors);
    }

    #[test]
    fn downsample_is_deterministic_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 50, 9);
        let a = downsample(&cloud, 20, 7).unwrap();
        let b = downsample(&cloud, 20, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let c = downsample(&cloud, 20, 8).unwrap();
        assert_ne!(a.positions_flat(), c.positions_flat());
        // Identity when the target equals the size.
        assert_eq!(downsample(&cloud, 50, 0).unwrap(), cloud);
        assert!(matches!(
            downsample(&cloud, 51, 0).unwrap_err(),
            CloudError::BadTarget { .. }
        ));
        // Every sampled point is one of the originals.
        for i in 0..a.len() {
            let p = a.position(i);
            assert!((0..cloud.len()).any(|j| cloud.position(j) == p));
        }
    }

    #[test]
    fn depth_map_stride_round_trip() {
        let camera = test_camera(16, 8);
        for stride in [1usize, 2, 4] {
            let mw = 16 / stride;
            let mh = 8 / stride;
            let values: Vec<f64> = (0..mw * mh).map(|i| 1.0 + i as f64).collect();
            let map =
                DepthMap::new(camera.clone(), stride, values, vec![true; mw * mh]).unwrap();
            for row in 0..mh {
                for col in 0..mw {
                    let (u, v) = map.full_res_coords(col, row);
                    assert!(camera.contains(u, v));
                    // Sampling at the block center recovers the same pixel.
                    assert_eq!(
                        map.sample(u, v),
                        DepthSample::Depth(map.value(col, row).unwrap())
                    );
                }
            }
        }
    }

    #[test]
    fn depth_map_sample_edges() {
        let camera = test_camera(8, 8);
        let mut values = vec![2.0; 64];
        let mut valid = vec![true; 64];
        values[9] = 0.0;
        valid[9] = false;
        let map = DepthMap::new(camera, 1, values, valid).unwrap();
        assert_eq!(map.sample(-0.6, 0.0), DepthSample::OutOfImage);
        assert_eq!(map.sample(7.2, 7.0), DepthSample::OutOfImage);
        assert_eq!(map.sample(6.8, 7.0), DepthSample::Depth(2.0));
        assert_eq!(map.sample(1.2, 1.4), DepthSample::Invalid);
        assert_eq!(map.valid_count(), 63);
    }

    #[test]
    fn depth_map_rejects_bad_shapes() {
        let camera = test_camera(8, 8);
        assert!(DepthMap::new(camera.clone(), 3, vec![1.0; 4], vec![true; 4]).is_err());
        assert!(DepthMap::new(camera.clone(), 1, vec![1.0; 4], vec![true; 4]).is_err());
        let mut values = vec![1.0; 64];
        values[0] = -2.0;
        assert!(DepthMap::new(camera, 1, values, vec![true; 64]).is_err());
    }

    #[test]
    fn fuse_unprojects_valid_pixels_in_order() {
        let camera = test_camera(4, 4);
        let mut values = vec![0.0; 16];
        let mut valid = vec![false; 16];
        // Two valid pixels: (col 1, row 0) at depth 2, (col 3, row 2) at 3.
        values[1] = 2.0;
        valid[1] = true;
        values[2 * 4 + 3] = 3.0;
        valid[2 * 4 + 3] = true;
        let map = DepthMap::new(camera.clone(), 1, values, valid).unwrap();
        let cloud = fuse_depth_maps(std::slice::from_ref(&map), 27, 0.05, 4.0).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.feature_dim(), 27);
        assert!(cloud.features_flat().iter().all(|&f| f == 0.0));
        assert!(cloud.opacity_logits().iter().all(|&o| o == 4.0));
        let expected0 =
            geometry::unproject(&PixelDepth::new(1.0, 0.0, 2.0), &camera);
        let expected1 =
            geometry::unproject(&PixelDepth::new(3.0, 2.0, 3.0), &camera);
        assert_relative_eq!(cloud.position(0), expected0, epsilon = 1e-15);
        assert_relative_eq!(cloud.position(1), expected1, epsilon = 1e-15);
        // Projecting back lands on the source pixels.
        let pd = geometry::project(&cloud.position(0), &camera).unwrap();
        assert_relative_eq!(pd.u, 1.0, epsilon = 1e-12);
        assert_relative_eq!(pd.v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fuse_strided_map_uses_block_centers() {
        let camera = test_camera(8, 8);
        let map = DepthMap::new(camera.clone(), 4, vec![2.0; 4], vec![true; 4]).unwrap();
        let cloud = fuse_depth_maps(std::slice::from_ref(&map), 9, 0.05, 4.0).unwrap();
        assert_eq!(cloud.len(), 4);
        let pd = geometry::project(&cloud.position(0), &camera).unwrap();
        // First block covers full-res pixels 0..3, center at 1.5.
        assert_relative_eq!(pd.u, 1.5, epsilon = 1e-12);
        assert_relative_eq!(pd.v, 1.5, epsilon = 1e-12);
    }
}
