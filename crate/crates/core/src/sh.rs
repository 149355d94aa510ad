//! Real spherical harmonics up to degree 2 for view-dependent shading.
//!
//! Each point carries `K` feature channels laid out as `K/9` color channels
//! of 9 coefficients each, ordered `(l, m)` =
//! `(0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2)`.
//! [`modulate`] contracts the coefficients with the basis evaluated at a
//! unit view direction, producing one scalar per color channel:
//! `s[c] = sum_k f[c * 9 + k] * b[k]`.

use nalgebra::Vector3;

/// Number of basis functions (degree <= 2).
pub const BASIS_LEN: usize = 9;

/// Sum of squared basis values at any unit direction, `9 / (4 pi)`.
pub const BASIS_NORM_SQUARED: f64 = 9.0 / (4.0 * std::f64::consts::PI);

// Polynomial constants of the orthonormal real basis.
pub(crate) const C0: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
const C1: f64 = 0.488_602_511_902_919_9; // sqrt(3 / (4 pi))
const C2A: f64 = 1.092_548_430_592_079_2; // (1/2) sqrt(15 / pi), for xy, yz, xz
const C2B: f64 = 0.315_391_565_252_520_05; // (1/4) sqrt(5 / pi), for 3z^2 - 1
const C2C: f64 = 0.546_274_215_296_039_6; // (1/4) sqrt(15 / pi), for x^2 - y^2

/// How far a direction may deviate from unit length before it is rejected.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShError {
    #[error("view direction must be unit length (norm {norm})")]
    NotUnit { norm: f64 },
    #[error("feature vector length {len} is not a multiple of {BASIS_LEN}")]
    DimMismatch { len: usize },
}

/// Evaluates the 9 basis functions at a unit direction.
pub fn basis(v: &Vector3<f64>) -> Result<[f64; BASIS_LEN], ShError> {
    let norm = v.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(ShError::NotUnit { norm });
    }
    Ok(basis_unit(v))
}

/// Basis evaluation without the unit-norm check, for hot loops that already
/// normalized the direction.
pub(crate) fn basis_unit(v: &Vector3<f64>) -> [f64; BASIS_LEN] {
    let (x, y, z) = (v.x, v.y, v.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2A * x * y,
        C2A * y * z,
        C2B * (3.0 * z * z - 1.0),
        C2A * x * z,
        C2C * (x * x - y * y),
    ]
}

/// Gradient of each basis polynomial with respect to the direction
/// components, evaluated at `v`. Row `k` is `d b[k] / d (x, y, z)`.
pub fn basis_gradient(v: &Vector3<f64>) -> [[f64; 3]; BASIS_LEN] {
    let (x, y, z) = (v.x, v.y, v.z);
    [
        [0.0, 0.0, 0.0],
        [0.0, C1, 0.0],
        [0.0, 0.0, C1],
        [C1, 0.0, 0.0],
        [C2A * y, C2A * x, 0.0],
        [0.0, C2A * z, C2A * y],
        [0.0, 0.0, 6.0 * C2B * z],
        [C2A * z, 0.0, C2A * x],
        [2.0 * C2C * x, -2.0 * C2C * y, 0.0],
    ]
}

/// Contracts per-point features with the basis at a view direction. The
/// feature length must be a multiple of 9; the result has one entry per
/// 9-coefficient block.
pub fn modulate(features: &[f64], v: &Vector3<f64>) -> Result<Vec<f64>, ShError> {
    let b = basis(v)?;
    if features.len() % BASIS_LEN != 0 {
        return Err(ShError::DimMismatch {
            len: features.len(),
        });
    }
    let mut out = vec![0.0; features.len() / BASIS_LEN];
    modulate_into(features, &b, &mut out);
    Ok(out)
}

/// Contraction against a precomputed basis; `out` must hold
/// `features.len() / 9` entries.
pub(crate) fn modulate_into(features: &[f64], basis: &[f64; BASIS_LEN], out: &mut [f64]) {
    debug_assert_eq!(features.len(), out.len() * BASIS_LEN);
    for (c, slot) in out.iter_mut().enumerate() {
        let block = &features[c * BASIS_LEN..(c + 1) * BASIS_LEN];
        let mut acc = 0.0;
        for k in 0..BASIS_LEN {
            acc += block[k] * basis[k];
        }
        *slot = acc;
    }
}
