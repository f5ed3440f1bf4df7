//! Canonical Gaussian storage and the covariance / color math shared by
//! projection, rasterization and deformation.
//!
//! Each Gaussian is an anisotropic 3D kernel `G(x) = exp(-1/2 dᵀ Σ⁻¹ d)`
//! with `Σ = R S Sᵀ Rᵀ` built from a unit quaternion and per-axis scales.
//! Scales are stored in log space and opacities in logit space so the
//! optimizer can move freely in an unconstrained parameterization.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Degree-0 real spherical harmonic basis value, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 real spherical harmonic basis magnitude, `sqrt(3 / (4 pi))`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// DC offset added to the SH evaluation before clamping; colors are stored
/// as offsets around mid-gray.
pub const SH_DC_OFFSET: f64 = 0.5;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients per color channel for a given degree.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Structure-of-arrays store for canonical 3D Gaussians.
///
/// All attribute arrays run parallel to each other; `count()` is derived
/// from the position array. Quaternions are stored `(w, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    /// `count * 3` world-space positions.
    pub positions: Vec<f64>,
    /// `count * 4` rotation quaternions, kept unit length by the optimizer.
    pub rotations: Vec<f64>,
    /// `count * 3` log-space axis scales.
    pub log_scales: Vec<f64>,
    /// `count` pre-sigmoid opacities.
    pub opacity_logits: Vec<f64>,
    /// `count * sh_coeff_count(degree) * 3` SH coefficients, coefficient-major
    /// within each block: `[c0_r, c0_g, c0_b, c1_r, ...]`.
    pub sh_coeffs: Vec<f64>,
    /// SH degree shared by every Gaussian (0 or 1).
    pub sh_degree: usize,
}

impl GaussianCloud {
    /// An empty cloud of the given SH degree.
    pub fn empty(sh_degree: usize) -> Self {
        GaussianCloud {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
        }
    }

    pub fn count(&self) -> usize {
        self.positions.len() / 3
    }

    /// SH coefficients per channel.
    pub fn sh_dim(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        )
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        [
            self.rotations[4 * i],
            self.rotations[4 * i + 1],
            self.rotations[4 * i + 2],
            self.rotations[4 * i + 3],
        ]
    }

    pub fn log_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        )
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn sh_block(&self, i: usize) -> &[f64] {
        let stride = self.sh_dim() * 3;
        &self.sh_coeffs[i * stride..(i + 1) * stride]
    }

    /// Checks the structural invariants: parallel array lengths, finite and
    /// positive activated scales, near-unit quaternions, opacities in (0, 1).
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        if self.positions.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.log_scales.len() != 3 * n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * self.sh_dim() * 3
        {
            return Err(Error::InvalidParameter(format!(
                "attribute arrays disagree on count {n}"
            )));
        }
        if self.sh_degree > 1 {
            return Err(Error::InvalidParameter(format!(
                "unsupported SH degree {}",
                self.sh_degree
            )));
        }
        for (i, s) in self.log_scales.iter().enumerate() {
            if !s.is_finite() || !s.exp().is_finite() || s.exp() <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "log_scale[{i}] = {s} yields a non-positive or non-finite scale"
                )));
            }
        }
        for i in 0..n {
            let q = self.rotation(i);
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "quaternion {i} has norm {norm}, expected 1 within 1e-6"
                )));
            }
            let o = self.opacity(i);
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "opacity {i} = {o} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Rescale every quaternion to unit length. Called after optimizer steps.
    pub fn renormalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if norm > 0.0 && norm.is_finite() {
                for c in q {
                    *c /= norm;
                }
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }
}

/// A symmetric, positive semi-definite 3x3 world-space covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    sym: Matrix3<f64>,
}

impl Covariance3 {
    /// Wraps a matrix after checking symmetry (1e-12 relative) and that no
    /// eigenvalue is below `-1e-9 * trace`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let scale = m.norm().max(1.0);
        for i in 0..3 {
            for j in (i + 1)..3 {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let eig = m.symmetric_eigenvalues();
        let trace = m.trace();
        if eig.iter().any(|&l| l < -1e-9 * trace.abs().max(1e-300)) {
            return Err(Error::InvalidParameter(
                "covariance has a significantly negative eigenvalue".into(),
            ));
        }
        Ok(Covariance3 { sym: m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.sym
    }

    pub fn trace(&self) -> f64 {
        self.sym.trace()
    }

    /// Returns a copy with `eps * I` added, `eps = 1e-9 * trace / 3`.
    ///
    /// This is the regularization callers apply before inverting a covariance
    /// that may come from a degenerate (near-flat) Gaussian.
    pub fn regularized(&self) -> Covariance3 {
        let eps = 1e-9 * self.sym.trace() / 3.0;
        Covariance3 {
            sym: self.sym + Matrix3::identity() * eps,
        }
    }
}

fn quat_normalize(q: [f64; 4]) -> ([f64; 4], f64) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `quat_to_rotation` w.r.t. each unit-quaternion
/// component, in the order `w, x, y, z`.
fn quat_rotation_jacobians(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Builds `Σ = R S Sᵀ Rᵀ` from a quaternion (normalized internally) and
/// log-space scales, so `S = diag(exp(log_scale))`.
pub fn build_covariance(rotation: [f64; 4], log_scale: Vector3<f64>) -> Result<Covariance3> {
    if rotation.iter().any(|c| !c.is_finite()) || log_scale.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite rotation or log_scale".into(),
        ));
    }
    let (q, norm) = quat_normalize(rotation);
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::InvalidParameter("zero-norm quaternion".into()));
    }
    let r = quat_to_rotation(q);
    // R S Sᵀ Rᵀ = R diag(exp(2 log_scale)) Rᵀ
    let d = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    ));
    let sym = r * d * r.transpose();
    // Symmetrize to wash out last-bit asymmetry from the products.
    let sym = (sym + sym.transpose()) * 0.5;
    Ok(Covariance3 { sym })
}

/// Adjoint of [`build_covariance`]: given upstream `dL/dΣ` (full 3x3),
/// returns gradients w.r.t. the raw (unnormalized) quaternion and the
/// log-scales.
pub fn build_covariance_backward(
    rotation: [f64; 4],
    log_scale: Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> ([f64; 4], Vector3<f64>) {
    let (q, norm) = quat_normalize(rotation);
    let r = quat_to_rotation(q);
    let v = Vector3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    );
    let d = Matrix3::from_diagonal(&v);

    // Σ = R D Rᵀ with D = diag(v):
    //   dL/dR = (G + Gᵀ) R D
    //   dL/dv_i = (Rᵀ G R)_ii,  dL/d(log_scale_i) = dL/dv_i * 2 v_i
    let g_sym = d_sigma + d_sigma.transpose();
    let d_r = g_sym * r * d;
    let m = r.transpose() * d_sigma * r;
    let d_log_scale = Vector3::new(
        m[(0, 0)] * 2.0 * v.x,
        m[(1, 1)] * 2.0 * v.y,
        m[(2, 2)] * 2.0 * v.z,
    );

    // Chain through R(q̂) and the normalization q̂ = q / |q|.
    let jacs = quat_rotation_jacobians(q);
    let mut d_qhat = [0.0f64; 4];
    for (k, jac) in jacs.iter().enumerate() {
        d_qhat[k] = d_r.component_mul(jac).sum();
    }
    let dot = q[0] * d_qhat[0] + q[1] * d_qhat[1] + q[2] * d_qhat[2] + q[3] * d_qhat[3];
    let mut d_q = [0.0f64; 4];
    for k in 0..4 {
        d_q[k] = (d_qhat[k] - q[k] * dot) / norm;
    }
    (d_q, d_log_scale)
}

/// Evaluates `exp(-1/2 dᵀ Σ⁻¹ d)` with `d = x - mean`.
///
/// Fails with a singular-matrix error when the smallest eigenvalue is not
/// above `1e-12 * trace`; the caller regularizes via
/// [`Covariance3::regularized`] and retries.
pub fn gaussian_density(x: Vector3<f64>, mean: Vector3<f64>, cov: &Covariance3) -> Result<f64> {
    let eig = cov.sym.symmetric_eigenvalues();
    let min_eig = eig.min();
    if min_eig <= 1e-12 * cov.sym.trace() {
        return Err(Error::SingularMatrix(format!(
            "covariance smallest eigenvalue {min_eig} below invertibility floor"
        )));
    }
    let inv = cov
        .sym
        .try_inverse()
        .ok_or_else(|| Error::SingularMatrix("covariance inversion failed".into()))?;
    let d = x - mean;
    Ok((-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp())
}

/// Evaluates SH color for one Gaussian: DC offset plus the real SH basis up
/// to `degree`, clamped to be non-negative per channel.
///
/// `sh` is one coefficient block laid out coefficient-major, `view_dir` must
/// be unit length for degree 1.
pub fn eval_sh_color(sh: &[f64], view_dir: Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    let n = sh_coeff_count(degree);
    if degree > 1 {
        return Err(Error::InvalidParameter(format!(
            "unsupported SH degree {degree}"
        )));
    }
    if sh.len() != n * 3 {
        return Err(Error::InvalidParameter(format!(
            "SH block has {} values, expected {}",
            sh.len(),
            n * 3
        )));
    }
    let mut rgb = [0.0f64; 3];
    for ch in 0..3 {
        let mut c = SH_DC_OFFSET + SH_C0 * sh[ch];
        if degree >= 1 {
            c += -SH_C1 * view_dir.y * sh[3 + ch];
            c += SH_C1 * view_dir.z * sh[6 + ch];
            c += -SH_C1 * view_dir.x * sh[9 + ch];
        }
        rgb[ch] = c.max(0.0);
    }
    Ok(rgb)
}

/// Adjoint of [`eval_sh_color`]: gradients w.r.t. the coefficient block and
/// the view direction. Channels clamped at zero propagate nothing.
pub fn eval_sh_color_backward(
    sh: &[f64],
    view_dir: Vector3<f64>,
    degree: usize,
    d_rgb: [f64; 3],
) -> (Vec<f64>, Vector3<f64>) {
    let n = sh_coeff_count(degree);
    let mut d_sh = vec![0.0f64; n * 3];
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        let mut pre = SH_DC_OFFSET + SH_C0 * sh[ch];
        if degree >= 1 {
            pre += -SH_C1 * view_dir.y * sh[3 + ch];
            pre += SH_C1 * view_dir.z * sh[6 + ch];
            pre += -SH_C1 * view_dir.x * sh[9 + ch];
        }
        if pre <= 0.0 {
            continue; // clamped channel
        }
        let g = d_rgb[ch];
        d_sh[ch] += g * SH_C0;
        if degree >= 1 {
            d_sh[3 + ch] += g * -SH_C1 * view_dir.y;
            d_sh[6 + ch] += g * SH_C1 * view_dir.z;
            d_sh[9 + ch] += g * -SH_C1 * view_dir.x;
            d_dir.x += g * -SH_C1 * sh[9 + ch];
            d_dir.y += g * -SH_C1 * sh[3 + ch];
            d_dir.z += g * SH_C1 * sh[6 + ch];
        }
    }
    (d_sh, d_dir)
}
