//! Pinhole camera model and projection of 3D Gaussians to 2D screen-space
//! splats.
//!
//! Projection follows the EWA affine approximation: the world covariance is
//! rotated into camera space and squeezed through the perspective Jacobian
//! `J` evaluated at the camera-space mean, `Σ' = J W Σ Wᵀ Jᵀ`. A small
//! isotropic floor is added to the 2D covariance so sub-pixel splats do not
//! vanish.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::Covariance3;

/// Anti-aliasing floor added to each diagonal entry of the projected 2D
/// covariance, in pixels².
pub const DEFAULT_COV2D_FLOOR: f64 = 0.3;

/// Hard lower bound on camera-space depth; points closer than this are
/// culled before any division by depth.
pub const MIN_DEPTH_GUARD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Rigid world-to-camera transform; +z looks into the scene.
    pub world_to_camera: Matrix4<f64>,
    /// (fx, fy) in pixels.
    pub focal: (f64, f64),
    /// (cx, cy) in pixels.
    pub principal_point: (f64, f64),
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
    pub near: f64,
    pub far: f64,
    /// Normalized capture time in [0, 1].
    pub timestamp: f64,
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        focal: (f64, f64),
        principal_point: (f64, f64),
        image_size: (u32, u32),
        near: f64,
        far: f64,
        timestamp: f64,
    ) -> Result<Self> {
        let cam = Camera {
            world_to_camera,
            focal,
            principal_point,
            image_size,
            near,
            far,
            timestamp,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if err > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "world_to_camera rotation block not orthonormal (|RᵀR - I| = {err})"
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.image_size.0 < 1 || self.image_size.1 < 1 {
            return Err(Error::InvalidParameter("image size must be >= 1".into()));
        }
        if !(self.focal.0 > 0.0 && self.focal.1 > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.timestamp) {
            return Err(Error::InvalidParameter(format!(
                "timestamp {} outside [0, 1]",
                self.timestamp
            )));
        }
        Ok(())
    }

    /// Rotation block of the world-to-camera transform.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-space position of the center of projection.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    /// World point to camera space.
    pub fn to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Builds a camera from a D-NeRF style camera-to-world matrix with
    /// OpenGL axes (camera looks along -z, y up) plus the shared
    /// `camera_angle_x` field: `fx = fy = 0.5 * width / tan(0.5 * angle_x)`.
    pub fn from_dnerf(
        c2w_opengl: Matrix4<f64>,
        camera_angle_x: f64,
        image_size: (u32, u32),
        near: f64,
        far: f64,
        timestamp: f64,
    ) -> Result<Self> {
        let (w, h) = image_size;
        let focal = 0.5 * w as f64 / (0.5 * camera_angle_x).tan();
        // Flip y and z to move from OpenGL to a +z-forward pinhole frame,
        // then invert the rigid transform.
        let mut c2w = c2w_opengl;
        for row in 0..3 {
            c2w[(row, 1)] = -c2w[(row, 1)];
            c2w[(row, 2)] = -c2w[(row, 2)];
        }
        let r_c2w = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let t_c2w = c2w.fixed_view::<3, 1>(0, 3).into_owned();
        let r = r_c2w.transpose();
        let t = -r * t_c2w;
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(
            w2c,
            (focal, focal),
            (w as f64 / 2.0, h as f64 / 2.0),
            image_size,
            near,
            far,
            timestamp,
        )
    }
}

/// A Gaussian projected to screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center_px: Vector2<f64>,
    /// Symmetric 2x2 screen-space covariance in pixels², floor included.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    /// Index into the originating cloud.
    pub source_index: usize,
}

impl Splat2D {
    /// Half-extents of the k-sigma axis-aligned bounding box. For the level
    /// set at Mahalanobis distance k the tight box is `k * sqrt(diag)`.
    pub fn bbox_half_extents(&self, k_sigma: f64) -> (f64, f64) {
        (
            k_sigma * self.cov2d[(0, 0)].max(0.0).sqrt(),
            k_sigma * self.cov2d[(1, 1)].max(0.0).sqrt(),
        )
    }
}

fn perspective_jacobian(focal: (f64, f64), t: Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, fy) = focal;
    let tz2 = t.z * t.z;
    Matrix2x3::new(
        fx / t.z,
        0.0,
        -fx * t.x / tz2,
        0.0,
        fy / t.z,
        -fy * t.y / tz2,
    )
}

/// Projects one Gaussian. Returns `None` when the camera-space depth falls
/// outside `[max(near, guard), far]`; culling is a normal outcome.
pub fn project_gaussian(
    mean: Vector3<f64>,
    cov: &Covariance3,
    cam: &Camera,
    source_index: usize,
) -> Option<Splat2D> {
    project_gaussian_with_floor(mean, cov, cam, source_index, DEFAULT_COV2D_FLOOR)
}

pub fn project_gaussian_with_floor(
    mean: Vector3<f64>,
    cov: &Covariance3,
    cam: &Camera,
    source_index: usize,
    cov2d_floor: f64,
) -> Option<Splat2D> {
    let t = cam.to_camera(mean);
    if t.z < cam.near.max(MIN_DEPTH_GUARD) || t.z > cam.far {
        return None;
    }
    let j = perspective_jacobian(cam.focal, t);
    let m = j * cam.rotation();
    let cov2d = m * cov.matrix() * m.transpose() + Matrix2::identity() * cov2d_floor;
    let (fx, fy) = cam.focal;
    let (cx, cy) = cam.principal_point;
    Some(Splat2D {
        center_px: Vector2::new(fx * t.x / t.z + cx, fy * t.y / t.z + cy),
        cov2d,
        depth: t.z,
        source_index,
    })
}

/// Adjoint of [`project_gaussian`] for a splat that survived culling.
///
/// Upstream gradients arrive on the pixel center, the 2D covariance (full
/// 2x2) and the depth; the result is `dL/dmean` and `dL/dΣ` as a full 3x3
/// (pair entries (i,j)/(j,i) each carry their own share).
pub fn project_gaussian_backward(
    mean: Vector3<f64>,
    cov: &Covariance3,
    cam: &Camera,
    d_center: Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
    d_depth: f64,
) -> (Vector3<f64>, Matrix3<f64>) {
    let r = cam.rotation();
    let t = cam.to_camera(mean);
    let (fx, fy) = cam.focal;
    let j = perspective_jacobian(cam.focal, t);
    let m = j * r;

    // dL/dΣ through cov2d = (J R) Σ (J R)ᵀ.
    let d_sigma = m.transpose() * d_cov2d * m;

    // Pixel-center and depth terms.
    let tz2 = t.z * t.z;
    let mut d_t = Vector3::new(
        d_center.x * fx / t.z,
        d_center.y * fy / t.z,
        -d_center.x * fx * t.x / tz2 - d_center.y * fy * t.y / tz2 + d_depth,
    );

    // J itself depends on t: cov2d = J A Jᵀ with A = R Σ Rᵀ.
    let a = r * cov.matrix() * r.transpose();
    let tz3 = tz2 * t.z;
    let dj_dt = [
        Matrix2x3::new(0.0, 0.0, -fx / tz2, 0.0, 0.0, 0.0),
        Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -fy / tz2),
        Matrix2x3::new(
            -fx / tz2,
            0.0,
            2.0 * fx * t.x / tz3,
            0.0,
            -fy / tz2,
            2.0 * fy * t.y / tz3,
        ),
    ];
    let a_jt = a * j.transpose();
    for (k, jk) in dj_dt.iter().enumerate() {
        // d(cov2d) = Jk A Jᵀ + J A Jkᵀ
        let d1 = jk * a_jt;
        let d2 = d1.transpose();
        d_t[k] += d_cov2d.component_mul(&d1).sum() + d_cov2d.component_mul(&d2).sum();
    }

    (r.transpose() * d_t, d_sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::build_covariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::new(
            Matrix4::identity(),
            (100.0, 120.0),
            (32.0, 24.0),
            (64, 48),
            0.1,
            100.0,
            0.0,
        )
        .unwrap()
    }

    fn isotropic_cov(sigma: f64) -> Covariance3 {
        build_covariance([1.0, 0.0, 0.0, 0.0], Vector3::from_element(sigma.ln())).unwrap()
    }

    #[test]
    fn on_axis_projection() {
        let cam = test_camera();
        let sigma = 0.05;
        let z = 4.0;
        let s = project_gaussian(Vector3::new(0.0, 0.0, z), &isotropic_cov(sigma), &cam, 0)
            .expect("in frustum");
        assert!((s.center_px.x - 32.0).abs() < 1e-9);
        assert!((s.center_px.y - 24.0).abs() < 1e-9);
        // On-axis J = diag(fx/z, fy/z) padded with a zero column, so
        // cov2d = diag((fx σ / z)², (fy σ / z)²) + floor.
        let ex = (100.0 * sigma / z).powi(2) + DEFAULT_COV2D_FLOOR;
        let ey = (120.0 * sigma / z).powi(2) + DEFAULT_COV2D_FLOOR;
        assert!((s.cov2d[(0, 0)] - ex).abs() < 1e-9);
        assert!((s.cov2d[(1, 1)] - ey).abs() < 1e-9);
        assert!(s.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(s.depth, z);
    }

    #[test]
    fn near_half_is_culled() {
        let cam = test_camera();
        let s = project_gaussian(
            Vector3::new(0.0, 0.0, cam.near / 2.0),
            &isotropic_cov(0.05),
            &cam,
            0,
        );
        assert!(s.is_none());
    }

    #[test]
    fn camera_center_rejected_before_division() {
        let cam = test_camera();
        assert!(project_gaussian(Vector3::zeros(), &isotropic_cov(0.05), &cam, 0).is_none());
    }

    #[test]
    fn doubling_depth_halves_screen_sigma() {
        let cam = test_camera();
        let sigma = 0.08;
        let a = project_gaussian_with_floor(
            Vector3::new(0.0, 0.0, 2.0),
            &isotropic_cov(sigma),
            &cam,
            0,
            0.0,
        )
        .unwrap();
        let b = project_gaussian_with_floor(
            Vector3::new(0.0, 0.0, 4.0),
            &isotropic_cov(sigma),
            &cam,
            0,
            0.0,
        )
        .unwrap();
        let ratio_x = (a.cov2d[(0, 0)] / b.cov2d[(0, 0)]).sqrt();
        let ratio_y = (a.cov2d[(1, 1)] / b.cov2d[(1, 1)]).sqrt();
        assert!((ratio_x - 2.0).abs() < 1e-9);
        assert!((ratio_y - 2.0).abs() < 1e-9);
    }

    #[test]
    fn floor_bounds_minimum_eigenvalue() {
        let cam = test_camera();
        // Needle-thin Gaussian; without the floor its screen footprint would
        // collapse.
        let cov = build_covariance(
            [0.8, 0.2, -0.4, 0.1],
            Vector3::new(-8.0, -8.0, 0.5f64.ln()),
        )
        .unwrap();
        let s = project_gaussian(Vector3::new(0.2, -0.1, 3.0), &cov, &cam, 0).unwrap();
        let eig = s.cov2d.symmetric_eigenvalues();
        assert!(eig.min() >= DEFAULT_COV2D_FLOOR - 1e-12);
        assert!(s.cov2d.determinant() > 0.0);
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle: f64 = rng.gen_range(-1.0..1.0);
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ));
        m
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let cam = Camera::new(
                random_rigid(&mut rng),
                (rng.gen_range(60.0..150.0), rng.gen_range(60.0..150.0)),
                (32.0, 24.0),
                (64, 48),
                0.05,
                100.0,
                0.0,
            )
            .unwrap();
            let mean = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..6.0),
            );
            if cam.to_camera(mean).z < 0.5 {
                continue;
            }
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let ls = Vector3::new(
                rng.gen_range(-2.0..-0.5),
                rng.gen_range(-2.0..-0.5),
                rng.gen_range(-2.0..-0.5),
            );
            let cov = build_covariance(q, ls).unwrap();
            let d_center = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let d_cov2d = Matrix2::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let d_depth = rng.gen_range(-1.0..1.0);

            let loss = |mean: Vector3<f64>, cov_m: Matrix3<f64>| -> f64 {
                let c = Covariance3::from_matrix((cov_m + cov_m.transpose()) * 0.5).unwrap();
                let s = project_gaussian(mean, &c, &cam, 0).unwrap();
                d_center.dot(&s.center_px)
                    + d_cov2d.component_mul(&s.cov2d).sum()
                    + d_depth * s.depth
            };

            let (d_mean, d_sigma) =
                project_gaussian_backward(mean, &cov, &cam, d_center, &d_cov2d, d_depth);
            let h = 1e-4;
            for k in 0..3 {
                let mut dv = Vector3::zeros();
                dv[k] = h;
                let fd =
                    (loss(mean + dv, *cov.matrix()) - loss(mean - dv, *cov.matrix())) / (2.0 * h);
                let rel = (fd - d_mean[k]).abs() / fd.abs().max(d_mean[k].abs()).max(1e-6);
                assert!(rel < 1e-5, "trial {trial} d_mean[{k}]: {fd} vs {}", d_mean[k]);
            }
            // Perturb symmetric pairs together; expected slope is the sum of
            // the two paired entries of the full-matrix gradient.
            for i in 0..3 {
                for jj in i..3 {
                    let mut mp = *cov.matrix();
                    let mut mm = *cov.matrix();
                    mp[(i, jj)] += h;
                    mm[(i, jj)] -= h;
                    if i != jj {
                        mp[(jj, i)] += h;
                        mm[(jj, i)] -= h;
                    }
                    let fd = (loss(mean, mp) - loss(mean, mm)) / (2.0 * h);
                    let analytic = if i == jj {
                        d_sigma[(i, jj)]
                    } else {
                        d_sigma[(i, jj)] + d_sigma[(jj, i)]
                    };
                    let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                    assert!(rel < 1e-5, "trial {trial} d_sigma[({i},{jj})]: {fd} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = test_camera();
        let cov = isotropic_cov(0.1);
        let (d_mean, d_sigma) = project_gaussian_backward(
            Vector3::new(0.1, 0.2, 3.0),
            &cov,
            &cam,
            Vector2::zeros(),
            &Matrix2::zeros(),
            0.0,
        );
        assert_eq!(d_mean, Vector3::zeros());
        assert_eq!(d_sigma, Matrix3::zeros());
    }

    #[test]
    fn depth_only_upstream_leaves_covariance_untouched() {
        let cam = test_camera();
        let cov = isotropic_cov(0.1);
        let (_, d_sigma) = project_gaussian_backward(
            Vector3::new(0.1, 0.2, 3.0),
            &cov,
            &cam,
            Vector2::zeros(),
            &Matrix2::zeros(),
            1.0,
        );
        assert_eq!(d_sigma, Matrix3::zeros());
    }

    #[test]
    fn dnerf_camera_looks_at_origin() {
        // A camera 4 units up the +z axis in OpenGL convention (identity
        // c2w rotation means looking down -z... so place it at +z looking
        // back at the origin).
        let mut c2w = Matrix4::identity();
        c2w[(2, 3)] = 4.0;
        let cam = Camera::from_dnerf(c2w, 0.8, (64, 64), 0.1, 50.0, 0.0).unwrap();
        let t = cam.to_camera(Vector3::zeros());
        assert!((t.x).abs() < 1e-12 && (t.y).abs() < 1e-12);
        assert!((t.z - 4.0).abs() < 1e-12, "origin should be 4 in front");
        let focal = 0.5 * 64.0 / (0.4f64).tan();
        assert!((cam.focal.0 - focal).abs() < 1e-12);
    }
}
