//! Desk-scale dynamic Gaussian splatting engine.
//!
//! A canonical cloud of anisotropic 3D Gaussians is warped to each timestamp
//! by a voxel-plane deformation field with a multi-head decoder, projected to
//! screen space and alpha-composited by a tile-based differentiable
//! rasterizer. A motion-saliency gate freezes low-motion Gaussians out of
//! deformation-field evaluation and gradient flow so optimization focuses on
//! dynamic content. Everything here runs on the CPU with analytic gradients
//! end to end.

pub mod camera;
pub mod rasterize;
pub mod error;
pub mod gaussian;

pub use camera::{project_gaussian, project_gaussian_backward, Camera, Splat2D};
pub use error::{Error, Result};
pub use gaussian::{
    build_covariance, build_covariance_backward, eval_sh_color, gaussian_density, Covariance3,
    GaussianCloud,
};
