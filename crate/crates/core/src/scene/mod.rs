//! Synthetic Lambertian scenes: generation, rendering, the bas-relief
//! transformation, and the classical calibrated solver.
//!
//! Scene math runs in f64; the dataset container stores f32.

mod generate;
mod render;
mod woodham;
pub mod dataset;

pub use generate::{generate_blob_scene, sample_upper_hemisphere};
pub use render::{apply_gbr, render};
pub use woodham::woodham_solve;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthographic viewing direction; fixed for every scene.
pub const VIEWPOINT: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// Surface geometry and reflectance on a pixel grid.
#[derive(Debug, Clone)]
pub struct ObjectScene {
    /// Unit normals, [3,H,W]; meaningful on the mask.
    pub normals: Tensor<f64>,
    /// Diffuse albedo in (0,1], [H,W].
    pub albedo: Tensor<f64>,
    /// Row-major H*W visibility mask.
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl ObjectScene {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn normal_at(&self, idx: usize) -> Vector3<f64> {
        let area = self.height * self.width;
        let d = self.normals.as_slice();
        Vector3::new(d[idx], d[area + idx], d[2 * area + idx])
    }

    pub fn validate(&self) -> Result<()> {
        let area = self.height * self.width;
        if self.normals.shape() != [3, self.height, self.width]
            || self.albedo.shape() != [self.height, self.width]
            || self.mask.len() != area
        {
            return Err(Error::shape("scene array layout mismatch"));
        }
        for i in 0..area {
            if !self.mask[i] {
                continue;
            }
            let n = self.normal_at(i);
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("normal at {i} is not unit: |n|={}", n.norm())));
            }
            if n.dot(&VIEWPOINT) <= 0.0 {
                return Err(Error::invalid(format!("normal at {i} faces away from the camera")));
            }
            let rho = self.albedo.as_slice()[i];
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::invalid(format!("albedo at {i} is {rho}, expected (0,1]")));
            }
        }
        Ok(())
    }
}

/// Directional lights with per-image intensities.
#[derive(Debug, Clone)]
pub struct LightSet {
    pub dirs: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

impl LightSet {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Upper-hemisphere invariants; holds for sampled sets (a bas-relief
    /// transformation may construct sets outside these bounds).
    pub fn validate(&self) -> Result<()> {
        if self.dirs.len() != self.intensities.len() {
            return Err(Error::shape("lights and intensities disagree in length"));
        }
        for (i, d) in self.dirs.iter().enumerate() {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("light {i} is not unit length")));
            }
            if d.z < 0.0 {
                return Err(Error::invalid(format!("light {i} is below the horizon (z={})", d.z)));
            }
        }
        for (i, &e) in self.intensities.iter().enumerate() {
            if !(0.2..=2.0).contains(&e) {
                return Err(Error::invalid(format!("intensity {i} is {e}, expected [0.2,2]")));
            }
        }
        Ok(())
    }
}

/// The three-parameter generalized bas-relief transformation.
#[derive(Debug, Clone, Copy)]
pub struct GbrParams {
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl GbrParams {
    pub fn new(mu: f64, nu: f64, lambda: f64) -> Result<Self> {
        if lambda == 0.0 {
            return Err(Error::invalid("bas-relief lambda must be nonzero"));
        }
        Ok(GbrParams { mu, nu, lambda })
    }

    pub fn identity() -> Self {
        GbrParams { mu: 0.0, nu: 0.0, lambda: 1.0 }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            self.mu, self.nu, self.lambda,
        )
    }

    /// G^{-T}, the map applied to albedo-scaled normals.
    pub fn inverse_transpose(&self) -> Matrix3<f64> {
        self.matrix().try_inverse().expect("lambda != 0").transpose()
    }
}

/// Additive error model applied when rendering.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub sigma: f64,
    /// Clamp n.l at zero (attached shadows). Disabled for oracle renders
    /// that need the exact linear image model.
    pub shadow_clamp: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma: 0.0, shadow_clamp: true }
    }
}

impl NoiseSpec {
    pub fn noiseless_linear() -> Self {
        NoiseSpec { sigma: 0.0, shadow_clamp: false }
    }
}

/// A rendered image stack with optional ground truth attached.
#[derive(Debug, Clone)]
pub struct PSObservation {
    /// [n,1,H,W]
    pub images: Tensor<f64>,
    pub mask: Vec<bool>,
    pub lights: Option<LightSet>,
    pub scene: Option<ObjectScene>,
}

impl PSObservation {
    pub fn num_images(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Direction from azimuth/elevation: azimuth sweeps the x-z plane from +x,
/// elevation tilts toward +y.
pub fn dir_from_angles(phi: f64, theta: f64) -> Vector3<f64> {
    Vector3::new(theta.cos() * phi.cos(), theta.sin(), theta.cos() * phi.sin())
}

/// Inverse of [`dir_from_angles`] for upper-hemisphere directions.
pub fn angles_from_dir(d: &Vector3<f64>) -> (f64, f64) {
    let theta = d.y.clamp(-1.0, 1.0).asin();
    let phi = d.z.atan2(d.x);
    (phi, theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_mapping_hits_the_pole_and_boundary() {
        let over = dir_from_angles(std::f64::consts::FRAC_PI_2, 0.0);
        assert!((over - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let edge = dir_from_angles(0.0, 0.0);
        assert!((edge - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn angle_mapping_round_trips() {
        for (phi, theta) in [(0.3, 0.2), (2.9, -1.2), (1.5, 1.4), (0.01, 0.0)] {
            let d = dir_from_angles(phi, theta);
            let (p2, t2) = angles_from_dir(&d);
            assert!((phi - p2).abs() < 1e-9, "{phi} vs {p2}");
            assert!((theta - t2).abs() < 1e-9, "{theta} vs {t2}");
        }
    }

    #[test]
    fn gbr_identity_matrix_is_identity() {
        let g = GbrParams::identity();
        assert_eq!(g.matrix(), Matrix3::identity());
        assert_eq!(g.inverse_transpose(), Matrix3::identity());
    }

    #[test]
    fn gbr_rejects_zero_lambda() {
        assert!(GbrParams::new(0.1, 0.2, 0.0).is_err());
    }
}
