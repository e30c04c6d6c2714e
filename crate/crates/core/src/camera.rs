//! Pinhole cameras with axis-angle world-to-camera extrinsics.
//!
//! Camera frame: +z forward, +x right, +y down; pixel centres sit at
//! half-integer coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp_so3, log_so3, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Axis-angle of the world-to-camera rotation.
    pub rotation: [f64; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
}

/// Cotangent of the camera extrinsics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CameraGrad {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Camera {
    /// Square-pixel camera with the principal point at the image centre and
    /// the given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Places the camera at `eye` looking at `target`, keeping `up` pointing
    /// up in the image.
    pub fn look_at(mut self, eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        self.set_extrinsics(&r, &(-(r * eye)));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && [self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation.iter().chain(&self.translation).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera {self:?}")))
        }
    }

    pub fn world_to_camera(&self) -> Mat3 {
        exp_so3(&Vec3::from(self.rotation))
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn set_extrinsics(&mut self, rotation: &Mat3, translation: &Vec3) {
        self.rotation = log_so3(rotation).into();
        self.translation = (*translation).into();
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vec3 {
        -(self.world_to_camera().transpose() * self.translation_vec())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera() * p + self.translation_vec()
    }

    /// Pixel coordinates of a camera-frame point (no culling).
    pub fn project_camera_point(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// The same camera at half resolution.
    pub fn downsampled(&self) -> Camera {
        Camera {
            fx: 0.5 * self.fx,
            fy: 0.5 * self.fy,
            cx: 0.5 * self.cx,
            cy: 0.5 * self.cy,
            width: self.width / 2,
            height: self.height / 2,
            ..*self
        }
    }

    /// Applies an extrinsics increment: rotation by axis-angle `dw`
    /// (pre-multiplied) and translation offset `dt`.
    pub fn perturbed(&self, dw: &Vec3, dt: &Vec3) -> Camera {
        let mut c = *self;
        let r = exp_so3(dw) * self.world_to_camera();
        c.set_extrinsics(&r, &(self.translation_vec() + dt));
        c
    }

    /// Angle between the rotations of two cameras, radians.
    pub fn rotation_distance(&self, other: &Camera) -> f64 {
        log_so3(&(self.world_to_camera().transpose() * other.world_to_camera())).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam =
            Camera::with_fov(64, 48, 1.0).look_at(&Vec3::new(2.0, 1.0, 0.5), &Vec3::new(0.0, 0.0, 0.2), &Vec3::z());
        let pc = cam.to_camera(&Vec3::new(0.0, 0.0, 0.2));
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        let [u, v] = cam.project_camera_point(&pc);
        assert_relative_eq!(u, 32.0, epsilon = 1e-9);
        assert_relative_eq!(v, 24.0, epsilon = 1e-9);
        assert_relative_eq!(cam.center(), Vec3::new(2.0, 1.0, 0.5), epsilon = 1e-12);
        // world up projects upward (smaller v)
        let above = cam.project_camera_point(&cam.to_camera(&Vec3::new(0.0, 0.0, 0.5)));
        assert!(above[1] < v);
    }

    #[test]
    fn perturbation_is_measured() {
        let cam = Camera::with_fov(32, 32, 1.0).look_at(&Vec3::new(0.0, -2.0, 0.0), &Vec3::zeros(), &Vec3::z());
        let p = cam.perturbed(&Vec3::new(0.0, 0.05, 0.0), &Vec3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(cam.rotation_distance(&p), 0.05, epsilon = 1e-12);
        assert!(cam.validate().is_ok());
    }
}
