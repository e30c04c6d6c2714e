//! Small rigid-body and rotation helpers shared by kinematics, deformation
//! and rendering, together with their reverse-mode derivatives.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// A rotation plus translation, `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self {
            rotation: rpy_to_matrix(rpy),
            translation: Vec3::from(xyz),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Max |RᵀR − I| entry.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).amax()
    }
}

/// URDF convention: `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn rpy_to_matrix(rpy: [f64; 3]) -> Mat3 {
    let [r, p, y] = rpy;
    let (sr, cr) = r.sin_cos();
    let (sp, cp) = p.sin_cos();
    let (sy, cy) = y.sin_cos();
    Mat3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`rpy_to_matrix`] for a proper rotation.
pub fn matrix_to_rpy(m: &Mat3) -> [f64; 3] {
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(*m).euler_angles();
    [roll, pitch, yaw]
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation about a unit axis by `angle` (Rodrigues, closed form).
pub fn axis_rotation(axis: &Vec3, angle: f64) -> Mat3 {
    let k = skew(axis);
    let (s, c) = angle.sin_cos();
    Mat3::identity() + k * s + k * k * (1.0 - c)
}

/// Exponential map of an axis-angle 3-vector.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    if theta < 1e-12 {
        return Mat3::identity() + skew(w);
    }
    axis_rotation(&(w / theta), theta)
}

/// Logarithm of a proper rotation as an axis-angle 3-vector.
pub fn log_so3(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Partial derivatives `∂R/∂w_i` of [`exp_so3`].
pub fn exp_so3_jacobian(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-16 {
        let kw = skew(w);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + (ke * kw + kw * ke) * 0.5
        });
    }
    let r = exp_so3(w);
    let kw = skew(w);
    let i_minus_r = Mat3::identity() - r;
    let mut out = [Mat3::zeros(); 3];
    for (i, e) in basis.iter().enumerate() {
        let v = w.cross(&(i_minus_r * e));
        out[i] = (kw * w[i] + skew(&v)) * r / theta2;
    }
    out
}

/// Contract a rotation-matrix cotangent onto the axis-angle parameters.
pub fn exp_so3_backward(w: &Vec3, grad_r: &Mat3) -> Vec3 {
    let jac = exp_so3_jacobian(w);
    Vec3::new(
        jac[0].component_mul(grad_r).sum(),
        jac[1].component_mul(grad_r).sum(),
        jac[2].component_mul(grad_r).sum(),
    )
}

/// Rotation matrix of the normalised quaternion `q = [w, x, y, z]`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
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

/// Cotangent of the raw (unnormalised) quaternion given `∂L/∂R`.
pub fn quat_to_matrix_backward(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)])
        - 4.0 * x * (g[(1, 1)] + g[(2, 2)]);
    let gy = 2.0 * (x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)])
        - 4.0 * y * (g[(0, 0)] + g[(2, 2)]);
    let gz = 2.0 * (-w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] + y * g[(1, 2)] + x * g[(2, 0)] + y * g[(2, 1)])
        - 4.0 * z * (g[(0, 0)] + g[(1, 1)]);
    // project through the normalisation q̂ = q/|q|
    let gh = [gw, gx, gy, gz];
    let qh = [w, x, y, z];
    let dot: f64 = gh.iter().zip(qh.iter()).map(|(a, b)| a * b).sum();
    [
        (gh[0] - dot * qh[0]) / n,
        (gh[1] - dot * qh[1]) / n,
        (gh[2] - dot * qh[2]) / n,
        (gh[3] - dot * qh[3]) / n,
    ]
}

/// Quaternion `[w, x, y, z]` of a proper rotation matrix.
pub fn matrix_to_quat(m: &Mat3) -> [f64; 4] {
    let q = nalgebra::UnitQuaternion::from_matrix(m);
    let q = q.quaternion();
    let out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out.map(|v| -v)
    } else {
        out
    }
}

/// Orthogonal polar factor of a 3×3 matrix together with the data needed
/// to differentiate it.
#[derive(Debug, Clone, Copy)]
pub struct Polar {
    pub rotation: Mat3,
    eigvecs: Mat3,
    eigvals: Vec3,
}

impl Polar {
    pub fn new(a: &Mat3) -> Self {
        let svd = a.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut sigma = svd.singular_values;
        let mut d = Mat3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
            sigma[2] = -sigma[2];
        }
        Self {
            rotation: u * d * vt,
            eigvecs: vt.transpose(),
            eigvals: sigma,
        }
    }

    /// `∂L/∂A` from `∂L/∂Q` for `A = Q·H`.
    pub fn backward(&self, grad_q: &Mat3) -> Mat3 {
        let v = &self.eigvecs;
        let g = v.transpose() * (self.rotation.transpose() * grad_q) * v;
        let mut b = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let denom = self.eigvals[i] + self.eigvals[j];
                let denom = if denom.abs() < 1e-12 {
                    1e-12_f64.copysign(denom)
                } else {
                    denom
                };
                b[(i, j)] = g[(i, j)] / denom;
            }
        }
        let b = v * b * v.transpose();
        self.rotation * (b - b.transpose())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
