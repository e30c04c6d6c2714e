//! Real spherical harmonics up to degree 2: 9 basis functions per colour
//! channel, 27 coefficients per Gaussian stored basis-major
//! (`coeffs[3 * k + channel]`).

use crate::math::Vec3;

pub const SH_BASIS: usize = 9;
pub const SH_COEFFS: usize = 3 * SH_BASIS;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Basis values `Y_k(dir)`.
pub fn basis(dir: &Vec3) -> [f64; SH_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

/// `∂Y_k/∂dir` for each basis function.
fn basis_jacobian(dir: &Vec3) -> [Vec3; SH_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        Vec3::zeros(),
        Vec3::new(0.0, -SH_C1, 0.0),
        Vec3::new(0.0, 0.0, SH_C1),
        Vec3::new(-SH_C1, 0.0, 0.0),
        Vec3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0),
        Vec3::new(0.0, SH_C2[1] * z, SH_C2[1] * y),
        Vec3::new(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
        Vec3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x),
        Vec3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0),
    ]
}

/// Colour before clamping: `Σ_k Y_k(dir)·c_k + 0.5` per channel.
pub fn eval_unclamped(coeffs: &[f64], dir: &Vec3) -> [f64; 3] {
    let y = basis(dir);
    let mut out = [0.5; 3];
    for (k, yk) in y.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += yk * coeffs[3 * k + c];
        }
    }
    out
}

/// View-dependent colour, clamped to `[0, 1]` per channel.
pub fn eval_sh(coeffs: &[f64], dir: &Vec3) -> [f64; 3] {
    eval_unclamped(coeffs, dir).map(|v| v.clamp(0.0, 1.0))
}

/// Reverse pass of [`eval_sh`]: accumulates into `grad_coeffs` and returns
/// the cotangent of `dir`. Clamped channels pass no gradient.
pub fn eval_sh_backward(coeffs: &[f64], dir: &Vec3, grad_rgb: &[f64; 3], grad_coeffs: &mut [f64]) -> Vec3 {
    let raw = eval_unclamped(coeffs, dir);
    let g: [f64; 3] = std::array::from_fn(|c| if raw[c] < 0.0 || raw[c] > 1.0 { 0.0 } else { grad_rgb[c] });
    let y = basis(dir);
    let dy = basis_jacobian(dir);
    let mut g_dir = Vec3::zeros();
    for k in 0..SH_BASIS {
        let mut s = 0.0;
        for c in 0..3 {
            grad_coeffs[3 * k + c] += g[c] * y[k];
            s += g[c] * coeffs[3 * k + c];
        }
        g_dir += dy[k] * s;
    }
    g_dir
}

/// DC coefficients reproducing `rgb` from every direction.
pub fn dc_from_rgb(rgb: [f64; 3]) -> [f64; SH_COEFFS] {
    let mut out = [0.0; SH_COEFFS];
    for c in 0..3 {
        out[c] = (rgb[c] - 0.5) / SH_C0;
    }
    out
}
