//! The canonical Gaussian set: storage, covariance assembly, densification
//! and pruning, and the `DRGS` checkpoint segment.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io_util::{read_f32_vec, read_magic, read_u32, write_f32_slice};
use crate::math::{logit, quat_to_matrix, sigmoid, Mat3, Vec3};
use crate::robot::SurfacePoint;
use crate::sh::{dc_from_rgb, SH_COEFFS};

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const MIN_SCALE: f64 = 1e-6;
pub const MAX_SCALE: f64 = 10.0;

const SEGMENT_MAGIC: &[u8; 4] = b"DRGS";
const SEGMENT_VERSION: u32 = 1;

/// Parameters are stored flat so optimisers and checkpoints can treat each
/// group as one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    /// `N×3` meters.
    pub means: Vec<f64>,
    /// `N×4` quaternions `[w, x, y, z]`.
    pub rotations: Vec<f64>,
    /// `N×3`, scale = `exp(log_scale)`.
    pub log_scales: Vec<f64>,
    /// `N`, opacity = `sigmoid(logit)`.
    pub opacity_logits: Vec<f64>,
    /// `N×27`.
    pub sh: Vec<f64>,
    /// Ground-truth link labels, only known for synthetic robots.
    pub source_link: Option<Vec<usize>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn mean(&self, i: usize) -> Vec3 {
        Vec3::new(self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2])
    }

    pub fn set_mean(&mut self, i: usize, m: &Vec3) {
        self.means[3 * i..3 * i + 3].copy_from_slice(m.as_slice());
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        Vec3::new(
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        )
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn sh_coeffs(&self, i: usize) -> &[f64] {
        &self.sh[SH_COEFFS * i..SH_COEFFS * (i + 1)]
    }

    pub fn mean_points(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }

    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Keeps scales inside `(MIN_SCALE, MAX_SCALE)`.
    pub fn clamp_scales(&mut self) {
        let (lo, hi) = (MIN_SCALE.ln() + 1e-9, MAX_SCALE.ln() - 1e-9);
        for s in &mut self.log_scales {
            *s = s.clamp(lo, hi);
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput("Gaussian set".into()));
        }
        if self.means.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.log_scales.len() != 3 * n
            || self.sh.len() != SH_COEFFS * n
            || self.source_link.as_ref().is_some_and(|s| s.len() != n)
        {
            return Err(Error::ShapeMismatch("Gaussian parameter arrays".into()));
        }
        Ok(())
    }

    /// Rounds every parameter to the precision checkpoints store.
    pub fn quantize_f32(&mut self) {
        for group in [
            &mut self.means,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity_logits,
            &mut self.sh,
        ] {
            group.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::with_capacity(indices.len());
        for &i in indices {
            out.push_from(self, i);
        }
        out.source_link = self
            .source_link
            .as_ref()
            .map(|s| indices.iter().map(|&i| s[i]).collect());
        out
    }

    fn with_capacity(n: usize) -> Self {
        GaussianSet {
            means: Vec::with_capacity(3 * n),
            rotations: Vec::with_capacity(4 * n),
            log_scales: Vec::with_capacity(3 * n),
            opacity_logits: Vec::with_capacity(n),
            sh: Vec::with_capacity(SH_COEFFS * n),
            source_link: None,
        }
    }

    fn push_from(&mut self, other: &GaussianSet, i: usize) {
        self.means.extend_from_slice(&other.means[3 * i..3 * i + 3]);
        self.rotations.extend_from_slice(&other.rotations[4 * i..4 * i + 4]);
        self.log_scales.extend_from_slice(&other.log_scales[3 * i..3 * i + 3]);
        self.opacity_logits.push(other.opacity_logits[i]);
        self.sh.extend_from_slice(other.sh_coeffs(i));
    }

    pub fn write_segment<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SEGMENT_MAGIC)?;
        w.write_all(&SEGMENT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        write_f32_slice(w, &self.means)?;
        write_f32_slice(w, &self.rotations)?;
        write_f32_slice(w, &self.log_scales)?;
        write_f32_slice(w, &self.opacity_logits)?;
        write_f32_slice(w, &self.sh)
    }

    pub fn read_segment<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        read_magic(r, SEGMENT_MAGIC)?;
        let version = read_u32(r)?;
        if version != SEGMENT_VERSION {
            return Err(format!("unsupported DRGS version {version}"));
        }
        let n = read_u32(r)? as usize;
        if n == 0 {
            return Err("DRGS segment with zero Gaussians".into());
        }
        Ok(GaussianSet {
            means: read_f32_vec(r, 3 * n)?,
            rotations: read_f32_vec(r, 4 * n)?,
            log_scales: read_f32_vec(r, 3 * n)?,
            opacity_logits: read_f32_vec(r, n)?,
            sh: read_f32_vec(r, SH_COEFFS * n)?,
            source_link: None,
        })
    }
}

/// `Σ = R·diag(exp(2s))·Rᵀ` for a rotation matrix.
pub fn covariance_from_rotation(r: &Mat3, log_scale: &Vec3) -> Mat3 {
    let d = Vec3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    );
    let rd = Mat3::from_columns(&[r.column(0) * d.x, r.column(1) * d.y, r.column(2) * d.z]);
    let s = rd * r.transpose();
    // exact symmetry
    (s + s.transpose()) * 0.5
}

/// Covariance of a Gaussian with quaternion orientation.
pub fn covariance3d(rotation: &[f64; 4], log_scale: &Vec3) -> Mat3 {
    covariance_from_rotation(&quat_to_matrix(rotation), log_scale)
}

/// Reverse pass of [`covariance_from_rotation`]: `(∂L/∂R, ∂L/∂s)`.
pub fn covariance_backward(r: &Mat3, log_scale: &Vec3, grad_cov: &Mat3) -> (Mat3, Vec3) {
    let d = Vec3::new(
        (2.0 * log_scale.x).exp(),
        (2.0 * log_scale.y).exp(),
        (2.0 * log_scale.z).exp(),
    );
    let gs = grad_cov + grad_cov.transpose();
    let rd = Mat3::from_columns(&[r.column(0) * d.x, r.column(1) * d.y, r.column(2) * d.z]);
    let g_r = gs * rd;
    let m = r.transpose() * grad_cov * r;
    let g_s = Vec3::new(2.0 * d.x * m[(0, 0)], 2.0 * d.y * m[(1, 1)], 2.0 * d.z * m[(2, 2)]);
    (g_r, g_s)
}

/// Canonical Gaussians centred on `points` (positions already in the
/// canonical world frame), isotropic, with DC colour from each point.
pub fn init_from_points(points: &[SurfacePoint], base_scale: f64, base_opacity: f64) -> GaussianSet {
    let n = points.len();
    let mut set = GaussianSet::with_capacity(n);
    let ls = base_scale.ln();
    let ol = logit(base_opacity);
    for p in points {
        set.means.extend_from_slice(p.position.as_slice());
        set.rotations.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        set.log_scales.extend_from_slice(&[ls; 3]);
        set.opacity_logits.push(ol);
        set.sh.extend_from_slice(&dc_from_rgb(p.color));
    }
    set.source_link = Some(points.iter().map(|p| p.link).collect());
    set
}

/// Screen-space gradient statistics driving densification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub counts: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            counts: vec![0; n],
        }
    }

    /// Adds one observation of `|∂L/∂mean2d|` for each visible Gaussian.
    pub fn record(&mut self, mean2d_grads: &[[f64; 2]], visible: &[bool]) {
        for (i, (g, v)) in mean2d_grads.iter().zip(visible).enumerate() {
            if *v {
                self.grad_accum[i] += g[0].hypot(g[1]);
                self.counts[i] += 1;
            }
        }
    }

    fn mean_grad(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.counts[i] as f64
        }
    }
}

/// Outcome of [`densify_and_prune`]; `origin[k]` is the input index the
/// k-th output Gaussian came from.
#[derive(Debug, Clone)]
pub struct Densified {
    pub set: GaussianSet,
    pub origin: Vec<usize>,
    pub split: usize,
    pub pruned: usize,
}

/// Splits Gaussians whose mean screen gradient exceeds `grad_threshold`
/// into two children sampled from the parent, and removes those whose
/// opacity is below `opacity_floor`. Untouched Gaussians keep their order
/// and parameters; children are appended. `stats` is reset.
pub fn densify_and_prune<R: Rng>(
    set: &GaussianSet,
    stats: &mut DensifyStats,
    grad_threshold: f64,
    opacity_floor: f64,
    rng: &mut R,
) -> Result<Densified> {
    let n = set.len();
    if stats.counts.len() != n || stats.grad_accum.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "densify stats for {} Gaussians, set has {n}",
            stats.counts.len()
        )));
    }
    let mut keep = Vec::with_capacity(n);
    let mut to_split = Vec::new();
    let mut pruned = 0;
    for i in 0..n {
        if set.opacity(i) < opacity_floor {
            pruned += 1;
        } else if stats.mean_grad(i) > grad_threshold {
            to_split.push(i);
        } else {
            keep.push(i);
        }
    }
    if keep.is_empty() && to_split.is_empty() {
        return Err(Error::EmptyAfterPrune);
    }
    let mut out = set.select(&keep);
    let mut origin = keep.clone();
    let mut labels = set
        .source_link
        .as_ref()
        .map(|s| keep.iter().map(|&i| s[i]).collect::<Vec<_>>());
    let shrink = SPLIT_SCALE_DIVISOR.ln();
    for &i in &to_split {
        let r = quat_to_matrix(&set.rotation(i));
        let ls = set.log_scale(i);
        let mu = set.mean(i);
        for _ in 0..2 {
            let z = Vec3::new(
                rng.sample::<f64, _>(StandardNormal) * ls.x.exp(),
                rng.sample::<f64, _>(StandardNormal) * ls.y.exp(),
                rng.sample::<f64, _>(StandardNormal) * ls.z.exp(),
            );
            let m = mu + r * z;
            out.means.extend_from_slice(m.as_slice());
            out.rotations.extend_from_slice(&set.rotations[4 * i..4 * i + 4]);
            out.log_scales
                .extend(set.log_scales[3 * i..3 * i + 3].iter().map(|s| s - shrink));
            out.opacity_logits.push(set.opacity_logits[i]);
            out.sh.extend_from_slice(set.sh_coeffs(i));
            origin.push(i);
            if let (Some(l), Some(src)) = (labels.as_mut(), set.source_link.as_ref()) {
                l.push(src[i]);
            }
        }
    }
    out.source_link = labels;
    *stats = DensifyStats::new(out.len());
    Ok(Densified {
        set: out,
        origin,
        split: to_split.len(),
        pruned,
    })
}
