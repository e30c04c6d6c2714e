//! Implicit linear blend skinning and pose-conditioned appearance
//! deformation, composing forward kinematics and the canonical set into
//! posed splats with a reverse pass to every parameter group.
//!
//! Skinning weights are over links: each link's relative motion
//! `T_j(p)·T_j(p₀)⁻¹` is blended, so the canonical pose is a fixed point.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::io_util::{read_f32_vec, read_magic, read_u32, write_f32_slice};
use crate::kinematics::{
    canonical_inverses, fk_backward, forward_kinematics, relative_motions, FkResult, Pose, TransformCotangent,
};
use crate::math::{quat_to_matrix, quat_to_matrix_backward, Mat3, Polar, RigidTransform, Vec3};
use crate::mlp::{FourierEncoding, Mlp, MlpTape};
use crate::robot::RobotModel;
use crate::sh::SH_COEFFS;

/// Width of the appearance head output: `ΔR (4) | ΔS (3) | Δo (1) | SH (27)`.
pub const APPEARANCE_OUT: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShMode {
    /// The head's SH output replaces the canonical coefficients.
    Absolute,
    /// The head's SH output is added to the canonical coefficients.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoding: FourierEncoding,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub appearance: bool,
    pub sh_mode: ShMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoding: FourierEncoding::default(),
            hidden: 256,
            hidden_layers: 4,
            appearance: true,
            sh_mode: ShMode::Absolute,
        }
    }
}

/// Canonical Gaussians plus the skinning and appearance networks.
#[derive(Debug, Clone)]
pub struct SplatModel {
    pub robot: RobotModel,
    pub gaussians: GaussianSet,
    pub encoding: FourierEncoding,
    pub lbs: Mlp,
    /// `None` disables appearance deformation (the "no deform" ablation).
    pub appearance: Option<Mlp>,
    pub sh_mode: ShMode,
    canonical_inv: Vec<RigidTransform>,
}

/// Which cotangents [`pose_splat_backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub pose: bool,
    pub gaussians: bool,
    pub lbs: bool,
    pub appearance: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        pose: true,
        gaussians: true,
        lbs: true,
        appearance: true,
    };
    pub const POSE: GradRequest = GradRequest {
        pose: true,
        gaussians: false,
        lbs: false,
        appearance: false,
    };
    pub const NONE: GradRequest = GradRequest {
        pose: false,
        gaussians: false,
        lbs: false,
        appearance: false,
    };

    pub fn any(&self) -> bool {
        self.pose || self.gaussians || self.lbs || self.appearance
    }
}

/// Ready-to-rasterize Gaussians: world means, rotation matrices, log
/// scales, opacity logits and SH. Carries the tape of [`pose_splat`].
#[derive(Debug, Clone)]
pub struct PosedSplats {
    pub means: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    /// Blended rigid motion per Gaussian (polar rotation, translation).
    pub blended: Vec<RigidTransform>,
    pub(crate) tape: Option<PoseTape>,
}

/// Cotangents of the fields of [`PosedSplats`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            rotations: vec![Mat3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; SH_COEFFS * n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &SplatGrads) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *a += b;
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }
}

/// Parameter cotangents laid out like the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub pose: Vec<f64>,
    pub gaussians: GaussianSet,
    pub lbs: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(model: &SplatModel) -> Self {
        Self {
            pose: vec![0.0; model.robot.dof],
            gaussians: zeros_like(&model.gaussians),
            lbs: vec![0.0; model.lbs.params.len()],
            appearance: vec![0.0; model.appearance.as_ref().map_or(0, |m| m.params.len())],
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 8] = [
            (&mut self.pose, &other.pose),
            (&mut self.gaussians.means, &other.gaussians.means),
            (&mut self.gaussians.rotations, &other.gaussians.rotations),
            (&mut self.gaussians.log_scales, &other.gaussians.log_scales),
            (&mut self.gaussians.opacity_logits, &other.gaussians.opacity_logits),
            (&mut self.gaussians.sh, &other.gaussians.sh),
            (&mut self.lbs, &other.lbs),
            (&mut self.appearance, &other.appearance),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub(crate) fn zeros_like(set: &GaussianSet) -> GaussianSet {
    GaussianSet {
        means: vec![0.0; set.means.len()],
        rotations: vec![0.0; set.rotations.len()],
        log_scales: vec![0.0; set.log_scales.len()],
        opacity_logits: vec![0.0; set.opacity_logits.len()],
        sh: vec![0.0; set.sh.len()],
        source_link: None,
    }
}

/// A single Gaussian's appearance-head output, decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceDelta {
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub sh: [f64; SH_COEFFS],
}

impl SplatModel {
    pub fn new<R: Rng>(robot: RobotModel, gaussians: GaussianSet, config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        gaussians.check_invariants()?;
        let enc = config.encoding;
        let links = robot.links.len();
        let lbs = Mlp::new(enc.output_len(), config.hidden, config.hidden_layers, links, true, rng);
        let appearance = config.appearance.then(|| {
            Mlp::new(
                2 * enc.output_len(),
                config.hidden,
                config.hidden_layers,
                APPEARANCE_OUT,
                true,
                rng,
            )
        });
        Self::from_parts(robot, gaussians, enc, lbs, appearance, config.sh_mode)
    }

    pub fn from_parts(
        robot: RobotModel,
        gaussians: GaussianSet,
        encoding: FourierEncoding,
        lbs: Mlp,
        appearance: Option<Mlp>,
        sh_mode: ShMode,
    ) -> Result<Self> {
        let n_in = encoding.output_len();
        if lbs.input_len() != n_in || lbs.output_len() != robot.links.len() {
            return Err(Error::ShapeMismatch(format!(
                "skinning network {:?} for {} links with {n_in} features",
                lbs.sizes(),
                robot.links.len()
            )));
        }
        if let Some(a) = &appearance {
            if a.input_len() != 2 * n_in || a.output_len() != APPEARANCE_OUT {
                return Err(Error::ShapeMismatch(format!("appearance network {:?}", a.sizes())));
            }
        }
        let canonical_inv = canonical_inverses(&robot);
        Ok(Self {
            robot,
            gaussians,
            encoding,
            lbs,
            appearance,
            sh_mode,
            canonical_inv,
        })
    }

    pub fn num_links(&self) -> usize {
        self.robot.links.len()
    }

    pub fn has_appearance(&self) -> bool {
        self.appearance.is_some()
    }

    /// `T_j(p)·T_j(p₀)⁻¹` for every link.
    pub fn relative_transforms(&self, fk: &FkResult) -> Result<Vec<RigidTransform>> {
        if fk.link_transforms.len() != self.canonical_inv.len() || fk.dof() != self.robot.dof {
            return Err(Error::PoseMismatch(format!(
                "kinematics for {} links, model has {}",
                fk.link_transforms.len(),
                self.canonical_inv.len()
            )));
        }
        Ok(relative_motions(&self.robot, fk, &self.canonical_inv))
    }

    fn encode_batch(&self, points: &[Vec3]) -> Vec<f64> {
        let f = self.encoding.output_len();
        let mut out = vec![0.0; points.len() * f];
        for (p, o) in points.iter().zip(out.chunks_exact_mut(f)) {
            self.encoding.encode_into(p, o);
        }
        out
    }

    /// Skinning weights (`N × links`, row-major) for canonical points.
    pub fn lbs_weights_batch(&self, points: &[Vec3]) -> Vec<f64> {
        let feats = self.encode_batch(points);
        let mut w = self.lbs.predict(&feats, points.len());
        softmax_rows(&mut w, self.num_links());
        w
    }

    pub fn lbs_weights(&self, mu: &Vec3) -> Vec<f64> {
        self.lbs_weights_batch(std::slice::from_ref(mu))
    }

    /// Skinning weights for the model's own canonical means, for reuse
    /// while the canonical set and skinning network stay frozen.
    pub fn lbs_cache(&self) -> LbsCache {
        LbsCache {
            weights: self.lbs_weights_batch(&self.gaussians.mean_points()),
            n: self.gaussians.len(),
        }
    }

    /// Decoded appearance output for one Gaussian.
    pub fn appearance_delta(&self, mu: &Vec3, deformed: &Vec3) -> Option<AppearanceDelta> {
        let head = self.appearance.as_ref()?;
        let f = self.encoding.output_len();
        let mut x = vec![0.0; 2 * f];
        self.encoding.encode_into(mu, &mut x[..f]);
        self.encoding.encode_into(deformed, &mut x[f..]);
        let y = head.predict(&x, 1);
        let mut q = [y[0] + 1.0, y[1], y[2], y[3]];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= n);
        let mut sh = [0.0; SH_COEFFS];
        sh.copy_from_slice(&y[8..]);
        Some(AppearanceDelta {
            rotation: q,
            log_scale: Vec3::new(y[4], y[5], y[6]),
            opacity_logit: y[7],
            sh,
        })
    }

    pub fn write_segment<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DRNN_MAGIC)?;
        w.write_all(&DRNN_VERSION.to_le_bytes())?;
        let flags = u32::from(self.appearance.is_some()) | (u32::from(self.sh_mode == ShMode::Residual) << 1);
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.encoding.num_bands as u32).to_le_bytes())?;
        w.write_all(&u32::from(self.encoding.include_input).to_le_bytes())?;
        let empty = Vec::new();
        for sizes in [
            self.lbs.sizes(),
            self.appearance.as_ref().map_or(&empty[..], |a| a.sizes()),
        ] {
            w.write_all(&(sizes.len() as u32).to_le_bytes())?;
            for s in sizes {
                w.write_all(&(*s as u32).to_le_bytes())?;
            }
        }
        write_f32_slice(w, &self.lbs.params)?;
        if let Some(a) = &self.appearance {
            write_f32_slice(w, &a.params)?;
        }
        Ok(())
    }

    /// Reads a `DRNN` segment and pairs it with `robot` and `gaussians`.
    pub fn read_segment<R: Read>(
        r: &mut R,
        robot: RobotModel,
        gaussians: GaussianSet,
    ) -> std::result::Result<Self, String> {
        read_magic(r, DRNN_MAGIC)?;
        let version = read_u32(r)?;
        if version != DRNN_VERSION {
            return Err(format!("unsupported DRNN version {version}"));
        }
        let flags = read_u32(r)?;
        let encoding = FourierEncoding {
            num_bands: read_u32(r)? as usize,
            include_input: read_u32(r)? != 0,
        };
        let mut shapes = Vec::new();
        for _ in 0..2 {
            let n = read_u32(r)? as usize;
            if n > 64 {
                return Err(format!("implausible layer count {n}"));
            }
            let mut s = Vec::with_capacity(n);
            for _ in 0..n {
                s.push(read_u32(r)? as usize);
            }
            shapes.push(s);
        }
        let lbs_sizes = shapes.remove(0);
        let app_sizes = shapes.remove(0);
        let lbs = read_mlp(r, lbs_sizes)?;
        let appearance = if flags & 1 != 0 {
            Some(read_mlp(r, app_sizes)?)
        } else {
            None
        };
        let sh_mode = if flags & 2 != 0 {
            ShMode::Residual
        } else {
            ShMode::Absolute
        };
        Self::from_parts(robot, gaussians, encoding, lbs, appearance, sh_mode).map_err(|e| e.to_string())
    }

    /// Rounds every parameter to the precision checkpoints store.
    pub fn quantize_f32(&mut self) {
        self.gaussians.quantize_f32();
        for v in &mut self.lbs.params {
            *v = *v as f32 as f64;
        }
        if let Some(a) = &mut self.appearance {
            a.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

const DRNN_MAGIC: &[u8; 4] = b"DRNN";
const DRNN_VERSION: u32 = 1;

fn read_mlp<R: Read>(r: &mut R, sizes: Vec<usize>) -> std::result::Result<Mlp, String> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(format!("bad layer shapes {sizes:?}"));
    }
    let n = Mlp::zeros(sizes.clone()).params.len();
    let params = read_f32_vec(r, n)?;
    Ok(Mlp::from_params(sizes, params).expect("sized above"))
}

/// Precomputed skinning weights for a frozen model.
#[derive(Debug, Clone, PartialEq)]
pub struct LbsCache {
    weights: Vec<f64>,
    n: usize,
}

impl LbsCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub(crate) fn softmax_rows(v: &mut [f64], width: usize) {
    for row in v.chunks_exact_mut(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
}

/// Blended affine motion `(A, b)` of one point under rows of `weights`.
fn blend(weights: &[f64], rel: &[RigidTransform]) -> (Mat3, Vec3) {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for (w, t) in weights.iter().zip(rel) {
        a += t.rotation * *w;
        b += t.translation * *w;
    }
    (a, b)
}

/// Deforms canonical points with explicit weights (`N × links`):
/// `x = Σ_j w_j (T_j(p)·T_j(p₀)⁻¹) μ`. Returns the posed points and the
/// blended rigid motion (polar rotation of the blend, blended translation).
pub fn deform_with_weights(
    points: &[Vec3],
    weights: &[f64],
    rel: &[RigidTransform],
) -> (Vec<Vec3>, Vec<RigidTransform>) {
    let links = rel.len();
    points
        .iter()
        .zip(weights.chunks_exact(links))
        .map(|(mu, w)| {
            let (a, b) = blend(w, rel);
            (a * mu + b, RigidTransform::new(Polar::new(&a).rotation, b))
        })
        .unzip()
}

/// Skinned positions of the canonical means of `set` under `fk`.
pub fn deform_positions(
    model: &SplatModel,
    set: &GaussianSet,
    fk: &FkResult,
) -> Result<(Vec<Vec3>, Vec<RigidTransform>)> {
    let rel = model.relative_transforms(fk)?;
    let pts = set.mean_points();
    let w = model.lbs_weights_batch(&pts);
    Ok(deform_with_weights(&pts, &w, &rel))
}

/// Intermediates of [`pose_splat`] needed by the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct PoseTape {
    fk: FkResult,
    rel: Vec<RigidTransform>,
    weights: Vec<f64>,
    lbs_tape: Option<MlpTape>,
    blends: Vec<Mat3>,
    polars: Vec<Polar>,
    app_tape: Option<MlpTape>,
    app_raw: Vec<f64>,
    request: GradRequest,
}

/// Skinning-only forward over arbitrary canonical points, for supervising
/// the skinning network with point clouds.
pub struct SkinnedPoints {
    pub points: Vec<Vec3>,
    fk: FkResult,
    rel: Vec<RigidTransform>,
    canonical: Vec<Vec3>,
    weights: Vec<f64>,
    lbs_tape: MlpTape,
}

pub fn skin_points(model: &SplatModel, canonical: &[Vec3], pose: &Pose) -> Result<SkinnedPoints> {
    let fk = forward_kinematics(&model.robot, pose)?;
    let rel = model.relative_transforms(&fk)?;
    let feats = model.encode_batch(canonical);
    let (mut w, lbs_tape) = model.lbs.forward(&feats, canonical.len());
    softmax_rows(&mut w, model.num_links());
    let links = model.num_links();
    let points = canonical
        .iter()
        .zip(w.chunks_exact(links))
        .map(|(mu, wi)| {
            let (a, b) = blend(wi, &rel);
            a * mu + b
        })
        .collect();
    Ok(SkinnedPoints {
        points,
        fk,
        rel,
        canonical: canonical.to_vec(),
        weights: w,
        lbs_tape,
    })
}

/// Reverse pass of [`skin_points`]: accumulates skinning-network gradients
/// and returns the pose cotangent.
pub fn skin_points_backward(
    model: &SplatModel,
    skinned: &SkinnedPoints,
    grad_points: &[Vec3],
    grad_lbs: &mut [f64],
) -> Result<Vec<f64>> {
    let links = model.num_links();
    let n = skinned.canonical.len();
    let mut g_logits = vec![0.0; n * links];
    let mut g_rel = vec![TransformCotangent::default(); links];
    for i in 0..n {
        let gx = grad_points[i];
        let g_a = gx * skinned.canonical[i].transpose();
        let w = &skinned.weights[i * links..(i + 1) * links];
        let gw: Vec<f64> = skinned
            .rel
            .iter()
            .map(|t| g_a.component_mul(&t.rotation).sum() + gx.dot(&t.translation))
            .collect();
        softmax_backward(w, &gw, &mut g_logits[i * links..(i + 1) * links]);
        for j in 0..links {
            g_rel[j].rotation += g_a * w[j];
            g_rel[j].translation += gx * w[j];
        }
    }
    model.lbs.backward(&skinned.lbs_tape, &g_logits, Some(grad_lbs), false);
    pose_grad_from_rel(model, &skinned.fk, &g_rel)
}

fn softmax_backward(w: &[f64], gw: &[f64], out: &mut [f64]) {
    let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
    for ((o, wi), gi) in out.iter_mut().zip(w).zip(gw) {
        *o = wi * (gi - dot);
    }
}

fn pose_grad_from_rel(model: &SplatModel, fk: &FkResult, g_rel: &[TransformCotangent]) -> Result<Vec<f64>> {
    // M = T ∘ C with C constant: g_R_T = g_R_M·R_Cᵀ + g_t_M·t_Cᵀ, g_t_T = g_t_M
    let g_links: Vec<TransformCotangent> = g_rel
        .iter()
        .zip(&model.canonical_inv)
        .map(|(g, c)| TransformCotangent {
            rotation: g.rotation * c.rotation.transpose() + g.translation * c.translation.transpose(),
            translation: g.translation,
        })
        .collect();
    fk_backward(&model.robot, fk, &g_links)
}

/// Renderable splats for a bare Gaussian set (no skinning, no appearance).
pub fn canonical_splats(set: &GaussianSet) -> PosedSplats {
    let n = set.len();
    PosedSplats {
        means: set.mean_points(),
        rotations: (0..n).map(|i| quat_to_matrix(&set.rotation(i))).collect(),
        log_scales: (0..n).map(|i| set.log_scale(i)).collect(),
        opacity_logits: set.opacity_logits.clone(),
        sh: set.sh.clone(),
        blended: vec![RigidTransform::identity(); n],
        tape: None,
    }
}

/// Pulls splat cotangents of [`canonical_splats`] back to the set.
pub fn canonical_splats_backward(set: &GaussianSet, grads: &SplatGrads) -> GaussianSet {
    let mut out = zeros_like(set);
    for i in 0..set.len() {
        out.means[3 * i..3 * i + 3].copy_from_slice(grads.means[i].as_slice());
        let gq = quat_to_matrix_backward(&set.rotation(i), &grads.rotations[i]);
        out.rotations[4 * i..4 * i + 4].copy_from_slice(&gq);
        out.log_scales[3 * i..3 * i + 3].copy_from_slice(grads.log_scales[i].as_slice());
    }
    out.opacity_logits.copy_from_slice(&grads.opacity_logits);
    out.sh.copy_from_slice(&grads.sh);
    out
}

/// `f(p)`: forward kinematics, skinning and appearance deformation of
/// the canonical set. A tape is kept when `request` asks for gradients.
/// With `cache`, skinning weights are taken from it instead of the
/// network (only valid while neither θ_G nor θ_W is being optimised).
pub fn pose_splat(
    model: &SplatModel,
    pose: &Pose,
    request: GradRequest,
    cache: Option<&LbsCache>,
) -> Result<PosedSplats> {
    let set = &model.gaussians;
    let n = set.len();
    let links = model.num_links();
    let fk = forward_kinematics(&model.robot, pose)?;
    let rel = model.relative_transforms(&fk)?;
    let mus = set.mean_points();
    let needs_lbs_tape = request.lbs || request.gaussians;
    let (weights, lbs_tape) = match cache {
        Some(c) if !needs_lbs_tape => {
            if c.n != n {
                return Err(Error::ShapeMismatch(format!(
                    "skinning cache for {} Gaussians, model has {n}",
                    c.n
                )));
            }
            (c.weights.clone(), None)
        }
        _ => {
            let feats = model.encode_batch(&mus);
            let (mut w, tape) = model.lbs.forward(&feats, n);
            softmax_rows(&mut w, links);
            (w, needs_lbs_tape.then_some(tape))
        }
    };

    let mut means = Vec::with_capacity(n);
    let mut blends = Vec::with_capacity(n);
    let mut polars = Vec::with_capacity(n);
    let mut blended = Vec::with_capacity(n);
    for (mu, w) in mus.iter().zip(weights.chunks_exact(links)) {
        let (a, b) = blend(w, &rel);
        let p = Polar::new(&a);
        means.push(a * mu + b);
        blended.push(RigidTransform::new(p.rotation, b));
        blends.push(a);
        polars.push(p);
    }

    let mut rotations = Vec::with_capacity(n);
    let mut log_scales = Vec::with_capacity(n);
    let mut opacity_logits = set.opacity_logits.clone();
    let mut sh = set.sh.clone();
    let (app_tape, app_raw) = match &model.appearance {
        Some(head) => {
            let f = model.encoding.output_len();
            let mut x = vec![0.0; n * 2 * f];
            for (i, row) in x.chunks_exact_mut(2 * f).enumerate() {
                model.encoding.encode_into(&mus[i], &mut row[..f]);
                model.encoding.encode_into(&means[i], &mut row[f..]);
            }
            let (y, tape) = head.forward(&x, n);
            for (i, out) in y.chunks_exact(APPEARANCE_OUT).enumerate() {
                let dq = [out[0] + 1.0, out[1], out[2], out[3]];
                let r_c = quat_to_matrix(&set.rotation(i));
                rotations.push(quat_to_matrix(&dq) * polars[i].rotation * r_c);
                log_scales.push(set.log_scale(i) + Vec3::new(out[4], out[5], out[6]));
                opacity_logits[i] += out[7];
                let dst = &mut sh[SH_COEFFS * i..SH_COEFFS * (i + 1)];
                match model.sh_mode {
                    ShMode::Absolute => dst.copy_from_slice(&out[8..]),
                    ShMode::Residual => dst.iter_mut().zip(&out[8..]).for_each(|(d, s)| *d += s),
                }
            }
            (request.any().then_some(tape), y)
        }
        None => {
            for (i, p) in polars.iter().enumerate() {
                rotations.push(p.rotation * quat_to_matrix(&set.rotation(i)));
                log_scales.push(set.log_scale(i));
            }
            (None, Vec::new())
        }
    };

    let tape = request.any().then_some(PoseTape {
        fk,
        rel,
        weights,
        lbs_tape,
        blends,
        polars,
        app_tape,
        app_raw,
        request,
    });
    Ok(PosedSplats {
        means,
        rotations,
        log_scales,
        opacity_logits,
        sh,
        blended,
        tape,
    })
}

impl PosedSplats {
    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn without_tape(mut self) -> Self {
        self.tape = None;
        self
    }

    pub fn sh_coeffs(&self, i: usize) -> &[f64] {
        &self.sh[SH_COEFFS * i..SH_COEFFS * (i + 1)]
    }
}

/// Reverse pass of [`pose_splat`].
pub fn pose_splat_backward(model: &SplatModel, posed: &PosedSplats, grads: &SplatGrads) -> Result<ModelGrads> {
    let tape = posed.tape.as_ref().ok_or(Error::NoTape)?;
    let set = &model.gaussians;
    let n = set.len();
    if grads.len() != n || posed.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} splat cotangents for {n} Gaussians",
            grads.len()
        )));
    }
    let req = tape.request;
    let links = model.num_links();
    let f = model.encoding.output_len();
    let mut out = ModelGrads::zeros(model);
    let mut g_means = grads.means.clone();
    let mut g_mu = vec![Vec3::zeros(); n];
    let mut g_q = vec![Mat3::zeros(); n];
    let mut g_rc = vec![Mat3::zeros(); n];

    out.gaussians.opacity_logits.copy_from_slice(&grads.opacity_logits);
    for i in 0..n {
        out.gaussians.log_scales[3 * i..3 * i + 3].copy_from_slice(grads.log_scales[i].as_slice());
    }

    match (&model.appearance, &tape.app_tape) {
        (Some(head), Some(app_tape)) => {
            let mut g_out = vec![0.0; n * APPEARANCE_OUT];
            for i in 0..n {
                let raw = &tape.app_raw[i * APPEARANCE_OUT..(i + 1) * APPEARANCE_OUT];
                let dq = [raw[0] + 1.0, raw[1], raw[2], raw[3]];
                let d = quat_to_matrix(&dq);
                let q = tape.polars[i].rotation;
                let c = quat_to_matrix(&set.rotation(i));
                let gr = grads.rotations[i];
                // R = D·Q·C
                let g_d = gr * (q * c).transpose();
                g_q[i] = d.transpose() * gr * c.transpose();
                g_rc[i] = (d * q).transpose() * gr;
                let go = &mut g_out[i * APPEARANCE_OUT..(i + 1) * APPEARANCE_OUT];
                go[..4].copy_from_slice(&quat_to_matrix_backward(&dq, &g_d));
                go[4..7].copy_from_slice(grads.log_scales[i].as_slice());
                go[7] = grads.opacity_logits[i];
                go[8..].copy_from_slice(&grads.sh[SH_COEFFS * i..SH_COEFFS * (i + 1)]);
            }
            if model.sh_mode == ShMode::Residual {
                out.gaussians.sh.copy_from_slice(&grads.sh);
            }
            let want_input = req.pose || req.gaussians;
            let g_in = head.backward(
                app_tape,
                &g_out,
                req.appearance.then_some(&mut out.appearance[..]),
                want_input,
            );
            if let Some(g_in) = g_in {
                let mus = set.mean_points();
                for i in 0..n {
                    let row = &g_in[i * 2 * f..(i + 1) * 2 * f];
                    if req.gaussians {
                        g_mu[i] += model.encoding.backward(&mus[i], &row[..f]);
                    }
                    g_means[i] += model.encoding.backward(&posed.means[i], &row[f..]);
                }
            }
        }
        _ => {
            out.gaussians.sh.copy_from_slice(&grads.sh);
            for i in 0..n {
                let c = quat_to_matrix(&set.rotation(i));
                let q = tape.polars[i].rotation;
                g_q[i] = grads.rotations[i] * c.transpose();
                g_rc[i] = q.transpose() * grads.rotations[i];
            }
        }
    }

    for i in 0..n {
        let gq = quat_to_matrix_backward(&set.rotation(i), &g_rc[i]);
        out.gaussians.rotations[4 * i..4 * i + 4].copy_from_slice(&gq);
    }

    // x = A·μ + b, Q = polar(A), A = Σ_j w_j R_j, b = Σ_j w_j t_j
    let need_blend_grads = req.pose || req.lbs || req.gaussians;
    if need_blend_grads {
        let mut g_logits = vec![0.0; n * links];
        let mut g_rel = vec![TransformCotangent::default(); links];
        for i in 0..n {
            let mu = set.mean(i);
            let gx = g_means[i];
            let a = tape.blends[i];
            let g_a = tape.polars[i].backward(&g_q[i]) + gx * mu.transpose();
            g_mu[i] += a.transpose() * gx;
            let w = &tape.weights[i * links..(i + 1) * links];
            if req.pose {
                for j in 0..links {
                    g_rel[j].rotation += g_a * w[j];
                    g_rel[j].translation += gx * w[j];
                }
            }
            if tape.lbs_tape.is_some() {
                let gw: Vec<f64> = tape
                    .rel
                    .iter()
                    .map(|t| g_a.component_mul(&t.rotation).sum() + gx.dot(&t.translation))
                    .collect();
                softmax_backward(w, &gw, &mut g_logits[i * links..(i + 1) * links]);
            }
        }
        if let Some(lbs_tape) = &tape.lbs_tape {
            let g_feat = model
                .lbs
                .backward(lbs_tape, &g_logits, req.lbs.then_some(&mut out.lbs[..]), req.gaussians);
            if let Some(g_feat) = g_feat {
                for i in 0..n {
                    g_mu[i] += model.encoding.backward(&set.mean(i), &g_feat[i * f..(i + 1) * f]);
                }
            }
        }
        if req.pose {
            out.pose = pose_grad_from_rel(model, &tape.fk, &g_rel)?;
        }
    }
    for i in 0..n {
        out.gaussians.means[3 * i..3 * i + 3].copy_from_slice(g_mu[i].as_slice());
    }
    if !req.gaussians {
        out.gaussians = zeros_like(set);
    }
    if !req.lbs {
        out.lbs.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}
