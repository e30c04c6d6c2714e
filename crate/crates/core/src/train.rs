//! Adam, the three-stage training schedule (canonical Gaussians, skinning
//! from point clouds, joint refinement on images) and test-split
//! evaluation against retrieval baselines.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Extension};
use crate::deform::{
    canonical_splats, canonical_splats_backward, deform_with_weights, pose_splat, pose_splat_backward, skin_points,
    skin_points_backward, zeros_like, GradRequest, NetworkConfig, ShMode, SplatModel, APPEARANCE_OUT,
};
use crate::error::{Error, Result};
use crate::gaussians::{densify_and_prune, DensifyStats, GaussianSet};
use crate::image::{Image, PixelLoss};
use crate::kinematics::{forward_kinematics, Pose};
use crate::math::Vec3;
use crate::metrics::{chamfer, chamfer_with_grad, psnr, MetricsReport, PointIndex, PoseMetrics, SampleMetrics};
use crate::raster::{rasterize, rasterize_backward, render};
use crate::sh::SH_COEFFS;
use crate::synth::{surface_gaussians, Dataset, Split};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Carries moments of retained rows to their new positions (`width`
    /// values per row); rows without a source start from zero.
    fn remap(&self, width: usize, sources: &[Option<usize>]) -> AdamState {
        let mut out = AdamState::new(width * sources.len());
        out.t = self.t;
        for (k, src) in sources.iter().enumerate() {
            if let Some(i) = src {
                out.m[width * k..width * (k + 1)].copy_from_slice(&self.m[width * i..width * (i + 1)]);
                out.v[width * k..width * (k + 1)].copy_from_slice(&self.v[width * i..width * (i + 1)]);
            }
        }
        out
    }

    fn write(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.t.to_le_bytes());
        buf.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for v in self.m.iter().chain(&self.v) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(r: &mut &[u8]) -> std::result::Result<Self, String> {
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if r.len() < n {
                return Err("truncated optimiser state".into());
            }
            let (a, b) = r.split_at(n);
            *r = b;
            Ok(a)
        };
        let t = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let floats = take(16 * n)?;
        let vals: Vec<f64> = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            m: vals[..n].to_vec(),
            v: vals[n..].to_vec(),
            t,
        })
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, group: &str) -> Result<()> {
    adam_step_with(params, grads, state, lr, (BETA1, BETA2), group)
}

/// [`adam_step`] with explicit moment decay rates.
pub fn adam_step_with(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    (beta1, beta2): (f64, f64),
    group: &str,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "group `{group}`: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(group.into()));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub means: f64,
    /// Fraction of the mean rate reached at the end of a stage
    /// (exponential decay).
    pub means_final_factor: f64,
    pub rotations: f64,
    pub scales: f64,
    pub opacity: f64,
    pub sh: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            means_final_factor: 0.01,
            rotations: 1e-3,
            scales: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            mlp: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Mean screen-space gradient norm (per pixel of mean offset) above
    /// which a Gaussian splits.
    pub grad_threshold: f64,
    pub opacity_floor: f64,
    /// Splits are limited to the highest-gradient candidates beyond this size.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 300,
            stop: 1500,
            grad_threshold: 2e-6,
            opacity_floor: 0.005,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub init_points: usize,
    pub init_opacity: f64,
    /// Initial scale as a multiple of the surface sampling spacing.
    pub init_scale: f64,
    pub canonical_steps: usize,
    pub lbs_steps: usize,
    pub lbs_poses_per_step: usize,
    /// Regression steps fitting the appearance head's SH output to the
    /// canonical colours before joint training (absolute SH only).
    pub distill_steps: usize,
    pub joint_max_steps: usize,
    pub validation_interval: usize,
    pub validation_samples: usize,
    /// Joint training stops once validation PSNR has gained less than
    /// `plateau_delta` dB over `plateau_window` steps.
    pub plateau_window: usize,
    pub plateau_delta: f64,
    /// Cameras per step.
    pub batch_views: usize,
    pub loss: PixelLoss,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            init_points: 10_000,
            init_opacity: 0.1,
            init_scale: 1.0,
            canonical_steps: 2000,
            lbs_steps: 500,
            lbs_poses_per_step: 1,
            distill_steps: 300,
            joint_max_steps: 5000,
            validation_interval: 100,
            validation_samples: 12,
            plateau_window: 500,
            plateau_delta: 0.05,
            batch_views: 1,
            loss: PixelLoss::L1,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let rates = [
            lr.means,
            lr.means_final_factor,
            lr.rotations,
            lr.scales,
            lr.opacity,
            lr.sh,
            lr.mlp,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.init_points == 0
            || self.batch_views == 0
            || self.lbs_poses_per_step == 0
            || self.validation_interval == 0
            || self.densify.interval == 0
            || self.network.encoding.num_bands == 0
            || self.network.hidden == 0
        {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0 && self.init_scale > 0.0) {
            return Err(Error::Config(
                "initial opacity must lie in (0, 1) and scale be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-group rates for one Gaussian update.
#[derive(Debug, Clone, Copy)]
struct GaussianRates {
    means: f64,
    rotations: f64,
    scales: f64,
    opacity: f64,
    sh: f64,
}

/// Adam over the five Gaussian parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOptimizer {
    states: [AdamState; 5],
}

impl GaussianOptimizer {
    pub fn new(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            states: [
                AdamState::new(3 * n),
                AdamState::new(4 * n),
                AdamState::new(3 * n),
                AdamState::new(n),
                AdamState::new(SH_COEFFS * n),
            ],
        }
    }

    fn step(&mut self, set: &mut GaussianSet, grads: &GaussianSet, lr: GaussianRates) -> Result<()> {
        let [m, r, s, o, c] = &mut self.states;
        adam_step(&mut set.means, &grads.means, m, lr.means, "means")?;
        adam_step(&mut set.rotations, &grads.rotations, r, lr.rotations, "rotations")?;
        adam_step(&mut set.log_scales, &grads.log_scales, s, lr.scales, "log_scales")?;
        adam_step(
            &mut set.opacity_logits,
            &grads.opacity_logits,
            o,
            lr.opacity,
            "opacity_logits",
        )?;
        adam_step(&mut set.sh, &grads.sh, c, lr.sh, "sh")?;
        set.normalize_rotations();
        set.clamp_scales();
        Ok(())
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        let widths = [3, 4, 3, 1, SH_COEFFS];
        for (st, w) in self.states.iter_mut().zip(widths) {
            *st = st.remap(w, sources);
        }
    }
}

fn add_into(dst: &mut GaussianSet, src: &GaussianSet) {
    for (a, b) in [
        (&mut dst.means, &src.means),
        (&mut dst.rotations, &src.rotations),
        (&mut dst.log_scales, &src.log_scales),
        (&mut dst.opacity_logits, &src.opacity_logits),
        (&mut dst.sh, &src.sh),
    ] {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn scale_set(set: &mut GaussianSet, k: f64) {
    for g in [
        &mut set.means,
        &mut set.rotations,
        &mut set.log_scales,
        &mut set.opacity_logits,
        &mut set.sh,
    ] {
        g.iter_mut().for_each(|x| *x *= k);
    }
}

/// Fraction of `points` whose largest skinning weight is on `labels[i]`.
pub fn skinning_accuracy(model: &SplatModel, points: &[Vec3], labels: &[usize]) -> f64 {
    let w = model.lbs_weights_batch(points);
    let links = model.num_links();
    let hits = w
        .chunks_exact(links)
        .zip(labels)
        .filter(|(row, l)| {
            let best = (0..links).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == **l
        })
        .count();
    hits as f64 / points.len().max(1) as f64
}

/// Chamfer-supervised fitting of the skinning network to posed clouds.
pub struct LbsTrainer {
    canonical: Vec<Vec3>,
    targets: Vec<(Pose, PointIndex)>,
    pub opt: AdamState,
}

impl LbsTrainer {
    /// `canonical` are the points being skinned; `supervision` pairs poses
    /// with oracle clouds.
    pub fn new(model: &SplatModel, canonical: Vec<Vec3>, supervision: &[(Pose, Vec<Vec3>)]) -> Result<Self> {
        if supervision.is_empty() {
            return Err(Error::EmptyInput("no skinning supervision".into()));
        }
        let targets = supervision
            .iter()
            .map(|(p, c)| Ok((p.clone(), PointIndex::new(c)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            canonical,
            targets,
            opt: AdamState::new(model.lbs.params.len()),
        })
    }

    /// Chamfer loss of `target` without updating anything.
    pub fn loss(&self, model: &SplatModel, target: usize) -> Result<f64> {
        let (pose, index) = &self.targets[target];
        let skinned = skin_points(model, &self.canonical, pose)?;
        Ok(chamfer_with_grad(&skinned.points, index)?.0)
    }

    /// Mean Chamfer loss over all supervision poses.
    pub fn mean_loss(&self, model: &SplatModel) -> Result<f64> {
        let mut s = 0.0;
        for i in 0..self.targets.len() {
            s += self.loss(model, i)?;
        }
        Ok(s / self.targets.len() as f64)
    }

    pub fn step<R: Rng>(&mut self, model: &mut SplatModel, rng: &mut R, poses: usize, lr: f64) -> Result<f64> {
        let mut grad = vec![0.0; model.lbs.params.len()];
        let mut loss = 0.0;
        for _ in 0..poses {
            let (pose, index) = &self.targets[rng.random_range(0..self.targets.len())];
            let skinned = skin_points(model, &self.canonical, pose)?;
            let (l, g) = chamfer_with_grad(&skinned.points, index)?;
            skin_points_backward(model, &skinned, &g, &mut grad)?;
            loss += l;
        }
        let k = 1.0 / poses as f64;
        grad.iter_mut().for_each(|g| *g *= k);
        adam_step(&mut model.lbs.params, &grad, &mut self.opt, lr, "lbs")?;
        Ok(loss * k)
    }
}

/// Fits the skinning network so that skinned canonical means match the
/// posed clouds. Returns the loss after each step.
pub fn train_lbs(
    model: &mut SplatModel,
    supervision: &[(Pose, Vec<Vec3>)],
    steps: usize,
    poses_per_step: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut t = LbsTrainer::new(model, model.gaussians.mean_points(), supervision)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| t.step(model, &mut rng, poses_per_step, lr))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Canonical,
    Lbs,
    Distill,
    Joint,
    Done,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    /// Validation PSNR where measured, otherwise the step's training PSNR.
    pub psnr: Option<f64>,
    pub n_gaussians: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub densified: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Mean PSNR over the held-out canonical views after the first stage.
    pub canonical_psnr: Option<f64>,
    pub densify_events: usize,
    pub lbs_initial_chamfer: Option<f64>,
    pub lbs_final_chamfer: Option<f64>,
    pub distill_loss: Option<f64>,
    pub joint_steps: usize,
    pub stopped_on_plateau: bool,
    pub best_validation_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    config: TrainConfig,
    stage: Stage,
    step: usize,
    extent: f64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    validation: Vec<usize>,
    plateau: Vec<(usize, f64)>,
    stats: (Vec<f64>, Vec<u32>),
    summary: TrainSummary,
}

const STATE_TAG: [u8; 4] = *b"TRST";
const ADAM_TAG: [u8; 4] = *b"ADAM";

/// The staged training loop over a loaded dataset. Every step is
/// deterministic given the configuration seed, and the whole state can be
/// checkpointed and resumed.
pub struct Trainer<'a> {
    data: &'a Dataset,
    pub config: TrainConfig,
    pub model: SplatModel,
    stage: Stage,
    step: usize,
    extent: f64,
    rng: ChaCha8Rng,
    opt_gaussians: GaussianOptimizer,
    opt_lbs: AdamState,
    opt_app: AdamState,
    stats: DensifyStats,
    canonical_train: Vec<usize>,
    canonical_test: Vec<usize>,
    train_samples: Vec<usize>,
    validation: Vec<usize>,
    plateau: Vec<(usize, f64)>,
    lbs: Option<LbsTrainer>,
    pub summary: TrainSummary,
}

fn scene_extent(set: &GaussianSet) -> f64 {
    let pts = set.mean_points();
    let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
    pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max).max(1e-3)
}

impl<'a> Trainer<'a> {
    /// Starts from Gaussians on the robot's visual surfaces.
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let init = surface_gaussians(
            &data.robot,
            config.init_points,
            config.seed ^ 0x1a17,
            config.init_scale,
            config.init_opacity,
        )?;
        Self::with_gaussians(data, config, init)
    }

    pub fn with_gaussians(data: &'a Dataset, config: TrainConfig, init: GaussianSet) -> Result<Self> {
        config.validate()?;
        if data.manifest.canonical.is_empty() {
            return Err(Error::EmptyInput("dataset has no canonical views".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SplatModel::new(data.robot.clone(), init, &config.network, &mut rng)?;
        let n = model.gaussians.len();
        let train_samples = data.indices(Split::Train);
        if train_samples.is_empty() {
            return Err(Error::EmptyInput("dataset has no training samples".into()));
        }
        let mut pool = train_samples.clone();
        for i in (1..pool.len()).rev() {
            pool.swap(i, rng.random_range(0..=i));
        }
        pool.truncate(config.validation_samples.max(1));
        pool.sort_unstable();
        let mut t = Self {
            data,
            extent: scene_extent(&model.gaussians),
            opt_gaussians: GaussianOptimizer::new(&model.gaussians),
            opt_lbs: AdamState::new(model.lbs.params.len()),
            opt_app: AdamState::new(model.appearance.as_ref().map_or(0, |a| a.params.len())),
            stats: DensifyStats::new(n),
            canonical_train: Vec::new(),
            canonical_test: Vec::new(),
            train_samples,
            validation: pool,
            plateau: Vec::new(),
            lbs: None,
            summary: TrainSummary::default(),
            config,
            model,
            stage: Stage::Canonical,
            step: 0,
            rng,
        };
        t.split_canonical_views();
        Ok(t)
    }

    fn split_canonical_views(&mut self) {
        let n = self.data.manifest.canonical.len();
        // hold out every sixth view when there are enough of them
        let held = |v: usize| n >= 6 && v % 6 == 5;
        self.canonical_train = (0..n).filter(|&v| !held(v)).collect();
        self.canonical_test = (0..n).filter(|&v| held(v)).collect();
        if self.canonical_test.is_empty() {
            self.canonical_test = self.canonical_train.clone();
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn stage_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    fn background(&self) -> [f64; 3] {
        self.data.background()
    }

    fn mean_lr(&self, step: usize, total: usize) -> f64 {
        let lr = &self.config.lr;
        let t = step as f64 / total.max(1) as f64;
        lr.means * self.extent * lr.means_final_factor.powf(t)
    }

    fn rates(&self, step: usize, total: usize) -> GaussianRates {
        let lr = &self.config.lr;
        GaussianRates {
            means: self.mean_lr(step, total),
            rotations: lr.rotations,
            scales: lr.scales,
            opacity: lr.opacity,
            sh: lr.sh,
        }
    }

    /// PSNR of the canonical set on the held-out canonical views.
    pub fn canonical_psnr(&self) -> Result<f64> {
        let splats = canonical_splats(&self.model.gaussians);
        let mut s = 0.0;
        for &v in &self.canonical_test {
            let cam = self.data.camera(self.data.manifest.canonical[v].camera);
            s += psnr(&render(cam, &splats, self.background()), &self.data.canonical_image(v))?;
        }
        Ok(s / self.canonical_test.len() as f64)
    }

    /// Mean PSNR of the full model on the validation samples.
    pub fn validation_psnr(&self) -> Result<f64> {
        let mut s = 0.0;
        for &i in &self.validation {
            let posed = pose_splat(&self.model, &self.data.pose(i), GradRequest::NONE, None)?;
            let cam = self.data.camera(self.data.manifest.samples[i].camera);
            s += psnr(&render(cam, &posed, self.background()), &self.data.image(i))?;
        }
        Ok(s / self.validation.len() as f64)
    }

    fn lbs_supervision(&self) -> Vec<(Pose, Vec<Vec3>)> {
        self.data
            .pose_ids(Split::Train)
            .into_iter()
            .filter_map(|pid| Some((self.data.pose_of(pid)?, self.data.cloud(pid)?.to_vec())))
            .collect()
    }

    fn enter(&mut self, stage: Stage) -> Result<()> {
        self.stage = stage;
        self.step = 0;
        match stage {
            Stage::Lbs => {
                self.summary.canonical_psnr = Some(self.canonical_psnr()?);
                self.opt_lbs = AdamState::new(self.model.lbs.params.len());
                self.build_lbs()?;
                if self.config.lbs_steps == 0 {
                    return self.enter(Stage::Distill);
                }
                let lbs = self.lbs.as_ref().expect("built above");
                self.summary.lbs_initial_chamfer = Some(lbs.mean_loss(&self.model)?);
            }
            Stage::Distill => {
                if let Some(lbs) = self.lbs.take() {
                    if self.config.lbs_steps > 0 {
                        self.summary.lbs_final_chamfer = Some(lbs.mean_loss(&self.model)?);
                    }
                }
                let needed = self.model.appearance.is_some() && self.model.sh_mode == ShMode::Absolute;
                if !needed || self.config.distill_steps == 0 {
                    return self.enter(Stage::Joint);
                }
                self.opt_app = AdamState::new(self.app_len());
            }
            Stage::Joint => {
                self.opt_gaussians = GaussianOptimizer::new(&self.model.gaussians);
                self.opt_lbs = AdamState::new(self.model.lbs.params.len());
                self.opt_app = AdamState::new(self.app_len());
                self.plateau.clear();
                if self.config.joint_max_steps == 0 {
                    return self.enter(Stage::Done);
                }
            }
            Stage::Canonical | Stage::Done => {}
        }
        Ok(())
    }

    fn app_len(&self) -> usize {
        self.model.appearance.as_ref().map_or(0, |a| a.params.len())
    }

    fn build_lbs(&mut self) -> Result<()> {
        let sup = self.lbs_supervision();
        let mut lbs = LbsTrainer::new(&self.model, self.model.gaussians.mean_points(), &sup)?;
        lbs.opt = std::mem::take(&mut self.opt_lbs);
        self.lbs = Some(lbs);
        Ok(())
    }

    /// Moves past stages whose step budget is used up.
    fn settle(&mut self) -> Result<()> {
        loop {
            let next = match self.stage {
                Stage::Canonical if self.step >= self.config.canonical_steps => Stage::Lbs,
                Stage::Lbs if self.step >= self.config.lbs_steps => {
                    if let Some(l) = &mut self.lbs {
                        self.opt_lbs = std::mem::take(&mut l.opt);
                    }
                    Stage::Distill
                }
                Stage::Distill if self.step >= self.config.distill_steps => Stage::Joint,
                Stage::Joint if self.step >= self.config.joint_max_steps || self.summary.stopped_on_plateau => {
                    Stage::Done
                }
                _ => return Ok(()),
            };
            self.enter(next)?;
        }
    }

    /// Advances by one optimisation step. Returns `None` once training is
    /// complete.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        self.settle()?;
        let rec = match self.stage {
            Stage::Canonical => self.canonical_step()?,
            Stage::Lbs => {
                let lbs = self.lbs.as_mut().expect("skinning stage state");
                let loss = lbs.step(
                    &mut self.model,
                    &mut self.rng,
                    self.config.lbs_poses_per_step,
                    self.config.lr.mlp,
                )?;
                self.record(loss, None, None)
            }
            Stage::Distill => {
                let loss = self.distill_step()?;
                self.summary.distill_loss = Some(loss);
                self.record(loss, None, None)
            }
            Stage::Joint => {
                let rec = self.joint_step()?;
                self.summary.joint_steps = self.step + 1;
                rec
            }
            Stage::Done => return Ok(None),
        };
        self.step += 1;
        self.settle()?;
        Ok(Some(rec))
    }

    fn record(&self, loss: f64, psnr: Option<f64>, densified: Option<(usize, usize)>) -> StepRecord {
        StepRecord {
            stage: self.stage,
            step: self.step,
            loss,
            psnr,
            n_gaussians: self.model.gaussians.len(),
            densified,
        }
    }

    fn canonical_step(&mut self) -> Result<StepRecord> {
        let bg = self.background();
        let set = &self.model.gaussians;
        let splats = canonical_splats(set);
        let mut grads = zeros_like(set);
        let (mut loss, mut mse) = (0.0, 0.0);
        for _ in 0..self.config.batch_views {
            let v = self.canonical_train[self.rng.random_range(0..self.canonical_train.len())];
            let cam = self.data.camera(self.data.manifest.canonical[v].camera);
            let target = self.data.canonical_image(v);
            let (img, aux) = rasterize(cam, &splats, bg);
            let (l, cot) = img.loss(&target, self.config.loss)?;
            mse += img.mse(&target)?;
            let rg = rasterize_backward(&aux, &splats, &cot)?;
            self.stats.record(&rg.mean2d, &aux.visibility());
            add_into(&mut grads, &canonical_splats_backward(set, &rg.splats));
            loss += l;
        }
        let k = 1.0 / self.config.batch_views as f64;
        scale_set(&mut grads, k);
        let rates = self.rates(self.step, self.config.canonical_steps);
        self.opt_gaussians.step(&mut self.model.gaussians, &grads, rates)?;

        let d = &self.config.densify;
        let s = self.step + 1;
        let mut densified = None;
        if s.is_multiple_of(d.interval) && s >= d.start && s <= d.stop {
            densified = Some(self.densify()?);
        }
        Ok(self.record(loss * k, Some(crate::metrics::psnr_from_mse(mse * k)), densified))
    }

    /// Splits and prunes; returns `(split, pruned)`.
    fn densify(&mut self) -> Result<(usize, usize)> {
        let d = self.config.densify;
        let n = self.model.gaussians.len();
        // raise the threshold when the candidate count would exceed the cap
        let room = d.max_gaussians.saturating_sub(n);
        let mut means: Vec<f64> = (0..n)
            .map(|i| {
                let c = self.stats.counts[i];
                if c == 0 {
                    0.0
                } else {
                    self.stats.grad_accum[i] / c as f64
                }
            })
            .collect();
        means.sort_unstable_by(|a, b| b.total_cmp(a));
        let mut threshold = d.grad_threshold;
        if room == 0 {
            threshold = f64::INFINITY;
        } else if room < n && means[room] > threshold {
            threshold = means[room];
        }
        let out = densify_and_prune(
            &self.model.gaussians,
            &mut self.stats,
            threshold,
            d.opacity_floor,
            &mut self.rng,
        )?;
        let kept = out.set.len() - 2 * out.split;
        let sources: Vec<Option<usize>> = (0..out.set.len()).map(|k| (k < kept).then(|| out.origin[k])).collect();
        self.opt_gaussians.remap(&sources);
        self.model.gaussians = out.set;
        self.stats = DensifyStats::new(self.model.gaussians.len());
        self.summary.densify_events += 1;
        Ok((out.split, out.pruned))
    }

    /// Fits the appearance head to reproduce the canonical SH (and identity
    /// residuals) at training poses, so switching to absolute SH keeps
    /// the colours learnt in the first stage.
    fn distill_step(&mut self) -> Result<f64> {
        let model = &self.model;
        let set = &model.gaussians;
        let n = set.len();
        let ids = &self.train_samples;
        let pose = self.data.pose(ids[self.rng.random_range(0..ids.len())]);
        let fk = forward_kinematics(&model.robot, &pose)?;
        let rel = model.relative_transforms(&fk)?;
        let mus = set.mean_points();
        let weights = model.lbs_weights_batch(&mus);
        let (deformed, _) = deform_with_weights(&mus, &weights, &rel);
        let f = model.encoding.output_len();
        let mut x = vec![0.0; n * 2 * f];
        for (i, row) in x.chunks_exact_mut(2 * f).enumerate() {
            model.encoding.encode_into(&mus[i], &mut row[..f]);
            model.encoding.encode_into(&deformed[i], &mut row[f..]);
        }
        let head = model
            .appearance
            .as_ref()
            .expect("distillation needs the appearance head");
        let (y, tape) = head.forward(&x, n);
        let scale = 1.0 / (n * APPEARANCE_OUT) as f64;
        let mut g = vec![0.0; y.len()];
        let mut loss = 0.0;
        for (i, (out, gi)) in y
            .chunks_exact(APPEARANCE_OUT)
            .zip(g.chunks_exact_mut(APPEARANCE_OUT))
            .enumerate()
        {
            for k in 0..APPEARANCE_OUT {
                let target = if k < 8 { 0.0 } else { set.sh[SH_COEFFS * i + k - 8] };
                let d = out[k] - target;
                loss += d * d * scale;
                gi[k] = 2.0 * d * scale;
            }
        }
        let mut grad = vec![0.0; head.params.len()];
        head.backward(&tape, &g, Some(&mut grad), false);
        let head = self.model.appearance.as_mut().expect("checked above");
        adam_step(
            &mut head.params,
            &grad,
            &mut self.opt_app,
            self.config.lr.mlp,
            "appearance",
        )?;
        Ok(loss)
    }

    fn joint_step(&mut self) -> Result<StepRecord> {
        let bg = self.background();
        let has_app = self.model.appearance.is_some();
        let request = GradRequest {
            pose: false,
            gaussians: true,
            lbs: true,
            appearance: has_app,
        };
        let mut grads: Option<crate::deform::ModelGrads> = None;
        let (mut loss, mut mse) = (0.0, 0.0);
        for _ in 0..self.config.batch_views {
            let i = self.train_samples[self.rng.random_range(0..self.train_samples.len())];
            let cam = self.data.camera(self.data.manifest.samples[i].camera);
            let target = self.data.image(i);
            let posed = pose_splat(&self.model, &self.data.pose(i), request, None)?;
            let (img, aux) = rasterize(cam, &posed, bg);
            let (l, cot) = img.loss(&target, self.config.loss)?;
            mse += img.mse(&target)?;
            let rg = rasterize_backward(&aux, &posed, &cot)?;
            let mg = pose_splat_backward(&self.model, &posed, &rg.splats)?;
            match &mut grads {
                Some(acc) => acc.accumulate(&mg),
                None => grads = Some(mg),
            }
            loss += l;
        }
        let mut g = grads.expect("at least one view per step");
        let k = 1.0 / self.config.batch_views as f64;
        scale_set(&mut g.gaussians, k);
        g.lbs.iter_mut().chain(g.appearance.iter_mut()).for_each(|v| *v *= k);

        let rates = self.rates(self.step, self.config.joint_max_steps);
        let lr_mlp = self.config.lr.mlp;
        self.opt_gaussians
            .step(&mut self.model.gaussians, &g.gaussians, rates)?;
        adam_step(&mut self.model.lbs.params, &g.lbs, &mut self.opt_lbs, lr_mlp, "lbs")?;
        if let Some(head) = &mut self.model.appearance {
            adam_step(&mut head.params, &g.appearance, &mut self.opt_app, lr_mlp, "appearance")?;
        }

        let s = self.step + 1;
        let mut psnr_val = None;
        if s.is_multiple_of(self.config.validation_interval) || s == self.config.joint_max_steps {
            let p = self.validation_psnr()?;
            psnr_val = Some(p);
            self.plateau.push((s, p));
            let best = self.plateau.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            self.summary.best_validation_psnr = Some(best);
            if s >= self.config.plateau_window {
                let earlier = self
                    .plateau
                    .iter()
                    .filter(|e| e.0 + self.config.plateau_window <= s)
                    .map(|e| e.1)
                    .fold(f64::NEG_INFINITY, f64::max);
                if earlier.is_finite() && best - earlier < self.config.plateau_delta {
                    self.summary.stopped_on_plateau = true;
                }
            }
        }
        let psnr = psnr_val.unwrap_or_else(|| crate::metrics::psnr_from_mse(mse * k));
        Ok(self.record(loss * k, Some(psnr), None))
    }

    /// Runs to completion, passing every step record to `log`.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        while let Some(rec) = self.step()? {
            log(&rec);
        }
        Ok(())
    }

    /// Runs until the given stage is reached (or training ends).
    pub fn run_until(&mut self, stage: Stage, log: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        self.settle()?;
        while self.stage != stage && self.stage != Stage::Done {
            match self.step()? {
                Some(r) => log(&r),
                None => break,
            }
        }
        Ok(())
    }

    /// A copy with the appearance network removed, for the ablation that
    /// shares this run's canonical and skinning stages. The copy goes
    /// straight to joint training. Only valid between skinning and joint
    /// training.
    pub fn without_appearance(&self) -> Result<Trainer<'a>> {
        let at_fork = self.stage == Stage::Distill || (self.stage == Stage::Joint && self.step == 0);
        if !at_fork || self.lbs.is_some() {
            return Err(Error::Config(format!(
                "the ablation forks after skinning; trainer is at {:?}",
                self.stage
            )));
        }
        let mut config = self.config;
        config.network.appearance = false;
        let mut model = self.model.clone();
        model.appearance = None;
        let mut t = Trainer {
            data: self.data,
            config,
            model,
            stage: self.stage,
            step: self.step,
            extent: self.extent,
            rng: self.rng.clone(),
            opt_gaussians: self.opt_gaussians.clone(),
            opt_lbs: self.opt_lbs.clone(),
            opt_app: AdamState::new(0),
            stats: self.stats.clone(),
            canonical_train: self.canonical_train.clone(),
            canonical_test: self.canonical_test.clone(),
            train_samples: self.train_samples.clone(),
            validation: self.validation.clone(),
            plateau: self.plateau.clone(),
            lbs: None,
            summary: self.summary.clone(),
        };
        t.summary.distill_loss = None;
        t.enter(Stage::Joint)?;
        Ok(t)
    }

    /// Writes model and training state. Parameters are rounded to the
    /// stored precision first so the resumed run matches this one.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.model.quantize_f32();
        if let Some(l) = &mut self.lbs {
            l.canonical = self.model.gaussians.mean_points();
        }
        write_checkpoint(path, &self.model, &self.extensions())
    }

    fn extensions(&self) -> Vec<Extension> {
        let state = ResumeState {
            config: self.config,
            stage: self.stage,
            step: self.step,
            extent: self.extent,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            validation: self.validation.clone(),
            plateau: self.plateau.clone(),
            stats: (self.stats.grad_accum.clone(), self.stats.counts.clone()),
            summary: self.summary.clone(),
        };
        let mut adam = Vec::new();
        for s in &self.opt_gaussians.states {
            s.write(&mut adam);
        }
        let lbs_opt = self.lbs.as_ref().map_or(&self.opt_lbs, |l| &l.opt);
        lbs_opt.write(&mut adam);
        self.opt_app.write(&mut adam);
        vec![
            Extension::new(&STATE_TAG, serde_json::to_vec(&state).expect("state serialises")),
            Extension::new(&ADAM_TAG, adam),
        ]
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output.
    pub fn resume(data: &'a Dataset, path: &Path) -> Result<Self> {
        let (model, exts) = read_checkpoint(path)?;
        let find = |tag: [u8; 4]| {
            exts.iter()
                .find(|e| e.tag == tag)
                .map(|e| e.data.as_slice())
                .ok_or_else(|| Error::format(path, "checkpoint has no training state"))
        };
        let state: ResumeState =
            serde_json::from_slice(find(STATE_TAG)?).map_err(|e| Error::format(path, e.to_string()))?;
        let mut r = find(ADAM_TAG)?;
        let mut read = || AdamState::read(&mut r).map_err(|e| Error::format(path, e));
        let states = [read()?, read()?, read()?, read()?, read()?];
        let opt_lbs = read()?;
        let opt_app = read()?;

        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        let mut t = Self {
            data,
            config: state.config,
            stage: state.stage,
            step: state.step,
            extent: state.extent,
            rng,
            opt_gaussians: GaussianOptimizer { states },
            opt_lbs,
            opt_app,
            stats: DensifyStats {
                grad_accum: state.stats.0,
                counts: state.stats.1,
            },
            canonical_train: Vec::new(),
            canonical_test: Vec::new(),
            train_samples: data.indices(Split::Train),
            validation: state.validation,
            plateau: state.plateau,
            lbs: None,
            summary: state.summary,
            model,
        };
        t.split_canonical_views();
        if t.stage == Stage::Lbs {
            t.build_lbs()?;
        }
        if t.stats.counts.len() != t.model.gaussians.len() {
            return Err(Error::format(path, "training state does not match the model"));
        }
        Ok(t)
    }
}

/// Full-model metrics on a split: PSNR per sample and Chamfer per pose.
pub fn evaluate(model: &SplatModel, data: &Dataset, split: Split, method: &str) -> Result<MetricsReport> {
    let cache = model.lbs_cache();
    let mut samples = Vec::new();
    let mut poses = Vec::new();
    let indices = data.indices(split);
    for pid in data.pose_ids(split) {
        let pose = data.pose_of(pid).expect("pose id from the manifest");
        let posed = pose_splat(model, &pose, GradRequest::NONE, Some(&cache))?;
        if let Some(cloud) = data.cloud(pid) {
            poses.push(PoseMetrics {
                pose_id: pid,
                chamfer: chamfer(&posed.means, cloud)?,
            });
        }
        for &i in indices.iter().filter(|&&i| data.manifest.samples[i].pose_id == pid) {
            let cam_id = data.manifest.samples[i].camera;
            let img = render(data.camera(cam_id), &posed, data.background());
            samples.push(SampleMetrics {
                sample: i,
                pose_id: pid,
                camera: cam_id,
                psnr: psnr(&img, &data.image(i))?,
            });
        }
    }
    Ok(MetricsReport::from_parts(method, samples, poses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    /// The pool sample whose pose is closest in L2.
    NearestNeighbour,
    Random,
}

/// Retrieval baselines: answer each test sample with a training image
/// (same camera) and each test pose with a training cloud, drawn from a
/// pool of at most `pool_size` training samples.
pub fn evaluate_retrieval(
    data: &Dataset,
    split: Split,
    mode: Retrieval,
    pool_size: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = data.indices(Split::Train);
    if pool.is_empty() {
        return Err(Error::EmptyInput("no training samples to retrieve from".into()));
    }
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.random_range(0..=i));
    }
    pool.truncate(pool_size.max(1));
    pool.sort_unstable();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut pick = |query: &[f64], candidates: &[usize]| -> usize {
        match mode {
            Retrieval::NearestNeighbour => *candidates
                .iter()
                .min_by(|&&a, &&b| {
                    dist(&data.manifest.samples[a].pose, query).total_cmp(&dist(&data.manifest.samples[b].pose, query))
                })
                .expect("non-empty pool"),
            Retrieval::Random => candidates[rng.random_range(0..candidates.len())],
        }
    };
    let mut samples = Vec::new();
    let mut poses = Vec::new();
    let indices = data.indices(split);
    for pid in data.pose_ids(split) {
        let pose = data.pose_of(pid).expect("pose id from the manifest");
        if let Some(cloud) = data.cloud(pid) {
            let j = pick(&pose.0, &pool);
            let other = data.cloud(data.manifest.samples[j].pose_id).expect("training cloud");
            poses.push(PoseMetrics {
                pose_id: pid,
                chamfer: chamfer(other, cloud)?,
            });
        }
        for &i in indices.iter().filter(|&&i| data.manifest.samples[i].pose_id == pid) {
            let cam_id = data.manifest.samples[i].camera;
            let same_cam: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&j| data.manifest.samples[j].camera == cam_id)
                .collect();
            let candidates = if same_cam.is_empty() { pool.clone() } else { same_cam };
            let j = pick(&pose.0, &candidates);
            let img: Image = data.image(j);
            let target = data.image(i);
            let value = if img.same_shape(&target) {
                psnr(&img, &target)?
            } else {
                0.0
            };
            samples.push(SampleMetrics {
                sample: i,
                pose_id: pid,
                camera: cam_id,
                psnr: value,
            });
        }
    }
    let name = match mode {
        Retrieval::NearestNeighbour => "nearest_neighbour",
        Retrieval::Random => "random",
    };
    Ok(MetricsReport::from_parts(name, samples, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::parse_urdf;
    use crate::synth::{build_blob_robot, generate_dataset, sample_pose, BlobRobot, DatasetConfig};

    const ARM3: &str = include_str!("../assets/arm3.urdf");

    fn dataset(dir: &Path) -> (BlobRobot, Dataset) {
        let robot = parse_urdf(ARM3).unwrap();
        let blob = build_blob_robot(&robot, 300, 3).unwrap();
        let cfg = DatasetConfig {
            poses: 12,
            views: 6,
            width: 24,
            height: 24,
            seed: 4,
            ..Default::default()
        };
        generate_dataset(&blob, &cfg, dir).unwrap();
        (blob, Dataset::load(dir).unwrap())
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            init_points: 200,
            canonical_steps: 6,
            lbs_steps: 4,
            distill_steps: 3,
            joint_max_steps: 6,
            validation_interval: 3,
            validation_samples: 2,
            network: NetworkConfig {
                hidden: 16,
                hidden_layers: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, "p").unwrap();
        assert_eq!(st.m, vec![0.45, 0.45]);
        assert!((st.v[0] - 0.25 * 0.999).abs() < 1e-15);

        // fresh state, zero gradient: nothing moves
        let mut q = vec![1.0, -2.0];
        adam_step(&mut q, &[0.0, 0.0], &mut AdamState::new(2), 0.1, "q").unwrap();
        assert_eq!(q, vec![1.0, -2.0]);

        // first step with a constant gradient moves by lr against its sign
        let lr = 1e-3;
        let mut x = vec![0.0, 0.0];
        adam_step(&mut x, &[3.0, -0.5], &mut AdamState::new(2), lr, "x").unwrap();
        assert!((x[0] + lr).abs() < 1e-10 && (x[1] - lr).abs() < 1e-10);

        let err = adam_step(&mut x, &[f64::NAN, 0.0], &mut AdamState::new(2), lr, "x");
        assert!(matches!(err, Err(Error::NonFiniteGradient(g)) if g == "x"));
        let err = adam_step(&mut x, &[0.0], &mut AdamState::new(2), lr, "x");
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn canonical_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let (blob, data) = dataset(dir.path());
        let mut cfg = small_config();
        cfg.densify.start = 1000;
        let mut t = Trainer::with_gaussians(&data, cfg, blob.gaussians.clone()).unwrap();
        let first = t.step().unwrap().unwrap();
        assert_eq!(first.stage, Stage::Canonical);
        assert!(first.loss < 1e-6, "loss {}", first.loss);
        for _ in 1..cfg.canonical_steps {
            t.step().unwrap();
        }
        let g = &t.model.gaussians;
        let drift = [
            (&g.means, &blob.gaussians.means),
            (&g.rotations, &blob.gaussians.rotations),
            (&g.log_scales, &blob.gaussians.log_scales),
            (&g.opacity_logits, &blob.gaussians.opacity_logits),
            (&g.sh, &blob.gaussians.sh),
        ]
        .iter()
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn densify_events_are_logged_at_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut cfg = small_config();
        cfg.canonical_steps = 12;
        cfg.densify = DensifyConfig {
            interval: 4,
            start: 4,
            stop: 8,
            grad_threshold: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(&data, cfg).unwrap();
        let mut events = Vec::new();
        t.run_until(Stage::Lbs, &mut |r| {
            if r.densified.is_some() {
                events.push(r.step);
            }
        })
        .unwrap();
        assert_eq!(events, vec![3, 7]);
        assert_eq!(t.summary.densify_events, 2);
        assert!(t.model.gaussians.len() > cfg.init_points);
        assert_eq!(t.stage(), Stage::Lbs);
        assert!(t.summary.canonical_psnr.is_some());
    }

    #[test]
    fn lbs_canonical_only_supervision_is_a_fixed_point() {
        let robot = parse_urdf(ARM3).unwrap();
        let blob = build_blob_robot(&robot, 200, 1).unwrap();
        let cfg = small_config().network;
        let mut model = SplatModel::new(
            robot.clone(),
            blob.gaussians.clone(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let sup = vec![(Pose::zeros(robot.dof), blob.canonical_points())];
        let losses = train_lbs(&mut model, &sup, 3, 1, 1e-3, 0).unwrap();
        assert_eq!(losses[0], 0.0);
        assert!(losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn lbs_learns_link_assignment() {
        let robot = parse_urdf(ARM3).unwrap();
        let blob = build_blob_robot(&robot, 400, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sup: Vec<_> = (0..50)
            .map(|_| {
                let p = sample_pose(&robot, &mut rng);
                let c = blob.posed_cloud(&p).unwrap();
                (p, c)
            })
            .collect();
        let cfg = NetworkConfig {
            hidden: 32,
            hidden_layers: 3,
            appearance: false,
            ..Default::default()
        };
        let mut model = SplatModel::new(
            robot.clone(),
            blob.gaussians.clone(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let losses = train_lbs(&mut model, &sup, 600, 2, 3e-3, 5).unwrap();
        let trainer = LbsTrainer::new(&model, blob.canonical_points(), &sup).unwrap();
        let fin = trainer.mean_loss(&model).unwrap();
        let acc = skinning_accuracy(&model, &blob.canonical_points(), blob.labels());
        assert!(fin <= 1e-3, "final chamfer {fin}");
        assert!(acc >= 0.95, "accuracy {acc}");
        // moving average over 100 steps does not increase
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let windows: Vec<f64> = losses.chunks(100).map(avg).collect();
        assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let cfg = small_config();
        // save points in the canonical, skinning, distillation and joint stages
        for stop in [3, 8, 11, 14] {
            let mut a = Trainer::new(&data, cfg).unwrap();
            for _ in 0..stop {
                a.step().unwrap();
            }
            let path = dir.path().join(format!("ck{stop}.drbt"));
            a.save_checkpoint(&path).unwrap();
            let mut b = Trainer::resume(&data, &path).unwrap();
            assert_eq!(a.stage(), b.stage());
            for _ in 0..2 {
                let ra = a.step().unwrap().unwrap();
                let rb = b.step().unwrap().unwrap();
                assert_eq!(ra.loss.to_bits(), rb.loss.to_bits(), "stop {stop}");
                assert_eq!(ra, rb);
            }
        }
    }

    #[test]
    fn full_schedule_runs_and_evaluates() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let cfg = small_config();
        let mut t = Trainer::new(&data, cfg).unwrap();
        let mut stages = Vec::new();
        t.run(&mut |r| stages.push(r.stage)).unwrap();
        assert!(t.is_done());
        assert_eq!(stages.iter().filter(|s| **s == Stage::Canonical).count(), 6);
        assert_eq!(stages.iter().filter(|s| **s == Stage::Lbs).count(), 4);
        assert_eq!(stages.iter().filter(|s| **s == Stage::Distill).count(), 3);
        assert_eq!(stages.iter().filter(|s| **s == Stage::Joint).count(), 6);
        let report = evaluate(&t.model, &data, Split::Test, "ours").unwrap();
        assert_eq!(report.samples.len(), data.indices(Split::Test).len());
        assert!(report.psnr_mean > 0.0);
        let nn = evaluate_retrieval(&data, Split::Test, Retrieval::NearestNeighbour, 1000, 0).unwrap();
        let rnd = evaluate_retrieval(&data, Split::Test, Retrieval::Random, 1000, 0).unwrap();
        assert_eq!(nn.samples.len(), report.samples.len());
        assert_eq!(rnd.poses.len(), report.poses.len());
    }

    #[test]
    fn ablation_fork_skips_to_joint_without_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = dataset(dir.path());
        let mut t = Trainer::new(&data, small_config()).unwrap();
        assert!(t.without_appearance().is_err());
        t.run_until(Stage::Distill, &mut |_| {}).unwrap();
        let mut nd = t.without_appearance().unwrap();
        assert_eq!(nd.stage(), Stage::Joint);
        assert!(nd.model.appearance.is_none());
        assert_eq!(nd.model.gaussians, t.model.gaussians);
        assert_eq!(nd.model.lbs, t.model.lbs);
        let mut stages = Vec::new();
        nd.run(&mut |r| stages.push(r.stage)).unwrap();
        assert!(stages.iter().all(|s| *s == Stage::Joint));
        assert_eq!(stages.len(), 6);
        // the original is untouched and finishes its own schedule
        t.run(&mut |_| {}).unwrap();
        assert!(t.model.appearance.is_some());
    }
}
