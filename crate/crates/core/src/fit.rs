//! Test-time optimisation through a frozen model: pose (and camera)
//! reconstruction from images, warm-started sequences, retargeting to 2D
//! point tracks, and optimisation against an external scorer.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::{pose_splat, pose_splat_backward, skin_points, skin_points_backward, GradRequest, SplatModel};
use crate::error::{Error, Result};
use crate::image::{Image, PixelLoss};
use crate::kinematics::Pose;
use crate::math::Vec3;
use crate::metrics::chamfer2d_with_grad;
use crate::raster::{project_point, project_point_backward, rasterize, rasterize_backward};
use crate::train::{adam_step_with, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub lr_pose: f64,
    /// Axis-angle step size of free cameras.
    pub lr_camera_rotation: f64,
    pub lr_camera_translation: f64,
    /// Learning rates decay exponentially to this fraction by the last
    /// iteration.
    pub lr_final_factor: f64,
    /// Adam moment decay rates. A short second-moment memory keeps steps
    /// from collapsing once gradients shrink near the optimum.
    pub betas: (f64, f64),
    pub loss: PixelLoss,
    /// Share of iterations run at half resolution before switching to full.
    pub coarse_fraction: f64,
    /// Stops once the full-resolution loss is at or below this value.
    pub tol: f64,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            lr_pose: 0.05,
            lr_camera_rotation: 0.01,
            lr_camera_translation: 0.01,
            lr_final_factor: 0.1,
            betas: (0.9, 0.9),
            loss: PixelLoss::Mse,
            coarse_fraction: 0.3,
            tol: 1e-12,
            background: [0.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_pose,
            self.lr_camera_rotation,
            self.lr_camera_translation,
            self.lr_final_factor,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("fitting learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coarse_fraction) || !(self.tol >= 0.0) {
            return Err(Error::Config(
                "coarse_fraction must lie in [0, 1] and tol be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn decay(&self, iter: usize) -> f64 {
        let t = iter as f64 / self.max_iters.max(1) as f64;
        self.lr_final_factor.powf(t)
    }

    fn coarse_iters(&self) -> usize {
        (self.coarse_fraction * self.max_iters as f64).floor() as usize
    }
}

/// One observed image and the camera it was taken with. Free cameras are
/// refined together with the pose.
#[derive(Debug, Clone)]
pub struct FitTarget {
    pub image: Image,
    pub camera: Camera,
    pub optimize_camera: bool,
}

pub struct FitProblem<'a> {
    pub model: &'a SplatModel,
    pub targets: Vec<FitTarget>,
    pub init_pose: Pose,
    pub config: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// The best iterate.
    pub pose: Pose,
    pub cameras: Vec<Camera>,
    pub loss: f64,
    /// Best loss so far after each evaluation; ends with `loss`.
    pub trace: Vec<f64>,
    /// Raw objective value at each evaluation.
    pub losses: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-target objective: loss, image cotangent and a stop request for a
/// render at the given level (0 full resolution, 1 half).
type Objective<'o> = dyn FnMut(usize, &Image, usize) -> Result<(f64, Image, bool)> + 'o;

struct CameraState {
    rot: AdamState,
    trans: AdamState,
}

fn camera_at(cam: &Camera, level: usize) -> Camera {
    if level == 0 {
        *cam
    } else {
        cam.downsampled()
    }
}

/// Shared Adam loop over pose and free cameras.
fn optimise(
    model: &SplatModel,
    init_pose: &Pose,
    cameras: &[Camera],
    free: &[bool],
    config: &FitConfig,
    coarse_iters: usize,
    objective: &mut Objective<'_>,
) -> Result<FitResult> {
    config.validate()?;
    let robot = &model.robot;
    if init_pose.len() != robot.dof {
        return Err(Error::PoseLengthMismatch {
            expected: robot.dof,
            got: init_pose.len(),
        });
    }
    let cache = model.lbs_cache();
    let mut pose = init_pose.clone();
    pose.clamp_to_limits(robot);
    let mut cams = cameras.to_vec();
    let mut pose_opt = AdamState::new(robot.dof);
    let mut cam_opt: Vec<CameraState> = cams
        .iter()
        .map(|_| CameraState {
            rot: AdamState::new(3),
            trans: AdamState::new(3),
        })
        .collect();
    let want_cam = free.iter().any(|f| *f);
    let request = GradRequest::POSE;

    let mut best = (f64::INFINITY, pose.clone(), cams.clone());
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    // evaluates at `level`; returns loss, pose grad, camera grads, stop
    let mut evaluate = |pose: &Pose, cams: &[Camera], level: usize, backward: bool| -> Result<_> {
        let posed = pose_splat(
            model,
            pose,
            if backward { request } else { GradRequest::NONE },
            Some(&cache),
        )?;
        let mut total = 0.0;
        let mut stop = false;
        let mut g_pose = vec![0.0; pose.len()];
        let mut g_cams = Vec::with_capacity(cams.len());
        for (j, cam) in cams.iter().enumerate() {
            let c = camera_at(cam, level);
            let (img, aux) = rasterize(&c, &posed, config.background);
            let (l, cot, s) = objective(j, &img, level)?;
            if !l.is_finite() {
                return Err(Error::DivergedNonFinite(l));
            }
            total += l;
            stop |= s;
            if backward {
                let rg = rasterize_backward(&aux, &posed, &cot)?;
                let mg = pose_splat_backward(model, &posed, &rg.splats)?;
                g_pose.iter_mut().zip(&mg.pose).for_each(|(a, b)| *a += b);
                g_cams.push(rg.camera);
            }
        }
        Ok((total, g_pose, g_cams, stop))
    };

    for k in 0..=config.max_iters {
        let level = usize::from(k < coarse_iters);
        let last = k == config.max_iters;
        // the start is scored at full resolution so it can win and end the
        // run immediately
        if k == 0 && level == 1 {
            let (l, _, _, stop) = evaluate(&pose, &cams, 0, false)?;
            best = (l, pose.clone(), cams.clone());
            if l <= config.tol || stop {
                trace.push(l);
                losses.push(l);
                converged = l <= config.tol;
                break;
            }
        }
        let (loss, g_pose, g_cams, stop) = evaluate(&pose, &cams, level, !last)?;
        losses.push(loss);
        if level == 0 && loss < best.0 {
            best = (loss, pose.clone(), cams.clone());
        }
        trace.push(best.0);
        iterations = k;
        if (level == 0 && loss <= config.tol) || stop {
            converged = level == 0 && loss <= config.tol;
            break;
        }
        if last {
            break;
        }
        let decay = config.decay(k);
        adam_step_with(
            &mut pose.0,
            &g_pose,
            &mut pose_opt,
            config.lr_pose * decay,
            config.betas,
            "pose",
        )?;
        pose.clamp_to_limits(robot);
        if want_cam {
            for ((cam, g), (st, f)) in cams.iter_mut().zip(&g_cams).zip(cam_opt.iter_mut().zip(free)) {
                if !f {
                    continue;
                }
                let mut r = cam.rotation;
                let mut t = cam.translation;
                adam_step_with(
                    &mut r,
                    g.rotation.as_slice(),
                    &mut st.rot,
                    config.lr_camera_rotation * decay,
                    config.betas,
                    "camera",
                )?;
                adam_step_with(
                    &mut t,
                    g.translation.as_slice(),
                    &mut st.trans,
                    config.lr_camera_translation * decay,
                    config.betas,
                    "camera",
                )?;
                cam.rotation = r;
                cam.translation = t;
            }
        }
    }
    Ok(FitResult {
        pose: best.1,
        cameras: best.2,
        loss: best.0,
        trace,
        losses,
        converged,
        iterations,
    })
}

/// Fits pose (and free cameras) so renders match the targets.
pub fn reconstruct_pose(problem: &FitProblem) -> Result<FitResult> {
    if problem.targets.is_empty() {
        return Err(Error::EmptyInput("no target images".into()));
    }
    let config = problem.config;
    let cameras: Vec<Camera> = problem.targets.iter().map(|t| t.camera).collect();
    for (t, c) in problem.targets.iter().zip(&cameras) {
        if !t.image.same_shape(&Image::zeros(c.width, c.height)) {
            return Err(Error::ShapeMismatch(format!(
                "target {}x{} for a {}x{} camera",
                t.image.width, t.image.height, c.width, c.height
            )));
        }
    }
    let free: Vec<bool> = problem.targets.iter().map(|t| t.optimize_camera).collect();
    let coarse: Vec<Image> = problem.targets.iter().map(|t| t.image.downsample2x()).collect();
    let mut coarse_iters = config.coarse_iters();
    if cameras.iter().any(|c| c.width < 4 || c.height < 4) {
        coarse_iters = 0;
    }
    let mut objective = |j: usize, img: &Image, level: usize| {
        let target = if level == 0 {
            &problem.targets[j].image
        } else {
            &coarse[j]
        };
        img.loss(target, config.loss).map(|(l, g)| (l, g, false))
    };
    optimise(
        problem.model,
        &problem.init_pose,
        &cameras,
        &free,
        &config,
        coarse_iters,
        &mut objective,
    )
}

/// Reconstructs every frame, starting each one from the previous solution
/// with a quarter of the iteration budget.
pub fn reconstruct_sequence(
    model: &SplatModel,
    frames: &[Image],
    camera: &Camera,
    optimize_camera: bool,
    init_pose: &Pose,
    config: &FitConfig,
) -> Result<Vec<FitResult>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames".into()));
    }
    let mut out: Vec<FitResult> = Vec::with_capacity(frames.len());
    for frame in frames {
        let (pose, cam, config) = match out.last() {
            None => (init_pose.clone(), *camera, *config),
            Some(prev) => {
                let mut c = *config;
                c.max_iters = (config.max_iters / 4).max(1);
                // the previous solution is already in the basin
                c.coarse_fraction = 0.0;
                (prev.pose.clone(), prev.cameras[0], c)
            }
        };
        let problem = FitProblem {
            model,
            targets: vec![FitTarget {
                image: frame.clone(),
                camera: cam,
                optimize_camera,
            }],
            init_pose: pose,
            config,
        };
        let r = reconstruct_pose(&problem)?;
        out.push(r);
    }
    Ok(out)
}

/// Projected track points: pixel positions and whether each lies in front
/// of the camera and inside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackProjection {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

fn on_screen(camera: &Camera, p: Option<[f64; 2]>) -> Option<[f64; 2]> {
    p.filter(|q| q[0] >= 0.0 && q[1] >= 0.0 && q[0] < camera.width as f64 && q[1] < camera.height as f64)
}

fn track_canonical(model: &SplatModel, indices: &[usize]) -> Result<Vec<Vec3>> {
    let n = model.gaussians.len();
    indices
        .iter()
        .map(|&i| {
            if i < n {
                Ok(model.gaussians.mean(i))
            } else {
                Err(Error::IndexOutOfRange { index: i, len: n })
            }
        })
        .collect()
}

/// Pixel positions of the posed centres of the selected Gaussians.
pub fn project_track_points(
    model: &SplatModel,
    pose: &Pose,
    camera: &Camera,
    indices: &[usize],
) -> Result<TrackProjection> {
    let canonical = track_canonical(model, indices)?;
    let skinned = skin_points(model, &canonical, pose)?;
    let mut points = Vec::with_capacity(indices.len());
    let mut visible = Vec::with_capacity(indices.len());
    for p in &skinned.points {
        let q = project_point(camera, p);
        let s = on_screen(camera, q);
        points.push(q.unwrap_or([f64::NAN; 2]));
        visible.push(s.is_some());
    }
    Ok(TrackProjection { points, visible })
}

/// Pose cotangent of `Σ_k grad_k · uv_k` for the projected track points.
pub fn project_track_points_backward(
    model: &SplatModel,
    pose: &Pose,
    camera: &Camera,
    indices: &[usize],
    grad: &[[f64; 2]],
) -> Result<Vec<f64>> {
    if grad.len() != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cotangents for {} tracks",
            grad.len(),
            indices.len()
        )));
    }
    let canonical = track_canonical(model, indices)?;
    let skinned = skin_points(model, &canonical, pose)?;
    let g: Vec<Vec3> = skinned
        .points
        .iter()
        .zip(grad)
        .map(|(p, g)| {
            if g[0] == 0.0 && g[1] == 0.0 {
                Vec3::zeros()
            } else {
                project_point_backward(camera, p, *g)
            }
        })
        .collect();
    let mut scratch = vec![0.0; model.lbs.params.len()];
    skin_points_backward(model, &skinned, &g, &mut scratch)
}

/// Tracked pixel trajectories `points[t][k]` of the Gaussians `indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub indices: Vec<usize>,
    pub points: Vec<Vec<[f64; 2]>>,
    pub visible: Vec<Vec<bool>>,
}

impl TrackSet {
    pub fn frames(&self) -> usize {
        self.points.len()
    }

    /// Tracks of a known trajectory, as a point tracker would report them.
    pub fn from_trajectory(
        model: &SplatModel,
        camera: &Camera,
        trajectory: &[Pose],
        indices: &[usize],
    ) -> Result<Self> {
        let mut points = Vec::new();
        let mut visible = Vec::new();
        for p in trajectory {
            let pr = project_track_points(model, p, camera, indices)?;
            points.push(pr.points);
            visible.push(pr.visible);
        }
        Ok(Self {
            indices: indices.to_vec(),
            points,
            visible,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.indices.is_empty() {
            return Err(Error::EmptyInput(
                "track set needs at least one frame and one point".into(),
            ));
        }
        if self.visible.len() != self.points.len() || self.points.iter().any(|f| f.len() != self.indices.len()) {
            return Err(Error::ShapeMismatch("track frames disagree with the index list".into()));
        }
        Ok(())
    }

    fn visible_points(&self, t: usize) -> Vec<[f64; 2]> {
        self.points[t]
            .iter()
            .zip(&self.visible[t])
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub lr_final_factor: f64,
    pub betas: (f64, f64),
    /// Weight of the squared pose-difference smoothness term.
    pub smoothness: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            lr: 0.05,
            lr_final_factor: 0.01,
            betas: (0.9, 0.9),
            smoothness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetResult {
    pub poses: Vec<Pose>,
    pub loss: f64,
    /// Best loss so far per iteration.
    pub trace: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Track loss of a pose sequence and its gradient.
pub fn track_loss(
    model: &SplatModel,
    tracks: &TrackSet,
    camera: &Camera,
    poses: &[Pose],
    smoothness: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    tracks.validate()?;
    if poses.len() != tracks.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} poses for {} track frames",
            poses.len(),
            tracks.frames()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(poses.len());
    for (t, p) in poses.iter().enumerate() {
        let pr = project_track_points(model, p, camera, &tracks.indices)?;
        let target = tracks.visible_points(t);
        let idx: Vec<usize> = (0..pr.points.len()).filter(|&k| pr.visible[k]).collect();
        let mut g2 = vec![[0.0; 2]; pr.points.len()];
        if !idx.is_empty() && !target.is_empty() {
            let pred: Vec<[f64; 2]> = idx.iter().map(|&k| pr.points[k]).collect();
            let (l, g) = chamfer2d_with_grad(&pred, &target)?;
            loss += l;
            for (&k, gk) in idx.iter().zip(g) {
                g2[k] = gk;
            }
        }
        grads.push(project_track_points_backward(model, p, camera, &tracks.indices, &g2)?);
    }
    for t in 0..poses.len().saturating_sub(1) {
        for d in 0..poses[t].len() {
            let diff = poses[t + 1].0[d] - poses[t].0[d];
            loss += smoothness * diff * diff;
            grads[t + 1][d] += 2.0 * smoothness * diff;
            grads[t][d] -= 2.0 * smoothness * diff;
        }
    }
    Ok((loss, grads))
}

/// Fits a pose sequence whose projected track points match `tracks`.
pub fn retarget(
    model: &SplatModel,
    tracks: &TrackSet,
    camera: &Camera,
    init: &[Pose],
    config: &RetargetConfig,
) -> Result<RetargetResult> {
    let robot = &model.robot;
    let mut poses: Vec<Pose> = init.to_vec();
    poses.iter_mut().for_each(|p| p.clamp_to_limits(robot));
    let mut opts: Vec<AdamState> = poses.iter().map(|p| AdamState::new(p.len())).collect();
    let mut best = (f64::INFINITY, poses.clone());
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    for k in 0..=config.max_iters {
        let (loss, grads) = track_loss(model, tracks, camera, &poses, config.smoothness)?;
        if !loss.is_finite() {
            return Err(Error::DivergedNonFinite(loss));
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, poses.clone());
        }
        trace.push(best.0);
        if k == config.max_iters || loss == 0.0 {
            break;
        }
        let t = k as f64 / config.max_iters.max(1) as f64;
        let lr = config.lr * config.lr_final_factor.powf(t);
        for ((p, g), st) in poses.iter_mut().zip(&grads).zip(&mut opts) {
            adam_step_with(&mut p.0, g, st, lr, config.betas, "pose")?;
            p.clamp_to_limits(robot);
        }
    }
    Ok(RetargetResult {
        poses: best.1,
        loss: best.0,
        trace,
        losses,
    })
}

/// What an external scorer returns for one rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub cotangent: Image,
    pub stop: bool,
}

/// Any objective that scores a rendered image and returns its cotangent.
pub trait Scorer {
    fn score(&mut self, image: &Image) -> Result<Score>;
}

/// Mean squared error against a fixed target image.
pub struct MseScorer {
    pub target: Image,
}

impl Scorer for MseScorer {
    fn score(&mut self, image: &Image) -> Result<Score> {
        let (loss, cotangent) = image.loss(&self.target, PixelLoss::Mse)?;
        Ok(Score {
            loss,
            cotangent,
            stop: false,
        })
    }
}

/// Optimises the pose against an external scorer at full resolution.
pub fn optimize_external(
    model: &SplatModel,
    camera: &Camera,
    init_pose: &Pose,
    scorer: &mut dyn Scorer,
    config: &FitConfig,
) -> Result<FitResult> {
    let mut objective = |_: usize, img: &Image, _: usize| {
        let s = scorer.score(img)?;
        if !s.cotangent.same_shape(img) {
            return Err(Error::BridgeProtocolError(format!(
                "cotangent {}x{} for a {}x{} image",
                s.cotangent.width, s.cotangent.height, img.width, img.height
            )));
        }
        Ok((s.loss, s.cotangent, s.stop))
    };
    optimise(model, init_pose, &[*camera], &[false], config, 0, &mut objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{NetworkConfig, ShMode};
    use crate::raster::render;
    use crate::robot::parse_urdf;
    use crate::synth::{build_blob_robot, sample_pose};
    use crate::train::train_lbs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Blob Gaussians with a skinning network fitted to the blob's links.
    fn model() -> SplatModel {
        let robot = parse_urdf(include_str!("../assets/arm3.urdf")).unwrap();
        let blob = build_blob_robot(&robot, 300, 2).unwrap();
        let cfg = NetworkConfig {
            hidden: 32,
            hidden_layers: 3,
            appearance: true,
            sh_mode: ShMode::Residual,
            ..Default::default()
        };
        let mut m = SplatModel::new(
            robot.clone(),
            blob.gaussians.clone(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sup: Vec<_> = (0..30)
            .map(|_| {
                let p = sample_pose(&robot, &mut rng);
                let c = blob.posed_cloud(&p).unwrap();
                (p, c)
            })
            .collect();
        train_lbs(&mut m, &sup, 400, 2, 3e-3, 0).unwrap();
        m
    }

    fn camera(size: usize) -> Camera {
        Camera::with_fov(size, size, 1.0).look_at(&Vec3::new(1.1, -0.9, 0.8), &Vec3::new(0.1, 0.0, 0.3), &Vec3::z())
    }

    fn target(m: &SplatModel, pose: &Pose, cam: &Camera) -> Image {
        render(cam, &pose_splat(m, pose, GradRequest::NONE, None).unwrap(), [0.0; 3])
    }

    fn problem<'a>(
        m: &'a SplatModel,
        image: Image,
        cam: Camera,
        init: Pose,
        free: bool,
        config: FitConfig,
    ) -> FitProblem<'a> {
        FitProblem {
            model: m,
            targets: vec![FitTarget {
                image,
                camera: cam,
                optimize_camera: free,
            }],
            init_pose: init,
            config,
        }
    }

    fn mean_err(a: &Pose, b: &Pose) -> f64 {
        a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn reconstruction_fixed_point_and_recovery() {
        let m = model();
        let cam = camera(48);
        let p_star = Pose(vec![0.4, -0.3, 0.5]);
        let img = target(&m, &p_star, &cam);
        let r = reconstruct_pose(&problem(
            &m,
            img.clone(),
            cam,
            p_star.clone(),
            false,
            FitConfig::default(),
        ))
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.pose, p_star);
        assert_eq!(r.trace.last(), Some(&r.loss));

        let init = Pose(vec![0.55, -0.2, 0.4]);
        let cfg = FitConfig {
            max_iters: 120,
            ..Default::default()
        };
        let r = reconstruct_pose(&problem(&m, img, cam, init, false, cfg)).unwrap();
        assert!(mean_err(&r.pose, &p_star) < 0.02, "{:?}", r.pose);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.pose.within_limits(&m.robot));
        assert_eq!(r.trace.last(), Some(&r.loss));
    }

    #[test]
    fn returned_poses_respect_limits() {
        let m = model();
        let cam = camera(32);
        // target at the yaw limit, start beyond it
        let p_star = Pose(vec![1.5, 0.0, 0.0]);
        let img = target(&m, &p_star, &cam);
        let cfg = FitConfig {
            max_iters: 20,
            ..Default::default()
        };
        let r = reconstruct_pose(&problem(&m, img, cam, Pose(vec![2.0, 0.1, 0.1]), true, cfg)).unwrap();
        assert!(r.pose.within_limits(&m.robot));
    }

    #[test]
    fn sequences() {
        let m = model();
        let cam = camera(48);
        assert!(matches!(
            reconstruct_sequence(&m, &[], &cam, false, &Pose::zeros(3), &FitConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        let p = Pose(vec![0.2, 0.1, -0.3]);
        let frames = vec![target(&m, &p, &cam); 4];
        let cfg = FitConfig {
            max_iters: 160,
            ..Default::default()
        };
        let rs = reconstruct_sequence(&m, &frames, &cam, false, &Pose(vec![0.25, 0.05, -0.25]), &cfg).unwrap();
        assert_eq!(rs.len(), 4);
        for r in &rs[1..] {
            assert!(
                mean_err(&r.pose, &rs[0].pose) <= 1e-4,
                "{:?} {:?} {:?}",
                r.pose,
                rs[0].pose,
                p
            );
            assert!(r.losses.len() <= 41);
        }
    }

    #[test]
    fn track_projection() {
        let m = model();
        let cam = camera(40);
        let n = m.gaussians.len();
        let idx: Vec<usize> = (0..n).step_by(7).collect();
        let zero = Pose::zeros(3);
        let pr = project_track_points(&m, &zero, &cam, &idx).unwrap();
        let posed = pose_splat(&m, &zero, GradRequest::NONE, None).unwrap();
        let (_, aux) = rasterize(&cam, &posed, [0.0; 3]);
        for (k, &i) in idx.iter().enumerate() {
            if let Some(q) = aux.mean2d(i) {
                assert_eq!(q, pr.points[k]);
            }
        }
        assert!(matches!(
            project_track_points(&m, &zero, &cam, &[n]),
            Err(Error::IndexOutOfRange { index, len }) if index == n && len == n
        ));

        // a camera looking away sees nothing
        let away =
            Camera::with_fov(40, 40, 1.0).look_at(&Vec3::new(2.0, 0.0, 0.3), &Vec3::new(4.0, 0.0, 0.3), &Vec3::z());
        let pr = project_track_points(&m, &zero, &away, &idx).unwrap();
        assert!(pr.visible.iter().all(|v| !v));

        // pose gradient of a weighted sum of coordinates
        let pose = Pose(vec![0.3, -0.4, 0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<[f64; 2]> = idx
            .iter()
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let f = |p: &Pose| {
            let pr = project_track_points(&m, p, &cam, &idx).unwrap();
            pr.points
                .iter()
                .zip(&w)
                .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
                .sum::<f64>()
        };
        let g = project_track_points_backward(&m, &pose, &cam, &idx, &w).unwrap();
        let h = 1e-6;
        for d in 0..3 {
            let mut a = pose.clone();
            let mut b = pose.clone();
            a.0[d] += h;
            b.0[d] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((g[d] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{d}: {} vs {fd}", g[d]);
        }
    }

    fn trajectory(frames: usize) -> Vec<Pose> {
        (0..frames)
            .map(|t| {
                let s = t as f64 / frames as f64;
                Pose(vec![0.5 * (3.0 * s).sin(), 0.3 * (2.0 * s).cos() - 0.1, 0.6 * s])
            })
            .collect()
    }

    #[test]
    fn retarget_fixed_point_and_smoothing() {
        let m = model();
        let cam = camera(64);
        let idx: Vec<usize> = (0..m.gaussians.len()).step_by(5).collect();
        let traj = trajectory(5);
        let tracks = TrackSet::from_trajectory(&m, &cam, &traj, &idx).unwrap();
        let r = retarget(&m, &tracks, &cam, &traj, &RetargetConfig::default()).unwrap();
        assert!(r.loss < 1e-20);
        assert_eq!(r.poses, traj);

        let mut noisy = tracks.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for f in &mut noisy.points {
            for p in f.iter_mut() {
                p[0] += rng.random_range(-1.5..1.5);
                p[1] += rng.random_range(-1.5..1.5);
            }
        }
        let tv = |ps: &[Pose]| ps.windows(2).map(|w| mean_err(&w[0], &w[1])).sum::<f64>();
        let cfg = RetargetConfig {
            max_iters: 150,
            ..Default::default()
        };
        let rough = retarget(&m, &noisy, &cam, &traj, &cfg).unwrap();
        let smooth = retarget(&m, &noisy, &cam, &traj, &RetargetConfig { smoothness: 0.1, ..cfg }).unwrap();
        assert!(tv(&smooth.poses) < tv(&rough.poses));
        assert!(rough.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    struct Fixed(Image, usize);

    impl Scorer for Fixed {
        fn score(&mut self, _image: &Image) -> Result<Score> {
            self.1 += 1;
            Ok(Score {
                loss: 1.0,
                cotangent: self.0.clone(),
                stop: self.1 >= 5,
            })
        }
    }

    #[test]
    fn external_objective() {
        let m = model();
        let cam = camera(32);
        let p_star = Pose(vec![0.1, 0.2, -0.2]);
        let img = target(&m, &p_star, &cam);
        let init = Pose(vec![0.2, 0.1, -0.1]);
        let cfg = FitConfig {
            max_iters: 15,
            coarse_fraction: 0.0,
            ..Default::default()
        };
        let direct = reconstruct_pose(&problem(&m, img.clone(), cam, init.clone(), false, cfg)).unwrap();
        let ext = optimize_external(&m, &cam, &init, &mut MseScorer { target: img }, &cfg).unwrap();
        assert_eq!(direct.losses, ext.losses);

        let mut zero = Fixed(Image::zeros(32, 32), 0);
        let r = optimize_external(&m, &cam, &init, &mut zero, &cfg).unwrap();
        assert_eq!(r.pose, init);
        assert_eq!(r.losses.len(), 5);

        let mut wrong = Fixed(Image::zeros(16, 32), 0);
        let e = optimize_external(&m, &cam, &init, &mut wrong, &cfg);
        assert!(matches!(e, Err(Error::BridgeProtocolError(_))));
    }
}
