//! Tile-binned Gaussian splatting with an exact reverse pass.
//!
//! Gaussians are projected with the EWA approximation, sorted once by
//! camera depth (ties by index) and binned into 16×16 pixel tiles. Each
//! pixel composites its tile's list front to back. The backward pass walks
//! the same list back to front, recovering transmittance by division from
//! the stored final value instead of keeping per-pixel lists.
//!
//! Opacity below 1/255 contributes nothing. Between 1/255 and 3/255 the
//! effective opacity follows a cubic that leaves zero and meets the raw
//! value with matching slopes, so the image is continuously differentiable
//! across footprint rims and finite differences agree with the analytic
//! gradient.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::camera::{Camera, CameraGrad};
use crate::deform::{PosedSplats, SplatGrads};
use crate::error::{Error, Result};
use crate::gaussians::{covariance_backward, covariance_from_rotation};
use crate::image::Image;
use crate::math::{exp_so3_backward, sigmoid, Mat3, Vec3};
use crate::sh::{eval_sh, eval_sh_backward, SH_COEFFS};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Pixel position of a world point, `None` behind the near plane.
pub fn project_point(camera: &Camera, p: &Vec3) -> Option<[f64; 2]> {
    let pc = camera.to_camera(p);
    (pc.z > NEAR_PLANE).then(|| camera.project_camera_point(&pc))
}

/// Cotangent of a world point given the cotangent of its pixel position.
pub fn project_point_backward(camera: &Camera, p: &Vec3, grad: [f64; 2]) -> Vec3 {
    let w = camera.world_to_camera();
    let pc = w * p + camera.translation_vec();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let g = Vec3::new(
        grad[0] * camera.fx / z,
        grad[1] * camera.fy / z,
        -(grad[0] * camera.fx * x + grad[1] * camera.fy * y) / (z * z),
    );
    w.transpose() * g
}

fn perspective_jacobian(camera: &Camera, pc: &Vec3) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    )
}

/// EWA projection of a 3D Gaussian, `None` when culled by the near plane.
pub fn project_gaussian(camera: &Camera, mean3d: &Vec3, cov3d: &Mat3) -> Option<Projected> {
    let w = camera.world_to_camera();
    let pc = w * mean3d + camera.translation_vec();
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let j = perspective_jacobian(camera, &pc);
    let m = w * cov3d * w.transpose();
    let cov2d = j * m * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Projected {
        mean2d: camera.project_camera_point(&pc),
        cov2d: (cov2d + cov2d.transpose()) * 0.5,
        depth: pc.z,
    })
}

/// Effective opacity and its derivative w.r.t. the raw value. On
/// `[τ, 3τ]` a cubic joins zero to the identity with matching slopes.
#[inline]
fn alpha_effective(raw: f64) -> (f64, f64) {
    if raw < ALPHA_MIN {
        (0.0, 0.0)
    } else if raw < 3.0 * ALPHA_MIN {
        let u = (raw - ALPHA_MIN) / (2.0 * ALPHA_MIN);
        let a = 2.0 * ALPHA_MIN * u * u * (3.5 - 2.0 * u);
        (a, u * (7.0 - 6.0 * u))
    } else if raw > ALPHA_MAX {
        (ALPHA_MAX, 0.0)
    } else {
        (raw, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Prepared {
    pc: Vec3,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    rgb: [f64; 3],
    view_dir: Vec3,
    view_len: f64,
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]`.
    bounds: [usize; 4],
}

/// State kept by [`rasterize`] for the reverse pass and for densification
/// statistics.
#[derive(Debug, Clone)]
pub struct RenderAux {
    camera: Camera,
    background: [f64; 3],
    fingerprint: u64,
    prepared: Vec<Option<Prepared>>,
    order: Vec<usize>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
    pixel_counts: Vec<u32>,
}

impl RenderAux {
    /// Per-pixel transmittance left after compositing.
    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.prepared[i].is_some()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.prepared.iter().map(Option::is_some).collect()
    }

    pub fn mean2d(&self, i: usize) -> Option<[f64; 2]> {
        self.prepared[i].map(|p| [p.mean2d.x, p.mean2d.y])
    }

    pub fn depth(&self, i: usize) -> Option<f64> {
        self.prepared[i].map(|p| p.pc.z)
    }

    /// Number of pixels each Gaussian contributed to.
    pub fn contribution_counts(&self) -> &[u32] {
        &self.pixel_counts
    }

    /// Visible Gaussians, front to back.
    pub fn sort_order(&self) -> &[usize] {
        &self.order
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }
}

/// Cotangents produced by [`rasterize_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub splats: SplatGrads,
    pub camera: CameraGrad,
    /// Screen-space mean cotangents, for densification statistics.
    pub mean2d: Vec<[f64; 2]>,
}

fn fingerprint(camera: &Camera, splats: &PosedSplats, background: &[f64; 3]) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for v in [camera.fx, camera.fy, camera.cx, camera.cy] {
        put(v);
    }
    camera
        .rotation
        .iter()
        .chain(&camera.translation)
        .chain(background)
        .for_each(|v| put(*v));
    for i in 0..splats.len() {
        splats.means[i].iter().for_each(|v| put(*v));
        splats.rotations[i].iter().for_each(|v| put(*v));
        splats.log_scales[i].iter().for_each(|v| put(*v));
        put(splats.opacity_logits[i]);
    }
    splats.sh.iter().for_each(|v| put(*v));
    let mut h2 = DefaultHasher::new();
    h.finish().hash(&mut h2);
    (camera.width, camera.height, splats.len()).hash(&mut h2);
    h2.finish()
}

fn prepare(camera: &Camera, splats: &PosedSplats, i: usize, center: &Vec3) -> Option<Prepared> {
    let mean = splats.means[i];
    let cov3d = covariance_from_rotation(&splats.rotations[i], &splats.log_scales[i]);
    let proj = project_gaussian(camera, &mean, &cov3d)?;
    let opacity = sigmoid(splats.opacity_logits[i]);
    if opacity < ALPHA_MIN {
        return None;
    }
    let conic = proj.cov2d.try_inverse()?;
    // α ≥ 1/255 requires dᵀΣ⁻¹d ≤ 2 ln(255·o)
    let q_max = 2.0 * (opacity / ALPHA_MIN).ln();
    let rx = (q_max * proj.cov2d[(0, 0)]).sqrt();
    let ry = (q_max * proj.cov2d[(1, 1)]).sqrt();
    let [mx, my] = proj.mean2d;
    let x0 = (mx - rx - 0.5).ceil().max(0.0);
    let y0 = (my - ry - 0.5).ceil().max(0.0);
    let x1 = (mx + rx - 0.5).floor().min(camera.width as f64 - 1.0);
    let y1 = (my + ry - 0.5).floor().min(camera.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let v = mean - center;
    let view_len = v.norm();
    let view_dir = if view_len > 0.0 { v / view_len } else { Vec3::z() };
    Some(Prepared {
        pc: camera.to_camera(&mean),
        mean2d: Vector2::new(mx, my),
        conic,
        opacity,
        rgb: eval_sh(splats.sh_coeffs(i), &view_dir),
        view_dir,
        view_len,
        bounds: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

struct TileOutput {
    colors: Vec<[f64; 3]>,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
    pixel_counts: Vec<u32>,
}

/// Outside its bounds a Gaussian's alpha is below the cutoff, so the
/// exponential can be skipped.
#[inline]
fn covers(p: &Prepared, x: usize, y: usize) -> bool {
    let [x0, x1, y0, y1] = p.bounds;
    x0 <= x && x <= x1 && y0 <= y && y <= y1
}

#[inline]
fn raw_alpha(p: &Prepared, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - p.mean2d.x;
    let dy = py - p.mean2d.y;
    let q = p.conic[(0, 0)] * dx * dx + 2.0 * p.conic[(0, 1)] * dx * dy + p.conic[(1, 1)] * dy * dy;
    let g = (-0.5 * q).exp();
    (p.opacity * g, g, dx, dy)
}

fn tile_bounds(camera: &Camera, tiles_x: usize, t: usize) -> (usize, usize, usize, usize) {
    let tx = t % tiles_x;
    let ty = t / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (
        x0,
        (x0 + TILE_SIZE).min(camera.width),
        y0,
        (y0 + TILE_SIZE).min(camera.height),
    )
}

/// Renders `splats` from `camera` over a constant background.
pub fn rasterize(camera: &Camera, splats: &PosedSplats, background: [f64; 3]) -> (Image, RenderAux) {
    let n = splats.len();
    let center = camera.center();
    let prepared: Vec<Option<Prepared>> = (0..n)
        .into_par_iter()
        .map(|i| prepare(camera, splats, i, &center))
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| prepared[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = prepared[a].unwrap().pc.z;
        let db = prepared[b].unwrap().pc.z;
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let [x0, x1, y0, y1] = prepared[i].unwrap().bounds;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tile_lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let outputs: Vec<TileOutput> = (0..tile_lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tile_bounds(camera, tiles_x, t);
            let list = &tile_lists[t];
            let npx = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                colors: Vec::with_capacity(npx),
                final_t: Vec::with_capacity(npx),
                n_contrib: Vec::with_capacity(npx),
                pixel_counts: vec![0; list.len()],
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = 1.0;
                    let mut c = [0.0; 3];
                    let mut last = 0;
                    for (k, &gi) in list.iter().enumerate() {
                        let p = prepared[gi as usize].as_ref().unwrap();
                        if !covers(p, x, y) {
                            continue;
                        }
                        let (raw, ..) = raw_alpha(p, px, py);
                        let (alpha, _) = alpha_effective(raw);
                        if alpha <= 0.0 {
                            continue;
                        }
                        for ch in 0..3 {
                            c[ch] += t_acc * alpha * p.rgb[ch];
                        }
                        t_acc *= 1.0 - alpha;
                        out.pixel_counts[k] += 1;
                        last = k + 1;
                        if t_acc < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        c[ch] += t_acc * background[ch];
                    }
                    out.colors.push(c);
                    out.final_t.push(t_acc);
                    out.n_contrib.push(last as u32);
                }
            }
            out
        })
        .collect();

    let mut image = Image::zeros(camera.width, camera.height);
    let mut final_t = vec![1.0; camera.pixel_count()];
    let mut n_contrib = vec![0u32; camera.pixel_count()];
    let mut pixel_counts = vec![0u32; n];
    for (t, out) in outputs.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(camera, tiles_x, t);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * camera.width + x;
                image.data[3 * p..3 * p + 3].copy_from_slice(&out.colors[k]);
                final_t[p] = out.final_t[k];
                n_contrib[p] = out.n_contrib[k];
                k += 1;
            }
        }
        for (gi, c) in tile_lists[t].iter().zip(&out.pixel_counts) {
            pixel_counts[*gi as usize] += c;
        }
    }
    let aux = RenderAux {
        camera: *camera,
        background,
        fingerprint: fingerprint(camera, splats, &background),
        prepared,
        order,
        tiles_x,
        tile_lists,
        final_t,
        n_contrib,
        pixel_counts,
    };
    (image, aux)
}

/// Image only.
pub fn render(camera: &Camera, splats: &PosedSplats, background: [f64; 3]) -> Image {
    rasterize(camera, splats, background).0
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: [f64; 2],
    /// Cotangent of the full 2×2 conic (`[a, b, c]` for `[[a, b], [b, c]]`).
    conic: [f64; 3],
    opacity: f64,
    rgb: [f64; 3],
}

/// Reverse pass of [`rasterize`]. `splats` must be the exact input of the
/// forward call that produced `aux`.
pub fn rasterize_backward(aux: &RenderAux, splats: &PosedSplats, image_cotangent: &Image) -> Result<RenderGrads> {
    let camera = &aux.camera;
    if fingerprint(camera, splats, &aux.background) != aux.fingerprint {
        return Err(Error::StaleAux);
    }
    if image_cotangent.width != camera.width || image_cotangent.height != camera.height {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {}x{} for a {}x{} render",
            image_cotangent.width, image_cotangent.height, camera.width, camera.height
        )));
    }
    let n = splats.len();
    let bg = aux.background;
    let prepared = &aux.prepared;

    let tile_grads: Vec<Vec<ScreenGrad>> = (0..aux.tile_lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &aux.tile_lists[t];
            let mut grads = vec![ScreenGrad::default(); list.len()];
            let (x0, x1, y0, y1) = tile_bounds(camera, aux.tiles_x, t);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * camera.width + x;
                    let gc = &image_cotangent.data[3 * p..3 * p + 3];
                    if gc.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = aux.final_t[p];
                    // colour of everything behind the current Gaussian,
                    // normalised by the transmittance in front of it
                    let mut behind = bg;
                    for k in (0..aux.n_contrib[p] as usize).rev() {
                        let gi = list[k] as usize;
                        let pr = prepared[gi].as_ref().unwrap();
                        if !covers(pr, x, y) {
                            continue;
                        }
                        let (raw, g, dx, dy) = raw_alpha(pr, px, py);
                        let (alpha, d_alpha) = alpha_effective(raw);
                        if alpha <= 0.0 {
                            continue;
                        }
                        let t_before = t_acc / (1.0 - alpha);
                        let sg = &mut grads[k];
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            sg.rgb[ch] += t_before * alpha * gc[ch];
                            g_alpha += gc[ch] * t_before * (pr.rgb[ch] - behind[ch]);
                            behind[ch] = alpha * pr.rgb[ch] + (1.0 - alpha) * behind[ch];
                        }
                        t_acc = t_before;
                        let g_raw = g_alpha * d_alpha;
                        if g_raw == 0.0 {
                            continue;
                        }
                        sg.opacity += g * g_raw;
                        // raw = o·exp(-q/2)
                        let g_q = -0.5 * pr.opacity * g * g_raw;
                        let (a, b, c) = (pr.conic[(0, 0)], pr.conic[(0, 1)], pr.conic[(1, 1)]);
                        sg.mean2d[0] -= 2.0 * (a * dx + b * dy) * g_q;
                        sg.mean2d[1] -= 2.0 * (b * dx + c * dy) * g_q;
                        sg.conic[0] += dx * dx * g_q;
                        sg.conic[1] += dx * dy * g_q;
                        sg.conic[2] += dy * dy * g_q;
                    }
                }
            }
            grads
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); n];
    for (list, grads) in aux.tile_lists.iter().zip(&tile_grads) {
        for (gi, sg) in list.iter().zip(grads) {
            let s = &mut screen[*gi as usize];
            for d in 0..2 {
                s.mean2d[d] += sg.mean2d[d];
            }
            for d in 0..3 {
                s.conic[d] += sg.conic[d];
                s.rgb[d] += sg.rgb[d];
            }
            s.opacity += sg.opacity;
        }
    }

    let w = camera.world_to_camera();
    let t_cam = camera.translation_vec();
    struct PerGaussian {
        mean: Vec3,
        rotation: Mat3,
        log_scale: Vec3,
        opacity_logit: f64,
        sh: Vec<f64>,
        g_w: Mat3,
        g_t: Vec3,
    }
    let per: Vec<Option<PerGaussian>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pr = prepared[i].as_ref()?;
            let sg = &screen[i];
            let mean = splats.means[i];
            let cov3d = covariance_from_rotation(&splats.rotations[i], &splats.log_scales[i]);
            let a = pr.conic;
            let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
            let g_cov2d = -(a * g_conic * a);
            let pc = pr.pc;
            let j = perspective_jacobian(camera, &pc);
            let m = w * cov3d * w.transpose();
            let g_j = (g_cov2d + g_cov2d.transpose()) * j * m;
            let g_m = j.transpose() * g_cov2d * j;
            let g_cov3d = w.transpose() * g_m * w;
            let mut g_w = (g_m + g_m.transpose()) * w * cov3d;

            let (x, y, z) = (pc.x, pc.y, pc.z);
            let (fx, fy) = (camera.fx, camera.fy);
            let [gu, gv] = sg.mean2d;
            let z2 = z * z;
            let z3 = z2 * z;
            let g_pc = Vec3::new(
                gu * fx / z - g_j[(0, 2)] * fx / z2,
                gv * fy / z - g_j[(1, 2)] * fy / z2,
                -(gu * fx * x + gv * fy * y) / z2 - g_j[(0, 0)] * fx / z2 + g_j[(0, 2)] * 2.0 * fx * x / z3
                    - g_j[(1, 1)] * fy / z2
                    + g_j[(1, 2)] * 2.0 * fy * y / z3,
            );
            let mut g_mean = w.transpose() * g_pc;
            g_w += g_pc * mean.transpose();
            let mut g_t = g_pc;

            let mut g_sh = vec![0.0; SH_COEFFS];
            let g_dir = eval_sh_backward(splats.sh_coeffs(i), &pr.view_dir, &sg.rgb, &mut g_sh);
            if pr.view_len > 0.0 {
                let d = pr.view_dir;
                let g_v = (g_dir - d * d.dot(&g_dir)) / pr.view_len;
                g_mean += g_v;
                // centre = -Wᵀt
                let g_center = -g_v;
                g_t += -(w * g_center);
                g_w += -(t_cam * g_center.transpose());
            }
            let (g_rot, g_ls) = covariance_backward(&splats.rotations[i], &splats.log_scales[i], &g_cov3d);
            let o = pr.opacity;
            Some(PerGaussian {
                mean: g_mean,
                rotation: g_rot,
                log_scale: g_ls,
                opacity_logit: sg.opacity * o * (1.0 - o),
                sh: g_sh,
                g_w,
                g_t,
            })
        })
        .collect();

    let mut out = SplatGrads::zeros(n);
    let mut g_w_total = Mat3::zeros();
    let mut g_t_total = Vec3::zeros();
    let mut mean2d = vec![[0.0; 2]; n];
    for (i, pg) in per.into_iter().enumerate() {
        let Some(pg) = pg else { continue };
        out.means[i] = pg.mean;
        out.rotations[i] = pg.rotation;
        out.log_scales[i] = pg.log_scale;
        out.opacity_logits[i] = pg.opacity_logit;
        out.sh[SH_COEFFS * i..SH_COEFFS * (i + 1)].copy_from_slice(&pg.sh);
        g_w_total += pg.g_w;
        g_t_total += pg.g_t;
        mean2d[i] = screen[i].mean2d;
    }
    Ok(RenderGrads {
        splats: out,
        camera: CameraGrad {
            rotation: exp_so3_backward(&Vec3::from(camera.rotation), &g_w_total),
            translation: g_t_total,
        },
        mean2d,
    })
}
