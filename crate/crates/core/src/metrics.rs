//! Image and geometry metrics: PSNR and symmetric squared Chamfer distance.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::Vec3;

/// `10·log10(1/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Nearest-neighbour index over a fixed 3D point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    points: Vec<Vec3>,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet);
        }
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries)
            .map_err(|e| Error::ShapeMismatch(format!("point index: {e:?}")))?;
        Ok(Self {
            tree,
            points: points.to_vec(),
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let nn = self
            .tree
            .query(&[q.x, q.y, q.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        let i = nn.item as usize;
        (i, (q - self.points[i]).norm_squared())
    }
}

/// Sum of values in ascending order, so the result does not depend on the
/// order the values were produced in.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum::<f64>() / n
}

/// `mean_a min_b ‖a−b‖² + mean_b min_a ‖a−b‖²`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let ia = PointIndex::new(a)?;
    let ib = PointIndex::new(b)?;
    Ok(chamfer_indexed(a, &ia, &ib))
}

fn chamfer_indexed(a: &[Vec3], ia: &PointIndex, ib: &PointIndex) -> f64 {
    let ab: Vec<f64> = a.iter().map(|p| ib.nearest(p).1).collect();
    let ba: Vec<f64> = ib.points.iter().map(|p| ia.nearest(p).1).collect();
    ordered_mean(ab) + ordered_mean(ba)
}

/// Chamfer distance of `pred` against a pre-indexed target, with the
/// gradient with respect to every predicted point.
pub fn chamfer_with_grad(pred: &[Vec3], target: &PointIndex) -> Result<(f64, Vec<Vec3>)> {
    if pred.is_empty() {
        return Err(Error::EmptySet);
    }
    let ip = PointIndex::new(pred)?;
    let (na, nb) = (pred.len() as f64, target.points.len() as f64);
    let mut grad = vec![Vec3::zeros(); pred.len()];
    let mut ab = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(grad.iter_mut()) {
        let (j, d) = target.nearest(p);
        ab.push(d);
        *g += (p - target.points[j]) * (2.0 / na);
    }
    let mut ba = Vec::with_capacity(target.points.len());
    for q in &target.points {
        let (i, d) = ip.nearest(q);
        ba.push(d);
        grad[i] += (pred[i] - q) * (2.0 / nb);
    }
    Ok((ordered_mean(ab) + ordered_mean(ba), grad))
}

/// Brute-force nearest neighbour in the plane.
fn nearest2d(q: &[f64; 2], set: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in set.iter().enumerate() {
        let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// 2D Chamfer distance and its gradient with respect to `pred`.
pub fn chamfer2d_with_grad(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>)> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::EmptySet);
    }
    let (na, nb) = (pred.len() as f64, target.len() as f64);
    let mut grad = vec![[0.0; 2]; pred.len()];
    let mut ab = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(grad.iter_mut()) {
        let (j, d) = nearest2d(p, target);
        ab.push(d);
        for k in 0..2 {
            g[k] += 2.0 * (p[k] - target[j][k]) / na;
        }
    }
    let mut ba = Vec::with_capacity(target.len());
    for q in target {
        let (i, d) = nearest2d(q, pred);
        ba.push(d);
        for k in 0..2 {
            grad[i][k] += 2.0 * (pred[i][k] - q[k]) / nb;
        }
    }
    Ok((ordered_mean(ab) + ordered_mean(ba), grad))
}

pub fn chamfer2d(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    chamfer2d_with_grad(a, b).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample: usize,
    pub pose_id: usize,
    pub camera: usize,
    #[serde(with = "finite_or_null")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub pose_id: usize,
    pub chamfer: f64,
}

/// Test-split evaluation of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Mean PSNR in dB. Serialised as `null` when every sample matched
    /// exactly (infinite PSNR).
    #[serde(with = "finite_or_null")]
    pub psnr_mean: f64,
    pub chamfer_mean: f64,
    pub samples: Vec<SampleMetrics>,
    pub poses: Vec<PoseMetrics>,
}

impl MetricsReport {
    pub fn from_parts(method: &str, samples: Vec<SampleMetrics>, poses: Vec<PoseMetrics>) -> Self {
        let psnr_mean = samples.iter().map(|s| s.psnr).sum::<f64>() / samples.len().max(1) as f64;
        let chamfer_mean = poses.iter().map(|p| p.chamfer).sum::<f64>() / poses.len().max(1) as f64;
        Self {
            method: method.into(),
            psnr_mean,
            chamfer_mean,
            samples,
            poses,
        }
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(a: &[Vec3], b: &[Vec3]) -> f64 {
        let one = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn psnr_definition() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, [0.51; 3]);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::zeros(2, 2)).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(300, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let two = chamfer(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(two, 2.0);
        assert!(matches!(chamfer(&[], &a), Err(Error::EmptySet)));

        let b = cloud(200, 2);
        let c = chamfer(&a, &b).unwrap();
        assert!((c - brute(&a, &b)).abs() < 1e-12);
        assert_eq!(chamfer(&b, &a).unwrap(), c);
        let mut rev = b.clone();
        rev.reverse();
        rev.swap(3, 150);
        assert_eq!(chamfer(&a, &rev).unwrap(), c);
        let v = Vec3::new(0.3, -2.0, 5.0);
        let at: Vec<Vec3> = a.iter().map(|p| p + v).collect();
        let bt: Vec<Vec3> = b.iter().map(|p| p + v).collect();
        assert!((chamfer(&at, &bt).unwrap() - c).abs() < 1e-9);
    }

    #[test]
    fn kd_index_handles_coplanar_points() {
        // many points sharing one coordinate, as on a box face
        let pts: Vec<Vec3> = (0..500)
            .map(|i| Vec3::new(0.15, (i % 25) as f64, (i / 25) as f64))
            .collect();
        let index = PointIndex::new(&pts).unwrap();
        let (i, d) = index.nearest(&Vec3::new(0.2, 3.1, 7.2));
        assert_eq!(pts[i], Vec3::new(0.15, 3.0, 7.0));
        assert!((d - (0.05f64.powi(2) + 0.01 + 0.04)).abs() < 1e-12);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let a = cloud(40, 3);
        let b = cloud(30, 4);
        let index = PointIndex::new(&b).unwrap();
        let (c, g) = chamfer_with_grad(&a, &index).unwrap();
        assert!((c - brute(&a, &b)).abs() < 1e-12);
        let h = 1e-7;
        for (i, k) in [(0, 0), (7, 1), (21, 2), (39, 0)] {
            let mut p = a.clone();
            p[i][k] += h;
            let up = brute(&p, &b);
            p[i][k] -= 2.0 * h;
            let down = brute(&p, &b);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i][k]);
        }

        let a2: Vec<[f64; 2]> = a.iter().map(|p| [p.x, p.y]).collect();
        let b2: Vec<[f64; 2]> = b.iter().map(|p| [p.x, p.y]).collect();
        let (c2, g2) = chamfer2d_with_grad(&a2, &b2).unwrap();
        let lift = |v: &[[f64; 2]]| v.iter().map(|p| Vec3::new(p[0], p[1], 0.0)).collect::<Vec<_>>();
        assert!((c2 - brute(&lift(&a2), &lift(&b2))).abs() < 1e-12);
        let mut p = a2.clone();
        p[5][1] += h;
        let up = chamfer2d(&p, &b2).unwrap();
        p[5][1] -= 2.0 * h;
        let fd = (up - chamfer2d(&p, &b2).unwrap()) / (2.0 * h);
        assert!((fd - g2[5][1]).abs() < 1e-6);
    }

    #[test]
    fn report_serialises_infinite_psnr_as_null() {
        let r = MetricsReport::from_parts(
            "exact",
            vec![SampleMetrics {
                sample: 0,
                pose_id: 0,
                camera: 0,
                psnr: f64::INFINITY,
            }],
            vec![],
        );
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"psnr_mean\":null"));
        let back: MetricsReport = serde_json::from_str(&j).unwrap();
        assert_eq!(back.psnr_mean, f64::INFINITY);
    }
}
