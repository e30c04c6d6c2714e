//! Ground-truth oracle: a "blob robot" whose links carry rigidly attached
//! Gaussians. Rendering it with the shared rasterizer yields exact training
//! images, posed point clouds and skinning labels.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::PosedSplats;
use crate::error::{Error, Result};
use crate::gaussians::{init_from_points, GaussianSet};
use crate::image::Image;
use crate::io_util::{read_f32_vec, read_magic, read_u32, write_f32_slice};
use crate::kinematics::{canonical_inverses, forward_kinematics, relative_motions, Pose};
use crate::math::{quat_to_matrix, Vec3};
use crate::raster::render;
use crate::robot::{parse_urdf, sample_surface_points, RobotModel};

pub const BLOB_OPACITY: f64 = 0.9;
const CLOUD_MAGIC: &[u8; 4] = b"DRPC";

/// A robot whose canonical Gaussians are rigidly bound to their links.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobRobot {
    pub robot: RobotModel,
    /// Canonical set with `source_link` labels.
    pub gaussians: GaussianSet,
}

impl BlobRobot {
    pub fn labels(&self) -> &[usize] {
        self.gaussians
            .source_link
            .as_deref()
            .expect("blob robots always carry link labels")
    }

    pub fn link_colors(&self) -> Vec<[f64; 3]> {
        self.robot
            .links
            .iter()
            .map(|l| l.visuals.first().map_or([0.5; 3], |v| v.color))
            .collect()
    }

    pub fn canonical_points(&self) -> Vec<Vec3> {
        self.gaussians.mean_points()
    }

    /// Posed splats under exact one-hot skinning.
    pub fn posed(&self, pose: &Pose) -> Result<PosedSplats> {
        let fk = forward_kinematics(&self.robot, pose)?;
        let rel = relative_motions(&self.robot, &fk, &canonical_inverses(&self.robot));
        let set = &self.gaussians;
        let mut splats = crate::deform::canonical_splats(set);
        for (i, link) in self.labels().iter().enumerate() {
            let m = &rel[*link];
            splats.means[i] = m.apply(&set.mean(i));
            splats.rotations[i] = m.rotation * quat_to_matrix(&set.rotation(i));
            splats.blended[i] = *m;
        }
        Ok(splats)
    }

    /// Posed Gaussian centres.
    pub fn posed_cloud(&self, pose: &Pose) -> Result<Vec<Vec3>> {
        Ok(self.posed(pose)?.means)
    }
}

/// Gaussians on the visual surfaces in the canonical world frame, one per
/// sampled point, with isotropic scale `scale_factor` times the mean point
/// spacing.
pub fn surface_gaussians(
    robot: &RobotModel,
    points: usize,
    seed: u64,
    scale_factor: f64,
    opacity: f64,
) -> Result<GaussianSet> {
    let mut pts = sample_surface_points(robot, points, seed)?;
    let fk0 = forward_kinematics(robot, &Pose::zeros(robot.dof))?;
    for p in &mut pts {
        p.position = fk0.link_transforms[p.link].apply(&p.position);
    }
    let area: f64 = robot
        .links
        .iter()
        .flat_map(|l| &l.visuals)
        .map(|v| v.primitive.surface_area())
        .sum();
    let spacing = (area / points as f64).sqrt();
    Ok(init_from_points(&pts, scale_factor * spacing, opacity))
}

/// Binds one Gaussian to each sampled surface point, scaled to the
/// sampling spacing.
pub fn build_blob_robot(robot: &RobotModel, points: usize, seed: u64) -> Result<BlobRobot> {
    // stored in single precision so files reproduce the oracle exactly
    let mut gaussians = surface_gaussians(robot, points, seed, 1.0, BLOB_OPACITY)?;
    gaussians.quantize_f32();
    Ok(BlobRobot {
        robot: robot.without_warnings(),
        gaussians,
    })
}

/// Image and posed cloud of the blob robot.
pub fn render_ground_truth(
    blob: &BlobRobot,
    pose: &Pose,
    camera: &Camera,
    background: [f64; 3],
) -> Result<(Image, Vec<Vec3>)> {
    let splats = blob.posed(pose)?;
    let img = render(camera, &splats, background);
    Ok((img, splats.means))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub poses: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub background: [f64; 3],
    pub test_fraction: f64,
    /// Camera distance as a multiple of the robot's bounding radius.
    pub distance_factor: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            poses: 200,
            views: 12,
            width: 128,
            height: 128,
            seed: 0,
            fov: 1.0,
            background: [0.0; 3],
            test_fraction: 0.1,
            distance_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Canonical-pose captures used by the first training stage.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub pose_id: usize,
    pub pose: Vec<f64>,
    pub camera: usize,
    pub image: String,
    pub raw: String,
    pub cloud: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub robot: String,
    /// Ground-truth canonical Gaussians (`DRGS` segment).
    pub blob: String,
    pub canonical_cloud: String,
    pub canonical_labels: Vec<usize>,
    pub background: [f64; 3],
    pub seed: u64,
    pub cameras: Vec<Camera>,
    pub samples: Vec<Sample>,
    pub canonical: Vec<Sample>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    /// Checks that every referenced file exists under `root` and that poses
    /// respect the robot's limits.
    pub fn validate(&self, root: &Path, robot: &RobotModel) -> Result<()> {
        let mut files = vec![&self.robot, &self.blob, &self.canonical_cloud];
        for s in self.samples.iter().chain(&self.canonical) {
            files.extend([&s.image, &s.raw, &s.cloud]);
            if !Pose(s.pose.clone()).within_limits(robot) {
                return Err(Error::format(root, format!("pose {} outside joint limits", s.pose_id)));
            }
            if s.camera >= self.cameras.len() {
                return Err(Error::format(root, format!("sample camera {} out of range", s.camera)));
            }
        }
        for f in files {
            let p = root.join(f);
            if !p.is_file() {
                return Err(Error::format(&p, "referenced file is missing"));
            }
        }
        Ok(())
    }
}

/// Writes `points` as `DRPC`, u32 count, then `count × 3` f32.
pub fn write_cloud(path: &Path, points: &[Vec3]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let flat: Vec<f64> = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    w.write_all(CLOUD_MAGIC)
        .and_then(|_| w.write_all(&(points.len() as u32).to_le_bytes()))
        .and_then(|_| write_f32_slice(&mut w, &flat))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<Vec<Vec3>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let parse = |r: &mut BufReader<File>| -> std::result::Result<Vec<Vec3>, String> {
        read_magic(r, CLOUD_MAGIC)?;
        let n = read_u32(r)? as usize;
        let v = read_f32_vec(r, 3 * n)?;
        Ok(v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    };
    parse(&mut r).map_err(|e| Error::format(path, e))
}

/// Uniform pose inside the joint ranges.
pub fn sample_pose<R: Rng>(robot: &RobotModel, rng: &mut R) -> Pose {
    Pose(
        robot
            .pose_ranges()
            .into_iter()
            .map(|(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect(),
    )
}

/// Centroid and radius of a sphere containing the robot over many poses.
pub fn robot_extent(blob: &BlobRobot, seed: u64) -> Result<(Vec3, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e47e);
    let mut poses = vec![Pose::zeros(blob.robot.dof)];
    poses.extend((0..64).map(|_| sample_pose(&blob.robot, &mut rng)));
    let clouds: Vec<Vec<Vec3>> = poses.iter().map(|p| blob.posed_cloud(p)).collect::<Result<_>>()?;
    let count = clouds.iter().map(Vec::len).sum::<usize>() as f64;
    let centroid = clouds.iter().flatten().fold(Vec3::zeros(), |a, p| a + p) / count;
    let radius = clouds
        .iter()
        .flatten()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max);
    Ok((centroid, radius))
}

/// Look-at cameras on a sphere around the robot: azimuths evenly spaced,
/// elevations cycling through three bands.
pub fn camera_rig(centroid: &Vec3, radius: f64, config: &DatasetConfig) -> Vec<Camera> {
    const ELEVATIONS: [f64; 3] = [10.0, 30.0, 50.0];
    let dist = config.distance_factor * radius;
    (0..config.views)
        .map(|v| {
            let az = std::f64::consts::TAU * v as f64 / config.views as f64;
            let el = ELEVATIONS[v % ELEVATIONS.len()].to_radians();
            let eye = centroid + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
            Camera::with_fov(config.width, config.height, config.fov).look_at(&eye, centroid, &Vec3::z())
        })
        .collect()
}

/// Renders `poses × views` samples (plus one canonical capture per view)
/// into `out`, writing images, clouds, the robot and the manifest last.
pub fn generate_dataset(blob: &BlobRobot, config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    if config.poses == 0 || config.views == 0 || config.width == 0 || config.height == 0 {
        return Err(Error::Config("poses, views and image size must be positive".into()));
    }
    for dir in ["images", "clouds"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let robot_file = "robot.urdf";
    let p = out.join(robot_file);
    fs::write(&p, blob.robot.to_urdf()).map_err(|e| Error::io(&p, e))?;
    let blob_file = "blob.drgs";
    let p = out.join(blob_file);
    let mut buf = Vec::new();
    blob.gaussians.write_segment(&mut buf).map_err(|e| Error::io(&p, e))?;
    fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
    let canonical_cloud = "clouds/canonical.drpc";
    write_cloud(&out.join(canonical_cloud), &blob.canonical_points())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let poses: Vec<Pose> = (0..config.poses).map(|_| sample_pose(&blob.robot, &mut rng)).collect();
    let n_test = (config.test_fraction * config.poses as f64).round() as usize;
    let mut ids: Vec<usize> = (0..config.poses).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let mut is_test = vec![false; config.poses];
    ids[..n_test.min(config.poses)].iter().for_each(|&i| is_test[i] = true);

    let (centroid, radius) = robot_extent(blob, config.seed)?;
    let cameras = camera_rig(&centroid, radius, config);

    let canonical_pose = Pose::zeros(blob.robot.dof);
    let mut jobs: Vec<(usize, Pose, Split)> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.clone(), if is_test[i] { Split::Test } else { Split::Train }))
        .collect();
    jobs.push((config.poses, canonical_pose, Split::Canonical));

    let results: Vec<Vec<Sample>> = jobs
        .par_iter()
        .map(|(pid, pose, split)| -> Result<Vec<Sample>> {
            let stem = if *split == Split::Canonical {
                "canonical".to_string()
            } else {
                format!("p{pid:04}")
            };
            let cloud = format!("clouds/{stem}.drpc");
            let splats = blob.posed(pose)?;
            if *split != Split::Canonical {
                write_cloud(&out.join(&cloud), &splats.means)?;
            }
            let mut samples = Vec::with_capacity(cameras.len());
            for (v, cam) in cameras.iter().enumerate() {
                let img = render(cam, &splats, config.background);
                let image = format!("images/{stem}_v{v:02}.png");
                let raw = format!("images/{stem}_v{v:02}.drim");
                img.write_png(&out.join(&image))?;
                img.write_raw(&out.join(&raw))?;
                samples.push(Sample {
                    pose_id: *pid,
                    pose: pose.0.clone(),
                    camera: v,
                    image,
                    raw,
                    cloud: cloud.clone(),
                    split: *split,
                });
            }
            Ok(samples)
        })
        .collect::<Result<_>>()?;

    let mut samples: Vec<Sample> = results.into_iter().flatten().collect();
    let canonical: Vec<Sample> = samples.split_off(config.poses * config.views);
    let manifest = DatasetManifest {
        robot: robot_file.into(),
        blob: blob_file.into(),
        canonical_cloud: canonical_cloud.into(),
        canonical_labels: blob.labels().to_vec(),
        background: config.background,
        seed: config.seed,
        cameras,
        samples,
        canonical,
    };
    manifest.validate(out, &blob.robot)?;
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// A dataset directory loaded into memory. Images are held in single
/// precision, as stored on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub robot: RobotModel,
    pub blob: BlobRobot,
    images: Vec<Vec<f32>>,
    canonical_images: Vec<Vec<f32>>,
    clouds: Vec<Option<Vec<Vec3>>>,
}

fn read_raw_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = Image::read_raw(path)?;
    Ok((img.width, img.height, img.data.iter().map(|v| *v as f32).collect()))
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&root.join("manifest.json"))?;
        let robot_path = root.join(&manifest.robot);
        let text = fs::read_to_string(&robot_path).map_err(|e| Error::io(&robot_path, e))?;
        let robot = parse_urdf(&text)?;
        manifest.validate(root, &robot)?;
        let blob_path = root.join(&manifest.blob);
        let mut bytes = Vec::new();
        File::open(&blob_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&blob_path, e))?;
        let mut gaussians =
            GaussianSet::read_segment(&mut bytes.as_slice()).map_err(|e| Error::format(&blob_path, e))?;
        if manifest.canonical_labels.len() != gaussians.len() {
            return Err(Error::format(&blob_path, "label count differs from Gaussian count"));
        }
        gaussians.source_link = Some(manifest.canonical_labels.clone());
        let load_all = |samples: &[Sample]| -> Result<Vec<Vec<f32>>> {
            samples
                .par_iter()
                .map(|s| {
                    let (w, h, d) = read_raw_f32(&root.join(&s.raw))?;
                    let cam = &manifest.cameras[s.camera];
                    if w != cam.width || h != cam.height {
                        return Err(Error::format(root.join(&s.raw), "image size differs from camera"));
                    }
                    Ok(d)
                })
                .collect()
        };
        let images = load_all(&manifest.samples)?;
        let canonical_images = load_all(&manifest.canonical)?;
        let n_poses = manifest.samples.iter().map(|s| s.pose_id + 1).max().unwrap_or(0);
        let mut clouds = vec![None; n_poses];
        for s in &manifest.samples {
            if clouds[s.pose_id].is_none() {
                clouds[s.pose_id] = Some(read_cloud(&root.join(&s.cloud))?);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            blob: BlobRobot {
                robot: robot.clone(),
                gaussians,
            },
            manifest,
            robot,
            images,
            canonical_images,
            clouds,
        })
    }

    fn to_image(&self, camera: usize, data: &[f32]) -> Image {
        let cam = &self.manifest.cameras[camera];
        Image {
            width: cam.width,
            height: cam.height,
            data: data.iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn image(&self, sample: usize) -> Image {
        self.to_image(self.manifest.samples[sample].camera, &self.images[sample])
    }

    pub fn canonical_image(&self, view: usize) -> Image {
        self.to_image(self.manifest.canonical[view].camera, &self.canonical_images[view])
    }

    pub fn camera(&self, id: usize) -> &Camera {
        &self.manifest.cameras[id]
    }

    pub fn pose(&self, sample: usize) -> Pose {
        Pose(self.manifest.samples[sample].pose.clone())
    }

    pub fn cloud(&self, pose_id: usize) -> Option<&[Vec3]> {
        self.clouds.get(pose_id).and_then(|c| c.as_deref())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.samples.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    /// Distinct pose ids of a split, ascending.
    pub fn pose_ids(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.pose_id)
            .collect();
        ids.dedup();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn pose_of(&self, pose_id: usize) -> Option<Pose> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.pose_id == pose_id)
            .map(|s| Pose(s.pose.clone()))
    }

    pub fn background(&self) -> [f64; 3] {
        self.manifest.background
    }
}
