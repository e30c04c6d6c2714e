//! Forward kinematics over the link tree with an exact reverse pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axis_rotation, skew, Mat3, RigidTransform, Vec3};
use crate::robot::{Joint, JointKind, RobotModel};

/// Joint coordinates in pose-vector order (radians or meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose(pub Vec<f64>);

impl Pose {
    /// The canonical pose: every coordinate zero.
    pub fn zeros(dof: usize) -> Self {
        Pose(vec![0.0; dof])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Clamps every coordinate into its joint's range.
    pub fn clamp_to_limits(&mut self, robot: &RobotModel) {
        for (v, (lo, hi)) in self.0.iter_mut().zip(robot.pose_ranges()) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn within_limits(&self, robot: &RobotModel) -> bool {
        self.0.len() == robot.dof
            && self
                .0
                .iter()
                .zip(robot.pose_ranges())
                .all(|(v, (lo, hi))| *v >= lo && *v <= hi)
    }
}

impl From<Vec<f64>> for Pose {
    fn from(v: Vec<f64>) -> Self {
        Pose(v)
    }
}

/// The per-joint factor: origin followed by the joint's own motion.
pub fn joint_motion(joint: &Joint, q: f64) -> RigidTransform {
    let origin = joint.origin.transform();
    match joint.kind {
        JointKind::Revolute | JointKind::Continuous => {
            origin.compose(&RigidTransform::new(axis_rotation(&joint.axis, q), Vec3::zeros()))
        }
        JointKind::Prismatic => origin.compose(&RigidTransform::from_translation(joint.axis * q)),
        JointKind::Fixed => origin,
    }
}

#[derive(Debug, Clone)]
struct JointRecord {
    origin: RigidTransform,
    motion: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct FkTape {
    records: Vec<JointRecord>,
}

/// World-from-link transforms, one per link.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub link_transforms: Vec<RigidTransform>,
    pub tape: Option<FkTape>,
    pose: Vec<f64>,
}

impl FkResult {
    pub fn without_tape(mut self) -> Self {
        self.tape = None;
        self
    }

    pub fn dof(&self) -> usize {
        self.pose.len()
    }

    pub fn pose(&self) -> &[f64] {
        &self.pose
    }
}

/// `T_j(p₀)⁻¹` for every link.
pub fn canonical_inverses(robot: &RobotModel) -> Vec<RigidTransform> {
    forward_kinematics(robot, &Pose::zeros(robot.dof))
        .expect("zero pose has the right length")
        .link_transforms
        .iter()
        .map(RigidTransform::inverse)
        .collect()
}

/// Motion of each link relative to the canonical pose,
/// `T_j(p)·T_j(p₀)⁻¹`. Links whose whole chain sits at zero get the exact
/// identity rather than a product that only rounds to it.
pub fn relative_motions(robot: &RobotModel, fk: &FkResult, canonical_inv: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut moved = vec![false; robot.links.len()];
    for joint in &robot.joints {
        let q = joint.dof_index.map_or(0.0, |i| fk.pose[i]);
        moved[joint.child_link] = moved[joint.parent_link] || q != 0.0;
    }
    fk.link_transforms
        .iter()
        .zip(canonical_inv)
        .zip(&moved)
        .map(|((t, c), m)| if *m { t.compose(c) } else { RigidTransform::identity() })
        .collect()
}

/// Cotangent of one world-from-link transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformCotangent {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for TransformCotangent {
    fn default() -> Self {
        Self {
            rotation: Mat3::zeros(),
            translation: Vec3::zeros(),
        }
    }
}

pub fn forward_kinematics(robot: &RobotModel, pose: &Pose) -> Result<FkResult> {
    if pose.len() != robot.dof {
        return Err(Error::PoseLengthMismatch {
            expected: robot.dof,
            got: pose.len(),
        });
    }
    let mut world = vec![RigidTransform::identity(); robot.links.len()];
    let mut records = Vec::with_capacity(robot.joints.len());
    for joint in &robot.joints {
        let q = joint.dof_index.map_or(0.0, |i| pose.0[i]);
        let origin = joint.origin.transform();
        let motion = match joint.kind {
            JointKind::Revolute | JointKind::Continuous => {
                RigidTransform::new(axis_rotation(&joint.axis, q), Vec3::zeros())
            }
            JointKind::Prismatic => RigidTransform::from_translation(joint.axis * q),
            JointKind::Fixed => RigidTransform::identity(),
        };
        world[joint.child_link] = world[joint.parent_link].compose(&origin).compose(&motion);
        records.push(JointRecord { origin, motion });
    }
    Ok(FkResult {
        link_transforms: world,
        tape: Some(FkTape { records }),
        pose: pose.0.clone(),
    })
}

/// Pulls per-link transform cotangents back to the pose vector.
pub fn fk_backward(robot: &RobotModel, result: &FkResult, cotangents: &[TransformCotangent]) -> Result<Vec<f64>> {
    let tape = result.tape.as_ref().ok_or(Error::NoTape)?;
    if cotangents.len() != robot.links.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} link cotangents for {} links",
            cotangents.len(),
            robot.links.len()
        )));
    }
    let mut acc = cotangents.to_vec();
    let mut grad = vec![0.0; result.dof()];
    for (joint, rec) in robot.joints.iter().zip(&tape.records).rev() {
        let parent = result.link_transforms[joint.parent_link];
        let local = rec.origin.compose(&rec.motion);
        let g = acc[joint.child_link];
        // child = parent ∘ local
        let g_local_r = parent.rotation.transpose() * g.rotation;
        let g_local_t = parent.rotation.transpose() * g.translation;
        let gp = &mut acc[joint.parent_link];
        gp.rotation += g.rotation * local.rotation.transpose() + g.translation * local.translation.transpose();
        gp.translation += g.translation;

        if let Some(slot) = joint.dof_index {
            // local = origin ∘ motion(q)
            let r_o = rec.origin.rotation;
            grad[slot] += match joint.kind {
                JointKind::Revolute | JointKind::Continuous => {
                    let d_rot = r_o * skew(&joint.axis) * rec.motion.rotation;
                    g_local_r.component_mul(&d_rot).sum()
                }
                JointKind::Prismatic => g_local_t.dot(&(r_o * joint.axis)),
                JointKind::Fixed => 0.0,
            };
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::parse_urdf;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn planar_arm() -> RobotModel {
        parse_urdf(
            r#"<robot name="planar">
              <link name="base"/><link name="l1"/><link name="l2"/><link name="tip"/>
              <joint name="j1" type="revolute"><parent link="base"/><child link="l1"/>
                <origin xyz="1 0 0"/><axis xyz="0 0 1"/><limit lower="-3" upper="3"/></joint>
              <joint name="j2" type="revolute"><parent link="l1"/><child link="l2"/>
                <origin xyz="1 0 0"/><axis xyz="0 0 1"/><limit lower="-3" upper="3"/></joint>
              <joint name="tip" type="fixed"><parent link="l2"/><child link="tip"/>
                <origin xyz="1 0 0"/></joint>
            </robot>"#,
        )
        .unwrap()
    }

    fn bare_joint(kind: JointKind, axis: Vec3) -> Joint {
        Joint {
            name: "j".into(),
            kind,
            parent_link: 0,
            child_link: 1,
            origin: Default::default(),
            axis,
            limits: None,
            dof_index: Some(0),
        }
    }

    #[test]
    fn joint_motion_cases() {
        let j = bare_joint(JointKind::Revolute, Vec3::z());
        let t = joint_motion(&j, 0.0);
        assert_relative_eq!(t.rotation, Mat3::identity());
        let t = joint_motion(&j, FRAC_PI_2);
        assert_relative_eq!(t.apply(&Vec3::x()), Vec3::y(), epsilon = 1e-12);
        let j = bare_joint(JointKind::Prismatic, Vec3::y());
        let t = joint_motion(&j, 0.3);
        assert_relative_eq!(t.translation, Vec3::new(0.0, 0.3, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_arm_closed_form() {
        // base joint offset is along x, so move it to the origin for the
        // textbook case: j1 at origin, j2 at (1,0,0), tip at (2,0,0)
        let mut robot = planar_arm();
        robot.joints[0].origin.xyz = [0.0; 3];
        let fk = forward_kinematics(&robot, &Pose(vec![FRAC_PI_2, 0.0])).unwrap();
        let l2 = fk.link_transforms[2];
        assert_relative_eq!(l2.translation, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(l2.rotation * Vec3::x(), Vec3::y(), epsilon = 1e-12);
        assert_relative_eq!(
            fk.link_transforms[3].translation,
            Vec3::new(0.0, 2.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn identity_origins_zero_pose() {
        let mut robot = planar_arm();
        for j in &mut robot.joints {
            j.origin = Default::default();
        }
        let fk = forward_kinematics(&robot, &Pose::zeros(2)).unwrap();
        for t in &fk.link_transforms {
            assert_eq!(*t, RigidTransform::identity());
        }
    }

    #[test]
    fn wrong_pose_length() {
        let robot = planar_arm();
        assert!(matches!(
            forward_kinematics(&robot, &Pose(vec![0.0])),
            Err(Error::PoseLengthMismatch { expected: 2, got: 1 })
        ));
    }

    fn one_joint() -> RobotModel {
        parse_urdf(
            r#"<robot name="one"><link name="a"/><link name="b"/><link name="c"/>
              <joint name="j" type="revolute"><parent link="a"/><child link="b"/>
                <axis xyz="0 0 1"/><limit lower="-3" upper="3"/></joint>
              <joint name="f" type="fixed"><parent link="b"/><child link="c"/>
                <origin xyz="1 0 0"/></joint></robot>"#,
        )
        .unwrap()
    }

    #[test]
    fn backward_small_cases() {
        let robot = one_joint();
        let fk = forward_kinematics(&robot, &Pose(vec![0.0])).unwrap();
        let zero = vec![TransformCotangent::default(); 3];
        assert_eq!(fk_backward(&robot, &fk, &zero).unwrap(), vec![0.0]);

        // L = x of link c's origin: derivative of cos q at 0
        let mut ct = zero.clone();
        ct[2].translation = Vec3::x();
        let g = fk_backward(&robot, &fk, &ct).unwrap();
        assert!(g[0].abs() < 1e-15);
        // L = y: derivative of sin q at 0
        let mut ct = zero;
        ct[2].translation = Vec3::y();
        let g = fk_backward(&robot, &fk, &ct).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-15);

        let no_tape = fk.clone().without_tape();
        assert!(matches!(fk_backward(&robot, &no_tape, &ct), Err(Error::NoTape)));
    }

    #[test]
    fn long_chain_stays_orthonormal() {
        let mut src = String::from(r#"<robot name="long"><link name="l0"/>"#);
        for i in 1..=30 {
            src += &format!(
                r#"<link name="l{i}"/><joint name="j{i}" type="revolute">
                   <parent link="l{}"/><child link="l{i}"/>
                   <origin xyz="0.1 0.02 0.03" rpy="0.3 -0.2 0.7"/>
                   <axis xyz="0.3 0.5 0.8"/><limit lower="-3" upper="3"/></joint>"#,
                i - 1
            );
        }
        src += "</robot>";
        let robot = parse_urdf(&src).unwrap();
        let pose = Pose((0..30).map(|i| 0.1 * i as f64 - 1.3).collect());
        let fk = forward_kinematics(&robot, &pose).unwrap();
        for t in &fk.link_transforms {
            assert!(t.orthonormality_error() <= 1e-8);
            assert!((t.rotation.determinant() - 1.0).abs() <= 1e-9);
        }
    }
}
