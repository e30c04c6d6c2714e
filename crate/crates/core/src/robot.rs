//! Robot descriptions: a URDF subset parsed into a kinematic tree whose links
//! carry primitive visual geometry.
//!
//! Supported: `link/visual/{origin,geometry,material}` with box, cylinder and
//! sphere geometry; `joint/{origin,axis,limit,parent,child}` for revolute,
//! continuous, prismatic and fixed joints; top-level named materials.
//! Collision, inertial, transmission and mesh geometry are skipped and
//! reported in [`RobotModel::warnings`].

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{RigidTransform, Vec3};

pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Continuous,
    Prismatic,
    Fixed,
}

impl JointKind {
    pub fn is_actuated(self) -> bool {
        !matches!(self, JointKind::Fixed)
    }

    fn as_str(self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Continuous => "continuous",
            JointKind::Prismatic => "prismatic",
            JointKind::Fixed => "fixed",
        }
    }
}

/// Translation in meters and roll-pitch-yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

impl Origin {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_xyz_rpy(self.xyz, self.rpy)
    }

    fn is_identity(&self) -> bool {
        self.xyz == [0.0; 3] && self.rpy == [0.0; 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: usize,
    pub child_link: usize,
    pub origin: Origin,
    pub axis: Vec3,
    pub limits: Option<JointLimits>,
    /// Position of this joint's coordinate in the pose vector.
    pub dof_index: Option<usize>,
}

impl Joint {
    /// Interval poses are sampled from and clamped to.
    pub fn range(&self) -> (f64, f64) {
        match (self.kind, self.limits) {
            (JointKind::Fixed, _) => (0.0, 0.0),
            (JointKind::Continuous, _) => (-std::f64::consts::PI, std::f64::consts::PI),
            (_, Some(l)) => (l.lower, l.upper),
            (JointKind::Revolute, None) => (-std::f64::consts::PI, std::f64::consts::PI),
            (JointKind::Prismatic, None) => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, length: f64 },
    Sphere { radius: f64 },
}

impl Primitive {
    pub fn surface_area(&self) -> f64 {
        match *self {
            Primitive::Box {
                half_extents: [a, b, c],
            } => 8.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, length } => 2.0 * std::f64::consts::PI * radius * (length + radius),
            Primitive::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    /// Radius of the smallest origin-centred ball containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Primitive::Box {
                half_extents: [a, b, c],
            } => (a * a + b * b + c * c).sqrt(),
            Primitive::Cylinder { radius, length } => radius.hypot(length / 2.0),
            Primitive::Sphere { radius } => radius,
        }
    }

    fn dims_positive(&self) -> bool {
        match *self {
            Primitive::Box { half_extents } => half_extents.iter().all(|&v| v > 0.0),
            Primitive::Cylinder { radius, length } => radius > 0.0 && length > 0.0,
            Primitive::Sphere { radius } => radius > 0.0,
        }
    }

    /// Uniform sample on the primitive surface, in its own frame.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius } => loop {
                let v = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let n = v.norm();
                if n > 1e-12 {
                    break v * (radius / n);
                }
            },
            Primitive::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        sign * h[i]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * h[i]
                    };
                }
                p
            }
            Primitive::Cylinder { radius, length } => {
                let lateral = 2.0 * PI * radius * length;
                let cap = PI * radius * radius;
                let pick = rng.random::<f64>() * (lateral + 2.0 * cap);
                let theta = rng.random::<f64>() * 2.0 * PI;
                if pick < lateral {
                    let z = (rng.random::<f64>() - 0.5) * length;
                    Vec3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if pick < lateral + cap {
                        length / 2.0
                    } else {
                        -length / 2.0
                    };
                    Vec3::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visual {
    pub primitive: Primitive,
    pub origin: Origin,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub visuals: Vec<Visual>,
}

/// Something in the source that was ignored while parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub element: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    /// Topologically ordered: a joint's parent link is the root or the child
    /// of an earlier joint.
    pub joints: Vec<Joint>,
    pub root_link: usize,
    pub dof: usize,
    pub warnings: Vec<ParseWarning>,
    parent_joint: Vec<Option<usize>>,
}

impl RobotModel {
    pub fn parent_joint(&self, link: usize) -> Option<usize> {
        self.parent_joint[link]
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Actuated joints in pose-vector order.
    pub fn actuated_joints(&self) -> impl Iterator<Item = &Joint> {
        self.joints.iter().filter(|j| j.dof_index.is_some())
    }

    /// Per-coordinate `(lower, upper)` in pose-vector order.
    pub fn pose_ranges(&self) -> Vec<(f64, f64)> {
        self.actuated_joints().map(Joint::range).collect()
    }

    pub fn visual_count(&self) -> usize {
        self.links.iter().map(|l| l.visuals.len()).sum()
    }

    /// Same robot, dropping the parse warnings (they are not model state).
    pub fn without_warnings(&self) -> RobotModel {
        RobotModel {
            warnings: Vec::new(),
            ..self.clone()
        }
    }

    /// Builds a model from already-resolved parts, validating the tree.
    pub fn from_parts(name: String, links: Vec<Link>, joints: Vec<Joint>) -> Result<Self> {
        assemble(name, links, joints, Vec::new())
    }

    /// Serialises back into the supported URDF subset.
    pub fn to_urdf(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<?xml version=\"1.0\"?>");
        let _ = writeln!(s, "<robot name=\"{}\">", escape(&self.name));
        for link in &self.links {
            if link.visuals.is_empty() {
                let _ = writeln!(s, "  <link name=\"{}\"/>", escape(&link.name));
                continue;
            }
            let _ = writeln!(s, "  <link name=\"{}\">", escape(&link.name));
            for v in &link.visuals {
                let _ = writeln!(s, "    <visual>");
                write_origin(&mut s, &v.origin, "      ");
                let geometry = match v.primitive {
                    Primitive::Box { half_extents: h } => {
                        format!("<box size=\"{} {} {}\"/>", 2.0 * h[0], 2.0 * h[1], 2.0 * h[2])
                    }
                    Primitive::Cylinder { radius, length } => {
                        format!("<cylinder radius=\"{radius}\" length=\"{length}\"/>")
                    }
                    Primitive::Sphere { radius } => format!("<sphere radius=\"{radius}\"/>"),
                };
                let _ = writeln!(s, "      <geometry>{geometry}</geometry>");
                let [r, g, b] = v.color;
                let _ = writeln!(
                    s,
                    "      <material name=\"\"><color rgba=\"{r} {g} {b} 1\"/></material>"
                );
                let _ = writeln!(s, "    </visual>");
            }
            let _ = writeln!(s, "  </link>");
        }
        for j in &self.joints {
            let _ = writeln!(s, "  <joint name=\"{}\" type=\"{}\">", escape(&j.name), j.kind.as_str());
            let _ = writeln!(s, "    <parent link=\"{}\"/>", escape(&self.links[j.parent_link].name));
            let _ = writeln!(s, "    <child link=\"{}\"/>", escape(&self.links[j.child_link].name));
            write_origin(&mut s, &j.origin, "    ");
            if j.kind != JointKind::Fixed {
                let _ = writeln!(s, "    <axis xyz=\"{} {} {}\"/>", j.axis.x, j.axis.y, j.axis.z);
            }
            if let Some(l) = j.limits {
                let _ = writeln!(s, "    <limit lower=\"{}\" upper=\"{}\"/>", l.lower, l.upper);
            }
            let _ = writeln!(s, "  </joint>");
        }
        let _ = writeln!(s, "</robot>");
        s
    }
}

fn write_origin(s: &mut String, o: &Origin, indent: &str) {
    if o.is_identity() {
        return;
    }
    let _ = writeln!(
        s,
        "{indent}<origin xyz=\"{} {} {}\" rpy=\"{} {} {}\"/>",
        o.xyz[0], o.xyz[1], o.xyz[2], o.rpy[0], o.rpy[1], o.rpy[2]
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedXml(msg.into())
}

fn parse_floats<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| malformed(format!("{what}: {e}")))?;
    if vals.len() != N || vals.iter().any(|v| !v.is_finite()) {
        return Err(malformed(format!("{what}: expected {N} finite numbers, got `{text}`")));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(&vals);
    Ok(out)
}

fn attr_f64(node: roxmltree::Node, name: &str, ctx: &str) -> Result<f64> {
    let text = node
        .attribute(name)
        .ok_or_else(|| malformed(format!("{ctx}: missing `{name}` attribute")))?;
    Ok(parse_floats::<1>(text, &format!("{ctx} {name}"))?[0])
}

fn parse_origin(node: Option<roxmltree::Node>, ctx: &str) -> Result<Origin> {
    let Some(node) = node else {
        return Ok(Origin::default());
    };
    let xyz = match node.attribute("xyz") {
        Some(t) => parse_floats::<3>(t, &format!("{ctx} origin xyz"))?,
        None => [0.0; 3],
    };
    let rpy = match node.attribute("rpy") {
        Some(t) => parse_floats::<3>(t, &format!("{ctx} origin rpy"))?,
        None => [0.0; 3],
    };
    Ok(Origin { xyz, rpy })
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(tag))
}

fn parse_rgba(node: roxmltree::Node, ctx: &str) -> Result<Option<[f64; 3]>> {
    match child(node, "color").and_then(|c| c.attribute("rgba")) {
        Some(t) => {
            let v = parse_floats::<4>(t, &format!("{ctx} color rgba"))?;
            Ok(Some([v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0), v[2].clamp(0.0, 1.0)]))
        }
        None => Ok(None),
    }
}

/// Parses the supported URDF subset.
pub fn parse_urdf(source: &str) -> Result<RobotModel> {
    let doc = roxmltree::Document::parse(source).map_err(|e| malformed(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("robot") {
        return Err(malformed(format!(
            "root element is <{}>, expected <robot>",
            root.tag_name().name()
        )));
    }
    let name = root.attribute("name").unwrap_or("").to_string();
    let mut warnings = Vec::new();

    let mut materials: HashMap<String, [f64; 3]> = HashMap::new();
    for m in root.children().filter(|c| c.is_element() && c.has_tag_name("material")) {
        if let (Some(n), Some(c)) = (m.attribute("name"), parse_rgba(m, "material")?) {
            materials.insert(n.to_string(), c);
        }
    }

    let mut links = Vec::new();
    let mut link_ids: HashMap<String, usize> = HashMap::new();
    let mut joint_nodes = Vec::new();
    for node in root.children().filter(|c| c.is_element()) {
        match node.tag_name().name() {
            "link" => {
                let link = parse_link(node, &materials, &mut warnings)?;
                if link_ids.insert(link.name.clone(), links.len()).is_some() {
                    return Err(malformed(format!("duplicate link `{}`", link.name)));
                }
                links.push(link);
            }
            "joint" => joint_nodes.push(node),
            "material" => {}
            other => warnings.push(ParseWarning {
                element: other.to_string(),
                message: "unsupported top-level element skipped".into(),
            }),
        }
    }
    if links.is_empty() {
        return Err(malformed("robot has no links"));
    }

    let mut joints = Vec::new();
    let mut joint_names = std::collections::HashSet::new();
    for node in joint_nodes {
        let joint = parse_joint(node, &link_ids, &mut warnings)?;
        if !joint_names.insert(joint.name.clone()) {
            return Err(malformed(format!("duplicate joint `{}`", joint.name)));
        }
        joints.push(joint);
    }
    assemble(name, links, joints, warnings)
}

fn parse_link(
    node: roxmltree::Node,
    materials: &HashMap<String, [f64; 3]>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Link> {
    let name = node
        .attribute("name")
        .ok_or_else(|| malformed("link without name"))?
        .to_string();
    let mut visuals = Vec::new();
    for c in node.children().filter(|c| c.is_element()) {
        match c.tag_name().name() {
            "visual" => {
                if let Some(v) = parse_visual(c, &name, materials, warnings)? {
                    visuals.push(v);
                }
            }
            other => warnings.push(ParseWarning {
                element: format!("link[{name}]/{other}"),
                message: "skipped".into(),
            }),
        }
    }
    Ok(Link { name, visuals })
}

fn parse_visual(
    node: roxmltree::Node,
    link: &str,
    materials: &HashMap<String, [f64; 3]>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Option<Visual>> {
    let ctx = format!("link `{link}` visual");
    let origin = parse_origin(child(node, "origin"), &ctx)?;
    let geom = child(node, "geometry").ok_or_else(|| malformed(format!("{ctx}: no geometry")))?;
    let Some(shape) = geom.children().find(|c| c.is_element()) else {
        return Err(malformed(format!("{ctx}: empty geometry")));
    };
    let primitive = match shape.tag_name().name() {
        "box" => {
            let size = parse_floats::<3>(
                shape
                    .attribute("size")
                    .ok_or_else(|| malformed(format!("{ctx}: box without size")))?,
                &format!("{ctx} box size"),
            )?;
            Primitive::Box {
                half_extents: size.map(|s| s / 2.0),
            }
        }
        "cylinder" => Primitive::Cylinder {
            radius: attr_f64(shape, "radius", &ctx)?,
            length: attr_f64(shape, "length", &ctx)?,
        },
        "sphere" => Primitive::Sphere {
            radius: attr_f64(shape, "radius", &ctx)?,
        },
        other => {
            warnings.push(ParseWarning {
                element: format!("link[{link}]/visual/geometry/{other}"),
                message: "unsupported geometry, visual skipped".into(),
            });
            return Ok(None);
        }
    };
    if !primitive.dims_positive() {
        return Err(malformed(format!("{ctx}: non-positive primitive dimension")));
    }
    let color = match child(node, "material") {
        Some(m) => match parse_rgba(m, &ctx)? {
            Some(c) => c,
            None => m
                .attribute("name")
                .and_then(|n| materials.get(n).copied())
                .unwrap_or(DEFAULT_COLOR),
        },
        None => DEFAULT_COLOR,
    };
    Ok(Some(Visual {
        primitive,
        origin,
        color,
    }))
}

fn parse_joint(
    node: roxmltree::Node,
    link_ids: &HashMap<String, usize>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<Joint> {
    let name = node
        .attribute("name")
        .ok_or_else(|| malformed("joint without name"))?
        .to_string();
    let kind_str = node.attribute("type").unwrap_or("");
    let kind = match kind_str {
        "revolute" => JointKind::Revolute,
        "continuous" => JointKind::Continuous,
        "prismatic" => JointKind::Prismatic,
        "fixed" => JointKind::Fixed,
        other => {
            return Err(Error::UnsupportedJointKind {
                joint: name,
                kind: other.to_string(),
            })
        }
    };
    let link_ref = |tag: &str| -> Result<usize> {
        let l = child(node, tag)
            .and_then(|c| c.attribute("link"))
            .ok_or_else(|| malformed(format!("joint `{name}` has no <{tag}>")))?;
        link_ids.get(l).copied().ok_or_else(|| Error::UnknownLinkRef {
            joint: name.clone(),
            link: l.to_string(),
        })
    };
    let parent_link = link_ref("parent")?;
    let child_link = link_ref("child")?;
    let origin = parse_origin(child(node, "origin"), &format!("joint `{name}`"))?;

    let mut axis = match child(node, "axis").and_then(|a| a.attribute("xyz")) {
        Some(t) => Vec3::from(parse_floats::<3>(t, &format!("joint `{name}` axis"))?),
        None => Vec3::x(),
    };
    if kind.is_actuated() {
        let n = axis.norm();
        if n < 1e-12 {
            return Err(malformed(format!("joint `{name}` has a zero axis")));
        }
        axis /= n;
    }

    let limits = match (kind, child(node, "limit")) {
        (JointKind::Revolute | JointKind::Prismatic, Some(l)) => {
            let lower = l
                .attribute("lower")
                .map(|_| attr_f64(l, "lower", &name))
                .transpose()?
                .unwrap_or(0.0);
            let upper = l
                .attribute("upper")
                .map(|_| attr_f64(l, "upper", &name))
                .transpose()?
                .unwrap_or(0.0);
            if lower > upper {
                return Err(malformed(format!("joint `{name}`: lower limit above upper")));
            }
            Some(JointLimits { lower, upper })
        }
        (JointKind::Revolute | JointKind::Prismatic, None) => {
            warnings.push(ParseWarning {
                element: format!("joint[{name}]"),
                message: "no <limit>; default sampling range used".into(),
            });
            None
        }
        _ => None,
    };
    for c in node.children().filter(|c| c.is_element()) {
        let tag = c.tag_name().name();
        if !matches!(tag, "parent" | "child" | "origin" | "axis" | "limit") {
            warnings.push(ParseWarning {
                element: format!("joint[{name}]/{tag}"),
                message: "skipped".into(),
            });
        }
    }
    Ok(Joint {
        name,
        kind,
        parent_link,
        child_link,
        origin,
        axis,
        limits,
        dof_index: None,
    })
}

/// Validates the tree, reorders joints topologically and assigns pose slots.
fn assemble(name: String, links: Vec<Link>, joints: Vec<Joint>, warnings: Vec<ParseWarning>) -> Result<RobotModel> {
    let n = links.len();
    let mut parent_of: Vec<Option<usize>> = vec![None; n];
    for (ji, j) in joints.iter().enumerate() {
        if j.parent_link >= n || j.child_link >= n {
            return Err(Error::UnknownLinkRef {
                joint: j.name.clone(),
                link: format!("#{}", j.parent_link.max(j.child_link)),
            });
        }
        if j.parent_link == j.child_link {
            return Err(Error::CycleDetected(format!(
                "joint `{}` connects link `{}` to itself",
                j.name, links[j.child_link].name
            )));
        }
        if let Some(prev) = parent_of[j.child_link] {
            return Err(Error::CycleDetected(format!(
                "link `{}` has two parent joints (`{}`, `{}`)",
                links[j.child_link].name, joints[prev].name, j.name
            )));
        }
        parent_of[j.child_link] = Some(ji);
    }
    let roots: Vec<usize> = (0..n).filter(|&l| parent_of[l].is_none()).collect();
    let root_link = match roots.as_slice() {
        [r] => *r,
        [] => return Err(Error::CycleDetected("no root link".into())),
        many => return Err(Error::CycleDetected(format!("{} disconnected root links", many.len()))),
    };

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ji, j) in joints.iter().enumerate() {
        children[j.parent_link].push(ji);
    }
    // depth-first preorder from the root
    let mut order = Vec::with_capacity(joints.len());
    let mut stack: Vec<usize> = children[root_link].iter().rev().copied().collect();
    while let Some(ji) = stack.pop() {
        order.push(ji);
        stack.extend(children[joints[ji].child_link].iter().rev());
    }
    if order.len() != joints.len() {
        return Err(Error::CycleDetected("some joints are unreachable from the root".into()));
    }

    let mut slots = joints.into_iter().map(Some).collect::<Vec<_>>();
    let mut ordered = Vec::with_capacity(order.len());
    let mut dof = 0;
    let mut parent_joint = vec![None; n];
    for ji in order {
        let mut j = slots[ji].take().expect("joint visited once");
        j.dof_index = if j.kind.is_actuated() {
            dof += 1;
            Some(dof - 1)
        } else {
            None
        };
        parent_joint[j.child_link] = Some(ordered.len());
        ordered.push(j);
    }
    Ok(RobotModel {
        name,
        links,
        joints: ordered,
        root_link,
        dof,
        warnings,
        parent_joint,
    })
}

/// A point on a link's visual surface, in that link's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub link: usize,
    pub color: [f64; 3],
}

/// Area-weighted uniform samples over every visual primitive.
pub fn sample_surface_points(robot: &RobotModel, n: usize, seed: u64) -> Result<Vec<SurfacePoint>> {
    let visuals: Vec<(usize, &Visual)> = robot
        .links
        .iter()
        .enumerate()
        .flat_map(|(li, l)| l.visuals.iter().map(move |v| (li, v)))
        .collect();
    if visuals.is_empty() {
        return Err(Error::NoGeometry);
    }
    let mut cumulative = Vec::with_capacity(visuals.len());
    let mut total = 0.0;
    for (_, v) in &visuals {
        total += v.primitive.surface_area();
        cumulative.push(total);
    }
    let transforms: Vec<RigidTransform> = visuals.iter().map(|(_, v)| v.origin.transform()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|&c| c <= u).min(visuals.len() - 1);
        let (link, visual) = visuals[k];
        let local = visual.primitive.sample_surface(&mut rng);
        out.push(SurfacePoint {
            position: transforms[k].apply(&local),
            link,
            color: visual.color,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LINK: &str = r#"<robot name="two">
        <link name="A"/>
        <link name="B"><visual><geometry><sphere radius="0.1"/></geometry></visual></link>
        <joint name="j" type="revolute">
          <parent link="A"/><child link="B"/>
          <origin xyz="1 0 0"/><axis xyz="0 0 1"/>
          <limit lower="-1" upper="1" effort="1" velocity="1"/>
        </joint>
      </robot>"#;

    #[test]
    fn single_link_no_joints() {
        let r = parse_urdf(r#"<robot name="r"><link name="base"/></robot>"#).unwrap();
        assert_eq!(r.links.len(), 1);
        assert!(r.joints.is_empty());
        assert_eq!(r.dof, 0);
        assert_eq!(r.root_link, 0);
    }

    #[test]
    fn revolute_joint_fields() {
        let r = parse_urdf(TWO_LINK).unwrap();
        assert_eq!(r.dof, 1);
        let j = &r.joints[0];
        assert_eq!(j.axis, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(j.origin.xyz, [1.0, 0.0, 0.0]);
        assert_eq!(
            j.limits,
            Some(JointLimits {
                lower: -1.0,
                upper: 1.0
            })
        );
        assert_eq!(r.links[j.child_link].name, "B");
        assert_eq!(r.links[1].visuals[0].color, DEFAULT_COLOR);
    }

    #[test]
    fn unknown_child_link() {
        let src = TWO_LINK.replace(r#"<child link="B"/>"#, r#"<child link="ghost"/>"#);
        assert!(matches!(
            parse_urdf(&src),
            Err(Error::UnknownLinkRef { link, .. }) if link == "ghost"
        ));
    }

    #[test]
    fn malformed_and_unsupported() {
        assert!(matches!(parse_urdf("<robot"), Err(Error::MalformedXml(_))));
        let src = TWO_LINK.replace("revolute", "floating");
        assert!(matches!(parse_urdf(&src), Err(Error::UnsupportedJointKind { .. })));
        let src = TWO_LINK.replace(r#"radius="0.1""#, r#"radius="0""#);
        assert!(matches!(parse_urdf(&src), Err(Error::MalformedXml(_))));
    }

    #[test]
    fn cycle_is_rejected() {
        let src = r#"<robot name="c">
            <link name="A"/><link name="B"/>
            <joint name="ab" type="fixed"><parent link="A"/><child link="B"/></joint>
            <joint name="ba" type="fixed"><parent link="B"/><child link="A"/></joint>
          </robot>"#;
        assert!(matches!(parse_urdf(src), Err(Error::CycleDetected(_))));
    }

    #[test]
    fn skipped_elements_are_reported() {
        let src = r#"<robot name="w">
            <material name="red"><color rgba="1 0 0 1"/></material>
            <link name="A">
              <inertial/>
              <collision/>
              <visual><geometry><mesh filename="x.stl"/></geometry></visual>
              <visual><geometry><box size="1 1 1"/></geometry><material name="red"/></visual>
            </link>
            <transmission name="t"/>
          </robot>"#;
        let r = parse_urdf(src).unwrap();
        assert_eq!(r.links[0].visuals.len(), 1);
        assert_eq!(r.links[0].visuals[0].color, [1.0, 0.0, 0.0]);
        assert_eq!(r.warnings.len(), 4);
        assert!(r.warnings.iter().any(|w| w.element.contains("mesh")));
    }

    #[test]
    fn joints_come_out_topologically_sorted() {
        // declared child-first
        let src = r#"<robot name="t">
            <link name="a"/><link name="b"/><link name="c"/>
            <joint name="bc" type="continuous"><parent link="b"/><child link="c"/></joint>
            <joint name="ab" type="prismatic"><parent link="a"/><child link="b"/>
              <limit lower="0" upper="1"/></joint>
          </robot>"#;
        let r = parse_urdf(src).unwrap();
        assert_eq!(r.joints[0].name, "ab");
        assert_eq!(r.joints[1].name, "bc");
        assert_eq!(r.joints[0].dof_index, Some(0));
        assert_eq!(r.joints[1].dof_index, Some(1));
        for j in &r.joints {
            if let Some(pj) = r.parent_joint(j.parent_link) {
                let here = r.joints.iter().position(|x| x.name == j.name).unwrap();
                assert!(pj < here);
            }
        }
    }

    #[test]
    fn sphere_samples_lie_on_surface() {
        let src = r#"<robot name="s"><link name="a"><visual>
            <geometry><sphere radius="1"/></geometry></visual></link></robot>"#;
        let r = parse_urdf(src).unwrap();
        let pts = sample_surface_points(&r, 10_000, 3).unwrap();
        let mut mean = Vec3::zeros();
        for p in &pts {
            assert!((p.position.norm() - 1.0).abs() < 1e-9);
            mean += p.position;
        }
        mean /= pts.len() as f64;
        assert!(mean.norm() < 0.05);
    }

    #[test]
    fn box_faces_are_area_weighted() {
        let src = r#"<robot name="b"><link name="a"><visual>
            <geometry><box size="2 2 2"/></geometry></visual></link></robot>"#;
        let r = parse_urdf(src).unwrap();
        let pts = sample_surface_points(&r, 6000, 11).unwrap();
        let mut counts = [0usize; 6];
        for p in &pts {
            let (axis, v) = (0..3)
                .map(|i| (i, p.position[i]))
                .find(|(_, v)| (v.abs() - 1.0).abs() < 1e-12)
                .expect("point on a face");
            counts[2 * axis + usize::from(v > 0.0)] += 1;
        }
        // multinomial with p = 1/6: sigma = sqrt(6000 * 1/6 * 5/6)
        let sigma = (6000.0_f64 / 6.0 * 5.0 / 6.0).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn one_sample_and_no_geometry() {
        let r = parse_urdf(TWO_LINK).unwrap();
        let pts = sample_surface_points(&r, 1, 0).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].position.norm() - 0.1).abs() < 1e-12);
        assert_eq!(pts[0].link, 1);
        let bare = parse_urdf(r#"<robot name="r"><link name="base"/></robot>"#).unwrap();
        assert!(matches!(sample_surface_points(&bare, 5, 0), Err(Error::NoGeometry)));
    }

    #[test]
    fn sampling_is_reproducible() {
        let r = parse_urdf(TWO_LINK).unwrap();
        let a = sample_surface_points(&r, 100, 42).unwrap();
        let b = sample_surface_points(&r, 100, 42).unwrap();
        assert_eq!(a, b);
    }
}
