//! Domain types shared by every stage of the pipeline.
//!
//! Conventions used throughout the crate:
//! - world units are meters;
//! - cameras follow the pinhole convention with +z forward, +x right and
//!   +y down, and pixel `(i, j)` has its center at the continuous image
//!   coordinate `(i, j)`;
//! - texel `(x, y)` of an `R×R` map has its center at UV
//!   `((x + 0.5) / R, (y + 0.5) / R)`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Maximum number of joint influences kept per vertex.
pub const MAX_INFLUENCES: usize = 8;

/// Rotation followed by translation, `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self::new(rotation, Vec3::zeros())
    }

    /// Reads a 4×4 row-major matrix; the bottom row must be `0 0 0 1`.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::InvalidTransform(format!("expected 16 values, got {}", m.len())));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform(format!("bottom row must be 0 0 0 1, got {bottom:?}")));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Ok(Self::new(rotation, translation))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// True when the rotation block is orthonormal with determinant +1.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let gram = r.transpose() * r - Mat3::identity();
        gram.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Canonical-pose joint frame in world coordinates.
    pub canonical: RigidTransform,
}

/// UV-mapped triangle mesh with a skeleton and skinning weights.
///
/// `edges`, `vertex_neighbors` and `vertex_uv` are derived by
/// [`build_adjacency`] and are empty until then.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkinnedTemplate {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-corner UVs, parallel to `triangles`.
    pub uv_coords: Vec<[Vec2; 3]>,
    pub joints: Vec<Joint>,
    /// Sparse `(joint, weight)` pairs per vertex.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
    /// Undirected edges `[min, max]` incident to each vertex.
    pub edges: Vec<Vec<[usize; 2]>>,
    /// Sorted, deduplicated one-ring per vertex.
    pub vertex_neighbors: Vec<Vec<usize>>,
    /// Canonical UV per vertex: the first corner that references it.
    pub vertex_uv: Vec<Vec2>,
}

impl SkinnedTemplate {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn has_adjacency(&self) -> bool {
        self.vertex_neighbors.len() == self.vertices.len() && self.vertex_uv.len() == self.vertices.len()
    }

    /// Keeps the `MAX_INFLUENCES` largest weights per vertex, drops
    /// non-positive ones and rescales the remainder to sum to one.
    pub fn normalize_weights(&mut self) {
        for w in &mut self.skin_weights {
            w.retain(|&(_, v)| v > 0.0 && v.is_finite());
            w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            w.truncate(MAX_INFLUENCES);
            let sum: f64 = w.iter().map(|&(_, v)| v).sum();
            if sum > 0.0 {
                for (_, v) in w.iter_mut() {
                    *v /= sum;
                }
            }
            w.sort_by_key(|&(j, _)| j);
        }
    }

    /// Index of the root joint: the first joint without a parent.
    pub fn root_joint(&self) -> Option<usize> {
        root_joint(&self.joints)
    }

    /// Undirected edges `[i, j]` with `i < j`, in ascending order.
    pub fn unique_edges(&self) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }
}

pub fn root_joint(joints: &[Joint]) -> Option<usize> {
    joints.iter().position(|j| j.parent.is_none())
}

/// A broken template invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    WeightSum { vertex: usize, sum: f64 },
    NegativeWeight { vertex: usize, joint: usize, weight: f64 },
    UnknownJoint { vertex: usize, joint: usize },
    MissingWeights { expected: usize, got: usize },
    TriangleIndex { triangle: usize, index: usize },
    MissingUv { expected: usize, got: usize },
    UvOutOfRange { triangle: usize, corner: usize },
    BadParent { joint: usize, parent: usize },
    AsymmetricNeighbors { vertex: usize, neighbor: usize },
    AsymmetricEdge { vertex: usize, edge: [usize; 2] },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WeightSum { vertex, sum } => {
                write!(f, "vertex {vertex}: skin weights sum to {sum}, expected 1")
            }
            Violation::NegativeWeight { vertex, joint, weight } => write!(f, "vertex {vertex}: negative weight {weight} on joint {joint}"),
            Violation::UnknownJoint { vertex, joint } => {
                write!(f, "vertex {vertex}: weight references unknown joint {joint}")
            }
            Violation::MissingWeights { expected, got } => {
                write!(f, "expected weights for {expected} vertices, got {got}")
            }
            Violation::TriangleIndex { triangle, index } => {
                write!(f, "triangle {triangle}: vertex index {index} out of range")
            }
            Violation::MissingUv { expected, got } => {
                write!(f, "expected UVs for {expected} triangles, got {got}")
            }
            Violation::UvOutOfRange { triangle, corner } => {
                write!(f, "triangle {triangle}: corner {corner} UV outside [0,1]")
            }
            Violation::BadParent { joint, parent } => {
                write!(f, "joint {joint}: parent {parent} is not an earlier joint")
            }
            Violation::AsymmetricNeighbors { vertex, neighbor } => {
                write!(f, "vertex {vertex}: neighbor {neighbor} does not list it back")
            }
            Violation::AsymmetricEdge { vertex, edge } => {
                write!(f, "vertex {vertex}: edge {edge:?} missing from the other endpoint")
            }
        }
    }
}

/// Checks every template invariant; an empty result means the template is valid.
pub fn validate_template(t: &SkinnedTemplate) -> Vec<Violation> {
    let mut out = Vec::new();
    let nv = t.vertices.len();

    for (j, joint) in t.joints.iter().enumerate() {
        if let Some(p) = joint.parent {
            if p >= j {
                out.push(Violation::BadParent { joint: j, parent: p });
            }
        }
    }

    if t.skin_weights.len() != nv {
        out.push(Violation::MissingWeights {
            expected: nv,
            got: t.skin_weights.len(),
        });
    }
    for (v, weights) in t.skin_weights.iter().enumerate() {
        let mut sum = 0.0;
        for &(joint, w) in weights {
            if joint >= t.joints.len() {
                out.push(Violation::UnknownJoint { vertex: v, joint });
            }
            if w < 0.0 {
                out.push(Violation::NegativeWeight {
                    vertex: v,
                    joint,
                    weight: w,
                });
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            out.push(Violation::WeightSum { vertex: v, sum });
        }
    }

    for (i, tri) in t.triangles.iter().enumerate() {
        for &idx in tri {
            if idx >= nv {
                out.push(Violation::TriangleIndex { triangle: i, index: idx });
            }
        }
    }

    if t.uv_coords.len() != t.triangles.len() {
        out.push(Violation::MissingUv {
            expected: t.triangles.len(),
            got: t.uv_coords.len(),
        });
    }
    for (i, corners) in t.uv_coords.iter().enumerate() {
        for (c, uv) in corners.iter().enumerate() {
            let inside = (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y);
            if !inside {
                out.push(Violation::UvOutOfRange { triangle: i, corner: c });
            }
        }
    }

    for (v, ring) in t.vertex_neighbors.iter().enumerate() {
        for &n in ring {
            let back = t.vertex_neighbors.get(n).is_some_and(|r| r.binary_search(&v).is_ok());
            if !back {
                out.push(Violation::AsymmetricNeighbors { vertex: v, neighbor: n });
            }
        }
    }
    for (v, list) in t.edges.iter().enumerate() {
        for e in list {
            let other = if e[0] == v { e[1] } else { e[0] };
            let back = t.edges.get(other).is_some_and(|l| l.contains(e));
            if !back {
                out.push(Violation::AsymmetricEdge { vertex: v, edge: *e });
            }
        }
    }
    out
}

/// Fills `edges`, `vertex_neighbors` and `vertex_uv` from the triangle list.
pub fn build_adjacency(t: &SkinnedTemplate) -> Result<SkinnedTemplate> {
    let nv = t.vertices.len();
    for (i, tri) in t.triangles.iter().enumerate() {
        for &idx in tri {
            if idx >= nv {
                return Err(Error::TriangleIndex {
                    triangle: i,
                    index: idx,
                    count: nv,
                });
            }
        }
        if tri[0] == tri[1] || tri[0] == tri[2] {
            return Err(Error::DegenerateTriangle {
                triangle: i,
                vertex: tri[0],
            });
        }
        if tri[1] == tri[2] {
            return Err(Error::DegenerateTriangle {
                triangle: i,
                vertex: tri[1],
            });
        }
    }

    let mut edge_sets: Vec<BTreeSet<[usize; 2]>> = vec![BTreeSet::new(); nv];
    let mut ring_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nv];
    let mut vertex_uv: Vec<Option<Vec2>> = vec![None; nv];
    for (i, tri) in t.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let e = [a.min(b), a.max(b)];
            edge_sets[a].insert(e);
            edge_sets[b].insert(e);
            ring_sets[a].insert(b);
            ring_sets[b].insert(a);
            if vertex_uv[a].is_none() {
                vertex_uv[a] = t.uv_coords.get(i).map(|c| c[k]);
            }
        }
    }

    let mut out = t.clone();
    out.edges = edge_sets.into_iter().map(|s| s.into_iter().collect()).collect();
    out.vertex_neighbors = ring_sets.into_iter().map(|s| s.into_iter().collect()).collect();
    out.vertex_uv = vertex_uv.into_iter().map(|uv| uv.unwrap_or_else(Vec2::zeros)).collect();
    Ok(out)
}

/// Per-joint world transforms for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    pub frame_index: usize,
    pub joint_transforms: Vec<RigidTransform>,
}

impl MotionFrame {
    /// The rest pose: every joint at its canonical transform.
    pub fn rest(joints: &[Joint], frame_index: usize) -> Self {
        Self {
            frame_index,
            joint_transforms: joints.iter().map(|j| j.canonical).collect(),
        }
    }

    /// Indices of joints whose rotation block is not orthonormal.
    pub fn non_rigid_joints(&self, tol: f64) -> Vec<usize> {
        self.joint_transforms
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_rigid(tol))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub extrinsics: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Builds a camera at `position` looking at `target`. `fov_deg` is the
    /// vertical field of view; the principal point is the image center.
    pub fn look_at(position: Vec3, target: Vec3, up: Vec3, fov_deg: f64, width: usize, height: usize) -> Result<Camera> {
        let forward = target - position;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidCamera("position equals target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up is parallel to the view direction".into()));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) || width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!("fov {fov_deg} deg, size {width}x{height}")));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        let focal = 0.5 * height as f64 / (0.5 * fov_deg.to_radians()).tan();
        let intrinsics = Mat3::new(
            focal,
            0.0,
            0.5 * (width as f64 - 1.0),
            0.0,
            focal,
            0.5 * (height as f64 - 1.0),
            0.0,
            0.0,
            1.0,
        );
        let cam = Camera {
            intrinsics,
            extrinsics: RigidTransform::new(rotation, translation),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(cx >= 0.0 && cx <= self.width as f64 && cy >= 0.0 && cy <= self.height as f64) {
            return Err(Error::InvalidCamera(format!("principal point ({cx}, {cy}) outside the image")));
        }
        if !self.extrinsics.is_rigid(1e-5) {
            return Err(Error::InvalidCamera("extrinsic rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.extrinsics.rotation.transpose() * self.extrinsics.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.extrinsics.apply_point(p)
    }

    /// Pixel coordinates of a camera-space point (no depth check).
    pub fn camera_to_pixel(&self, c: &Vec3) -> Vec2 {
        let k = &self.intrinsics;
        let x = (k[(0, 0)] * c.x + k[(0, 1)] * c.y) / c.z + k[(0, 2)];
        let y = (k[(1, 1)] * c.y) / c.z + k[(1, 2)];
        Vec2::new(x, y)
    }

    /// Pixel coordinates and camera-space depth of a world point.
    pub fn project(&self, p: &Vec3) -> (Vec2, f64) {
        let c = self.to_camera(p);
        (self.camera_to_pixel(&c), c.z)
    }
}

/// Look-at parameters of a camera, as sent by viewers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookAt {
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl LookAt {
    pub fn camera(&self) -> Result<Camera> {
        Camera::look_at(
            Vec3::from(self.position),
            Vec3::from(self.target),
            Vec3::from(self.up),
            self.fov_deg,
            self.width,
            self.height,
        )
    }
}

/// A set of cameras with an optional condition / held-out split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub condition: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl CameraRig {
    pub fn condition_cameras(&self) -> Vec<&Camera> {
        self.condition.iter().map(|&i| &self.cameras[i]).collect()
    }

    pub fn held_out_cameras(&self) -> Vec<&Camera> {
        self.held_out.iter().map(|&i| &self.cameras[i]).collect()
    }
}

/// What a [`TexelMap`] stores. The discriminant is the on-disk tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TexelKind {
    Color = 0,
    Visibility = 1,
    Normal = 2,
    Position = 3,
    Depth = 4,
    LbsTransform = 5,
    Deformation = 6,
    ScaleRatio = 7,
    GaussianParams = 8,
    Mask = 9,
    ImageCoords = 10,
    Coverage = 11,
}

impl TexelKind {
    pub fn tag(self) -> u32 {
        self as u32
    }

    pub fn from_tag(tag: u32) -> Option<TexelKind> {
        use TexelKind::*;
        Some(match tag {
            0 => Color,
            1 => Visibility,
            2 => Normal,
            3 => Position,
            4 => Depth,
            5 => LbsTransform,
            6 => Deformation,
            7 => ScaleRatio,
            8 => GaussianParams,
            9 => Mask,
            10 => ImageCoords,
            11 => Coverage,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use TexelKind::*;
        match self {
            Color => "color",
            Visibility => "visibility",
            Normal => "normal",
            Position => "position",
            Depth => "depth",
            LbsTransform => "lbs_transform",
            Deformation => "deformation",
            ScaleRatio => "scale_ratio",
            GaussianParams => "gaussian_params",
            Mask => "mask",
            ImageCoords => "image_coords",
            Coverage => "coverage",
        }
    }
}

/// Square multi-channel raster in UV space, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct TexelMap {
    pub resolution: usize,
    pub channels: usize,
    pub kind: TexelKind,
    pub data: Vec<f32>,
}

impl TexelMap {
    pub fn zeros(resolution: usize, channels: usize, kind: TexelKind) -> Self {
        Self {
            resolution,
            channels,
            kind,
            data: vec![0.0; resolution * resolution * channels],
        }
    }

    pub fn from_data(resolution: usize, channels: usize, kind: TexelKind, data: Vec<f32>) -> Result<Self> {
        let expected = resolution * resolution * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, got: data.len() });
        }
        Ok(Self {
            resolution,
            channels,
            kind,
            data,
        })
    }

    pub fn texel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn texel(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn texel_mut(&mut self, index: usize) -> &mut [f32] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        self.texel(y * self.resolution + x)
    }

    pub fn vec3(&self, index: usize) -> Vec3 {
        let t = self.texel(index);
        Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64)
    }

    pub fn set_vec3(&mut self, index: usize, v: &Vec3) {
        let t = self.texel_mut(index);
        t[0] = v.x as f32;
        t[1] = v.y as f32;
        t[2] = v.z as f32;
    }

    pub fn expect(&self, kind: TexelKind, channels: usize) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind {
                expected: kind.name(),
                got: self.kind.name().to_string(),
            });
        }
        if self.channels != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: self.channels,
            });
        }
        Ok(())
    }

    /// Texel-center UV of `index`.
    pub fn texel_uv(&self, index: usize) -> Vec2 {
        let r = self.resolution as f64;
        let x = (index % self.resolution) as f64;
        let y = (index / self.resolution) as f64;
        Vec2::new((x + 0.5) / r, (y + 0.5) / r)
    }

    /// The four texels and weights of a bilinear lookup at `uv`, clamped
    /// at the atlas border.
    pub fn bilinear_taps(&self, uv: &Vec2) -> [(usize, f64); 4] {
        bilinear_taps(
            self.resolution,
            self.resolution,
            uv.x * self.resolution as f64 - 0.5,
            uv.y * self.resolution as f64 - 0.5,
        )
    }

    /// Bilinear sample of every channel at `uv`.
    pub fn sample_bilinear(&self, uv: &Vec2, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (idx, w) in self.bilinear_taps(uv) {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.texel(idx)) {
                *o += w * v as f64;
            }
        }
    }

    pub fn sample_vec3(&self, uv: &Vec2) -> Vec3 {
        let mut out = [0.0; 3];
        self.sample_bilinear(uv, &mut out);
        Vec3::new(out[0], out[1], out[2])
    }
}

/// Bilinear taps for a `width×height` grid at continuous coordinate
/// `(x, y)` where sample `(i, j)` sits at `(i, j)`. Coordinates are clamped
/// to the grid.
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = if x1 == x0 { 0.0 } else { x - x0 as f64 };
    let fy = if y1 == y0 { 0.0 } else { y - y0 as f64 };
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn unit_quad() -> SkinnedTemplate {
        SkinnedTemplate {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            uv_coords: vec![
                [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)],
                [Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(0.0, 1.0)],
            ],
            joints: vec![Joint {
                name: "root".into(),
                parent: None,
                canonical: RigidTransform::identity(),
            }],
            skin_weights: vec![vec![(0, 1.0)]; 4],
            ..Default::default()
        }
    }

    #[test]
    fn unit_quad_is_valid() {
        assert!(validate_template(&unit_quad()).is_empty());
        let built = build_adjacency(&unit_quad()).unwrap();
        assert!(validate_template(&built).is_empty());
    }

    #[test]
    fn weight_sum_violation_names_vertex() {
        let mut t = unit_quad();
        t.skin_weights[2] = vec![(0, 0.9)];
        let v = validate_template(&t);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::WeightSum { vertex: 2, .. }));
        assert!(v[0].to_string().contains("vertex 2"));
    }

    #[test]
    fn bad_triangle_index_violation() {
        let mut t = unit_quad();
        t.triangles[1] = [0, 2, 99];
        let v = validate_template(&t);
        assert_eq!(v, vec![Violation::TriangleIndex { triangle: 1, index: 99 }]);
    }

    #[test]
    fn single_triangle_adjacency() {
        let mut t = unit_quad();
        t.triangles.truncate(1);
        t.uv_coords.truncate(1);
        let t = build_adjacency(&t).unwrap();
        assert_eq!(t.edges[0], vec![[0, 1], [0, 2]]);
        assert_eq!(t.vertex_neighbors[0], vec![1, 2]);
        assert!(t.vertex_neighbors[3].is_empty());
    }

    #[test]
    fn shared_edge_listed_once_per_endpoint() {
        let mut t = unit_quad();
        t.triangles = vec![[0, 1, 2], [1, 3, 2]];
        let t = build_adjacency(&t).unwrap();
        assert_eq!(t.edges[1].iter().filter(|e| **e == [1, 2]).count(), 1);
        assert_eq!(t.edges[2].iter().filter(|e| **e == [1, 2]).count(), 1);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let mut t = unit_quad();
        t.triangles[0] = [0, 0, 2];
        assert!(matches!(build_adjacency(&t), Err(Error::DegenerateTriangle { triangle: 0, .. })));
    }

    #[test]
    fn canonical_uv_is_first_corner() {
        let mut t = unit_quad();
        t.uv_coords[1][0] = Vec2::new(0.5, 0.5);
        let t = build_adjacency(&t).unwrap();
        assert_eq!(t.vertex_uv[0], Vec2::new(0.0, 0.0));
        assert_eq!(t.vertex_uv[3], Vec2::new(0.0, 1.0));
    }

    #[test]
    fn normalize_weights_keeps_eight_largest() {
        let mut t = unit_quad();
        t.skin_weights[0] = (0..10).map(|j| (j, (j + 1) as f64)).collect();
        t.normalize_weights();
        let w = &t.skin_weights[0];
        assert_eq!(w.len(), MAX_INFLUENCES);
        assert!(w.iter().all(|&(j, _)| j >= 2));
        let sum: f64 = w.iter().map(|x| x.1).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rigid_row_major_round_trip() {
        let t = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7)
            .compose(&RigidTransform::from_translation(Vec3::new(0.1, -0.2, 0.3)));
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(t, back);
        let p = Vec3::new(0.3, 0.4, -1.0);
        let q = t.inverse().apply_point(&t.apply_point(&p));
        assert!((p - q).norm() < 1e-12);
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 1.0, 3.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            40.0,
            64,
            48,
        )
        .unwrap();
        let (px, z) = cam.project(&Vec3::new(0.0, 1.0, 0.0));
        assert!((z - 3.0).abs() < 1e-12);
        assert!((px.x - 31.5).abs() < 1e-9 && (px.y - 23.5).abs() < 1e-9);
        // +y world is up, so it projects above the center.
        let (up, _) = cam.project(&Vec3::new(0.0, 1.5, 0.0));
        assert!(up.y < 23.5);
        assert!((cam.center() - Vec3::new(0.0, 1.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn bilinear_taps_at_texel_center() {
        let m = TexelMap::zeros(4, 1, TexelKind::Color);
        let taps = m.bilinear_taps(&m.texel_uv(5));
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(taps.iter().any(|&(i, w)| i == 5 && (w - 1.0).abs() < 1e-12));
    }
}
