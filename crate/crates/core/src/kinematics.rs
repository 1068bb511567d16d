//! Forward kinematics and linear blend skinning.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{root_joint, Joint, Mat3, MotionFrame, RigidTransform, SkinnedTemplate, TexelKind, TexelMap, Vec2, Vec3};

/// General 3×4 affine transform `x ↦ A x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            linear: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn zero() -> Self {
        Self {
            linear: Mat3::zeros(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    pub fn add_scaled(&mut self, other: &Affine, w: f64) {
        self.linear += other.linear * w;
        self.translation += other.translation * w;
    }

    /// Row-major 3×4 as 12 values.
    pub fn to_array(&self) -> [f64; 12] {
        let l = &self.linear;
        let t = &self.translation;
        [
            l[(0, 0)],
            l[(0, 1)],
            l[(0, 2)],
            t.x,
            l[(1, 0)],
            l[(1, 1)],
            l[(1, 2)],
            t.y,
            l[(2, 0)],
            l[(2, 1)],
            l[(2, 2)],
            t.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            linear: Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vec3::new(v[3], v[7], v[11]),
        }
    }
}

impl From<RigidTransform> for Affine {
    fn from(r: RigidTransform) -> Self {
        Self {
            linear: r.rotation,
            translation: r.translation,
        }
    }
}

/// Per-vertex blended skinning transforms (`T_LBS` evaluated at vertices).
#[derive(Clone, Debug, PartialEq)]
pub struct VertexTransforms {
    pub per_vertex: Vec<Affine>,
}

/// Joint skinning matrices `world_j · canonical_j⁻¹`.
pub fn skinning_matrices(joints: &[Joint], m: &MotionFrame) -> Result<Vec<RigidTransform>> {
    if m.joint_transforms.len() != joints.len() {
        return Err(Error::JointCountMismatch {
            motion: m.joint_transforms.len(),
            skeleton: joints.len(),
        });
    }
    Ok(joints
        .iter()
        .zip(&m.joint_transforms)
        .map(|(j, world)| world.compose(&j.canonical.inverse()))
        .collect())
}

pub fn lbs_transforms(t: &SkinnedTemplate, m: &MotionFrame) -> Result<VertexTransforms> {
    let skin = skinning_matrices(&t.joints, m)?;
    let per_vertex = t
        .skin_weights
        .par_iter()
        .map(|weights| {
            if let [(j, w)] = weights.as_slice() {
                if *w == 1.0 {
                    return Affine::from(skin[*j]);
                }
            }
            let mut acc = Affine::zero();
            for &(j, w) in weights {
                acc.add_scaled(&Affine::from(skin[j]), w);
            }
            acc
        })
        .collect();
    Ok(VertexTransforms { per_vertex })
}

/// Canonical UV per vertex, taken from `vertex_uv` when adjacency has been
/// built and from the first referencing corner otherwise.
pub fn vertex_uvs(t: &SkinnedTemplate) -> Vec<Vec2> {
    if t.vertex_uv.len() == t.vertices.len() {
        return t.vertex_uv.clone();
    }
    let mut out: Vec<Option<Vec2>> = vec![None; t.vertices.len()];
    for (tri, corners) in t.triangles.iter().zip(&t.uv_coords) {
        for k in 0..3 {
            if let Some(slot) = out.get_mut(tri[k]) {
                slot.get_or_insert(corners[k]);
            }
        }
    }
    out.into_iter().map(|v| v.unwrap_or_else(Vec2::zeros)).collect()
}

/// Deformed canonical vertices `V̄ + π_uv(V̄, D)` with bilinear lookup of `D`.
pub fn deformed_canonical(t: &SkinnedTemplate, d: Option<&TexelMap>) -> Result<Vec<Vec3>> {
    let Some(d) = d else {
        return Ok(t.vertices.clone());
    };
    d.expect(TexelKind::Deformation, 3)?;
    let uvs = vertex_uvs(t);
    Ok(t.vertices.iter().zip(&uvs).map(|(v, uv)| v + d.sample_vec3(uv)).collect())
}

/// Applies per-vertex transforms to a list of canonical positions.
pub fn apply_transforms(xf: &VertexTransforms, canonical: &[Vec3]) -> Result<Vec<Vec3>> {
    if xf.per_vertex.len() != canonical.len() {
        return Err(Error::LengthMismatch {
            expected: xf.per_vertex.len(),
            got: canonical.len(),
        });
    }
    Ok(xf
        .per_vertex
        .par_iter()
        .zip(canonical.par_iter())
        .map(|(a, p)| a.apply(p))
        .collect())
}

/// World-space vertices `V(M, D)`.
pub fn pose_vertices(t: &SkinnedTemplate, m: &MotionFrame, d: Option<&TexelMap>) -> Result<Vec<Vec3>> {
    let xf = lbs_transforms(t, m)?;
    let canonical = deformed_canonical(t, d)?;
    apply_transforms(&xf, &canonical)
}

/// Replaces the root joint's world rotation with the identity, keeping its
/// translation and every joint's pose relative to the root.
pub fn strip_root_rotation(joints: &[Joint], m: &MotionFrame) -> Result<MotionFrame> {
    let root = root_joint(joints).ok_or(Error::MissingRoot)?;
    if m.joint_transforms.len() != joints.len() {
        return Err(Error::JointCountMismatch {
            motion: m.joint_transforms.len(),
            skeleton: joints.len(),
        });
    }
    let root_world = m.joint_transforms[root];
    let new_root = RigidTransform::from_translation(root_world.translation);
    let correction = new_root.compose(&root_world.inverse());
    let joint_transforms = m
        .joint_transforms
        .iter()
        .enumerate()
        .map(|(j, w)| if j == root { new_root } else { correction.compose(w) })
        .collect();
    Ok(MotionFrame {
        frame_index: m.frame_index,
        joint_transforms,
    })
}

/// Computes world transforms from per-joint local transforms (relative to
/// the parent's world frame). Joints must be ordered parents-first.
pub fn forward_kinematics(joints: &[Joint], local: &[RigidTransform]) -> Result<Vec<RigidTransform>> {
    if local.len() != joints.len() {
        return Err(Error::JointCountMismatch {
            motion: local.len(),
            skeleton: joints.len(),
        });
    }
    let mut world: Vec<RigidTransform> = Vec::with_capacity(joints.len());
    for (j, joint) in joints.iter().enumerate() {
        let w = match joint.parent {
            Some(p) if p < j => world[p].compose(&local[j]),
            Some(p) => return Err(Error::InvalidArgument(format!("joint {j} has parent {p} declared after it"))),
            None => local[j],
        };
        world.push(w);
    }
    Ok(world)
}

/// Local transforms that reproduce the canonical pose under [`forward_kinematics`].
pub fn canonical_locals(joints: &[Joint]) -> Vec<RigidTransform> {
    joints
        .iter()
        .map(|j| match j.parent {
            Some(p) => joints[p].canonical.inverse().compose(&j.canonical),
            None => j.canonical,
        })
        .collect()
}
