//! Mesh utilities: normals, surface sampling, and procedural primitives
//! used by the synthetic scenes and the tests.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::{Joint, RigidTransform, SkinnedTemplate, Vec2, Vec3};

/// Unit face normals; degenerate faces get a zero normal.
pub fn face_normals(positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    triangles
        .iter()
        .map(|t| {
            let n = (positions[t[1]] - positions[t[0]]).cross(&(positions[t[2]] - positions[t[0]]));
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// Sum of unnormalized face normals (twice the area-weighted normal) per vertex.
pub fn vertex_normal_sums(positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut sums = vec![Vec3::zeros(); positions.len()];
    for t in triangles {
        let n = (positions[t[1]] - positions[t[0]]).cross(&(positions[t[2]] - positions[t[0]]));
        for &v in t {
            sums[v] += n;
        }
    }
    sums
}

/// Smooth area-weighted unit vertex normals. Vertices not referenced by any
/// triangle get a zero normal.
pub fn vertex_normals(positions: &[Vec3], triangles: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let mut referenced = vec![false; positions.len()];
    for t in triangles {
        for &v in t {
            referenced[v] = true;
        }
    }
    vertex_normal_sums(positions, triangles)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let len = s.norm();
            if len > 1e-300 {
                Ok(s / len)
            } else if referenced[i] {
                Err(Error::ZeroAreaStar(i))
            } else {
                Ok(Vec3::zeros())
            }
        })
        .collect()
}

/// Draws `count` points uniformly by area over the triangle soup.
pub fn sample_surface<R: Rng>(positions: &[Vec3], triangles: &[[usize; 3]], count: usize, rng: &mut R) -> Vec<Vec3> {
    let mut cdf = Vec::with_capacity(triangles.len());
    let mut total = 0.0;
    for t in triangles {
        let a = 0.5
            * (positions[t[1]] - positions[t[0]])
                .cross(&(positions[t[2]] - positions[t[0]]))
                .norm();
        total += a;
        cdf.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let f = cdf.partition_point(|&c| c < r).min(triangles.len() - 1);
            let t = triangles[f];
            let (mut s, mut q) = (rng.gen::<f64>(), rng.gen::<f64>());
            if s + q > 1.0 {
                s = 1.0 - s;
                q = 1.0 - q;
            }
            positions[t[0]] + (positions[t[1]] - positions[t[0]]) * s + (positions[t[2]] - positions[t[0]]) * q
        })
        .collect()
}

fn single_joint() -> Vec<Joint> {
    vec![Joint {
        name: "root".into(),
        parent: None,
        canonical: RigidTransform::identity(),
    }]
}

/// Flat `nx × ny` quad grid in the z = 0 plane spanning `[0,w]×[0,h]`,
/// UV-mapped onto the full atlas, rigidly bound to one joint.
pub fn grid_patch(nx: usize, ny: usize, w: f64, h: f64) -> SkinnedTemplate {
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec3::new(w * i as f64 / nx as f64, h * j as f64 / ny as f64, 0.0));
        }
    }
    let uv = |i: usize, j: usize| Vec2::new(i as f64 / nx as f64, j as f64 / ny as f64);
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::new();
    let mut uv_coords = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            uv_coords.push([uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            uv_coords.push([uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)]);
        }
    }
    let n = vertices.len();
    SkinnedTemplate {
        vertices,
        triangles,
        uv_coords,
        joints: single_joint(),
        skin_weights: vec![vec![(0, 1.0)]; n],
        ..Default::default()
    }
}

/// Subdivided icosahedron. UVs are an equirectangular projection clamped
/// into the atlas; they are only meant for adjacency and loss tests.
pub fn icosphere(level: usize, radius: f64) -> SkinnedTemplate {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, p, 0.0),
        (1.0, p, 0.0),
        (-1.0, -p, 0.0),
        (1.0, -p, 0.0),
        (0.0, -1.0, p),
        (0.0, 1.0, p),
        (0.0, -1.0, -p),
        (0.0, 1.0, -p),
        (p, 0.0, -1.0),
        (p, 0.0, 1.0),
        (-p, 0.0, -1.0),
        (-p, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let uv_of = |v: &Vec3| {
        let u = 0.5 + v.z.atan2(v.x) / (2.0 * std::f64::consts::PI);
        let w = 0.5 - v.y.asin() / std::f64::consts::PI;
        Vec2::new(u.clamp(0.0, 1.0), w.clamp(0.0, 1.0))
    };
    let uv_coords = faces
        .iter()
        .map(|f| [uv_of(&verts[f[0]]), uv_of(&verts[f[1]]), uv_of(&verts[f[2]])])
        .collect();
    let n = verts.len();
    SkinnedTemplate {
        vertices: verts.into_iter().map(|v| v * radius).collect(),
        triangles: faces,
        uv_coords,
        joints: single_joint(),
        skin_weights: vec![vec![(0, 1.0)]; n],
        ..Default::default()
    }
}

/// Shape of a vertical capsule: a cylinder of `radius` between heights
/// `bottom` and `top` closed by hemispheres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapsuleShape {
    pub radius: f64,
    pub bottom: f64,
    pub top: f64,
    pub segments: usize,
    pub rings: usize,
}

impl CapsuleShape {
    /// Arc length of the profile curve from the bottom pole to the top pole.
    pub fn profile_length(&self) -> f64 {
        std::f64::consts::PI * self.radius + (self.top - self.bottom)
    }

    /// Point on the profile at arc length `s`: `(height, distance from axis)`.
    pub fn profile(&self, s: f64) -> (f64, f64) {
        let r = self.radius;
        let cap = 0.5 * std::f64::consts::PI * r;
        let cyl = self.top - self.bottom;
        if s <= cap {
            let phi = s / r;
            (self.bottom - r * phi.cos(), r * phi.sin())
        } else if s <= cap + cyl {
            (self.bottom + (s - cap), r)
        } else {
            let phi = (s - cap - cyl) / r;
            (self.top + r * phi.sin(), r * phi.cos())
        }
    }
}

/// Capsule around the y axis. Rings are spaced uniformly in profile arc
/// length; the atlas is the full unit square with `u` around the axis and
/// `v` along the profile. Skin weights are left empty.
pub fn capsule(shape: &CapsuleShape) -> SkinnedTemplate {
    let n = shape.segments;
    let rings = shape.rings;
    let total = shape.profile_length();
    let mut vertices = vec![Vec3::new(0.0, shape.bottom - shape.radius, 0.0)];
    for k in 1..rings {
        let (y, rho) = shape.profile(total * k as f64 / rings as f64);
        for i in 0..n {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            vertices.push(Vec3::new(rho * theta.cos(), y, rho * theta.sin()));
        }
    }
    let top_pole = vertices.len();
    vertices.push(Vec3::new(0.0, shape.top + shape.radius, 0.0));

    let ring_vertex = |k: usize, i: usize| 1 + (k - 1) * n + (i % n);
    let uv = |k: usize, i: usize| Vec2::new(i as f64 / n as f64, k as f64 / rings as f64);
    let mut triangles = Vec::new();
    let mut uv_coords = Vec::new();
    for i in 0..n {
        let pole_uv = Vec2::new((i as f64 + 0.5) / n as f64, 0.0);
        triangles.push([0, ring_vertex(1, i), ring_vertex(1, i + 1)]);
        uv_coords.push([pole_uv, uv(1, i), uv(1, i + 1)]);
    }
    for k in 1..rings - 1 {
        for i in 0..n {
            let (a, b) = (ring_vertex(k, i), ring_vertex(k, i + 1));
            let (c, d) = (ring_vertex(k + 1, i), ring_vertex(k + 1, i + 1));
            triangles.push([a, c, b]);
            uv_coords.push([uv(k, i), uv(k + 1, i), uv(k, i + 1)]);
            triangles.push([b, c, d]);
            uv_coords.push([uv(k, i + 1), uv(k + 1, i), uv(k + 1, i + 1)]);
        }
    }
    for i in 0..n {
        let pole_uv = Vec2::new((i as f64 + 0.5) / n as f64, 1.0);
        triangles.push([top_pole, ring_vertex(rings - 1, i + 1), ring_vertex(rings - 1, i)]);
        uv_coords.push([pole_uv, uv(rings - 1, i + 1), uv(rings - 1, i)]);
    }
    SkinnedTemplate {
        vertices,
        triangles,
        uv_coords,
        ..Default::default()
    }
}

/// Signed volume of a closed mesh; positive for outward-facing winding.
pub fn signed_volume(positions: &[Vec3], triangles: &[[usize; 3]]) -> f64 {
    triangles
        .iter()
        .map(|t| positions[t[0]].dot(&positions[t[1]].cross(&positions[t[2]])) / 6.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_adjacency, validate_template};
    use rand::SeedableRng;

    #[test]
    fn icosphere_level1_valence() {
        let t = build_adjacency(&icosphere(1, 1.0)).unwrap();
        assert_eq!(t.vertex_count(), 42);
        // Brute force: count distinct vertices sharing a triangle with each vertex.
        for v in 0..t.vertex_count() {
            let mut ring: Vec<usize> = t
                .triangles
                .iter()
                .filter(|f| f.contains(&v))
                .flat_map(|f| f.iter().copied())
                .filter(|&u| u != v)
                .collect();
            ring.sort();
            ring.dedup();
            assert!(ring.len() == 5 || ring.len() == 6);
            assert_eq!(ring, t.vertex_neighbors[v]);
        }
    }

    #[test]
    fn closed_mesh_edge_count_identity() {
        for t in [
            icosphere(2, 1.0),
            capsule(&CapsuleShape {
                radius: 0.1,
                bottom: 0.0,
                top: 0.5,
                segments: 12,
                rings: 10,
            }),
        ] {
            let t = build_adjacency(&t).unwrap();
            let total: usize = t.edges.iter().map(|e| e.len()).sum();
            assert_eq!(total, 2 * t.unique_edges().len());
            // Euler characteristic of a sphere.
            assert_eq!(
                t.vertex_count() as i64 - t.unique_edges().len() as i64 + t.triangles.len() as i64,
                2
            );
        }
    }

    #[test]
    fn adjacency_is_idempotent() {
        let t = build_adjacency(&icosphere(1, 1.0)).unwrap();
        assert_eq!(build_adjacency(&t).unwrap(), t);
    }

    #[test]
    fn capsule_is_outward_and_valid() {
        let shape = CapsuleShape {
            radius: 0.1,
            bottom: 0.2,
            top: 0.8,
            segments: 16,
            rings: 12,
        };
        let mut t = capsule(&shape);
        t.joints = single_joint();
        t.skin_weights = vec![vec![(0, 1.0)]; t.vertex_count()];
        assert!(validate_template(&t).is_empty());
        let vol = signed_volume(&t.vertices, &t.triangles);
        let exact = std::f64::consts::PI * 0.01 * 0.6 + 4.0 / 3.0 * std::f64::consts::PI * 0.001;
        assert!(vol > 0.0 && (vol - exact).abs() / exact < 0.05);
    }

    #[test]
    fn planar_normals() {
        let t = grid_patch(3, 3, 1.0, 1.0);
        for n in vertex_normals(&t.vertices, &t.triangles).unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_area_star_detected() {
        let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        let r = vertex_normals(&verts, &[[0, 1, 2]]);
        assert!(matches!(r, Err(Error::ZeroAreaStar(0))));
    }

    #[test]
    fn surface_samples_lie_on_patch() {
        let t = grid_patch(4, 2, 2.0, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts = sample_surface(&t.vertices, &t.triangles, 500, &mut rng);
        assert_eq!(pts.len(), 500);
        for p in pts {
            assert!(p.z == 0.0 && (0.0..=2.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        }
    }
}
