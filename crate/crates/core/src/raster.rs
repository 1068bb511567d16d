//! Triangle rasterization in texel space (UV atlas) and image space.
//!
//! Both rasterizers sample at texel/pixel centers and use a top-left fill
//! rule, so a point on an edge shared by two triangles is owned by exactly
//! one of them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::VertexTransforms;
use crate::mesh::{face_normals, vertex_normals};
use crate::scene::{Camera, Mat3, SkinnedTemplate, TexelKind, TexelMap, Vec2, Vec3};

/// Near clipping plane in meters (camera-space z).
pub const NEAR_PLANE: f64 = 0.01;

/// Edge function; positive when `p` is left of `a → b` in a y-down frame.
/// Evaluated from a canonical endpoint order so that `edge(a, b, p)` is
/// exactly `-edge(b, a, p)` in floating point.
#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    let raw = |a: &Vec2, b: &Vec2| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (a.x, a.y) <= (b.x, b.y) {
        raw(a, b)
    } else {
        -raw(b, a)
    }
}

/// Top-left ownership of an edge for positively oriented triangles.
#[inline]
fn owns_edge(a: &Vec2, b: &Vec2) -> bool {
    let dy = b.y - a.y;
    dy > 0.0 || (dy == 0.0 && b.x < a.x)
}

/// Barycentric coordinates of `p` in the 2D triangle, or `None` when `p`
/// is outside or on an edge not owned by this triangle.
fn covered_barycentric(tri: &[Vec2; 3], p: &Vec2) -> Option<[f64; 3]> {
    let [a, mut b, mut c] = *tri;
    let mut area = edge(&a, &b, &c);
    let mut swapped = false;
    if area < 0.0 {
        std::mem::swap(&mut b, &mut c);
        area = -area;
        swapped = true;
    }
    if area <= 0.0 || !area.is_finite() {
        return None;
    }
    let w0 = edge(&b, &c, p);
    let w1 = edge(&c, &a, p);
    let w2 = edge(&a, &b, p);
    let inside = |w: f64, s: &Vec2, e: &Vec2| w > 0.0 || (w == 0.0 && owns_edge(s, e));
    if !(inside(w0, &b, &c) && inside(w1, &c, &a) && inside(w2, &a, &b)) {
        return None;
    }
    let (l0, l1, l2) = (w0 / area, w1 / area, w2 / area);
    Some(if swapped { [l0, l2, l1] } else { [l0, l1, l2] })
}

fn bbox(tri: &[Vec2; 3], width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let minx = tri.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let maxx = tri.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor();
    let miny = tri.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let maxy = tri.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor();
    if !(minx.is_finite() && maxx.is_finite() && miny.is_finite() && maxy.is_finite()) {
        return None;
    }
    if maxx < 0.0 || maxy < 0.0 || minx > (width - 1) as f64 || miny > (height - 1) as f64 || minx > maxx || miny > maxy {
        return None;
    }
    Some((
        minx as usize,
        (maxx as usize).min(width - 1),
        miny as usize,
        (maxy as usize).min(height - 1),
    ))
}

/// Which triangle covers each texel, and where.
#[derive(Clone, Debug, PartialEq)]
pub struct TexelCoverage {
    pub resolution: usize,
    pub face: Vec<Option<u32>>,
    pub barycentric: Vec<[f64; 3]>,
}

impl TexelCoverage {
    /// Rasterizes the UV triangles of `t`. Later triangles win on overlap.
    pub fn new(t: &SkinnedTemplate, resolution: usize) -> Result<Self> {
        let n = resolution * resolution;
        let mut face = vec![None; n];
        let mut barycentric = vec![[0.0; 3]; n];
        let r = resolution as f64;
        for (fi, corners) in t.uv_coords.iter().enumerate() {
            // Texel centers sit at half-integers; shift so they are integers.
            let tri = corners.map(|uv| Vec2::new(uv.x * r - 0.5, uv.y * r - 0.5));
            let Some((x0, x1, y0, y1)) = bbox(&tri, resolution, resolution) else {
                continue;
            };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some(b) = covered_barycentric(&tri, &Vec2::new(x as f64, y as f64)) {
                        let i = y * resolution + x;
                        face[i] = Some(fi as u32);
                        barycentric[i] = b;
                    }
                }
            }
        }
        if face.iter().all(|f| f.is_none()) {
            return Err(Error::EmptyChart);
        }
        Ok(Self {
            resolution,
            face,
            barycentric,
        })
    }

    pub fn covered(&self) -> usize {
        self.face.iter().filter(|f| f.is_some()).count()
    }

    /// Validity mask `M_G`.
    pub fn mask(&self) -> TexelMap {
        let data = self.face.iter().map(|f| if f.is_some() { 1.0 } else { 0.0 }).collect();
        TexelMap {
            resolution: self.resolution,
            channels: 1,
            kind: TexelKind::Mask,
            data,
        }
    }

    /// Barycentric interpolation of a per-vertex attribute with `channels`
    /// values per vertex.
    pub fn interpolate(&self, t: &SkinnedTemplate, values: &[f64], channels: usize, kind: TexelKind) -> TexelMap {
        let mut out = TexelMap::zeros(self.resolution, channels, kind);
        out.data.par_chunks_mut(channels).enumerate().for_each(|(i, texel)| {
            if let Some(f) = self.face[i] {
                let tri = t.triangles[f as usize];
                let b = self.barycentric[i];
                for (c, slot) in texel.iter_mut().enumerate() {
                    let v: f64 = (0..3).map(|k| b[k] * values[tri[k] * channels + c]).sum();
                    *slot = v as f32;
                }
            }
        });
        out
    }

    /// Per-texel interpolated 3D positions in f64 (`None` off-chart).
    pub fn interpolate_points(&self, t: &SkinnedTemplate, positions: &[Vec3]) -> Vec<Option<Vec3>> {
        (0..self.face.len())
            .into_par_iter()
            .map(|i| {
                self.face[i].map(|f| {
                    let tri = t.triangles[f as usize];
                    let b = self.barycentric[i];
                    positions[tri[0]] * b[0] + positions[tri[1]] * b[1] + positions[tri[2]] * b[2]
                })
            })
            .collect()
    }

    /// Per-face attribute broadcast over the texels of each face.
    pub fn per_face(&self, values: &[Vec3], kind: TexelKind) -> TexelMap {
        let mut out = TexelMap::zeros(self.resolution, 3, kind);
        for (i, f) in self.face.iter().enumerate() {
            if let Some(f) = f {
                out.set_vec3(i, &values[*f as usize]);
            }
        }
        out
    }
}

/// Attributes that [`rasterize_texel_geometry`] can produce.
#[derive(Clone, Copy, Debug)]
pub enum TexelAttribute<'a> {
    /// World position `T_P`.
    Position,
    /// Face normal `T_N`.
    FaceNormal,
    /// Smooth area-weighted vertex normal.
    SmoothNormal,
    /// Camera-space depth `T_D` for one view.
    Depth(&'a Camera),
    /// Pixel coordinates `T_xy` for one view.
    ImageCoords(&'a Camera),
    /// 12-channel blended LBS transform `T_LBS`.
    Lbs(&'a VertexTransforms),
    /// Deformed canonical position `T_{T_D(D,V̄)}`.
    DeformedCanonical(&'a [Vec3]),
    /// Per-vertex scale ratio `T_s'`.
    ScaleRatio(&'a [f64]),
    /// Validity mask `M_G`.
    Mask,
}

/// Rasterizes each requested attribute of the mesh with vertex positions
/// `world_positions` into texel space.
pub fn rasterize_texel_geometry(
    t: &SkinnedTemplate,
    coverage: &TexelCoverage,
    world_positions: &[Vec3],
    attributes: &[TexelAttribute<'_>],
) -> Result<Vec<TexelMap>> {
    let nv = t.vertex_count();
    if world_positions.len() != nv {
        return Err(Error::LengthMismatch {
            expected: nv,
            got: world_positions.len(),
        });
    }
    let mut points: Option<Vec<Option<Vec3>>> = None;
    let mut out = Vec::with_capacity(attributes.len());
    for attr in attributes {
        let map = match attr {
            TexelAttribute::Position => {
                let flat: Vec<f64> = world_positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                coverage.interpolate(t, &flat, 3, TexelKind::Position)
            }
            TexelAttribute::FaceNormal => coverage.per_face(&face_normals(world_positions, &t.triangles), TexelKind::Normal),
            TexelAttribute::SmoothNormal => {
                let normals = vertex_normals(world_positions, &t.triangles)?;
                let flat: Vec<f64> = normals.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                let mut m = coverage.interpolate(t, &flat, 3, TexelKind::Normal);
                for i in 0..m.texel_count() {
                    let n = m.vec3(i);
                    if n.norm() > 0.0 {
                        m.set_vec3(i, &n.normalize());
                    }
                }
                m
            }
            TexelAttribute::Depth(cam) | TexelAttribute::ImageCoords(cam) => {
                let pts = points.get_or_insert_with(|| coverage.interpolate_points(t, world_positions));
                let depth = matches!(attr, TexelAttribute::Depth(_));
                let channels = if depth { 1 } else { 2 };
                let kind = if depth { TexelKind::Depth } else { TexelKind::ImageCoords };
                let mut m = TexelMap::zeros(coverage.resolution, channels, kind);
                m.data.par_chunks_mut(channels).zip(pts.par_iter()).for_each(|(texel, p)| {
                    if let Some(p) = p {
                        let c = cam.to_camera(p);
                        if depth {
                            texel[0] = c.z as f32;
                        } else {
                            let px = cam.camera_to_pixel(&c);
                            texel[0] = px.x as f32;
                            texel[1] = px.y as f32;
                        }
                    }
                });
                m
            }
            TexelAttribute::Lbs(xf) => {
                if xf.per_vertex.len() != nv {
                    return Err(Error::LengthMismatch {
                        expected: nv,
                        got: xf.per_vertex.len(),
                    });
                }
                let flat: Vec<f64> = xf.per_vertex.iter().flat_map(|a| a.to_array()).collect();
                coverage.interpolate(t, &flat, 12, TexelKind::LbsTransform)
            }
            TexelAttribute::DeformedCanonical(pos) => {
                if pos.len() != nv {
                    return Err(Error::LengthMismatch {
                        expected: nv,
                        got: pos.len(),
                    });
                }
                let flat: Vec<f64> = pos.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                coverage.interpolate(t, &flat, 3, TexelKind::Position)
            }
            TexelAttribute::ScaleRatio(s) => {
                if s.len() != nv {
                    return Err(Error::LengthMismatch {
                        expected: nv,
                        got: s.len(),
                    });
                }
                coverage.interpolate(t, s, 1, TexelKind::ScaleRatio)
            }
            TexelAttribute::Mask => coverage.mask(),
        };
        out.push(map);
    }
    Ok(out)
}

/// Per-texel surface tangents `∂P/∂u / R` and `∂P/∂v / R`: the 3D offset
/// of moving one texel along each atlas axis, constant per triangle.
pub fn texel_tangents(t: &SkinnedTemplate, coverage: &TexelCoverage, positions: &[Vec3]) -> (TexelMap, TexelMap) {
    let r = coverage.resolution as f64;
    let per_face: Vec<(Vec3, Vec3)> = t
        .triangles
        .iter()
        .zip(&t.uv_coords)
        .map(|(tri, uv)| {
            let e1 = positions[tri[1]] - positions[tri[0]];
            let e2 = positions[tri[2]] - positions[tri[0]];
            let d1 = uv[1] - uv[0];
            let d2 = uv[2] - uv[0];
            let det = d1.x * d2.y - d2.x * d1.y;
            if det.abs() < 1e-300 {
                return (Vec3::zeros(), Vec3::zeros());
            }
            // [e1 e2] = [dP/du dP/dv] [d1 d2]
            let du = (e1 * d2.y - e2 * d1.y) / det;
            let dv = (e2 * d1.x - e1 * d2.x) / det;
            (du / r, dv / r)
        })
        .collect();
    let us: Vec<Vec3> = per_face.iter().map(|p| p.0).collect();
    let vs: Vec<Vec3> = per_face.iter().map(|p| p.1).collect();
    (
        coverage.per_face(&us, TexelKind::Position),
        coverage.per_face(&vs, TexelKind::Position),
    )
}

/// Per-vertex refining scales: the largest posed/canonical length ratio
/// over incident edges, clamped to at least 1.
pub fn refining_scales(t: &SkinnedTemplate, canonical_deformed: &[Vec3], posed: &[Vec3]) -> Result<Vec<f64>> {
    let nv = t.vertex_count();
    for len in [canonical_deformed.len(), posed.len()] {
        if len != nv {
            return Err(Error::LengthMismatch { expected: nv, got: len });
        }
    }
    if t.edges.len() != nv {
        return Err(Error::InvalidArgument("adjacency not built".into()));
    }
    t.edges
        .iter()
        .map(|edges| {
            let mut s = 1.0f64;
            for &[a, b] in edges {
                let canon = (canonical_deformed[a] - canonical_deformed[b]).norm();
                if canon <= 0.0 {
                    return Err(Error::ZeroLengthEdge(a, b));
                }
                s = s.max((posed[a] - posed[b]).norm() / canon);
            }
            Ok(s)
        })
        .collect()
}

/// Refining scale map `T_s'`.
pub fn render_refining_scale_map(
    t: &SkinnedTemplate,
    coverage: &TexelCoverage,
    canonical_deformed: &[Vec3],
    posed: &[Vec3],
) -> Result<TexelMap> {
    let s = refining_scales(t, canonical_deformed, posed)?;
    Ok(coverage.interpolate(t, &s, 1, TexelKind::ScaleRatio))
}

/// Image-space buffers: color, z-buffer depth in meters and coverage mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Camera-space depth, `f32::INFINITY` where nothing was drawn.
    pub depth: Vec<f32>,
    pub mask: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            depth: vec![f32::INFINITY; width * height],
            mask: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut img = Self::new(width, height, 3);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn covered_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.5).count()
    }
}

/// Surface shading for [`rasterize_image`].
#[derive(Clone, Copy, Debug)]
pub enum Shading<'a> {
    Texture(&'a TexelMap),
    Flat([f32; 3]),
}

struct ClipVertex {
    cam: Vec3,
    uv: Vec2,
}

/// Clips a camera-space polygon against `z >= NEAR_PLANE`.
fn clip_near(poly: Vec<ClipVertex>) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..poly.len() {
        let a = &poly[i];
        let b = &poly[(i + 1) % poly.len()];
        let a_in = a.cam.z >= NEAR_PLANE;
        let b_in = b.cam.z >= NEAR_PLANE;
        if a_in {
            out.push(ClipVertex { cam: a.cam, uv: a.uv });
        }
        if a_in != b_in {
            let s = (NEAR_PLANE - a.cam.z) / (b.cam.z - a.cam.z);
            out.push(ClipVertex {
                cam: a.cam + (b.cam - a.cam) * s,
                uv: a.uv + (b.uv - a.uv) * s,
            });
        }
    }
    out
}

/// Z-buffered perspective rasterization with perspective-correct UVs and
/// bilinear texture lookup. No lighting is applied.
pub fn rasterize_image(t: &SkinnedTemplate, world_positions: &[Vec3], cam: &Camera, shading: Shading<'_>) -> Result<ImageBuffer> {
    cam.validate()?;
    if world_positions.len() != t.vertex_count() {
        return Err(Error::LengthMismatch {
            expected: t.vertex_count(),
            got: world_positions.len(),
        });
    }
    let (w, h) = (cam.width, cam.height);
    let mut img = ImageBuffer::new(w, h, 3);
    let cam_pos: Vec<Vec3> = world_positions.iter().map(|p| cam.to_camera(p)).collect();
    // Depth and the winning (face, uv) per pixel; shading runs afterwards.
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut uv_buf = vec![Vec2::zeros(); w * h];

    for (fi, tri) in t.triangles.iter().enumerate() {
        let uv = t.uv_coords.get(fi).copied().unwrap_or([Vec2::zeros(); 3]);
        let poly = clip_near(
            (0..3)
                .map(|k| ClipVertex {
                    cam: cam_pos[tri[k]],
                    uv: uv[k],
                })
                .collect(),
        );
        if poly.len() < 3 {
            continue;
        }
        for k in 1..poly.len() - 1 {
            let verts = [&poly[0], &poly[k], &poly[k + 1]];
            let screen = verts.map(|v| cam.camera_to_pixel(&v.cam));
            let inv_z = verts.map(|v| 1.0 / v.cam.z);
            let Some((x0, x1, y0, y1)) = bbox(&screen, w, h) else {
                continue;
            };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let Some(b) = covered_barycentric(&screen, &Vec2::new(x as f64, y as f64)) else {
                        continue;
                    };
                    let iz = b[0] * inv_z[0] + b[1] * inv_z[1] + b[2] * inv_z[2];
                    let z = 1.0 / iz;
                    let i = y * w + x;
                    if z < zbuf[i] {
                        zbuf[i] = z;
                        let mut uv = Vec2::zeros();
                        for j in 0..3 {
                            uv += verts[j].uv * (b[j] * inv_z[j]);
                        }
                        uv_buf[i] = uv / iz;
                    }
                }
            }
        }
    }

    img.data.par_chunks_mut(3).enumerate().for_each(|(i, px)| {
        if zbuf[i].is_finite() {
            match shading {
                Shading::Flat(c) => px.copy_from_slice(&c),
                Shading::Texture(tex) => {
                    let mut c = [0.0f64; 3];
                    tex.sample_bilinear(&uv_buf[i], &mut c[..tex.channels.min(3)]);
                    for k in 0..3 {
                        px[k] = c[k] as f32;
                    }
                }
            }
        }
    });
    for i in 0..w * h {
        if zbuf[i].is_finite() {
            img.depth[i] = zbuf[i] as f32;
            img.mask[i] = 1.0;
        }
    }
    Ok(img)
}

/// Gram-Schmidt orthonormalization of the columns of `m`, returning a proper
/// rotation (determinant +1).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let c0 = m.column(0).into_owned();
    let c1 = m.column(1).into_owned();
    let x = c0.normalize();
    let y = (c1 - x * x.dot(&c1)).normalize();
    let z = x.cross(&y);
    Mat3::from_columns(&[x, y, z])
}
