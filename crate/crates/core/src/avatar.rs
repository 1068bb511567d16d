//! Per-texel Gaussian parameter maps, the reference appearance predictor,
//! posing into world space and spherical-harmonic color decoding.

use nalgebra::{Rotation3, UnitQuaternion};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::Affine;
use crate::raster::orthonormalize;
use crate::scene::{Mat3, TexelKind, TexelMap, Vec3};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const MAX_SH_DEGREE: usize = 2;

/// Basis functions per color channel for an SH degree.
pub fn sh_coefficients(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates RGB from SH coefficients laid out as `[basis][channel]`, with
/// the +0.5 offset so zero coefficients give mid-gray. Clamped to [0,1].
pub fn decode_color(h: &[f64], degree: usize, view_dir: &Vec3) -> Result<[f64; 3]> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::InvalidArgument(format!("SH degree {degree} above {MAX_SH_DEGREE}")));
    }
    let expected = 3 * sh_coefficients(degree);
    if h.len() != expected {
        return Err(Error::ShDegreeMismatch { expected, got: h.len() });
    }
    let (x, y, z) = (view_dir.x, view_dir.y, view_dir.z);
    let mut basis = [0.0f64; 9];
    basis[0] = SH_C0;
    if degree >= 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (x * x - y * y);
    }
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().take(sh_coefficients(degree)).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * h[3 * k + c];
        }
    }
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}

/// DC coefficient that decodes to `color`.
pub fn dc_from_color(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}

/// Per-texel Gaussian parameters plus the validity mask. Channel layout:
/// displacement (3), SH coefficients (3·(deg+1)²), log-scale (3),
/// rotation quaternion w,x,y,z (4), opacity (1).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamMap {
    pub params: TexelMap,
    pub mask: TexelMap,
    pub sh_degree: usize,
}

impl GaussianParamMap {
    pub fn channels_for(sh_degree: usize) -> usize {
        3 + 3 * sh_coefficients(sh_degree) + 3 + 4 + 1
    }

    pub fn new(resolution: usize, sh_degree: usize) -> Self {
        Self {
            params: TexelMap::zeros(resolution, Self::channels_for(sh_degree), TexelKind::GaussianParams),
            mask: TexelMap::zeros(resolution, 1, TexelKind::Mask),
            sh_degree,
        }
    }

    /// Wraps a stored parameter map, inferring the SH degree from its channel count.
    pub fn from_maps(params: TexelMap, mask: TexelMap) -> Result<Self> {
        if params.kind != TexelKind::GaussianParams {
            return Err(Error::WrongKind {
                expected: TexelKind::GaussianParams.name(),
                got: params.kind.name().to_string(),
            });
        }
        if params.resolution != mask.resolution {
            return Err(Error::ResolutionMismatch(params.resolution, mask.resolution));
        }
        let sh_degree = (0..=MAX_SH_DEGREE)
            .find(|&d| Self::channels_for(d) == params.channels)
            .ok_or_else(|| Error::DimensionMismatch(format!("{} channels match no SH degree", params.channels)))?;
        Ok(Self { params, mask, sh_degree })
    }

    pub fn resolution(&self) -> usize {
        self.params.resolution
    }

    fn sh_offset(&self) -> usize {
        3
    }

    fn scale_offset(&self) -> usize {
        3 + 3 * sh_coefficients(self.sh_degree)
    }

    fn rotation_offset(&self) -> usize {
        self.scale_offset() + 3
    }

    fn opacity_offset(&self) -> usize {
        self.rotation_offset() + 4
    }

    pub fn valid(&self, i: usize) -> bool {
        self.mask.data[i] >= 0.5
    }

    pub fn displacement(&self, i: usize) -> Vec3 {
        let t = self.params.texel(i);
        Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64)
    }

    pub fn sh(&self, i: usize) -> Vec<f64> {
        let o = self.sh_offset();
        self.params.texel(i)[o..o + 3 * sh_coefficients(self.sh_degree)]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        let t = &self.params.texel(i)[self.scale_offset()..];
        Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64)
    }

    /// Raw quaternion `(w, x, y, z)`.
    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let t = &self.params.texel(i)[self.rotation_offset()..];
        [t[0] as f64, t[1] as f64, t[2] as f64, t[3] as f64]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.params.texel(i)[self.opacity_offset()] as f64
    }

    pub fn set_displacement(&mut self, i: usize, d: &Vec3) {
        let t = self.params.texel_mut(i);
        t[0] = d.x as f32;
        t[1] = d.y as f32;
        t[2] = d.z as f32;
    }

    pub fn set_sh(&mut self, i: usize, h: &[f64]) {
        let o = self.sh_offset();
        for (dst, &v) in self.params.texel_mut(i)[o..].iter_mut().zip(h) {
            *dst = v as f32;
        }
    }

    pub fn set_log_scale(&mut self, i: usize, s: &Vec3) {
        let o = self.scale_offset();
        let t = &mut self.params.texel_mut(i)[o..o + 3];
        t.copy_from_slice(&[s.x as f32, s.y as f32, s.z as f32]);
    }

    pub fn set_rotation(&mut self, i: usize, q: [f64; 4]) {
        let o = self.rotation_offset();
        let t = &mut self.params.texel_mut(i)[o..o + 4];
        for (dst, v) in t.iter_mut().zip(q) {
            *dst = v as f32;
        }
    }

    pub fn set_opacity(&mut self, i: usize, a: f64) {
        let o = self.opacity_offset();
        self.params.texel_mut(i)[o] = a as f32;
    }
}

/// Maps a second-pass texture and a normal map to Gaussian parameters.
pub trait AppearancePredictor {
    fn predict(&self, texture: &TexelMap, normals: &TexelMap) -> Result<GaussianParamMap>;
}

/// Texel-space surface description used by the reference predictor.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceMaps<'a> {
    /// Validity mask `M_G`.
    pub valid: &'a TexelMap,
    /// Number of views that saw each texel.
    pub coverage_count: &'a TexelMap,
    /// Surface offset per texel step along the atlas u and v axes.
    pub du: &'a TexelMap,
    pub dv: &'a TexelMap,
}

/// Deterministic appearance predictor: zero displacement, DC color equal
/// to the fused texel color, disk-shaped Gaussians spanning half the texel
/// footprint in the tangent plane and a tenth of that along the normal.
pub fn reference_appearance(
    texture: &TexelMap,
    normals: &TexelMap,
    surface: &SurfaceMaps<'_>,
    sh_degree: usize,
) -> Result<GaussianParamMap> {
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::InvalidArgument(format!("SH degree {sh_degree} above {MAX_SH_DEGREE}")));
    }
    let r = texture.resolution;
    for m in [normals, surface.valid, surface.coverage_count, surface.du, surface.dv] {
        if m.resolution != r {
            return Err(Error::ResolutionMismatch(r, m.resolution));
        }
    }
    if texture.channels < 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: texture.channels,
        });
    }
    let mut out = GaussianParamMap::new(r, sh_degree);
    out.mask = surface.valid.clone();
    let per_texel: Vec<Option<([f64; 4], Vec3)>> = (0..r * r)
        .into_par_iter()
        .map(|i| {
            if surface.valid.data[i] < 0.5 {
                return None;
            }
            let du = surface.du.vec3(i);
            let dv = surface.dv.vec3(i);
            Some((tangent_frame_quaternion(&du, &dv, &normals.vec3(i)), footprint_log_scale(&du, &dv)))
        })
        .collect();
    let ncoef = 3 * sh_coefficients(sh_degree);
    for (i, frame) in per_texel.into_iter().enumerate() {
        let Some((q, s)) = frame else { continue };
        let c = texture.texel(i);
        let mut h = vec![0.0; ncoef];
        for ch in 0..3 {
            h[ch] = dc_from_color(c[ch] as f64);
        }
        out.set_sh(i, &h);
        out.set_rotation(i, q);
        out.set_log_scale(i, &s);
        out.set_opacity(i, if surface.coverage_count.data[i] > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(out)
}

const MIN_FOOTPRINT: f64 = 1e-6;

fn footprint_log_scale(du: &Vec3, dv: &Vec3) -> Vec3 {
    let f = (0.25 * (du.norm() + dv.norm())).max(MIN_FOOTPRINT);
    Vec3::new(f.ln(), f.ln(), (0.1 * f).ln())
}

/// Quaternion `(w,x,y,z)` of the frame (tangent, bitangent, normal).
fn tangent_frame_quaternion(du: &Vec3, dv: &Vec3, normal: &Vec3) -> [f64; 4] {
    let mut n = *normal;
    if n.norm() < 1e-12 {
        n = du.cross(dv);
    }
    if n.norm() < 1e-12 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let n = n.normalize();
    let mut t = du - n * n.dot(du);
    if t.norm() < 1e-12 {
        t = dv.cross(&n);
    }
    if t.norm() < 1e-12 {
        t = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        t -= n * n.dot(&t);
    }
    let t = t.normalize();
    let b = n.cross(&t);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Mat3::from_columns(&[t, b, n])));
    [q.w, q.i, q.j, q.k]
}

/// Reference predictor bound to one frame's surface maps.
pub struct ReferenceAppearance<'a> {
    pub surface: SurfaceMaps<'a>,
    pub sh_degree: usize,
}

impl AppearancePredictor for ReferenceAppearance<'_> {
    fn predict(&self, texture: &TexelMap, normals: &TexelMap) -> Result<GaussianParamMap> {
        reference_appearance(texture, normals, &self.surface, self.sh_degree)
    }
}

/// World-space Gaussians in texel order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    /// SH coefficients, `3·(deg+1)²` per Gaussian.
    pub sh: Vec<f64>,
    pub sh_degree: usize,
    pub opacities: Vec<f64>,
    /// Source texel index of each Gaussian.
    pub texels: Vec<u32>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let n = 3 * sh_coefficients(self.sh_degree);
        &self.sh[i * n..(i + 1) * n]
    }

    pub fn color(&self, i: usize, view_dir: &Vec3) -> [f64; 3] {
        decode_color(self.sh_of(i), self.sh_degree, view_dir).expect("set stores a consistent SH layout")
    }

    /// Flat binary export: `u32` count, then per Gaussian 13 `f32`:
    /// mean (3), covariance upper triangle xx,xy,xz,yy,yz,zz (6), DC
    /// color (3), opacity (1). Little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.len() * 52);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            let p = self.means[i];
            let c = &self.covariances[i];
            let dc = &self.sh_of(i)[..3];
            let rgb = dc.iter().map(|h| (0.5 + SH_C0 * h).clamp(0.0, 1.0));
            let vals = [p.x, p.y, p.z, c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]]
                .into_iter()
                .chain(rgb)
                .chain([self.opacities[i]]);
            for v in vals {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Reads the flat export back as a degree-0 set.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Parse("truncated Gaussian set".into()));
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + 52 * n {
            return Err(Error::Parse(format!("{} bytes for {n} Gaussians", bytes.len())));
        }
        let mut set = GaussianSet::default();
        for rec in bytes[4..].chunks_exact(52) {
            let v: Vec<f64> = rec
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            set.means.push(Vec3::new(v[0], v[1], v[2]));
            set.covariances
                .push(Mat3::new(v[3], v[4], v[5], v[4], v[6], v[7], v[5], v[7], v[8]));
            set.sh.extend(v[9..12].iter().map(|&c| dc_from_color(c)));
            set.opacities.push(v[12]);
            set.texels.push(set.texels.len() as u32);
        }
        Ok(set)
    }
}

/// Normalized rotation from a stored quaternion.
pub fn quaternion_rotation(q: [f64; 4], texel: usize) -> Result<Mat3> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= 1e-6) {
        return Err(Error::InvalidQuaternion { texel, norm });
    }
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    Ok(uq.to_rotation_matrix().into_inner())
}

/// Poses every valid texel with positive opacity into a world-space
/// Gaussian. `lbs` is the 12-channel blended transform map, `deformed` the
/// deformed canonical surface and `refine` the optional scale-ratio map.
pub fn pose_gaussians(params: &GaussianParamMap, lbs: &TexelMap, deformed: &TexelMap, refine: Option<&TexelMap>) -> Result<GaussianSet> {
    lbs.expect(TexelKind::LbsTransform, 12)?;
    if deformed.channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: deformed.channels,
        });
    }
    let r = params.resolution();
    for m in [lbs, deformed, &params.mask] {
        if m.resolution != r {
            return Err(Error::ResolutionMismatch(r, m.resolution));
        }
    }
    if let Some(s) = refine {
        s.expect(TexelKind::ScaleRatio, 1)?;
        if s.resolution != r {
            return Err(Error::ResolutionMismatch(r, s.resolution));
        }
    }
    let per_texel: Vec<Option<(Vec3, Mat3, f64)>> = (0..r * r)
        .into_par_iter()
        .map(|i| -> Result<Option<(Vec3, Mat3, f64)>> {
            let alpha = params.opacity(i);
            if !params.valid(i) || !(alpha > 0.0) {
                return Ok(None);
            }
            let a = Affine::from_slice(&lbs.texel(i).iter().map(|&v| v as f64).collect::<Vec<_>>());
            let p = a.apply(&(params.displacement(i) + deformed.vec3(i)));
            let rot = orthonormalize(&a.linear) * quaternion_rotation(params.rotation(i), i)?;
            let mut scale = params.log_scale(i).map(f64::exp);
            if let Some(s) = refine {
                let ratio = s.data[i] as f64;
                if !(ratio >= 1.0) {
                    return Err(Error::InvalidArgument(format!("scale ratio {ratio} below 1 at texel {i}")));
                }
                scale *= ratio;
            }
            Ok(Some((p, covariance(&rot, &scale), alpha.min(1.0))))
        })
        .collect::<Result<_>>()?;
    let mut set = GaussianSet {
        sh_degree: params.sh_degree,
        ..Default::default()
    };
    for (i, g) in per_texel.into_iter().enumerate() {
        if let Some((p, cov, alpha)) = g {
            set.means.push(p);
            set.covariances.push(cov);
            set.sh.extend(params.sh(i));
            set.opacities.push(alpha);
            set.texels.push(i as u32);
        }
    }
    Ok(set)
}

/// `R S Sᵀ Rᵀ`, exactly symmetric.
pub fn covariance(rotation: &Mat3, scale: &Vec3) -> Mat3 {
    let m = rotation * Mat3::from_diagonal(scale);
    let c = m * m.transpose();
    (c + c.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::lbs_transforms;
    use crate::mesh::grid_patch;
    use crate::raster::{rasterize_texel_geometry, texel_tangents, TexelAttribute, TexelCoverage};
    use crate::scene::{build_adjacency, MotionFrame, RigidTransform};
    use proptest::prelude::*;

    struct Patch {
        t: crate::scene::SkinnedTemplate,
        coverage: TexelCoverage,
        valid: TexelMap,
        normals: TexelMap,
        du: TexelMap,
        dv: TexelMap,
        deformed: TexelMap,
    }

    fn patch(resolution: usize, pitch: f64) -> Patch {
        let side = pitch * resolution as f64;
        let t = build_adjacency(&grid_patch(4, 4, side, side)).unwrap();
        let coverage = TexelCoverage::new(&t, resolution).unwrap();
        let maps = rasterize_texel_geometry(
            &t,
            &coverage,
            &t.vertices,
            &[
                TexelAttribute::Mask,
                TexelAttribute::SmoothNormal,
                TexelAttribute::DeformedCanonical(&t.vertices),
            ],
        )
        .unwrap();
        let (du, dv) = texel_tangents(&t, &coverage, &t.vertices);
        let mut it = maps.into_iter();
        Patch {
            valid: it.next().unwrap(),
            normals: it.next().unwrap(),
            deformed: it.next().unwrap(),
            t,
            coverage,
            du,
            dv,
        }
    }

    fn flat_color(r: usize, c: [f32; 3]) -> TexelMap {
        let mut m = TexelMap::zeros(r, 3, TexelKind::Color);
        for i in 0..m.texel_count() {
            m.texel_mut(i).copy_from_slice(&c);
        }
        m
    }

    fn params_for(p: &Patch, color: &TexelMap, coverage: &TexelMap, degree: usize) -> GaussianParamMap {
        let surface = SurfaceMaps {
            valid: &p.valid,
            coverage_count: coverage,
            du: &p.du,
            dv: &p.dv,
        };
        reference_appearance(color, &p.normals, &surface, degree).unwrap()
    }

    #[test]
    fn flat_red_decodes_red() {
        let p = patch(16, 0.004);
        let red = flat_color(16, [1.0, 0.0, 0.0]);
        let mut cov = TexelMap::zeros(16, 1, TexelKind::Coverage);
        cov.data.fill(2.0);
        cov.data[5] = 0.0;
        let g = params_for(&p, &red, &cov, 0);
        for i in 0..256 {
            if g.valid(i) {
                let rgb = decode_color(&g.sh(i), 0, &Vec3::z()).unwrap();
                assert!((rgb[0] - 1.0).abs() < 1e-6 && rgb[1].abs() < 1e-6 && rgb[2].abs() < 1e-6);
                assert_eq!(g.opacity(i), if i == 5 { 0.0 } else { 1.0 });
                assert_eq!(g.displacement(i), Vec3::zeros());
                let q = g.rotation(i);
                assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn planar_patch_footprint() {
        let r = 32;
        let p = patch(r, 0.004);
        let g = params_for(&p, &flat_color(r, [0.5; 3]), &p.valid.clone(), 0);
        // Brute-force neighbor distance between texel surface points.
        let pts = p.coverage.interpolate_points(&p.t, &p.t.vertices);
        for y in 1..r - 1 {
            for x in 1..r - 1 {
                let i = y * r + x;
                let (Some(c), Some(right), Some(down)) = (pts[i], pts[i + 1], pts[i + r]) else {
                    continue;
                };
                let expected = 0.5 * 0.5 * ((right - c).norm() + (down - c).norm());
                let s = g.log_scale(i).map(f64::exp);
                assert!((s.x - 0.002).abs() <= 0.0002 && (s.y - 0.002).abs() <= 0.0002, "{s:?}");
                assert!((s.x - expected).abs() < 1e-9);
                assert!((s.z - 0.0002).abs() <= 0.00002);
            }
        }
    }

    #[test]
    fn decode_color_cases() {
        let red = [dc_from_color(1.0), dc_from_color(0.0), dc_from_color(0.0)];
        for d in [Vec3::x(), -Vec3::z(), Vec3::new(0.3, -0.4, 0.5).normalize()] {
            let c = decode_color(&red, 0, &d).unwrap();
            assert!((c[0] - 1.0).abs() < 1e-12 && c[1].abs() < 1e-12);
        }
        assert_eq!(decode_color(&[0.0; 3], 0, &Vec3::x()).unwrap(), [0.5; 3]);
        let mut h = vec![0.0; 12];
        h[3 * 2] = 0.5;
        let up = decode_color(&h, 1, &Vec3::z()).unwrap();
        let down = decode_color(&h, 1, &-Vec3::z()).unwrap();
        assert!(up[0] > down[0]);
        assert!(matches!(
            decode_color(&h, 0, &Vec3::z()),
            Err(Error::ShDegreeMismatch { expected: 3, got: 12 })
        ));
        assert_eq!(decode_color(&vec![0.0; 27], 2, &Vec3::z()).unwrap(), [0.5; 3]);
    }

    fn identity_lbs(p: &Patch) -> TexelMap {
        let m = MotionFrame::rest(&p.t.joints, 0);
        let xf = lbs_transforms(&p.t, &m).unwrap();
        rasterize_texel_geometry(&p.t, &p.coverage, &p.t.vertices, &[TexelAttribute::Lbs(&xf)])
            .unwrap()
            .remove(0)
    }

    #[test]
    fn identity_pose_places_gaussians_on_surface() {
        let p = patch(16, 0.01);
        let g = params_for(&p, &flat_color(16, [0.2; 3]), &p.valid.clone(), 0);
        let set = pose_gaussians(&g, &identity_lbs(&p), &p.deformed, None).unwrap();
        assert_eq!(set.len(), p.coverage.covered());
        for (k, &i) in set.texels.iter().enumerate() {
            assert_eq!(set.means[k], p.deformed.vec3(i as usize));
        }
    }

    #[test]
    fn unit_ratio_is_identity_and_double_ratio_quadruples() {
        let p = patch(16, 0.01);
        let g = params_for(&p, &flat_color(16, [0.2; 3]), &p.valid.clone(), 0);
        let lbs = identity_lbs(&p);
        let plain = pose_gaussians(&g, &lbs, &p.deformed, None).unwrap();
        let mut ones = TexelMap::zeros(16, 1, TexelKind::ScaleRatio);
        ones.data.fill(1.0);
        assert_eq!(pose_gaussians(&g, &lbs, &p.deformed, Some(&ones)).unwrap(), plain);
        let target = plain.texels[3] as usize;
        ones.data[target] = 2.0;
        let refined = pose_gaussians(&g, &lbs, &p.deformed, Some(&ones)).unwrap();
        let ea = plain.covariances[3].symmetric_eigenvalues();
        let eb = refined.covariances[3].symmetric_eigenvalues();
        let (mut ea, mut eb) = (ea.as_slice().to_vec(), eb.as_slice().to_vec());
        ea.sort_by(f64::total_cmp);
        eb.sort_by(f64::total_cmp);
        for (a, b) in ea.iter().zip(&eb) {
            assert!((b - 4.0 * a).abs() <= 1e-9 * b.abs().max(1e-12));
        }
        ones.data[target] = 0.5;
        assert!(pose_gaussians(&g, &lbs, &p.deformed, Some(&ones)).is_err());
    }

    #[test]
    fn zero_quaternion_rejected() {
        let p = patch(8, 0.01);
        let mut g = params_for(&p, &flat_color(8, [0.2; 3]), &p.valid.clone(), 0);
        let i = (0..64).find(|&i| g.valid(i)).unwrap();
        g.set_rotation(i, [0.0; 4]);
        assert!(matches!(
            pose_gaussians(&g, &identity_lbs(&p), &p.deformed, None),
            Err(Error::InvalidQuaternion { .. })
        ));
    }

    #[test]
    fn binary_round_trip() {
        let p = patch(8, 0.01);
        let g = params_for(&p, &flat_color(8, [0.25, 0.5, 0.75]), &p.valid.clone(), 0);
        let set = pose_gaussians(&g, &identity_lbs(&p), &p.deformed, None).unwrap();
        let bytes = set.encode();
        assert_eq!(bytes.len(), 4 + 52 * set.len());
        let back = GaussianSet::decode(&bytes).unwrap();
        assert_eq!(back.len(), set.len());
        for i in 0..set.len() {
            assert!((back.means[i] - set.means[i]).norm() < 1e-6);
            let c = back.color(i, &Vec3::z());
            assert!((c[2] - 0.75).abs() < 1e-6);
        }
        let stored = GaussianParamMap::from_maps(g.params.clone(), g.mask.clone()).unwrap();
        assert_eq!(stored.sh_degree, 0);
        assert_eq!(GaussianParamMap::channels_for(0), 14);
    }

    fn sorted_eigs(m: &Mat3) -> Vec<f64> {
        let mut e = m.symmetric_eigenvalues().as_slice().to_vec();
        e.sort_by(f64::total_cmp);
        e
    }

    fn posed_set(angle: f64, axis: [f64; 3], shift: [f64; 3], ratio: Option<f64>) -> (GaussianSet, GaussianSet, Patch) {
        let p = patch(16, 0.01);
        let mut g = params_for(&p, &flat_color(16, [0.2; 3]), &p.valid.clone(), 0);
        // Anisotropic, tilted Gaussians so eigenvalues are distinct.
        for i in 0..256 {
            if g.valid(i) {
                g.set_log_scale(i, &Vec3::new(-5.0, -4.0, -6.0));
                let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vec3::new(1.0, 2.0, 3.0)), 0.7);
                g.set_rotation(i, [q.w, q.i, q.j, q.k]);
                g.set_displacement(i, &Vec3::new(0.0, 0.0, 0.001));
            }
        }
        let rigid = RigidTransform::from_translation(Vec3::from(shift)).compose(&RigidTransform::from_axis_angle(Vec3::from(axis), angle));
        let m = MotionFrame {
            frame_index: 0,
            joint_transforms: vec![rigid],
        };
        let xf = lbs_transforms(&p.t, &m).unwrap();
        let lbs = rasterize_texel_geometry(&p.t, &p.coverage, &p.t.vertices, &[TexelAttribute::Lbs(&xf)])
            .unwrap()
            .remove(0);
        let base = pose_gaussians(&g, &identity_lbs(&p), &p.deformed, None).unwrap();
        let refine = ratio.map(|r| {
            let mut m = TexelMap::zeros(16, 1, TexelKind::ScaleRatio);
            for (i, v) in m.data.iter_mut().enumerate() {
                *v = (1.0 + r * ((i * 7919) % 13) as f64 / 13.0) as f32;
            }
            m
        });
        let moved = pose_gaussians(&g, &lbs, &p.deformed, refine.as_ref()).unwrap();
        (base, moved, p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rigid_pose_keeps_covariance_spectrum(angle in 0.0f64..3.0, axis in prop::array::uniform3(0.1f64..1.0), shift in prop::array::uniform3(-1.0f64..1.0)) {
            let (base, moved, _) = posed_set(angle, axis, shift, None);
            for (a, b) in base.covariances.iter().zip(&moved.covariances) {
                for (x, y) in sorted_eigs(a).iter().zip(sorted_eigs(b)) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn refinement_never_shrinks(angle in 0.0f64..3.0, ratio in 0.0f64..2.0) {
            let (_, plain, _) = posed_set(angle, [0.0, 0.0, 1.0], [0.0; 3], None);
            let (_, refined, _) = posed_set(angle, [0.0, 0.0, 1.0], [0.0; 3], Some(ratio));
            for (a, b) in plain.covariances.iter().zip(&refined.covariances) {
                for (x, y) in sorted_eigs(a).iter().zip(sorted_eigs(b)) {
                    prop_assert!(y >= x * (1.0 - 1e-12));
                }
            }
        }

        #[test]
        fn gaussians_stay_near_the_posed_surface(angle in 0.0f64..3.0, shift in prop::array::uniform3(-1.0f64..1.0)) {
            let (_, moved, p) = posed_set(angle, [0.3, 0.2, 1.0], shift, None);
            let rigid = RigidTransform::from_translation(Vec3::from(shift)).compose(&RigidTransform::from_axis_angle(Vec3::new(0.3, 0.2, 1.0), angle));
            let posed: Vec<Vec3> = p.t.vertices.iter().map(|v| rigid.apply_point(v)).collect();
            let (mut lo, mut hi) = (posed[0], posed[0]);
            for v in &posed {
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
            let max_scale = (-4.0f64).exp();
            let margin = 0.001 + 3.0 * max_scale + 1e-9;
            for (k, m) in moved.means.iter().enumerate() {
                prop_assert!(moved.opacities[k] > 0.0);
                for a in 0..3 {
                    prop_assert!(m[a] >= lo[a] - margin && m[a] <= hi[a] + margin);
                }
            }
            prop_assert!(moved.covariances.iter().all(|c| (c - c.transpose()).abs().max() == 0.0));
        }
    }
}
