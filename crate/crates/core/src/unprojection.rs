//! Texture unprojection: per-view visibility in texel space, partial
//! textures sampled from the view images, and cross-view fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::pose_vertices;
use crate::raster::{rasterize_image, rasterize_texel_geometry, ImageBuffer, Shading, TexelAttribute, TexelCoverage};
use crate::scene::{bilinear_taps, Camera, MotionFrame, SkinnedTemplate, TexelKind, TexelMap, Vec2, Vec3};

/// Facing threshold on the cosine between the inverse view ray and the normal.
pub const DEFAULT_ANGLE_THRESHOLD: f64 = 0.17;
/// Depth agreement tolerance in meters.
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityParams {
    /// Minimum cosine `δ`, exclusive.
    pub angle_threshold: f64,
    /// Maximum depth difference `ε` in meters, exclusive.
    pub depth_tolerance: f64,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self {
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
            depth_tolerance: DEFAULT_DEPTH_TOLERANCE,
        }
    }
}

impl VisibilityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_threshold > 0.0 && self.angle_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "angle threshold {} outside (0,1)",
                self.angle_threshold
            )));
        }
        if !(self.depth_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "depth tolerance {} must be positive",
                self.depth_tolerance
            )));
        }
        Ok(())
    }
}

/// Texel-space geometry of one view plus its image-space depth and mask.
#[derive(Clone, Debug)]
pub struct ViewInputs<'a> {
    pub camera: &'a Camera,
    /// Camera-space depth of each texel's surface point, `T_D`.
    pub texel_depth: TexelMap,
    /// Pixel coordinates of each texel's surface point, `T_xy`.
    pub texel_xy: TexelMap,
    /// Depth buffer `I_D` of the template seen from this camera.
    pub image_depth: &'a [f32],
    /// Segmentation `I_M` of the captured image.
    pub image_mask: &'a [f32],
}

#[derive(Clone, Debug)]
pub struct VisibilityInputs<'a> {
    /// World positions `T_P`.
    pub position: TexelMap,
    /// Face normals `T_N`.
    pub face_normal: TexelMap,
    /// Validity mask `M_G`.
    pub valid: TexelMap,
    pub views: Vec<ViewInputs<'a>>,
}

/// Bilinear lookup in a single-channel image, `None` outside the frame.
/// Taps with zero weight are skipped so infinite depths do not leak.
fn sample_scalar(values: &[f32], width: usize, height: usize, xy: &Vec2) -> Option<f64> {
    if !inside_frame(width, height, xy) {
        return None;
    }
    let mut acc = 0.0;
    for (i, w) in bilinear_taps(width, height, xy.x, xy.y) {
        if w != 0.0 {
            acc += w * values[i] as f64;
        }
    }
    Some(acc)
}

fn inside_frame(width: usize, height: usize, xy: &Vec2) -> bool {
    xy.x >= 0.0 && xy.y >= 0.0 && xy.x <= (width - 1) as f64 && xy.y <= (height - 1) as f64
}

/// True when every pixel contributing to the bilinear footprint at `xy` is
/// foreground (mask ≥ 0.5).
fn mask_foreground(mask: &[f32], width: usize, height: usize, xy: &Vec2) -> bool {
    inside_frame(width, height, xy)
        && bilinear_taps(width, height, xy.x, xy.y)
            .iter()
            .all(|&(i, w)| w == 0.0 || mask[i] >= 0.5)
}

/// The three visibility tests for one texel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TexelTests {
    pub angle: bool,
    pub depth: bool,
    pub mask: bool,
}

impl TexelTests {
    pub fn visible(&self) -> bool {
        self.angle && self.depth && self.mask
    }
}

/// Evaluates the angle, depth and mask tests for every texel of one view.
pub fn visibility_tests(v: &VisibilityInputs<'_>, view: usize, params: &VisibilityParams) -> Result<Vec<Option<TexelTests>>> {
    params.validate()?;
    let r = v.position.resolution;
    let vi = v.views.get(view).ok_or_else(|| Error::InvalidArgument(format!("no view {view}")))?;
    for m in [&v.face_normal, &v.valid, &vi.texel_depth, &vi.texel_xy] {
        if m.resolution != r {
            return Err(Error::ResolutionMismatch(r, m.resolution));
        }
    }
    let (w, h) = (vi.camera.width, vi.camera.height);
    if vi.image_depth.len() != w * h || vi.image_mask.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "view {view} buffers do not match the {w}x{h} camera"
        )));
    }
    let origin = vi.camera.center();
    Ok((0..r * r)
        .into_par_iter()
        .map(|i| {
            if v.valid.data[i] < 0.5 {
                return None;
            }
            let p = v.position.vec3(i);
            let n = v.face_normal.vec3(i);
            let ray = p - origin;
            let len = ray.norm();
            let cos = if len > 0.0 { (-ray / len).dot(&n) } else { -1.0 };
            let xy_t = vi.texel_xy.texel(i);
            let xy = Vec2::new(xy_t[0] as f64, xy_t[1] as f64);
            let td = vi.texel_depth.data[i] as f64;
            let depth = match sample_scalar(vi.image_depth, w, h, &xy) {
                Some(d) if d.is_finite() => (d - td).abs() < params.depth_tolerance,
                _ => false,
            };
            Some(TexelTests {
                angle: cos > params.angle_threshold,
                depth,
                mask: mask_foreground(vi.image_mask, w, h, &xy),
            })
        })
        .collect())
}

/// Binary visibility map `T_v` of one view.
pub fn visibility_map(v: &VisibilityInputs<'_>, view: usize, params: &VisibilityParams) -> Result<TexelMap> {
    let tests = visibility_tests(v, view, params)?;
    let r = v.position.resolution;
    let data = tests
        .iter()
        .map(|t| if t.is_some_and(|t| t.visible()) { 1.0 } else { 0.0 })
        .collect();
    TexelMap::from_data(r, 1, TexelKind::Visibility, data)
}

/// Samples a view image at each valid texel's pixel coordinates. Texels
/// that project outside the frame stay zero.
pub fn partial_texture(image: &ImageBuffer, texel_xy: &TexelMap, valid: &TexelMap) -> Result<TexelMap> {
    if texel_xy.resolution != valid.resolution {
        return Err(Error::ResolutionMismatch(texel_xy.resolution, valid.resolution));
    }
    let channels = image.channels;
    let mut out = TexelMap::zeros(texel_xy.resolution, channels, TexelKind::Color);
    let (w, h) = (image.width, image.height);
    out.data.par_chunks_mut(channels).enumerate().for_each(|(i, texel)| {
        if valid.data[i] < 0.5 {
            return;
        }
        let xy = Vec2::new(texel_xy.texel(i)[0] as f64, texel_xy.texel(i)[1] as f64);
        if !inside_frame(w, h, &xy) {
            return;
        }
        let mut acc = vec![0.0f64; channels];
        for (p, wt) in bilinear_taps(w, h, xy.x, xy.y) {
            if wt != 0.0 {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * image.data[p * channels + c] as f64;
                }
            }
        }
        for (t, a) in texel.iter_mut().zip(acc) {
            *t = a as f32;
        }
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnprojectionResult {
    /// Fused texture `T_c`.
    pub fused: TexelMap,
    pub per_view_visibility: Vec<TexelMap>,
    pub per_view_partial: Vec<TexelMap>,
    /// Number of views seeing each texel.
    pub coverage_count: TexelMap,
}

/// Visibility-weighted mean of the partial textures, zero where no view
/// sees the texel. Views are summed in ascending index order.
pub fn fuse_views(partials: Vec<TexelMap>, visibilities: Vec<TexelMap>) -> Result<UnprojectionResult> {
    if partials.len() != visibilities.len() {
        return Err(Error::LengthMismatch {
            expected: partials.len(),
            got: visibilities.len(),
        });
    }
    let Some(first) = partials.first() else {
        return Err(Error::InvalidArgument(
            "fusing zero views needs a resolution; use empty_result".into(),
        ));
    };
    let (r, channels) = (first.resolution, first.channels);
    for m in partials.iter().chain(&visibilities) {
        if m.resolution != r {
            return Err(Error::ResolutionMismatch(r, m.resolution));
        }
    }
    for p in &partials {
        if p.channels != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                got: p.channels,
            });
        }
    }
    let mut fused = TexelMap::zeros(r, channels, TexelKind::Color);
    let mut count = TexelMap::zeros(r, 1, TexelKind::Coverage);
    fused
        .data
        .par_chunks_mut(channels)
        .zip(count.data.par_iter_mut())
        .enumerate()
        .for_each(|(i, (texel, n))| {
            let mut acc = vec![0.0f64; channels];
            let mut weight = 0.0f64;
            for (p, v) in partials.iter().zip(&visibilities) {
                let vis = v.data[i] as f64;
                if vis == 0.0 {
                    continue;
                }
                weight += vis;
                for (a, &c) in acc.iter_mut().zip(p.texel(i)) {
                    *a += c as f64 * vis;
                }
            }
            *n = weight as f32;
            if weight != 0.0 {
                for (t, a) in texel.iter_mut().zip(acc) {
                    *t = (a / weight) as f32;
                }
            }
        });
    Ok(UnprojectionResult {
        fused,
        per_view_visibility: visibilities,
        per_view_partial: partials,
        coverage_count: count,
    })
}

/// Result of unprojecting zero views at resolution `r`.
pub fn empty_result(r: usize, channels: usize) -> UnprojectionResult {
    UnprojectionResult {
        fused: TexelMap::zeros(r, channels, TexelKind::Color),
        per_view_visibility: Vec::new(),
        per_view_partial: Vec::new(),
        coverage_count: TexelMap::zeros(r, 1, TexelKind::Coverage),
    }
}

/// A captured view: camera, color image and segmentation (in `mask`).
#[derive(Clone, Copy, Debug)]
pub struct CapturedView<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuffer,
}

/// Depth buffers of the posed mesh, one per captured view.
pub fn depth_buffers(t: &SkinnedTemplate, posed: &[Vec3], views: &[CapturedView<'_>]) -> Result<Vec<ImageBuffer>> {
    views
        .iter()
        .map(|v| {
            if v.image.width != v.camera.width || v.image.height != v.camera.height {
                return Err(Error::DimensionMismatch(format!(
                    "image {}x{} vs camera {}x{}",
                    v.image.width, v.image.height, v.camera.width, v.camera.height
                )));
            }
            rasterize_image(t, posed, v.camera, Shading::Flat([0.0; 3]))
        })
        .collect()
}

/// Texel-space inputs of the visibility tests for posed geometry.
pub fn posed_visibility_inputs<'a>(
    t: &SkinnedTemplate,
    coverage: &TexelCoverage,
    posed: &[Vec3],
    views: &[CapturedView<'a>],
    depth_buffers: &'a [ImageBuffer],
) -> Result<VisibilityInputs<'a>> {
    let mut attrs = vec![TexelAttribute::Position, TexelAttribute::FaceNormal, TexelAttribute::Mask];
    for v in views {
        attrs.push(TexelAttribute::Depth(v.camera));
        attrs.push(TexelAttribute::ImageCoords(v.camera));
    }
    let mut maps = rasterize_texel_geometry(t, coverage, posed, &attrs)?.into_iter();
    let position = maps.next().unwrap();
    let face_normal = maps.next().unwrap();
    let valid = maps.next().unwrap();
    let mut view_inputs = Vec::with_capacity(views.len());
    for (v, depth) in views.iter().zip(depth_buffers) {
        let texel_depth = maps.next().unwrap();
        let texel_xy = maps.next().unwrap();
        view_inputs.push(ViewInputs {
            camera: v.camera,
            texel_depth,
            texel_xy,
            image_depth: &depth.depth,
            image_mask: &v.image.mask,
        });
    }
    Ok(VisibilityInputs {
        position,
        face_normal,
        valid,
        views: view_inputs,
    })
}

/// Unprojects already-posed geometry. Depth buffers are rendered from the
/// posed mesh itself; masks come from the captured images.
pub fn unproject_posed(
    t: &SkinnedTemplate,
    coverage: &TexelCoverage,
    posed: &[Vec3],
    views: &[CapturedView<'_>],
    params: &VisibilityParams,
) -> Result<UnprojectionResult> {
    params.validate()?;
    if views.is_empty() {
        return Ok(empty_result(coverage.resolution, 3));
    }
    let depth_buffers = depth_buffers(t, posed, views)?;
    let inputs = posed_visibility_inputs(t, coverage, posed, views, &depth_buffers)?;
    let mut visibilities = Vec::with_capacity(views.len());
    let mut partials = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        visibilities.push(visibility_map(&inputs, i, params)?);
        partials.push(partial_texture(v.image, &inputs.views[i].texel_xy, &inputs.valid)?);
    }
    fuse_views(partials, visibilities)
}

/// Poses the (optionally deformed) template and unprojects the captured
/// views onto it. Without a deformation this is the first unprojection;
/// with one it is the second.
pub fn unproject(
    t: &SkinnedTemplate,
    coverage: &TexelCoverage,
    m: &MotionFrame,
    deformation: Option<&TexelMap>,
    views: &[CapturedView<'_>],
    params: &VisibilityParams,
) -> Result<UnprojectionResult> {
    let posed = pose_vertices(t, m, deformation)?;
    unproject_posed(t, coverage, &posed, views, params)
}

/// Per-texel mean absolute channel error between two color maps.
pub fn texel_errors(a: &TexelMap, b: &TexelMap) -> Result<Vec<f64>> {
    if a.resolution != b.resolution {
        return Err(Error::ResolutionMismatch(a.resolution, b.resolution));
    }
    let c = a.channels.min(b.channels);
    Ok((0..a.texel_count())
        .map(|i| (0..c).map(|k| (a.texel(i)[k] - b.texel(i)[k]).abs() as f64).sum::<f64>() / c as f64)
        .collect())
}

/// Ray-cast occlusion oracle: true when the segment from `p` to `origin`
/// hits no triangle except those in `ignore` (Möller–Trumbore).
pub fn ray_unoccluded(positions: &[Vec3], triangles: &[[usize; 3]], p: &Vec3, origin: &Vec3, ignore: usize, eps: f64) -> bool {
    let dir = origin - p;
    let dist = dir.norm();
    let d = dir / dist;
    for (fi, tri) in triangles.iter().enumerate() {
        if fi == ignore {
            continue;
        }
        let (a, b, c) = (positions[tri[0]], positions[tri[1]], positions[tri[2]]);
        let e1 = b - a;
        let e2 = c - a;
        let pv = d.cross(&e2);
        let det = e1.dot(&pv);
        if det.abs() < 1e-14 {
            continue;
        }
        let inv = 1.0 / det;
        let tv = p - a;
        let u = tv.dot(&pv) * inv;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let qv = tv.cross(&e1);
        let v = d.dot(&qv) * inv;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        let s = e2.dot(&qv) * inv;
        if s > eps && s < dist {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_patch;
    use crate::scene::Camera;

    fn flat_inputs<'a>(
        cam: &'a Camera,
        depth: &'a [f32],
        mask: &'a [f32],
        n: Vec3,
        p: Vec3,
        td: f32,
        xy: [f32; 2],
    ) -> VisibilityInputs<'a> {
        let mut position = TexelMap::zeros(1, 3, TexelKind::Position);
        position.set_vec3(0, &p);
        let mut face_normal = TexelMap::zeros(1, 3, TexelKind::Normal);
        face_normal.set_vec3(0, &n);
        let valid = TexelMap::from_data(1, 1, TexelKind::Mask, vec![1.0]).unwrap();
        VisibilityInputs {
            position,
            face_normal,
            valid,
            views: vec![ViewInputs {
                camera: cam,
                texel_depth: TexelMap::from_data(1, 1, TexelKind::Depth, vec![td]).unwrap(),
                texel_xy: TexelMap::from_data(1, 2, TexelKind::ImageCoords, xy.to_vec()).unwrap(),
                image_depth: depth,
                image_mask: mask,
            }],
        }
    }

    fn cam() -> Camera {
        Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), 60.0, 8, 8).unwrap()
    }

    #[test]
    fn head_on_visible_texel() {
        let c = cam();
        let depth = vec![2.0f32; 64];
        let mask = vec![1.0f32; 64];
        let v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [3.5, 3.5]);
        let m = visibility_map(&v, 0, &VisibilityParams::default()).unwrap();
        assert_eq!(m.data, vec![1.0]);
    }

    #[test]
    fn grazing_texel_rejected() {
        let c = cam();
        let depth = vec![2.0f32; 64];
        let mask = vec![1.0f32; 64];
        // cos(-ray, n) = 0.10 < 0.17
        let n = Vec3::new((1.0f64 - 0.01).sqrt(), 0.0, -0.10);
        let v = flat_inputs(&c, &depth, &mask, n, Vec3::new(0.0, 0.0, 2.0), 2.0, [3.5, 3.5]);
        let tests = visibility_tests(&v, 0, &VisibilityParams::default()).unwrap()[0].unwrap();
        assert!(!tests.angle && tests.depth && tests.mask);
        assert_eq!(visibility_map(&v, 0, &VisibilityParams::default()).unwrap().data, vec![0.0]);
    }

    #[test]
    fn occluded_texel_rejected() {
        let c = cam();
        let depth = vec![1.95f32; 64];
        let mask = vec![1.0f32; 64];
        let v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [3.5, 3.5]);
        let tests = visibility_tests(&v, 0, &VisibilityParams::default()).unwrap()[0].unwrap();
        assert!(tests.angle && !tests.depth && tests.mask);
    }

    #[test]
    fn background_mask_rejected() {
        let c = cam();
        let depth = vec![2.0f32; 64];
        let mut mask = vec![1.0f32; 64];
        mask[3 * 8 + 4] = 0.0;
        let v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [3.5, 3.5]);
        let tests = visibility_tests(&v, 0, &VisibilityParams::default()).unwrap()[0].unwrap();
        assert!(!tests.mask);
        // A lattice point only needs its own pixel.
        let v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [3.0, 3.0]);
        assert!(visibility_tests(&v, 0, &VisibilityParams::default()).unwrap()[0].unwrap().mask);
    }

    #[test]
    fn out_of_frame_is_invisible() {
        let c = cam();
        let depth = vec![2.0f32; 64];
        let mask = vec![1.0f32; 64];
        let v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [-3.0, 3.5]);
        assert_eq!(visibility_map(&v, 0, &VisibilityParams::default()).unwrap().data, vec![0.0]);
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let c = cam();
        let depth = vec![2.0f32; 64];
        let mask = vec![1.0f32; 64];
        let mut v = flat_inputs(&c, &depth, &mask, -Vec3::z(), Vec3::new(0.0, 0.0, 2.0), 2.0, [3.5, 3.5]);
        v.views[0].texel_depth = TexelMap::zeros(2, 1, TexelKind::Depth);
        assert!(matches!(
            visibility_map(&v, 0, &VisibilityParams::default()),
            Err(Error::ResolutionMismatch(1, 2))
        ));
    }

    fn image_with(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> ImageBuffer {
        let mut img = ImageBuffer::new(width, height, 3);
        for y in 0..height {
            for x in 0..width {
                img.pixel_mut(x, y).copy_from_slice(&f(x, y));
            }
        }
        img
    }

    #[test]
    fn partial_texture_sampling() {
        let img = image_with(32, 32, |x, _| if x <= 10 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
        let xy = TexelMap::from_data(2, 2, TexelKind::ImageCoords, vec![10.0, 20.0, 10.5, 20.0, 11.0, 20.0, 40.0, 1.0]).unwrap();
        let valid = TexelMap::from_data(2, 1, TexelKind::Mask, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let p = partial_texture(&img, &xy, &valid).unwrap();
        assert_eq!(p.texel(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.texel(1), &[0.5, 0.0, 0.5]);
        assert_eq!(p.texel(2), &[0.0, 0.0, 0.0]);
        assert_eq!(p.texel(3), &[0.0, 0.0, 0.0]);

        let green = ImageBuffer::filled(8, 8, [0.0, 1.0, 0.0]);
        let xy = TexelMap::from_data(1, 2, TexelKind::ImageCoords, vec![3.3, 4.7]).unwrap();
        let valid = TexelMap::from_data(1, 1, TexelKind::Mask, vec![1.0]).unwrap();
        assert_eq!(partial_texture(&green, &xy, &valid).unwrap().texel(0), &[0.0, 1.0, 0.0]);
    }

    fn color_map(c: [f32; 3]) -> TexelMap {
        TexelMap::from_data(1, 3, TexelKind::Color, c.to_vec()).unwrap()
    }

    fn vis(v: f32) -> TexelMap {
        TexelMap::from_data(1, 1, TexelKind::Visibility, vec![v]).unwrap()
    }

    #[test]
    fn fusion_cases() {
        let one = fuse_views(vec![color_map([0.2, 0.4, 0.6])], vec![vis(1.0)]).unwrap();
        assert_eq!(one.fused.data, vec![0.2, 0.4, 0.6]);
        let two = fuse_views(
            vec![color_map([1.0, 0.0, 0.0]), color_map([0.0, 0.0, 1.0])],
            vec![vis(1.0), vis(1.0)],
        )
        .unwrap();
        assert_eq!(two.fused.data, vec![0.5, 0.0, 0.5]);
        assert_eq!(two.coverage_count.data, vec![2.0]);
        let none = fuse_views(vec![color_map([1.0, 1.0, 1.0])], vec![vis(0.0)]).unwrap();
        assert_eq!(none.fused.data, vec![0.0, 0.0, 0.0]);
        assert_eq!(none.coverage_count.data, vec![0.0]);
    }

    #[test]
    fn zero_views_give_zero_texture() {
        let t = grid_patch(2, 2, 1.0, 1.0);
        let cov = TexelCoverage::new(&t, 16).unwrap();
        let m = MotionFrame::rest(&t.joints, 0);
        let r = unproject(&t, &cov, &m, None, &[], &VisibilityParams::default()).unwrap();
        assert!(r.fused.data.iter().all(|&v| v == 0.0));
        assert!(r.coverage_count.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unproject_flat_patch() {
        let t = grid_patch(4, 4, 1.0, 1.0);
        let posed: Vec<Vec3> = t.vertices.iter().map(|v| Vec3::new(v.x - 0.5, v.y - 0.5, 0.0)).collect();
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 45.0, 64, 64).unwrap();
        let mut img = rasterize_image(&t, &posed, &cam, Shading::Flat([0.2, 0.7, 0.1])).unwrap();
        img.data.chunks_mut(3).zip(&img.mask).for_each(|(px, &m)| {
            if m == 0.0 {
                px.copy_from_slice(&[1.0, 1.0, 1.0]);
            }
        });
        let cov = TexelCoverage::new(&t, 32).unwrap();
        let r = unproject_posed(
            &t,
            &cov,
            &posed,
            &[CapturedView { camera: &cam, image: &img }],
            &VisibilityParams::default(),
        )
        .unwrap();
        let seen = r.coverage_count.data.iter().filter(|&&c| c > 0.0).count();
        assert!(seen >= 850, "{seen}");
        for i in 0..r.fused.texel_count() {
            if r.coverage_count.data[i] > 0.0 {
                assert_eq!(r.fused.texel(i), &[0.2, 0.7, 0.1]);
            } else {
                assert_eq!(r.fused.texel(i), &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn ray_oracle_detects_occluder() {
        let t = grid_patch(1, 1, 2.0, 2.0);
        let pos: Vec<Vec3> = t.vertices.iter().map(|v| Vec3::new(v.x - 1.0, v.y - 1.0, 1.0)).collect();
        assert!(!ray_unoccluded(
            &pos,
            &t.triangles,
            &Vec3::new(0.1, 0.2, 2.0),
            &Vec3::zeros(),
            usize::MAX,
            1e-9
        ));
        assert!(ray_unoccluded(
            &pos,
            &t.triangles,
            &Vec3::new(0.1, 0.2, 0.5),
            &Vec3::zeros(),
            usize::MAX,
            1e-9
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn views(n: usize, texels: usize) -> impl Strategy<Value = Vec<(Vec<f32>, Vec<f32>)>> {
            prop::collection::vec(
                (
                    prop::collection::vec(0.0f32..1.0, 3 * texels),
                    prop::collection::vec(prop::bool::weighted(0.6).prop_map(|b| b as u8 as f32), texels),
                ),
                1..=n,
            )
        }

        fn maps(v: &[(Vec<f32>, Vec<f32>)]) -> (Vec<TexelMap>, Vec<TexelMap>) {
            v.iter()
                .map(|(c, m)| {
                    (
                        TexelMap::from_data(2, 3, TexelKind::Color, c.clone()).unwrap(),
                        TexelMap::from_data(2, 1, TexelKind::Visibility, m.clone()).unwrap(),
                    )
                })
                .unzip()
        }

        proptest! {
            #[test]
            fn fusion_ignores_view_order(v in views(6, 4), seed in any::<u64>()) {
                let (p, m) = maps(&v);
                let a = fuse_views(p, m).unwrap();
                let mut order: Vec<usize> = (0..v.len()).collect();
                let mut s = seed;
                for i in (1..order.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    order.swap(i, (s >> 33) as usize % (i + 1));
                }
                let shuffled: Vec<_> = order.iter().map(|&i| v[i].clone()).collect();
                let (p, m) = maps(&shuffled);
                let b = fuse_views(p, m).unwrap();
                prop_assert_eq!(a.fused.data, b.fused.data);
                prop_assert_eq!(a.coverage_count.data, b.coverage_count.data);
            }

            #[test]
            fn adding_a_view_never_lowers_coverage(v in views(5, 4), extra in views(1, 4)) {
                let (p, m) = maps(&v);
                let before = fuse_views(p, m).unwrap();
                let mut more = v.clone();
                more.extend(extra);
                let (p, m) = maps(&more);
                let after = fuse_views(p, m).unwrap();
                for (a, b) in before.coverage_count.data.iter().zip(&after.coverage_count.data) {
                    prop_assert!(b >= a);
                }
            }

            #[test]
            fn duplicated_views_fuse_identically(v in views(5, 4)) {
                let (p, m) = maps(&v);
                let once = fuse_views(p, m).unwrap();
                let mut twice = v.clone();
                twice.extend(v.iter().cloned());
                let (p, m) = maps(&twice);
                let doubled = fuse_views(p, m).unwrap();
                prop_assert_eq!(once.fused.data, doubled.fused.data);
            }
        }
    }
}
