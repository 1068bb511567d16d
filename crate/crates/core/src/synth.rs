//! Seeded synthetic scenes with known ground truth: a jointed capsule body,
//! a sinusoidal surface deformation, a checker texture, a camera ring and
//! rendered images.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kinematics::pose_vertices;
use crate::mesh::{capsule, sample_surface, vertex_normals, CapsuleShape};
use crate::raster::{rasterize_image, ImageBuffer, Shading};
use crate::scene::{
    build_adjacency, CameraRig, Joint, LookAt, MotionFrame, PointCloud, RigidTransform, SkinnedTemplate, TexelKind, TexelMap, Vec3,
};

/// How ground-truth point clouds are drawn from the deformed posed surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointSampling {
    /// One point per mesh vertex.
    Vertices,
    /// Uniform by area.
    Area { count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Peak normal displacement of the ground-truth deformation, meters.
    pub amplitude: f64,
    pub radius: f64,
    /// Length of the cylindrical section.
    pub length: f64,
    pub segments: usize,
    pub rings: usize,
    pub texture_resolution: usize,
    pub image_size: usize,
    pub condition_views: usize,
    pub held_out_views: usize,
    pub camera_distance: f64,
    pub camera_height: f64,
    pub fov_deg: f64,
    /// Bend of the upper body in the bent pose, degrees.
    pub bend_deg: f64,
    /// Edge stretch factor of the upper segment in the stretched pose.
    pub stretch: f64,
    pub sampling: PointSampling,
    /// Checks per atlas axis.
    pub checks: usize,
    /// Lattice cells per atlas axis of the smooth color noise.
    pub noise_cells: usize,
    pub noise_amplitude: f64,
    /// Amplitude of independent per-texel noise.
    pub grain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            amplitude: 0.02,
            radius: 0.15,
            length: 0.7,
            segments: 48,
            rings: 40,
            texture_resolution: 256,
            image_size: 512,
            condition_views: 4,
            held_out_views: 4,
            camera_distance: 2.4,
            camera_height: 0.6,
            fov_deg: 40.0,
            bend_deg: 35.0,
            stretch: 1.8,
            sampling: PointSampling::Vertices,
            checks: 24,
            noise_cells: 32,
            noise_amplitude: 0.15,
            grain: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.length > 0.0) {
            return Err(Error::InvalidArgument("body dimensions must be positive".into()));
        }
        if self.segments < 3 || self.rings < 3 {
            return Err(Error::InvalidArgument("capsule needs at least 3 segments and rings".into()));
        }
        if !self.texture_resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "texture resolution {} is not a power of two",
                self.texture_resolution
            )));
        }
        if self.condition_views == 0 || self.image_size == 0 {
            return Err(Error::InvalidArgument(
                "need at least one condition view and a nonzero image size".into(),
            ));
        }
        if !(self.amplitude >= 0.0 && self.stretch >= 1.0) {
            return Err(Error::InvalidArgument(
                "amplitude must be nonnegative and stretch at least 1".into(),
            ));
        }
        Ok(())
    }

    fn joint_heights(&self) -> [f64; 3] {
        [0.0, 0.5 * self.length, self.length]
    }
}

pub const FRAME_REST: usize = 0;
pub const FRAME_BENT: usize = 1;
pub const FRAME_STRETCHED: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    /// Template with the ground-truth deformation baked into its vertices.
    pub gt_template: SkinnedTemplate,
    pub tracking_template: SkinnedTemplate,
    pub gt_texture: TexelMap,
    pub rig: CameraRig,
    pub motions: Vec<MotionFrame>,
    /// `images[frame][camera]`, color quantized to 8 bits, mask in {0,1}.
    pub images: Vec<Vec<ImageBuffer>>,
    pub gt_pointclouds: Vec<PointCloud>,
}

impl SyntheticScene {
    /// Replaces the ground-truth texture and re-renders every image.
    pub fn with_texture(mut self, texture: TexelMap) -> Result<Self> {
        if texture.resolution != self.gt_texture.resolution || texture.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "texture must be {r}x{r}x3",
                r = self.gt_texture.resolution
            )));
        }
        self.images = self
            .motions
            .iter()
            .map(|m| render_frame(&self.gt_template, m, &self.rig, &texture))
            .collect::<Result<_>>()?;
        self.gt_texture = texture;
        Ok(self)
    }

    pub fn frame_count(&self) -> usize {
        self.motions.len()
    }

    pub fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.motions.len() {
            return Err(Error::InvalidArgument(format!(
                "frame {frame} out of range (scene has {})",
                self.motions.len()
            )));
        }
        Ok(())
    }
}

/// The tracking template: a capsule along +y with three joints spaced
/// along the cylinder and tent-shaped skin weights.
pub fn body_template(cfg: &SynthConfig) -> Result<SkinnedTemplate> {
    let mut t = capsule(&CapsuleShape {
        radius: cfg.radius,
        bottom: 0.0,
        top: cfg.length,
        segments: cfg.segments,
        rings: cfg.rings,
    });
    let h = cfg.joint_heights();
    let names = ["root", "spine", "chest"];
    t.joints = (0..3)
        .map(|j| Joint {
            name: names[j].to_string(),
            parent: j.checked_sub(1),
            canonical: RigidTransform::from_translation(Vec3::new(0.0, h[j], 0.0)),
        })
        .collect();
    let half = h[1];
    t.skin_weights = t
        .vertices
        .iter()
        .map(|v| {
            let w0 = ((h[1] - v.y) / half).clamp(0.0, 1.0);
            let w2 = ((v.y - h[1]) / half).clamp(0.0, 1.0);
            let w1 = 1.0 - w0 - w2;
            [(0, w0), (1, w1), (2, w2)].into_iter().filter(|&(_, w)| w > 0.0).collect()
        })
        .collect();
    build_adjacency(&t)
}

/// Ground-truth canonical displacement: outward bulges along the normal
/// shaped by the positive lobes of a sinusoid around the axis and along it,
/// fading at the poles.
pub fn gt_displacements(t: &SkinnedTemplate, cfg: &SynthConfig) -> Result<Vec<Vec3>> {
    let normals = vertex_normals(&t.vertices, &t.triangles)?;
    let center = 0.5 * cfg.length;
    Ok(t.vertices
        .iter()
        .zip(&normals)
        .map(|(v, n)| {
            let rho = (v.x * v.x + v.z * v.z).sqrt();
            let theta = v.z.atan2(v.x);
            let fade = (rho / cfg.radius).min(1.0).powi(2);
            let wave = ((3.0 * theta).sin() * (2.0 * std::f64::consts::PI * (v.y - center) / 0.4).cos()).max(0.0);
            n * (cfg.amplitude * wave * fade)
        })
        .collect())
}

pub fn gt_template(tracking: &SkinnedTemplate, cfg: &SynthConfig) -> Result<SkinnedTemplate> {
    let d = gt_displacements(tracking, cfg)?;
    let mut gt = tracking.clone();
    for (v, d) in gt.vertices.iter_mut().zip(d) {
        *v += d;
    }
    Ok(gt)
}

/// Checker texture with smooth color noise and fine per-texel noise.
pub fn checker_texture(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TexelMap {
    let r = cfg.texture_resolution;
    let lattice = cfg.noise_cells.max(2);
    let (a, g) = (cfg.noise_amplitude, cfg.grain);
    let coarse: Vec<f64> = (0..lattice * lattice * 3)
        .map(|_| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 })
        .collect();
    let fine: Vec<f64> = (0..r * r * 3).map(|_| if g > 0.0 { rng.gen_range(-g..g) } else { 0.0 }).collect();
    let colors = [[0.85, 0.75, 0.55], [0.2, 0.35, 0.6]];
    let mut m = TexelMap::zeros(r, 3, TexelKind::Color);
    for y in 0..r {
        for x in 0..r {
            let u = (x as f64 + 0.5) / r as f64;
            let v = (y as f64 + 0.5) / r as f64;
            let check = ((u * cfg.checks as f64).floor() as usize + (v * cfg.checks as f64).floor() as usize) % 2;
            let gx = u * lattice as f64;
            let gy = (v * (lattice - 1) as f64).min((lattice - 1) as f64 - 1e-9);
            let (x0, y0) = (gx.floor() as usize % lattice, gy.floor() as usize);
            let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
            let x1 = (x0 + 1) % lattice;
            let i = y * r + x;
            for c in 0..3 {
                let at = |xx: usize, yy: usize| coarse[(yy * lattice + xx) * 3 + c];
                let smooth = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x1, y0 + 1) * fx * fy;
                m.data[i * 3 + c] = (colors[check][c] + smooth + fine[i * 3 + c]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    m
}

/// Look-at parameters of the camera ring: condition views evenly spaced,
/// then held-out views offset by half the condition spacing.
pub fn ring_views(cfg: &SynthConfig) -> Vec<LookAt> {
    let target = [0.0, 0.5 * cfg.length, 0.0];
    let step = 2.0 * std::f64::consts::PI / cfg.condition_views as f64;
    let held_step = if cfg.held_out_views == 0 {
        0.0
    } else {
        2.0 * std::f64::consts::PI / cfg.held_out_views as f64
    };
    (0..cfg.condition_views)
        .map(|i| i as f64 * step)
        .chain((0..cfg.held_out_views).map(|i| 0.5 * step + i as f64 * held_step))
        .map(|a| LookAt {
            position: [cfg.camera_distance * a.sin(), cfg.camera_height, cfg.camera_distance * a.cos()],
            target,
            up: [0.0, 1.0, 0.0],
            fov_deg: cfg.fov_deg,
            width: cfg.image_size,
            height: cfg.image_size,
        })
        .collect()
}

pub fn camera_ring(cfg: &SynthConfig) -> Result<CameraRig> {
    Ok(CameraRig {
        cameras: ring_views(cfg).iter().map(LookAt::camera).collect::<Result<_>>()?,
        condition: (0..cfg.condition_views).collect(),
        held_out: (cfg.condition_views..cfg.condition_views + cfg.held_out_views).collect(),
    })
}

/// Rest, bent and stretched poses.
pub fn motions(t: &SkinnedTemplate, cfg: &SynthConfig) -> Vec<MotionFrame> {
    let rest = MotionFrame::rest(&t.joints, FRAME_REST);
    let h = cfg.joint_heights();
    let pivot = Vec3::new(0.0, h[1], 0.0);
    let bend = RigidTransform::from_translation(pivot)
        .compose(&RigidTransform::from_axis_angle(Vec3::z(), cfg.bend_deg.to_radians()))
        .compose(&RigidTransform::from_translation(-pivot));
    let mut bent = rest.clone();
    bent.frame_index = FRAME_BENT;
    for j in 1..3 {
        bent.joint_transforms[j] = bend.compose(&t.joints[j].canonical);
    }
    let mut stretched = rest.clone();
    stretched.frame_index = FRAME_STRETCHED;
    let lift = (cfg.stretch - 1.0) * (h[2] - h[1]);
    stretched.joint_transforms[2] = RigidTransform::from_translation(Vec3::new(0.0, lift, 0.0)).compose(&t.joints[2].canonical);
    vec![rest, bent, stretched]
}

fn quantize(img: &mut ImageBuffer) {
    img.data.iter_mut().for_each(|v| *v = io::quantize_u8(*v));
    img.depth.iter_mut().for_each(|d| *d = f32::INFINITY);
}

fn f32_points(points: Vec<Vec3>) -> PointCloud {
    PointCloud::new(points.into_iter().map(|p| p.map(|c| c as f32 as f64)).collect())
}

fn render_frame(gt: &SkinnedTemplate, motion: &MotionFrame, rig: &CameraRig, texture: &TexelMap) -> Result<Vec<ImageBuffer>> {
    let posed = pose_vertices(gt, motion, None)?;
    rig.cameras
        .par_iter()
        .map(|cam| {
            let mut img = rasterize_image(gt, &posed, cam, Shading::Texture(texture))?;
            quantize(&mut img);
            Ok(img)
        })
        .collect()
}

/// Builds the full scene in memory. Values match what `write_scene` and
/// `read_scene` round-trip through disk.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tracking = body_template(cfg)?;
    let gt = gt_template(&tracking, cfg)?;
    let texture = checker_texture(cfg, &mut rng);
    let rig = camera_ring(cfg)?;
    let motions = motions(&tracking, cfg);
    let mut images = Vec::with_capacity(motions.len());
    let mut clouds = Vec::with_capacity(motions.len());
    for m in &motions {
        let posed = pose_vertices(&gt, m, None)?;
        images.push(render_frame(&gt, m, &rig, &texture)?);
        let points = match cfg.sampling {
            PointSampling::Vertices => posed.clone(),
            PointSampling::Area { count } => sample_surface(&posed, &gt.triangles, count, &mut rng),
        };
        clouds.push(f32_points(points));
    }
    Ok(SyntheticScene {
        config: cfg.clone(),
        gt_template: gt,
        tracking_template: tracking,
        gt_texture: texture,
        rig,
        motions,
        images,
        gt_pointclouds: clouds,
    })
}

pub fn image_path(dir: &Path, frame: usize, camera: usize) -> std::path::PathBuf {
    dir.join("images")
        .join(format!("frame_{frame:03}"))
        .join(format!("cam_{camera:02}.png"))
}

pub fn mask_path(dir: &Path, frame: usize, camera: usize) -> std::path::PathBuf {
    dir.join("images")
        .join(format!("frame_{frame:03}"))
        .join(format!("cam_{camera:02}_mask.png"))
}

pub fn pointcloud_path(dir: &Path, frame: usize) -> std::path::PathBuf {
    dir.join("pointclouds").join(format!("frame_{frame:03}.dutf"))
}

/// Writes the scene as plain files: OBJ + skeleton JSON templates, DUTF
/// texture and point clouds, PNG images and masks, JSON rig and motion.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("pointclouds"))?;
    io::write_json(&dir.join("synth.json"), &scene.config)?;
    io::save_template(&scene.tracking_template, &dir.join("template.obj"), &dir.join("skeleton.json"))?;
    fs::write(
        dir.join("gt_template.obj"),
        io::format_obj(
            &scene.gt_template.vertices,
            &scene.gt_template.triangles,
            &scene.gt_template.uv_coords,
        ),
    )?;
    io::write_texel_map(&dir.join("gt_texture.dutf"), &scene.gt_texture)?;
    let mut rig = io::RigFile::from_rig(&scene.rig);
    rig.views = ring_views(&scene.config);
    io::write_json(&dir.join("rig.json"), &rig)?;
    io::save_motion(&dir.join("motion.json"), &scene.motions)?;
    for (f, frame) in scene.images.iter().enumerate() {
        fs::create_dir_all(dir.join("images").join(format!("frame_{f:03}")))?;
        for (c, img) in frame.iter().enumerate() {
            io::write_png(&image_path(dir, f, c), img)?;
            io::write_mask_png(&mask_path(dir, f, c), img.width, img.height, &img.mask)?;
        }
    }
    for (f, pc) in scene.gt_pointclouds.iter().enumerate() {
        io::write_point_cloud(&pointcloud_path(dir, f), pc)?;
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SyntheticScene> {
    let config: SynthConfig = io::read_json(&dir.join("synth.json"))?;
    let tracking = io::load_template(&dir.join("template.obj"), &dir.join("skeleton.json"))?;
    let skeleton = io::SkeletonFile::from_template(&tracking);
    let gt = io::template_from_parts(&fs::read_to_string(dir.join("gt_template.obj"))?, &skeleton)?;
    let gt_texture = io::read_texel_map(&dir.join("gt_texture.dutf"))?;
    let rig = io::load_rig(&dir.join("rig.json"))?;
    let motions = io::load_motion(&dir.join("motion.json"))?;
    let mut images = Vec::with_capacity(motions.len());
    let mut clouds = Vec::with_capacity(motions.len());
    for f in 0..motions.len() {
        let frame = (0..rig.cameras.len())
            .map(|c| {
                let mut img = io::read_png(&image_path(dir, f, c))?;
                let (w, h, mask) = io::read_mask_png(&mask_path(dir, f, c))?;
                if (w, h) != (img.width, img.height) {
                    return Err(Error::DimensionMismatch(format!(
                        "mask {w}x{h} vs image {}x{}",
                        img.width, img.height
                    )));
                }
                img.mask = mask;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        images.push(frame);
        clouds.push(io::read_point_cloud(&pointcloud_path(dir, f))?);
    }
    Ok(SyntheticScene {
        config,
        gt_template: gt,
        tracking_template: tracking,
        gt_texture,
        rig,
        motions,
        images,
        gt_pointclouds: clouds,
    })
}
