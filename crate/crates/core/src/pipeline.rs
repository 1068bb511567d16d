//! End-to-end frame reconstruction: first unprojection, deformation fit,
//! second unprojection, Gaussian construction and held-out rendering.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::avatar::{pose_gaussians, reference_appearance, GaussianParamMap, GaussianSet, SurfaceMaps, MAX_SH_DEGREE};
use crate::deformation::{fit_deformation, FitConfig, FitOutcome, GeometryLossWeights};
use crate::error::{Error, Result};
use crate::io;
use crate::kinematics::{apply_transforms, deformed_canonical, lbs_transforms};
use crate::metrics::{MetricReport, ViewMetrics};
use crate::raster::{rasterize_texel_geometry, render_refining_scale_map, texel_tangents, TexelAttribute, TexelCoverage};
use crate::scene::{Camera, TexelMap, Vec3};
use crate::splat::{render, SplatConfig, SplatFrame, DEFAULT_DILATION, DEFAULT_TILE_SIZE};
use crate::synth::SyntheticScene;
use crate::unprojection::{unproject_posed, CapturedView, UnprojectionResult, VisibilityParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub resolution: usize,
    pub visibility: VisibilityParams,
    pub weights: GeometryLossWeights,
    pub fit: FitConfig,
    pub sh_degree: usize,
    /// Number of condition views used, taken in rig order.
    pub views: usize,
    pub tile_size: usize,
    pub dilation: f64,
    pub scale_refinement: bool,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            visibility: VisibilityParams::default(),
            weights: GeometryLossWeights::default(),
            fit: FitConfig::default(),
            sh_degree: 0,
            views: 4,
            tile_size: DEFAULT_TILE_SIZE,
            dilation: DEFAULT_DILATION,
            scale_refinement: true,
            background: [0.0; 3],
            seed: 7,
        }
    }
}

impl PipelineConfig {
    /// Texture resolution 512.
    pub fn large() -> Self {
        Self {
            resolution: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "resolution {} is not a power of two",
                self.resolution
            )));
        }
        if self.views == 0 {
            return Err(Error::InvalidArgument("view count must be at least 1".into()));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::ShDegreeMismatch {
                expected: MAX_SH_DEGREE,
                got: self.sh_degree,
            });
        }
        if self.tile_size == 0 || !(self.dilation >= 0.0) {
            return Err(Error::InvalidArgument("tile size must be positive and dilation nonnegative".into()));
        }
        self.visibility.validate()?;
        self.weights.validate()
    }

    pub fn splat(&self) -> SplatConfig {
        SplatConfig {
            tile_size: self.tile_size,
            dilation: self.dilation,
            background: self.background,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// First unprojection only, on the undeformed template.
    Single,
    /// Fit, then unproject again onto the deformed template.
    Double,
}

/// Wall-clock milliseconds per stage. The six stages are measured between
/// consecutive checkpoints, so they sum to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub fk: f64,
    pub first_unprojection: f64,
    pub fit: f64,
    pub second_unprojection: f64,
    pub gaussian_build: f64,
    pub render: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stages(&self) -> [(&'static str, f64); 6] {
        [
            ("fk", self.fk),
            ("first_unprojection", self.first_unprojection),
            ("fit", self.fit),
            ("second_unprojection", self.second_unprojection),
            ("gaussian_build", self.gaussian_build),
            ("render", self.render),
        ]
    }

    pub fn stage_sum(&self) -> f64 {
        self.stages().iter().map(|s| s.1).sum()
    }

    /// Replaces the render stage and updates the total.
    pub fn with_render(mut self, ms: f64) -> Self {
        self.total += ms - self.render;
        self.render = ms;
        self
    }
}

struct Clock {
    last: Instant,
    laps: Vec<f64>,
}

impl Clock {
    fn start() -> Self {
        Self {
            last: Instant::now(),
            laps: Vec::with_capacity(6),
        }
    }

    fn lap(&mut self) {
        let now = Instant::now();
        self.laps.push(now.duration_since(self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

/// Everything reconstructed for one frame.
#[derive(Clone, Debug)]
pub struct Avatar {
    pub frame: usize,
    pub mode: Mode,
    pub first: UnprojectionResult,
    pub fit: Option<FitOutcome>,
    pub second: Option<UnprojectionResult>,
    pub params: GaussianParamMap,
    pub gaussians: GaussianSet,
}

impl Avatar {
    pub fn deformation(&self) -> Option<&TexelMap> {
        self.fit.as_ref().map(|f| &f.deformation)
    }

    /// The texture the Gaussians were built from.
    pub fn texture(&self) -> &UnprojectionResult {
        self.second.as_ref().unwrap_or(&self.first)
    }
}

#[derive(Clone, Debug)]
pub struct FrameOutputs {
    pub avatar: Avatar,
    /// One render per held-out camera, in rig order.
    pub renders: Vec<SplatFrame>,
    pub metrics: MetricReport,
    pub timings: StageTimings,
}

/// A scene bound to a configuration, with the template's texel coverage
/// computed once.
pub struct Pipeline<'a> {
    pub scene: &'a SyntheticScene,
    pub config: PipelineConfig,
    pub coverage: TexelCoverage,
}

impl<'a> Pipeline<'a> {
    pub fn new(scene: &'a SyntheticScene, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if config.views > scene.rig.condition.len() {
            return Err(Error::InvalidArgument(format!(
                "{} views requested but the rig has {} condition cameras",
                config.views,
                scene.rig.condition.len()
            )));
        }
        let coverage = TexelCoverage::new(&scene.tracking_template, config.resolution)?;
        Ok(Self { scene, config, coverage })
    }

    pub fn condition_views(&self, frame: usize) -> Result<Vec<CapturedView<'a>>> {
        self.scene.check_frame(frame)?;
        Ok(self.scene.rig.condition[..self.config.views]
            .iter()
            .map(|&c| CapturedView {
                camera: &self.scene.rig.cameras[c],
                image: &self.scene.images[frame][c],
            })
            .collect())
    }

    /// Unprojects the condition views onto arbitrary posed geometry with the
    /// tracking template's atlas.
    pub fn unproject_onto(&self, frame: usize, posed: &[Vec3]) -> Result<UnprojectionResult> {
        let views = self.condition_views(frame)?;
        unproject_posed(
            &self.scene.tracking_template,
            &self.coverage,
            posed,
            &views,
            &self.config.visibility,
        )
    }

    fn build_timed(&self, frame: usize, mode: Mode, clock: &mut Clock) -> Result<Avatar> {
        self.scene.check_frame(frame)?;
        let t = &self.scene.tracking_template;
        let m = &self.scene.motions[frame];
        let cfg = &self.config;

        let xf = lbs_transforms(t, m).map_err(|e| e.in_stage("fk"))?;
        let undeformed = apply_transforms(&xf, &t.vertices).map_err(|e| e.in_stage("fk"))?;
        clock.lap();

        let first = self
            .unproject_onto(frame, &undeformed)
            .map_err(|e| e.in_stage("first_unprojection"))?;
        clock.lap();

        let fit = match mode {
            Mode::Single => None,
            Mode::Double => Some(
                fit_deformation(t, m, &first, &self.scene.gt_pointclouds[frame], cfg.weights, &cfg.fit).map_err(|e| e.in_stage("fit"))?,
            ),
        };
        clock.lap();

        let deformed = deformed_canonical(t, fit.as_ref().map(|f| &f.deformation)).map_err(|e| e.in_stage("second_unprojection"))?;
        let posed = match &fit {
            Some(_) => apply_transforms(&xf, &deformed).map_err(|e| e.in_stage("second_unprojection"))?,
            None => undeformed,
        };
        let second = match mode {
            Mode::Single => None,
            Mode::Double => Some(self.unproject_onto(frame, &posed).map_err(|e| e.in_stage("second_unprojection"))?),
        };
        clock.lap();

        let texture = second.as_ref().unwrap_or(&first);
        let (params, gaussians) = self
            .gaussians_for(texture, &xf, &deformed, &posed)
            .map_err(|e| e.in_stage("gaussian_build"))?;
        clock.lap();

        Ok(Avatar {
            frame,
            mode,
            first,
            fit,
            second,
            params,
            gaussians,
        })
    }

    fn gaussians_for(
        &self,
        texture: &UnprojectionResult,
        xf: &crate::kinematics::VertexTransforms,
        deformed: &[Vec3],
        posed: &[Vec3],
    ) -> Result<(GaussianParamMap, GaussianSet)> {
        let t = &self.scene.tracking_template;
        let maps = rasterize_texel_geometry(
            t,
            &self.coverage,
            deformed,
            &[
                TexelAttribute::Mask,
                TexelAttribute::SmoothNormal,
                TexelAttribute::DeformedCanonical(deformed),
                TexelAttribute::Lbs(xf),
            ],
        )?;
        let [valid, normals, deformed_map, lbs]: [TexelMap; 4] = maps.try_into().expect("four attributes requested");
        let (du, dv) = texel_tangents(t, &self.coverage, deformed);
        let surface = SurfaceMaps {
            valid: &valid,
            coverage_count: &texture.coverage_count,
            du: &du,
            dv: &dv,
        };
        let params = reference_appearance(&texture.fused, &normals, &surface, self.config.sh_degree)?;
        let refine = if self.config.scale_refinement {
            Some(render_refining_scale_map(t, &self.coverage, deformed, posed)?)
        } else {
            None
        };
        let set = pose_gaussians(&params, &lbs, &deformed_map, refine.as_ref())?;
        Ok((params, set))
    }

    /// Builds the frame's Gaussians. The returned timings have a zero render stage.
    pub fn build(&self, frame: usize, mode: Mode) -> Result<(Avatar, StageTimings)> {
        let start = Instant::now();
        let mut clock = Clock {
            last: start,
            laps: Vec::new(),
        };
        let avatar = self.build_timed(frame, mode, &mut clock)?;
        clock.laps.push(0.0);
        Ok((avatar, timings_from(&clock.laps)))
    }

    pub fn render(&self, set: &GaussianSet, cam: &Camera) -> Result<SplatFrame> {
        render(set, cam, &self.config.splat()).map_err(|e| e.in_stage("render"))
    }

    pub fn run_frame(&self, frame: usize, mode: Mode) -> Result<FrameOutputs> {
        let mut clock = Clock::start();
        let avatar = self.build_timed(frame, mode, &mut clock)?;
        let renders = self
            .scene
            .rig
            .held_out
            .iter()
            .map(|&c| self.render(&avatar.gaussians, &self.scene.rig.cameras[c]))
            .collect::<Result<Vec<_>>>()?;
        clock.lap();
        let timings = timings_from(&clock.laps);
        let views = self
            .scene
            .rig
            .held_out
            .iter()
            .zip(&renders)
            .map(|(&c, r)| {
                let gt = &self.scene.images[frame][c];
                ViewMetrics::evaluate(c, &r.color, gt, &gt.mask)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("metrics"))?;
        Ok(FrameOutputs {
            avatar,
            renders,
            metrics: MetricReport::from_views(views),
            timings,
        })
    }
}

fn timings_from(laps: &[f64]) -> StageTimings {
    StageTimings {
        fk: laps[0],
        first_unprojection: laps[1],
        fit: laps[2],
        second_unprojection: laps[3],
        gaussian_build: laps[4],
        render: laps[5],
        total: laps.iter().sum(),
    }
}

/// Writes the deterministic outputs of a frame plus `timings.json`.
pub fn write_outputs(dir: &Path, out: &FrameOutputs, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let a = &out.avatar;
    io::write_texel_map(&dir.join("texture_first.dutf"), &a.first.fused)?;
    if let Some(second) = &a.second {
        io::write_texel_map(&dir.join("texture_second.dutf"), &second.fused)?;
    }
    if let Some(fit) = &a.fit {
        io::write_texel_map(&dir.join("deformation.dutf"), &fit.deformation)?;
        fs::write(dir.join("fit_log.jsonl"), fit.log_jsonl())?;
    }
    fs::write(dir.join("gaussians.bin"), a.gaussians.encode())?;
    for (&c, r) in scene.rig.held_out.iter().zip(&out.renders) {
        io::write_png(&dir.join(format!("render_cam_{c:02}.png")), &r.color)?;
    }
    io::write_json(&dir.join("metrics.json"), &out.metrics)?;
    io::write_json(&dir.join("timings.json"), &out.timings)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig, FRAME_BENT};

    fn small_scene() -> SyntheticScene {
        generate(&SynthConfig {
            segments: 24,
            rings: 20,
            texture_resolution: 64,
            image_size: 128,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            resolution: 64,
            fit: FitConfig {
                steps: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn run_frame_produces_renders_and_timings() {
        let scene = small_scene();
        let p = Pipeline::new(&scene, small_config()).unwrap();
        let out = p.run_frame(FRAME_BENT, Mode::Double).unwrap();
        assert_eq!(out.renders.len(), 4);
        assert!(out.avatar.fit.is_some() && out.avatar.second.is_some());
        assert!(!out.avatar.gaussians.is_empty());
        assert!((out.timings.stage_sum() - out.timings.total).abs() <= 1.0);
        assert!(out.metrics.psnr.is_finite() && out.metrics.psnr > 10.0, "{:?}", out.metrics);
        let single = p.run_frame(FRAME_BENT, Mode::Single).unwrap();
        assert!(single.avatar.fit.is_none() && single.avatar.second.is_none());
        assert_eq!(single.timings.fit.min(1.0), single.timings.fit);
    }

    #[test]
    fn undeformed_scene_gains_nothing_from_double_unprojection() {
        let scene = generate(&SynthConfig {
            amplitude: 0.0,
            segments: 24,
            rings: 20,
            texture_resolution: 64,
            image_size: 128,
            ..Default::default()
        })
        .unwrap();
        let p = Pipeline::new(&scene, small_config()).unwrap();
        let double = p.run_frame(FRAME_BENT, Mode::Double).unwrap();
        let single = p.run_frame(FRAME_BENT, Mode::Single).unwrap();
        assert!(
            (double.metrics.psnr - single.metrics.psnr).abs() <= 0.1,
            "{} vs {}",
            double.metrics.psnr,
            single.metrics.psnr
        );
    }

    #[test]
    fn bad_frame_and_config_are_rejected() {
        let scene = small_scene();
        let p = Pipeline::new(&scene, small_config()).unwrap();
        let err = p.run_frame(9, Mode::Single).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        assert!(Pipeline::new(
            &scene,
            PipelineConfig {
                views: 5,
                ..small_config()
            }
        )
        .is_err());
        assert!(Pipeline::new(
            &scene,
            PipelineConfig {
                resolution: 100,
                ..small_config()
            }
        )
        .is_err());
        assert!(Pipeline::new(
            &scene,
            PipelineConfig {
                views: 0,
                ..small_config()
            }
        )
        .is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = PipelineConfig::large();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"views": 2}"#).unwrap();
        assert_eq!(partial.views, 2);
        assert_eq!(partial.resolution, 256);
    }
}
