use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use dut_core::pipeline::PipelineConfig;
use dut_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

/// Everything a command may need, loadable from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }
}

/// Flags shared by every command. Each one overrides the matching field of
/// the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file with optional "synth" and "pipeline" sections.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for the scene and the pipeline.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the 512 texel preset.
    #[arg(long, global = true)]
    pub large: bool,
    /// Texel resolution of the reconstruction.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Number of condition views used.
    #[arg(long, global = true)]
    pub views: Option<usize>,
    #[arg(long, global = true)]
    pub fit_steps: Option<usize>,
    #[arg(long, global = true)]
    pub sh_degree: Option<usize>,
    #[arg(long, global = true)]
    pub tile_size: Option<usize>,
    #[arg(long, global = true)]
    pub no_scale_refinement: bool,
    /// Surface deformation amplitude of the synthetic body, in meters.
    #[arg(long, global = true)]
    pub amplitude: Option<f64>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub texture_resolution: Option<usize>,
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    #[arg(long, global = true)]
    pub rings: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<Config> {
        let mut c = Config::load(self.config.as_deref())?;
        if self.large {
            c.pipeline.resolution = PipelineConfig::large().resolution;
        }
        let p = &mut c.pipeline;
        let s = &mut c.synth;
        if let Some(v) = self.seed {
            p.seed = v;
            s.seed = v;
        }
        set(&mut p.resolution, self.resolution);
        set(&mut p.views, self.views);
        set(&mut p.fit.steps, self.fit_steps);
        set(&mut p.sh_degree, self.sh_degree);
        set(&mut p.tile_size, self.tile_size);
        if self.no_scale_refinement {
            p.scale_refinement = false;
        }
        set(&mut s.amplitude, self.amplitude);
        set(&mut s.image_size, self.image_size);
        set(&mut s.texture_resolution, self.texture_resolution);
        set(&mut s.segments, self.segments);
        set(&mut s.rings, self.rings);
        p.validate()?;
        s.validate()?;
        Ok(c)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}
