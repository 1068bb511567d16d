use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dut_cli::config::{Config, Overrides};
use dut_cli::serve::{self, Assets};
use dut_core::avatar::GaussianSet;
use dut_core::deformation::fit_deformation;
use dut_core::io;
use dut_core::kinematics::pose_vertices;
use dut_core::metrics::MetricReport;
use dut_core::pipeline::{write_outputs, Mode, Pipeline, StageTimings};
use dut_core::scene::{Camera, LookAt};
use dut_core::synth::{generate, read_scene, write_scene, SyntheticScene};
use dut_core::unprojection::unproject;
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dut", version, about = "Double unprojected textures on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Unproject the condition views of a frame onto the posed template.
    Unproject {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Deformation map to apply first, giving the second unprojection.
        #[arg(long)]
        deformation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the deformation map of a frame to its point cloud.
    FitGeo {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the Gaussian avatar of a frame.
    Avatar {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Double)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a frame's avatar from a rig camera or a look-at camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Double)]
        mode: ModeArg,
        /// Render this Gaussian file instead of building the avatar.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        /// Rig camera index.
        #[arg(long, conflicts_with = "position")]
        camera: Option<usize>,
        /// Camera position as x,y,z.
        #[arg(long, value_parser = parse_vec3, requires = "target", allow_hyphen_values = true)]
        position: Option<[f64; 3]>,
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        target: Option<[f64; 3]>,
        #[arg(long, value_parser = parse_vec3, default_value = "0,1,0", allow_hyphen_values = true)]
        up: [f64; 3],
        #[arg(long, default_value_t = 40.0)]
        fov_deg: f64,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run frames end to end and score the held-out views.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Frames to run; all when omitted.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Single, ModeArg::Double])]
        modes: Vec<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve rendered frames to the viewer over WebSocket.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Double)]
        mode: ModeArg,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum ModeArg {
    Single,
    Double,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => Mode::Single,
            ModeArg::Double => Mode::Double,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.overrides.resolve()?;
    match cli.command {
        Command::Synth { out } => synth(&config, &out),
        Command::Unproject {
            scene,
            frame,
            deformation,
            out,
        } => unproject_cmd(&config, &load(&scene)?, frame, deformation.as_deref(), &out),
        Command::FitGeo { scene, frame, out } => fit_geo(&config, &load(&scene)?, frame, &out),
        Command::Avatar { scene, frame, mode, out } => avatar(&config, &load(&scene)?, frame, mode.into(), &out),
        Command::Render {
            scene,
            frame,
            mode,
            gaussians,
            camera,
            position,
            target,
            up,
            fov_deg,
            width,
            height,
            out,
        } => {
            let scene = load(&scene)?;
            let cam = match (camera, position, target) {
                (Some(i), _, _) => scene
                    .rig
                    .cameras
                    .get(i)
                    .cloned()
                    .with_context(|| format!("camera {i} out of range ({} cameras)", scene.rig.cameras.len()))?,
                (None, Some(p), Some(t)) => LookAt {
                    position: p,
                    target: t,
                    up,
                    fov_deg,
                    width,
                    height,
                }
                .camera()?,
                _ => bail!("give either --camera or --position and --target"),
            };
            render_cmd(&config, &scene, frame, mode.into(), gaussians.as_deref(), &cam, &out)
        }
        Command::Eval { scene, frames, modes, out } => eval(&config, &load(&scene)?, frames, &modes, &out),
        Command::Serve { scene, mode, addr } => serve_cmd(&config, &load(&scene)?, mode.into(), &addr),
    }
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| e.to_string())?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 comma-separated numbers, got {}", v.len()))
}

fn load(dir: &Path) -> Result<SyntheticScene> {
    read_scene(dir).with_context(|| format!("reading scene {}", dir.display()))
}

/// Creates `out` and records the effective configuration in it.
fn prepare(out: &Path, config: &Config) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&out.join("config.json"), config)?;
    Ok(())
}

fn log_timings(frame: usize, t: &StageTimings) {
    let parts: Vec<String> = t.stages().iter().map(|(k, v)| format!("{k} {v:.1} ms")).collect();
    info!("frame {frame}: {}; total {:.1} ms", parts.join(", "), t.total);
}

fn synth(config: &Config, out: &Path) -> Result<()> {
    let scene = generate(&config.synth)?;
    write_scene(out, &scene)?;
    info!(
        "wrote {} frames x {} cameras to {}",
        scene.frame_count(),
        scene.rig.cameras.len(),
        out.display()
    );
    Ok(())
}

fn unproject_cmd(config: &Config, scene: &SyntheticScene, frame: usize, deformation: Option<&Path>, out: &Path) -> Result<()> {
    scene.check_frame(frame)?;
    let p = Pipeline::new(scene, config.pipeline.clone())?;
    let d = deformation.map(io::read_texel_map).transpose()?;
    let views = p.condition_views(frame)?;
    let r = unproject(
        &scene.tracking_template,
        &p.coverage,
        &scene.motions[frame],
        d.as_ref(),
        &views,
        &config.pipeline.visibility,
    )?;
    prepare(out, config)?;
    let res = r.fused.resolution;
    io::write_texel_map(&out.join("texture.dutf"), &r.fused)?;
    io::write_texel_map(&out.join("coverage.dutf"), &r.coverage_count)?;
    fs::write(out.join("texture.png"), io::encode_png_raw(res, res, 3, &r.fused.data)?)?;
    for (&cam, vis) in scene.rig.condition.iter().zip(&r.per_view_visibility) {
        io::write_mask_png(&out.join(format!("visibility_cam_{cam:02}.png")), res, res, &vis.data)?;
    }
    let seen = r.coverage_count.data.iter().filter(|&&c| c > 0.0).count();
    info!("{seen} of {} texels seen by at least one view", res * res);
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    frame: usize,
    steps: usize,
    initial_chamfer: f64,
    final_chamfer: f64,
    initial_loss: f64,
    final_loss: f64,
}

fn fit_geo(config: &Config, scene: &SyntheticScene, frame: usize, out: &Path) -> Result<()> {
    scene.check_frame(frame)?;
    let p = Pipeline::new(scene, config.pipeline.clone())?;
    let t = &scene.tracking_template;
    let m = &scene.motions[frame];
    let first = p.unproject_onto(frame, &pose_vertices(t, m, None)?)?;
    let cfg = &config.pipeline;
    let fit = fit_deformation(t, m, &first, &scene.gt_pointclouds[frame], cfg.weights, &cfg.fit)?;
    prepare(out, config)?;
    io::write_texel_map(&out.join("deformation.dutf"), &fit.deformation)?;
    fs::write(out.join("fit_log.jsonl"), fit.log_jsonl())?;
    let summary = FitSummary {
        frame,
        steps: cfg.fit.steps,
        initial_chamfer: fit.initial.chamfer,
        final_chamfer: fit.last.chamfer,
        initial_loss: fit.initial.total,
        final_loss: fit.last.total,
    };
    io::write_json(&out.join("fit.json"), &summary)?;
    info!("chamfer {:.3e} -> {:.3e}", summary.initial_chamfer, summary.final_chamfer);
    Ok(())
}

fn avatar(config: &Config, scene: &SyntheticScene, frame: usize, mode: Mode, out: &Path) -> Result<()> {
    let p = Pipeline::new(scene, config.pipeline.clone())?;
    let (a, timings) = p.build(frame, mode)?;
    log_timings(frame, &timings);
    prepare(out, config)?;
    io::write_texel_map(&out.join("texture_first.dutf"), &a.first.fused)?;
    if let Some(second) = &a.second {
        io::write_texel_map(&out.join("texture_second.dutf"), &second.fused)?;
    }
    if let Some(fit) = &a.fit {
        io::write_texel_map(&out.join("deformation.dutf"), &fit.deformation)?;
        fs::write(out.join("fit_log.jsonl"), fit.log_jsonl())?;
    }
    fs::write(out.join("gaussians.bin"), a.gaussians.encode())?;
    io::write_json(&out.join("timings.json"), &timings)?;
    info!("{} gaussians written to {}", a.gaussians.len(), out.display());
    Ok(())
}

fn render_cmd(
    config: &Config,
    scene: &SyntheticScene,
    frame: usize,
    mode: Mode,
    gaussians: Option<&Path>,
    cam: &Camera,
    out: &Path,
) -> Result<()> {
    let p = Pipeline::new(scene, config.pipeline.clone())?;
    let set = match gaussians {
        Some(path) => GaussianSet::decode(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => p.build(frame, mode)?.0.gaussians,
    };
    let start = std::time::Instant::now();
    let f = p.render(&set, cam)?;
    info!(
        "rendered {} gaussians at {}x{} in {:.1} ms",
        set.len(),
        cam.width,
        cam.height,
        start.elapsed().as_secs_f64() * 1e3
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::write_png(out, &f.color)?;
    Ok(())
}

#[derive(Serialize)]
struct FrameSummary {
    frame: usize,
    modes: BTreeMap<String, MetricReport>,
    /// Double minus single mode PSNR when both ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    du_gain_db: Option<f64>,
}

fn eval(config: &Config, scene: &SyntheticScene, frames: Option<Vec<usize>>, modes: &[ModeArg], out: &Path) -> Result<()> {
    let p = Pipeline::new(scene, config.pipeline.clone())?;
    prepare(out, config)?;
    let frames = frames.unwrap_or_else(|| (0..scene.frame_count()).collect());
    let mut summary = Vec::new();
    for &frame in &frames {
        let mut reports = BTreeMap::new();
        for &m in modes {
            let mode = Mode::from(m);
            let name = match mode {
                Mode::Single => "single",
                Mode::Double => "double",
            };
            let result = p.run_frame(frame, mode)?;
            log_timings(frame, &result.timings);
            info!(
                "frame {frame} {name}: PSNR {:.2} dB, SSIM {:.4}, masked PSNR {:.2} dB",
                result.metrics.psnr, result.metrics.ssim, result.metrics.psnr_masked
            );
            write_outputs(&out.join(format!("frame_{frame:03}")).join(name), &result, scene)?;
            reports.insert(name.to_string(), result.metrics);
        }
        let du_gain_db = match (reports.get("single"), reports.get("double")) {
            (Some(s), Some(d)) => Some(d.psnr - s.psnr),
            _ => None,
        };
        summary.push(FrameSummary {
            frame,
            modes: reports,
            du_gain_db,
        });
    }
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn serve_cmd(config: &Config, scene: &SyntheticScene, mode: Mode, addr: &str) -> Result<()> {
    let assets = Arc::new(Assets::build(scene, config.pipeline.clone(), mode)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        println!("listening on http://{local}");
        std::io::stdout().flush()?;
        info!("serving {} frames on ws://{local}/ws", assets.frames.len());
        serve::run(listener, assets).await
    })
}
