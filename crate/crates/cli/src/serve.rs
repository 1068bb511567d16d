//! Frame render service for the viewer.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use dut_core::avatar::GaussianSet;
use dut_core::io::encode_png;
use dut_core::pipeline::{Mode, Pipeline, PipelineConfig, StageTimings};
use dut_core::splat::render;
use dut_core::synth::SyntheticScene;
use log::{debug, info, warn};
use tokio::net::TcpListener;

use crate::protocol::{encode_frame, ClientMessage, ServerMessage, ViewRequest};

/// Per-frame Gaussians built once at startup and shared read-only by all
/// connections.
pub struct Assets {
    pub config: PipelineConfig,
    pub mode: Mode,
    pub frames: Vec<FrameAsset>,
}

pub struct FrameAsset {
    pub gaussians: GaussianSet,
    pub build: StageTimings,
}

pub struct Rendered {
    pub png: Vec<u8>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Assets {
    pub fn build(scene: &SyntheticScene, config: PipelineConfig, mode: Mode) -> Result<Self> {
        let pipeline = Pipeline::new(scene, config.clone())?;
        let mut frames = Vec::with_capacity(scene.frame_count());
        for frame in 0..scene.frame_count() {
            let (avatar, build) = pipeline.build(frame, mode)?;
            info!("frame {frame}: {} gaussians, {}", avatar.gaussians.len(), format_stages(&build));
            frames.push(FrameAsset {
                gaussians: avatar.gaussians,
                build,
            });
        }
        Ok(Self { config, mode, frames })
    }

    pub fn render_view(&self, req: &ViewRequest) -> std::result::Result<Rendered, String> {
        let asset = self
            .frames
            .get(req.frame as usize)
            .ok_or_else(|| format!("frame {} out of range (0..{})", req.frame, self.frames.len()))?;
        let cam = req.look_at()?.camera().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let frame = render(&asset.gaussians, &cam, &self.config.splat()).map_err(|e| e.to_string())?;
        let render_ms = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let png = encode_png(&frame.color).map_err(|e| e.to_string())?;
        let encode_ms = start.elapsed().as_secs_f64() * 1e3;
        let timings = asset.build.with_render(render_ms);
        let mut timings_ms: BTreeMap<String, f64> = timings.stages().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        timings_ms.insert("total".into(), timings.total);
        timings_ms.insert("encode".into(), encode_ms);
        Ok(Rendered { png, timings_ms })
    }
}

fn format_stages(t: &StageTimings) -> String {
    let parts: Vec<String> = t.stages().iter().map(|(k, v)| format!("{k} {v:.1} ms")).collect();
    format!("{} (total {:.1} ms)", parts.join(", "), t.total)
}

pub fn router(assets: Arc<Assets>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/ws", get(upgrade))
        .with_state(assets)
}

pub async fn run(listener: TcpListener, assets: Arc<Assets>) -> Result<()> {
    axum::serve(listener, router(assets))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn healthz(State(assets): State<Arc<Assets>>) -> impl IntoResponse {
    Json(serde_json::json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "frames": assets.frames.len(),
        "mode": assets.mode,
    }))
}

async fn upgrade(ws: WebSocketUpgrade, State(assets): State<Arc<Assets>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, assets))
}

async fn send_json(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

/// Handles one connection's requests in order until it closes.
async fn connection(mut socket: WebSocket, assets: Arc<Assets>) {
    let mut counter: u32 = 0;
    let mut latencies = Vec::new();
    while let Some(msg) = socket.recv().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(Message::Binary(_)) => {
                if !send_json(&mut socket, &error("binary messages are not accepted", None)).await {
                    break;
                }
                continue;
            }
            Ok(_) => continue,
        };
        let req = match serde_json::from_str::<ClientMessage>(&text) {
            Ok(ClientMessage::View(v)) => v,
            Err(e) => {
                if !send_json(&mut socket, &error(&format!("malformed request: {e}"), None)).await {
                    break;
                }
                continue;
            }
        };
        counter = counter.wrapping_add(1);
        let id = req.request_id.unwrap_or(counter);
        let start = Instant::now();
        let job = {
            let assets = assets.clone();
            let req = req.clone();
            tokio::task::spawn_blocking(move || assets.render_view(&req))
        };
        let result = match job.await {
            Ok(r) => r,
            Err(e) => Err(format!("render task failed: {e}")),
        };
        let ok = match result {
            Ok(mut r) => {
                let latency = start.elapsed().as_secs_f64() * 1e3;
                latencies.push(latency);
                r.timings_ms.insert("request".into(), latency);
                debug!("request {id} frame {}: {:.1} ms", req.frame, latency);
                socket.send(Message::Binary(encode_frame(id, &r.png).into())).await.is_ok()
                    && send_json(
                        &mut socket,
                        &ServerMessage::Stats {
                            request_id: id,
                            frame: req.frame,
                            timings_ms: r.timings_ms,
                        },
                    )
                    .await
            }
            Err(message) => {
                warn!("request {id}: {message}");
                send_json(&mut socket, &error(&message, Some(id))).await
            }
        };
        if !ok {
            break;
        }
    }
    if !latencies.is_empty() {
        info!(
            "connection closed after {} frames: p50 {:.1} ms, p95 {:.1} ms",
            latencies.len(),
            percentile(&mut latencies, 0.5),
            percentile(&mut latencies, 0.95)
        );
    }
}

fn error(message: &str, request_id: Option<u32>) -> ServerMessage {
    ServerMessage::Error {
        message: message.to_string(),
        request_id,
    }
}

/// Nearest-rank percentile.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}
