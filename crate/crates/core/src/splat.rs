//! Tile-based software Gaussian splatting: covariance projection, global
//! depth sort and front-to-back alpha compositing.

use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;

use crate::avatar::GaussianSet;
use crate::error::Result;
use crate::raster::ImageBuffer;
use crate::scene::{Camera, Mat3, Vec2, Vec3};

pub const NEAR_PLANE: f64 = 0.01;
pub const DEFAULT_DILATION: f64 = 0.3;
pub const DEFAULT_TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis cutoff (3σ).
const CUTOFF: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatConfig {
    pub tile_size: usize,
    /// Added to the diagonal of every projected covariance, in px².
    pub dilation: f64,
    pub background: [f64; 3],
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            dilation: DEFAULT_DILATION,
            background: [0.0; 3],
        }
    }
}

/// A Gaussian projected onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean: Vec2,
    pub cov: Matrix2<f64>,
    /// Camera-space depth of the mean.
    pub depth: f64,
}

/// Jacobian of the pinhole projection at camera-space point `c`.
pub fn projection_jacobian(cam: &Camera, c: &Vec3) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let (fx, s, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let z = c.z;
    let z2 = z * z;
    Matrix2x3::new(fx / z, s / z, -(fx * c.x + s * c.y) / z2, 0.0, fy / z, -fy * c.y / z2)
}

/// Projects a world-space Gaussian. Returns `None` when the mean is not in
/// front of the near plane.
pub fn project_covariance(cov: &Mat3, p: &Vec3, cam: &Camera, dilation: f64) -> Option<Projected> {
    let c = cam.to_camera(p);
    if !(c.z > NEAR_PLANE) {
        return None;
    }
    let j = projection_jacobian(cam, &c);
    let w = cam.extrinsics.rotation;
    let t = j * w;
    let mut s = t * cov * t.transpose();
    s = (s + s.transpose()) * 0.5;
    s[(0, 0)] += dilation;
    s[(1, 1)] += dilation;
    Some(Projected {
        mean: cam.camera_to_pixel(&c),
        cov: s,
        depth: c.z,
    })
}

/// Rendered color, accumulated opacity and per-pixel contribution counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFrame {
    pub color: ImageBuffer,
    /// Accumulated opacity `1 − T`.
    pub alpha: Vec<f32>,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f32>,
    pub splat_count: Vec<u32>,
    /// Gaussians skipped because their projected covariance was singular.
    pub singular: usize,
    /// Gaussians culled at the near plane or outside the frame.
    pub culled: usize,
}

struct Splat {
    mean: Vec2,
    inv: Matrix2<f64>,
    depth: f64,
    index: usize,
    color: [f64; 3],
    opacity: f64,
    x_range: (usize, usize),
    y_range: (usize, usize),
}

enum Prepared {
    Culled,
    Singular,
    Ready(Box<Splat>),
}

fn prepare(set: &GaussianSet, i: usize, cam: &Camera, cfg: &SplatConfig, origin: &Vec3) -> Prepared {
    let Some(pr) = project_covariance(&set.covariances[i], &set.means[i], cam, cfg.dilation) else {
        return Prepared::Culled;
    };
    let det = pr.cov.determinant();
    if !(det > 0.0) || !det.is_finite() || !(pr.cov[(0, 0)] > 0.0) {
        return Prepared::Singular;
    }
    let Some(inv) = pr.cov.try_inverse() else {
        return Prepared::Singular;
    };
    let half_trace = 0.5 * (pr.cov[(0, 0)] + pr.cov[(1, 1)]);
    let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    let radius = CUTOFF.sqrt() * lambda_max.sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = (pr.mean.x - radius).ceil().max(0.0);
    let x1 = (pr.mean.x + radius).floor().min(w - 1.0);
    let y0 = (pr.mean.y - radius).ceil().max(0.0);
    let y1 = (pr.mean.y + radius).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Prepared::Culled;
    }
    let dir = set.means[i] - origin;
    let dir = if dir.norm() > 0.0 { dir.normalize() } else { Vec3::z() };
    Prepared::Ready(Box::new(Splat {
        mean: pr.mean,
        inv,
        depth: pr.depth,
        index: i,
        color: set.color(i, &dir),
        opacity: set.opacities[i],
        x_range: (x0 as usize, x1 as usize),
        y_range: (y0 as usize, y1 as usize),
    }))
}

/// Renders a Gaussian set from `cam`.
pub fn render(set: &GaussianSet, cam: &Camera, cfg: &SplatConfig) -> Result<SplatFrame> {
    cam.validate()?;
    let tile = cfg.tile_size.max(1);
    let (w, h) = (cam.width, cam.height);
    let origin = cam.center();
    let prepared: Vec<Prepared> = (0..set.len()).into_par_iter().map(|i| prepare(set, i, cam, cfg, &origin)).collect();
    let mut singular = 0;
    let mut culled = 0;
    let mut splats = Vec::with_capacity(prepared.len());
    for p in prepared {
        match p {
            Prepared::Culled => culled += 1,
            Prepared::Singular => singular += 1,
            Prepared::Ready(s) => splats.push(*s),
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        for ty in s.y_range.0 / tile..=s.y_range.1 / tile {
            for tx in s.x_range.0 / tile..=s.x_range.1 / tile {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    struct TileOut {
        color: Vec<[f64; 3]>,
        trans: Vec<f64>,
        count: Vec<u32>,
    }
    let outputs: Vec<TileOut> = bins
        .par_iter()
        .enumerate()
        .map(|(b, list)| {
            let (tx, ty) = (b % tiles_x, b / tiles_x);
            let (px0, py0) = (tx * tile, ty * tile);
            let (px1, py1) = ((px0 + tile).min(w), (py0 + tile).min(h));
            let n = (px1 - px0) * (py1 - py0);
            let mut out = TileOut {
                color: Vec::with_capacity(n),
                trans: Vec::with_capacity(n),
                count: Vec::with_capacity(n),
            };
            for py in py0..py1 {
                for px in px0..px1 {
                    let mut t = 1.0f64;
                    let mut c = [0.0f64; 3];
                    let mut count = 0u32;
                    for &k in list {
                        let s = &splats[k as usize];
                        if px < s.x_range.0 || px > s.x_range.1 || py < s.y_range.0 || py > s.y_range.1 {
                            continue;
                        }
                        let d = Vec2::new(px as f64 - s.mean.x, py as f64 - s.mean.y);
                        let m = d.dot(&(s.inv * d));
                        if !(m <= CUTOFF) {
                            continue;
                        }
                        let a = s.opacity * (-0.5 * m).exp();
                        if a <= 0.0 {
                            continue;
                        }
                        for (ch, v) in c.iter_mut().enumerate() {
                            *v += t * a * s.color[ch];
                        }
                        t *= 1.0 - a;
                        count += 1;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    out.color.push(c);
                    out.trans.push(t);
                    out.count.push(count);
                }
            }
            out
        })
        .collect();

    let mut color = ImageBuffer::new(w, h, 3);
    let mut alpha = vec![0.0f32; w * h];
    let mut transmittance = vec![1.0f32; w * h];
    let mut splat_count = vec![0u32; w * h];
    for (b, out) in outputs.into_iter().enumerate() {
        let (tx, ty) = (b % tiles_x, b / tiles_x);
        let (px0, py0) = (tx * tile, ty * tile);
        let px1 = (px0 + tile).min(w);
        let mut k = 0;
        for py in py0..(py0 + tile).min(h) {
            for px in px0..px1 {
                let i = py * w + px;
                let t = out.trans[k];
                for ch in 0..3 {
                    color.data[3 * i + ch] = (out.color[k][ch] + t * cfg.background[ch]) as f32;
                }
                alpha[i] = (1.0 - t) as f32;
                transmittance[i] = t as f32;
                splat_count[i] = out.count[k];
                k += 1;
            }
        }
    }
    color.mask = alpha.clone();
    Ok(SplatFrame {
        color,
        alpha,
        transmittance,
        splat_count,
        singular,
        culled,
    })
}
