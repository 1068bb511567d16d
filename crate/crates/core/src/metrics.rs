//! Image metrics (L1, SSIM, PSNR) and the Gaussian displacement regularizer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::GaussianParamMap;
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

fn check_mask(a: &ImageBuffer, mask: Option<&[f32]>) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != a.width * a.height {
            return Err(Error::LengthMismatch {
                expected: a.width * a.height,
                got: m.len(),
            });
        }
    }
    Ok(())
}

fn in_mask(mask: Option<&[f32]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i] >= 0.5)
}

/// Sum of per-channel statistics over the selected pixels.
fn reduce<F: Fn(f64, f64) -> f64 + Sync>(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f32]>, f: F) -> (f64, usize) {
    let c = a.channels;
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..a.width * a.height {
        if !in_mask(mask, i) {
            continue;
        }
        for k in 0..c {
            sum += f(a.data[i * c + k] as f64, b.data[i * c + k] as f64);
        }
        n += c;
    }
    (sum, n)
}

/// Mean absolute difference over (masked) pixels and channels. Returns 0
/// when the mask is empty.
pub fn l1(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f32]>) -> Result<f64> {
    check_dims(a, b)?;
    check_mask(a, mask)?;
    let (s, n) = reduce(a, b, mask, |x, y| (x - y).abs());
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f32]>) -> Result<f64> {
    check_dims(a, b)?;
    check_mask(a, mask)?;
    let (s, n) = reduce(a, b, mask, |x, y| (x - y) * (x - y));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Peak-1 PSNR in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f32]>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Per-window SSIM over all fully contained 11×11 windows, averaged over
/// channels. The map is `(w − 10) × (h − 10)` and is indexed by the window's
/// top-left pixel.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<(Vec<f64>, usize, usize)> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let (w, h, c) = (a.width, a.height, a.channels);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let per_channel: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|k| {
            // Horizontal pass over five moment images, then vertical.
            let at = |img: &ImageBuffer, x: usize, y: usize| img.data[(y * w + x) * c + k] as f64;
            let mut hpass = vec![[0.0f64; 5]; ow * h];
            for y in 0..h {
                for x in 0..ow {
                    let mut acc = [0.0; 5];
                    for (t, &gt) in g.iter().enumerate() {
                        let (va, vb) = (at(a, x + t, y), at(b, x + t, y));
                        acc[0] += gt * va;
                        acc[1] += gt * vb;
                        acc[2] += gt * va * va;
                        acc[3] += gt * vb * vb;
                        acc[4] += gt * va * vb;
                    }
                    hpass[y * ow + x] = acc;
                }
            }
            let mut out = vec![0.0; ow * oh];
            for y in 0..oh {
                for x in 0..ow {
                    let mut m = [0.0; 5];
                    for (t, &gt) in g.iter().enumerate() {
                        let r = &hpass[(y + t) * ow + x];
                        for q in 0..5 {
                            m[q] += gt * r[q];
                        }
                    }
                    out[y * ow + x] = ssim_from_moments(&m, c1, c2);
                }
            }
            out
        })
        .collect();
    let mut map = vec![0.0; ow * oh];
    for ch in &per_channel {
        for (m, v) in map.iter_mut().zip(ch) {
            *m += v / c as f64;
        }
    }
    Ok((map, ow, oh))
}

/// SSIM from Gaussian-weighted moments `[μa, μb, E[a²], E[b²], E[ab]]`.
fn ssim_from_moments(m: &[f64; 5], c1: f64, c2: f64) -> f64 {
    let (mu_a, mu_b) = (m[0], m[1]);
    let var_a = m[2] - mu_a * mu_a;
    let var_b = m[3] - mu_b * mu_b;
    let cov = m[4] - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_masked(a, b, None)
}

/// Mean SSIM over windows whose center pixel lies inside the mask. Returns 1
/// when no window qualifies.
pub fn ssim_masked(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[f32]>) -> Result<f64> {
    check_mask(a, mask)?;
    let (map, ow, oh) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if in_mask(mask, (y + r) * a.width + x + r) {
                sum += map[y * ow + x];
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}

/// Squared L2 norm of the displacement channels over valid texels.
pub fn displacement_reg(params: &GaussianParamMap) -> f64 {
    let r = params.resolution();
    (0..r * r)
        .filter(|&i| params.valid(i))
        .map(|i| params.displacement(i).norm_squared())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    #[serde(with = "db")]
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    pub l1_masked: f64,
}

impl ViewMetrics {
    /// `mask` selects the foreground pixels for the masked variants.
    pub fn evaluate(view: usize, rendered: &ImageBuffer, reference: &ImageBuffer, mask: &[f32]) -> Result<Self> {
        Ok(Self {
            view,
            psnr: psnr(rendered, reference, None)?,
            ssim: ssim(rendered, reference)?,
            l1: l1(rendered, reference, None)?,
            psnr_masked: psnr(rendered, reference, Some(mask))?,
            ssim_masked: ssim_masked(rendered, reference, Some(mask))?,
            l1_masked: l1(rendered, reference, Some(mask))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    #[serde(with = "db")]
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    pub l1_masked: f64,
    pub views: Vec<ViewMetrics>,
}

impl MetricReport {
    /// Averages per-view metrics.
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: mean(|v| v.psnr),
            ssim: mean(|v| v.ssim),
            l1: mean(|v| v.l1),
            psnr_masked: mean(|v| v.psnr_masked),
            ssim_masked: mean(|v| v.ssim_masked),
            l1_masked: mean(|v| v.l1_masked),
            views,
        }
    }
}

/// Serializes infinite PSNR as the string `"inf"`.
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad dB value {s}"))),
        }
    }
}
