//! Geometry losses with analytic gradients and a gradient-descent fitter
//! for the deformation map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{lbs_transforms, vertex_uvs, VertexTransforms};
use crate::scene::{MotionFrame, PointCloud, SkinnedTemplate, TexelKind, TexelMap, Vec3};

/// Exact nearest-neighbor search over a static point set using a uniform
/// grid. Ties go to the lower index.
#[derive(Clone, Debug)]
pub struct PointGrid {
    points: Vec<Vec3>,
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

const BRUTE_FORCE_LIMIT: usize = 32;

impl PointGrid {
    pub fn new(points: &[Vec3]) -> Self {
        let n = points.len().max(1);
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if points.is_empty() {
            min = Vec3::zeros();
            max = Vec3::zeros();
        }
        let extent = max - min;
        let longest = extent.max().max(1e-9);
        let floor = longest / 256.0;
        let volume = extent.iter().map(|e| e.max(floor)).product::<f64>();
        let mut cell = (volume / n as f64).cbrt().max(floor);
        let dims_for = |cell: f64| -> [usize; 3] { [0, 1, 2].map(|k| ((extent[k] / cell).floor() as usize + 1).max(1)) };
        let mut dims = dims_for(cell);
        while dims.iter().product::<usize>() > 8 * n + 64 {
            cell *= 1.26;
            dims = dims_for(cell);
        }
        let mut grid = Self {
            points: points.to_vec(),
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let total = dims.iter().product::<usize>();
        let mut counts = vec![0u32; total + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.min[k]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[k] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [usize; 3], q: &Vec3, best: &mut (f64, usize)) {
        let f = self.flat(c);
        for &i in &self.order[self.starts[f] as usize..self.starts[f + 1] as usize] {
            let d = (self.points[i as usize] - q).norm_squared();
            if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                *best = (d, i as usize);
            }
        }
    }

    /// Index and squared distance of the nearest point. Panics on an empty grid.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on an empty grid");
        if self.points.len() <= BRUTE_FORCE_LIMIT {
            return brute_force_nearest(&self.points, q);
        }
        let c = self.cell_of(q).map(|v| v as i64);
        let dims = self.dims.map(|v| v as i64);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = *dims.iter().max().unwrap();
        for r in 0..=max_r {
            let range = |k: usize| ((c[k] - r).max(0), (c[k] + r).min(dims[k] - 1));
            let (x0, x1) = range(0);
            let (y0, y1) = range(1);
            let (z0, z1) = range(2);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    let on_face = (z - c[2]).abs() == r || (y - c[1]).abs() == r;
                    if on_face {
                        for x in x0..=x1 {
                            self.scan_cell([x as usize, y as usize, z as usize], q, &mut best);
                        }
                    } else {
                        for x in [c[0] - r, c[0] + r] {
                            if x >= 0 && x < dims[0] && (r > 0 || x == c[0]) {
                                self.scan_cell([x as usize, y as usize, z as usize], q, &mut best);
                            }
                            if r == 0 {
                                break;
                            }
                        }
                    }
                }
            }
            let bound = r as f64 * self.cell;
            if best.1 != usize::MAX && best.0 <= bound * bound {
                break;
            }
        }
        (best.1, best.0)
    }
}

pub fn brute_force_nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    (best.1, best.0)
}

/// Symmetric Chamfer distance (mean squared nearest distances both ways).
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let ga = PointGrid::new(&a.points);
    let gb = PointGrid::new(&b.points);
    Ok(directed_mean(&a.points, &gb) + directed_mean(&b.points, &ga))
}

fn directed_mean(src: &[Vec3], dst: &PointGrid) -> f64 {
    let d: Vec<f64> = src.par_iter().map(|p| dst.nearest(p).1).collect();
    d.iter().sum::<f64>() / src.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryLossWeights {
    pub lap: f64,
    pub iso: f64,
    pub nc: f64,
}

impl Default for GeometryLossWeights {
    fn default() -> Self {
        Self {
            lap: 1.0,
            iso: 0.1,
            nc: 0.001,
        }
    }
}

impl GeometryLossWeights {
    /// Preset with a stiffer isometry term for hand templates.
    pub fn hands() -> Self {
        Self {
            iso: 0.5,
            ..Self::default()
        }
    }

    pub fn zero() -> Self {
        Self {
            lap: 0.0,
            iso: 0.0,
            nc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lap", self.lap), ("iso", self.iso), ("nc", self.nc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

fn require_adjacency(t: &SkinnedTemplate) -> Result<()> {
    if t.has_adjacency() && t.edges.len() == t.vertices.len() {
        Ok(())
    } else {
        Err(Error::InvalidArgument("template adjacency has not been built".into()))
    }
}

/// Uniform-Laplacian loss and its gradient with respect to `positions`.
pub fn laplacian_loss_grad(t: &SkinnedTemplate, positions: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    require_adjacency(t)?;
    let n = positions.len();
    if n != t.vertices.len() {
        return Err(Error::LengthMismatch {
            expected: t.vertices.len(),
            got: n,
        });
    }
    let lap: Vec<Vec3> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ring = &t.vertex_neighbors[i];
            if ring.is_empty() {
                return Err(Error::IsolatedVertex(i));
            }
            let mean = ring.iter().map(|&j| positions[j]).sum::<Vec3>() / ring.len() as f64;
            Ok(positions[i] - mean)
        })
        .collect::<Result<_>>()?;
    let loss = lap.iter().map(|l| l.norm_squared()).sum::<f64>() / n as f64;
    let scale = 2.0 / n as f64;
    let grad = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut g = lap[k];
            for &i in &t.vertex_neighbors[k] {
                g -= lap[i] / t.vertex_neighbors[i].len() as f64;
            }
            g * scale
        })
        .collect();
    Ok((loss, grad))
}

pub fn laplacian_loss(t: &SkinnedTemplate, positions: &[Vec3]) -> Result<f64> {
    laplacian_loss_grad(t, positions).map(|r| r.0)
}

/// Edge-length isometry loss between the canonical template and
/// `deformed`, with its gradient with respect to `deformed`.
pub fn isometry_loss_grad(t: &SkinnedTemplate, deformed: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    require_adjacency(t)?;
    let n = deformed.len();
    if n != t.vertices.len() {
        return Err(Error::LengthMismatch {
            expected: t.vertices.len(),
            got: n,
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); n];
    for [i, j] in t.unique_edges() {
        let omega = (1.0 / t.edges[i].len() as f64 + 1.0 / t.edges[j].len() as f64) / n as f64;
        let rest = (t.vertices[i] - t.vertices[j]).norm();
        let e = deformed[i] - deformed[j];
        let len = e.norm();
        let diff = len - rest;
        loss += omega * diff * diff;
        if len > 0.0 {
            let g = e * (2.0 * omega * diff / len);
            grad[i] += g;
            grad[j] -= g;
        }
    }
    Ok((loss, grad))
}

pub fn isometry_loss(t: &SkinnedTemplate, deformed: &[Vec3]) -> Result<f64> {
    isometry_loss_grad(t, deformed).map(|r| r.0)
}

/// Normal-consistency loss over one-rings of smooth area-weighted vertex
/// normals, with its gradient with respect to `deformed`.
pub fn normal_consistency_loss_grad(t: &SkinnedTemplate, deformed: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    require_adjacency(t)?;
    let n = deformed.len();
    if n != t.vertices.len() {
        return Err(Error::LengthMismatch {
            expected: t.vertices.len(),
            got: n,
        });
    }
    let sums = crate::mesh::vertex_normal_sums(deformed, &t.triangles);
    let mut normals = Vec::with_capacity(n);
    for (i, s) in sums.iter().enumerate() {
        let len = s.norm();
        if len > 1e-300 {
            normals.push(s / len);
        } else if t.vertex_neighbors[i].is_empty() {
            normals.push(Vec3::zeros());
        } else {
            return Err(Error::ZeroAreaStar(i));
        }
    }
    let per_vertex: Vec<(f64, Vec3)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ring = &t.vertex_neighbors[i];
            if ring.is_empty() {
                return (0.0, Vec3::zeros());
            }
            let mut loss = 0.0;
            let mut g_n = Vec3::zeros();
            let inv_i = 1.0 / ring.len() as f64;
            for &j in ring {
                let c = 1.0 - normals[i].dot(&normals[j]);
                loss += inv_i * c * c;
                // The pair appears in both one-rings with different weights.
                let inv_j = 1.0 / t.vertex_neighbors[j].len() as f64;
                g_n -= normals[j] * (2.0 * c * (inv_i + inv_j));
            }
            (loss / n as f64, g_n / n as f64)
        })
        .collect();
    let loss = per_vertex.iter().map(|p| p.0).sum::<f64>();
    let g_sum: Vec<Vec3> = (0..n)
        .map(|i| {
            let len = sums[i].norm();
            if len == 0.0 {
                return Vec3::zeros();
            }
            let nrm = normals[i];
            let g = per_vertex[i].1;
            (g - nrm * nrm.dot(&g)) / len
        })
        .collect();
    let mut grad = vec![Vec3::zeros(); n];
    for tri in &t.triangles {
        let g = g_sum[tri[0]] + g_sum[tri[1]] + g_sum[tri[2]];
        let (a, b, c) = (deformed[tri[0]], deformed[tri[1]], deformed[tri[2]]);
        grad[tri[0]] += (b - c).cross(&g);
        grad[tri[1]] += (c - a).cross(&g);
        grad[tri[2]] += (a - b).cross(&g);
    }
    Ok((loss, grad))
}

pub fn normal_consistency_loss(t: &SkinnedTemplate, deformed: &[Vec3]) -> Result<f64> {
    normal_consistency_loss_grad(t, deformed).map(|r| r.0)
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometryLoss {
    pub total: f64,
    pub chamfer: f64,
    pub lap: f64,
    pub iso: f64,
    pub nc: f64,
}

impl GeometryLoss {
    pub fn is_finite(&self) -> bool {
        [self.total, self.chamfer, self.lap, self.iso, self.nc]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Precomputed state for repeated loss evaluations against one target at
/// one pose. Deformations are flat `R·R·3` arrays in f64.
pub struct GeometryProblem<'a> {
    template: &'a SkinnedTemplate,
    transforms: VertexTransforms,
    taps: Vec<[(usize, f64); 4]>,
    resolution: usize,
    target: &'a PointCloud,
    target_grid: PointGrid,
    weights: GeometryLossWeights,
}

impl<'a> GeometryProblem<'a> {
    pub fn new(
        t: &'a SkinnedTemplate,
        m: &MotionFrame,
        resolution: usize,
        target: &'a PointCloud,
        weights: GeometryLossWeights,
    ) -> Result<Self> {
        require_adjacency(t)?;
        weights.validate()?;
        if target.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        let probe = TexelMap::zeros(resolution, 1, TexelKind::Deformation);
        let taps = vertex_uvs(t).iter().map(|uv| probe.bilinear_taps(uv)).collect();
        Ok(Self {
            template: t,
            transforms: lbs_transforms(t, m)?,
            taps,
            resolution,
            target,
            target_grid: PointGrid::new(&target.points),
            weights,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn vertex_count(&self) -> usize {
        self.template.vertices.len()
    }

    /// Texels touched by at least one vertex with nonzero bilinear weight.
    pub fn support(&self) -> Vec<bool> {
        let mut s = vec![false; self.resolution * self.resolution];
        for taps in &self.taps {
            for &(i, w) in taps {
                if w != 0.0 {
                    s[i] = true;
                }
            }
        }
        s
    }

    pub fn deformed_canonical(&self, d: &[f64]) -> Vec<Vec3> {
        self.template
            .vertices
            .iter()
            .zip(&self.taps)
            .map(|(v, taps)| {
                let mut p = *v;
                for &(i, w) in taps {
                    if w != 0.0 {
                        p += Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]) * w;
                    }
                }
                p
            })
            .collect()
    }

    pub fn posed(&self, canonical: &[Vec3]) -> Vec<Vec3> {
        self.transforms.per_vertex.iter().zip(canonical).map(|(a, p)| a.apply(p)).collect()
    }

    /// Loss terms and the gradient with respect to every entry of `d`.
    pub fn evaluate(&self, d: &[f64]) -> Result<(GeometryLoss, Vec<f64>)> {
        let r2 = self.resolution * self.resolution;
        if d.len() != 3 * r2 {
            return Err(Error::LengthMismatch {
                expected: 3 * r2,
                got: d.len(),
            });
        }
        let t = self.template;
        let nv = t.vertices.len();
        let canonical = self.deformed_canonical(d);
        let posed = self.posed(&canonical);

        // Chamfer with correspondences frozen at this evaluation.
        let fwd: Vec<(usize, f64)> = posed.par_iter().map(|p| self.target_grid.nearest(p)).collect();
        let vertex_grid = PointGrid::new(&posed);
        let bwd: Vec<(usize, f64)> = self.target.points.par_iter().map(|q| vertex_grid.nearest(q)).collect();
        let m = self.target.points.len() as f64;
        let chamfer = fwd.iter().map(|f| f.1).sum::<f64>() / nv as f64 + bwd.iter().map(|b| b.1).sum::<f64>() / m;
        let mut g_posed: Vec<Vec3> = posed
            .iter()
            .zip(&fwd)
            .map(|(p, &(j, _))| (p - self.target.points[j]) * (2.0 / nv as f64))
            .collect();
        for (q, &(i, _)) in self.target.points.iter().zip(&bwd) {
            g_posed[i] += (posed[i] - q) * (2.0 / m);
        }

        let w = self.weights;
        let (lap, g_lap) = laplacian_loss_grad(t, &posed)?;
        for (g, l) in g_posed.iter_mut().zip(&g_lap) {
            *g += l * w.lap;
        }
        let (iso, g_iso) = if w.iso > 0.0 {
            isometry_loss_grad(t, &canonical)?
        } else {
            (isometry_loss(t, &canonical)?, Vec::new())
        };
        let (nc, g_nc) = if w.nc > 0.0 {
            normal_consistency_loss_grad(t, &canonical)?
        } else {
            (normal_consistency_loss(t, &canonical)?, Vec::new())
        };

        let g_canon: Vec<Vec3> = (0..nv)
            .into_par_iter()
            .map(|i| {
                let mut g = self.transforms.per_vertex[i].linear.transpose() * g_posed[i];
                if !g_iso.is_empty() {
                    g += g_iso[i] * w.iso;
                }
                if !g_nc.is_empty() {
                    g += g_nc[i] * w.nc;
                }
                g
            })
            .collect();
        let mut grad = vec![0.0; 3 * r2];
        for (taps, g) in self.taps.iter().zip(&g_canon) {
            for &(i, wt) in taps {
                if wt != 0.0 {
                    grad[3 * i] += wt * g.x;
                    grad[3 * i + 1] += wt * g.y;
                    grad[3 * i + 2] += wt * g.z;
                }
            }
        }
        let loss = GeometryLoss {
            total: chamfer + w.lap * lap + w.iso * iso + w.nc * nc,
            chamfer,
            lap,
            iso,
            nc,
        };
        Ok((loss, grad))
    }
}

/// Total geometry loss for deformation map `d` and its gradient as a
/// deformation-kind map.
pub fn geometry_loss_and_grad(
    t: &SkinnedTemplate,
    m: &MotionFrame,
    d: &TexelMap,
    target: &PointCloud,
    w: GeometryLossWeights,
) -> Result<(GeometryLoss, TexelMap)> {
    d.expect(TexelKind::Deformation, 3)?;
    if d.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("deformation map has non-finite texels".into()));
    }
    let problem = GeometryProblem::new(t, m, d.resolution, target, w)?;
    let flat: Vec<f64> = d.data.iter().map(|&v| v as f64).collect();
    let (loss, grad) = problem.evaluate(&flat)?;
    let g = TexelMap::from_data(d.resolution, 3, TexelKind::Deformation, grad.iter().map(|&v| v as f32).collect())?;
    Ok((loss, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    /// Step applied to the gradient scaled by the vertex count, so the
    /// effective per-vertex rate does not depend on mesh density.
    pub step_size: f64,
    /// Maximum per-texel update length in meters.
    pub clip: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            step_size: 0.1,
            clip: 0.002,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLogEntry {
    pub step: usize,
    pub loss: f64,
    pub chamfer: f64,
    pub lap: f64,
    pub iso: f64,
    pub nc: f64,
}

impl FitLogEntry {
    fn new(step: usize, l: &GeometryLoss) -> Self {
        Self {
            step,
            loss: l.total,
            chamfer: l.chamfer,
            lap: l.lap,
            iso: l.iso,
            nc: l.nc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub deformation: TexelMap,
    pub initial: GeometryLoss,
    /// Loss of the returned map.
    pub last: GeometryLoss,
    pub log: Vec<FitLogEntry>,
}

impl FitOutcome {
    /// One JSON object per line.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
            .collect()
    }
}

/// Gradient descent from `D = 0`. Returns the best iterate seen, so the
/// final loss never exceeds the initial one.
pub fn fit_deformation_at(
    t: &SkinnedTemplate,
    m: &MotionFrame,
    resolution: usize,
    target: &PointCloud,
    w: GeometryLossWeights,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.clip > 0.0) {
        return Err(Error::InvalidArgument("step size and clip must be positive".into()));
    }
    let problem = GeometryProblem::new(t, m, resolution, target, w)?;
    let scale = problem.vertex_count() as f64 * cfg.step_size;
    let mut d = vec![0.0; 3 * resolution * resolution];
    let mut best = d.clone();
    let mut log = Vec::with_capacity(cfg.steps + 1);
    let (initial, mut grad) = problem.evaluate(&d)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("{initial:?}"),
        });
    }
    log.push(FitLogEntry::new(0, &initial));
    let mut best_loss = initial;
    for step in 1..=cfg.steps {
        for (dk, gk) in d.chunks_exact_mut(3).zip(grad.chunks_exact(3)) {
            let mut u = Vec3::new(gk[0], gk[1], gk[2]) * scale;
            let len = u.norm();
            if len > cfg.clip {
                u *= cfg.clip / len;
            }
            dk[0] -= u.x;
            dk[1] -= u.y;
            dk[2] -= u.z;
        }
        let (loss, g) = problem.evaluate(&d)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{loss:?}"),
            });
        }
        log.push(FitLogEntry::new(step, &loss));
        if loss.total < best_loss.total {
            best_loss = loss;
            best.copy_from_slice(&d);
        }
        grad = g;
    }
    let deformation = TexelMap::from_data(resolution, 3, TexelKind::Deformation, best.iter().map(|&v| v as f32).collect())?;
    let stored: Vec<f64> = deformation.data.iter().map(|&v| v as f64).collect();
    let last = problem.evaluate(&stored)?.0;
    Ok(FitOutcome {
        deformation,
        initial,
        last,
        log,
    })
}

/// Fits at the resolution of the first unprojection's fused texture.
pub fn fit_deformation(
    t: &SkinnedTemplate,
    m: &MotionFrame,
    first_unprojection: &crate::unprojection::UnprojectionResult,
    target: &PointCloud,
    w: GeometryLossWeights,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    fit_deformation_at(t, m, first_unprojection.fused.resolution, target, w, cfg)
}

/// Maps a first-pass texture and a normal map to a deformation map.
pub trait DeformationPredictor {
    fn predict(&self, first_texture: &TexelMap, normals: &TexelMap) -> Result<TexelMap>;
}

/// Reference predictor: optimizes the geometry loss directly against a
/// target point cloud. The input maps only fix the output resolution.
pub struct FittingPredictor<'a> {
    pub template: &'a SkinnedTemplate,
    pub motion: &'a MotionFrame,
    pub target: &'a PointCloud,
    pub weights: GeometryLossWeights,
    pub config: FitConfig,
}

impl DeformationPredictor for FittingPredictor<'_> {
    fn predict(&self, first_texture: &TexelMap, normals: &TexelMap) -> Result<TexelMap> {
        if first_texture.resolution != normals.resolution {
            return Err(Error::ResolutionMismatch(first_texture.resolution, normals.resolution));
        }
        let out = fit_deformation_at(
            self.template,
            self.motion,
            first_texture.resolution,
            self.target,
            self.weights,
            &self.config,
        )?;
        Ok(out.deformation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::pose_vertices;
    use crate::mesh::{capsule, grid_patch, icosphere, CapsuleShape};
    use crate::scene::{build_adjacency, Joint, RigidTransform};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
    }

    fn naive_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let dir = |s: &[Vec3], d: &[Vec3]| {
            s.iter()
                .map(|p| d.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / s.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::new(vec![Vec3::zeros()]);
        let b = PointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(Error::EmptyPointCloud)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_points(&mut rng, 50);
        let b = random_points(&mut rng, 50);
        let c = chamfer(&PointCloud::new(a.clone()), &PointCloud::new(b.clone())).unwrap();
        assert!((c - naive_chamfer(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // A flat cloud, a clustered cloud and a uniform cloud.
        let flat: Vec<Vec3> = (0..3000).map(|_| Vec3::new(rng.gen(), rng.gen(), 0.0)).collect();
        let clustered: Vec<Vec3> = (0..3000)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 10.0 };
                Vec3::new(c + rng.gen::<f64>() * 0.01, rng.gen::<f64>() * 0.01, rng.gen::<f64>())
            })
            .collect();
        let uniform = random_points(&mut rng, 3000);
        for pts in [flat, clustered, uniform] {
            let grid = PointGrid::new(&pts);
            for _ in 0..300 {
                let q = Vec3::new(rng.gen_range(-2.0..12.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0));
                let (i, d) = grid.nearest(&q);
                let (j, e) = brute_force_nearest(&pts, &q);
                assert_eq!(d, e);
                assert_eq!(i, j);
            }
        }
    }

    fn grid_t(nx: usize) -> SkinnedTemplate {
        build_adjacency(&grid_patch(nx, nx, 1.0, 1.0)).unwrap()
    }

    fn naive_laplacian(t: &SkinnedTemplate, p: &[Vec3]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let mut nb = Vec::new();
            for tri in &t.triangles {
                if tri.contains(&i) {
                    for &v in tri {
                        if v != i && !nb.contains(&v) {
                            nb.push(v);
                        }
                    }
                }
            }
            let mut mean = Vec3::zeros();
            for &j in &nb {
                mean += p[j];
            }
            mean /= nb.len() as f64;
            total += (p[i] - mean).norm_squared();
        }
        total / p.len() as f64
    }

    fn naive_isometry(t: &SkinnedTemplate, d: &[Vec3]) -> f64 {
        let mut total = 0.0;
        for i in 0..d.len() {
            let mut edges: Vec<usize> = Vec::new();
            for tri in &t.triangles {
                for k in 0..3 {
                    let (a, b) = (tri[k], tri[(k + 1) % 3]);
                    let other = if a == i {
                        b
                    } else if b == i {
                        a
                    } else {
                        continue;
                    };
                    if !edges.contains(&other) {
                        edges.push(other);
                    }
                }
            }
            let mut s = 0.0;
            for &j in &edges {
                let l0 = (t.vertices[i] - t.vertices[j]).norm();
                let l1 = (d[i] - d[j]).norm();
                s += (l1 - l0).powi(2);
            }
            total += s / edges.len() as f64;
        }
        total / d.len() as f64
    }

    fn naive_normals(p: &[Vec3], tris: &[[usize; 3]]) -> Vec<Vec3> {
        (0..p.len())
            .map(|i| {
                let mut s = Vec3::zeros();
                for t in tris {
                    if t.contains(&i) {
                        s += (p[t[1]] - p[t[0]]).cross(&(p[t[2]] - p[t[0]]));
                    }
                }
                s.normalize()
            })
            .collect()
    }

    fn naive_nc(t: &SkinnedTemplate, d: &[Vec3]) -> f64 {
        let n = naive_normals(d, &t.triangles);
        let mut total = 0.0;
        for i in 0..d.len() {
            let ring = &t.vertex_neighbors[i];
            let mut s = 0.0;
            for &j in ring {
                let cos = n[i].dot(&n[j]) / (n[i].norm() * n[j].norm());
                s += (1.0 - cos).powi(2);
            }
            total += s / ring.len() as f64;
        }
        total / d.len() as f64
    }

    #[test]
    fn laplacian_examples() {
        let t = grid_t(4);
        let (_, _) = laplacian_loss_grad(&t, &t.vertices).unwrap();
        // Interior vertex of a regular grid: the six neighbors are symmetric.
        let i = 2 * 5 + 2;
        let ring = &t.vertex_neighbors[i];
        let mean = ring.iter().map(|&j| t.vertices[j]).sum::<Vec3>() / ring.len() as f64;
        assert!((t.vertices[i] - mean).norm() < 1e-15);

        let flat = laplacian_loss(&t, &t.vertices).unwrap();
        let mut bumped = t.vertices.clone();
        let h = 0.01;
        bumped[i].z += h;
        // Moving only the center changes its own term by h² and each neighbor's by (h/|N_j|)².
        let mut expected = flat * t.vertices.len() as f64 + h * h;
        for &j in ring {
            expected += (h / t.vertex_neighbors[j].len() as f64).powi(2);
        }
        let got = laplacian_loss(&t, &bumped).unwrap() * t.vertices.len() as f64;
        assert!((got - expected).abs() < 1e-12);
        assert!((naive_laplacian(&t, &bumped) - laplacian_loss(&t, &bumped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn isolated_vertex_rejected() {
        let mut t = grid_patch(1, 1, 1.0, 1.0);
        t.vertices.push(Vec3::new(5.0, 5.0, 5.0));
        t.skin_weights.push(vec![(0, 1.0)]);
        let t = build_adjacency(&t).unwrap();
        assert!(matches!(laplacian_loss(&t, &t.vertices), Err(Error::IsolatedVertex(4))));
    }

    #[test]
    fn isometry_examples() {
        let t = grid_t(3);
        assert_eq!(isometry_loss(&t, &t.vertices).unwrap(), 0.0);
        // Two vertices joined by one edge, stretched from length 1 to 2.
        let chain = SkinnedTemplate {
            vertices: vec![Vec3::zeros(), Vec3::x()],
            edges: vec![vec![[0, 1]], vec![[0, 1]]],
            vertex_neighbors: vec![vec![1], vec![0]],
            vertex_uv: vec![Default::default(); 2],
            ..Default::default()
        };
        let chain = SkinnedTemplate {
            triangles: Vec::new(),
            ..chain
        };
        let edges_only = |t: &SkinnedTemplate, d: &[Vec3]| {
            let mut loss = 0.0;
            for i in 0..2 {
                for e in &t.edges[i] {
                    let l0 = (t.vertices[e[0]] - t.vertices[e[1]]).norm();
                    let l1 = (d[e[0]] - d[e[1]]).norm();
                    loss += (l1 - l0).powi(2) / t.edges[i].len() as f64;
                }
            }
            loss / 2.0
        };
        let stretched = vec![Vec3::zeros(), Vec3::x() * 2.0];
        assert_eq!(edges_only(&chain, &stretched), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = build_adjacency(&icosphere(2, 1.0)).unwrap();
        let d: Vec<Vec3> = s
            .vertices
            .iter()
            .map(|v| v + Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.05)
            .collect();
        assert!((isometry_loss(&s, &d).unwrap() - naive_isometry(&s, &d)).abs() < 1e-12);
    }

    #[test]
    fn single_edge_chain_isometry() {
        // A triangle where only one vertex moves along the edge away from another.
        let t = SkinnedTemplate {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y() * 100.0],
            triangles: vec![[0, 1, 2]],
            uv_coords: vec![[Default::default(); 3]],
            ..Default::default()
        };
        let t = build_adjacency(&t).unwrap();
        let d = t.vertices.clone();
        assert_eq!(isometry_loss(&t, &d).unwrap(), 0.0);
    }

    #[test]
    fn normal_consistency_examples() {
        let t = grid_t(3);
        assert!(normal_consistency_loss(&t, &t.vertices).unwrap().abs() < 1e-30);

        // Two triangles folded 90° along their shared edge.
        let fold = build_adjacency(&SkinnedTemplate {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            triangles: vec![[0, 1, 2], [0, 3, 1]],
            uv_coords: vec![[Default::default(); 3]; 2],
            ..Default::default()
        })
        .unwrap();
        let got = normal_consistency_loss(&fold, &fold.vertices).unwrap();
        assert!((got - naive_nc(&fold, &fold.vertices)).abs() < 1e-12);
        assert!(got > 0.0);

        let s = build_adjacency(&icosphere(2, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d: Vec<Vec3> = s.vertices.iter().map(|v| v * (1.0 + 0.05 * rng.gen::<f64>())).collect();
        assert!((normal_consistency_loss(&s, &d).unwrap() - naive_nc(&s, &d)).abs() < 1e-12);
    }

    #[test]
    fn zero_area_star_rejected() {
        let mut t = grid_patch(1, 1, 1.0, 1.0);
        t.vertices[3] = t.vertices[0];
        t.vertices[1] = t.vertices[0];
        t.vertices[2] = t.vertices[0];
        let t = build_adjacency(&t).unwrap();
        assert!(matches!(normal_consistency_loss(&t, &t.vertices), Err(Error::ZeroAreaStar(_))));
    }

    fn two_joint_capsule(segments: usize, rings: usize) -> SkinnedTemplate {
        let mut t = capsule(&CapsuleShape {
            radius: 0.1,
            bottom: 0.0,
            top: 0.6,
            segments,
            rings,
        });
        t.joints = vec![
            Joint {
                name: "root".into(),
                parent: None,
                canonical: RigidTransform::identity(),
            },
            Joint {
                name: "upper".into(),
                parent: Some(0),
                canonical: RigidTransform::from_translation(Vec3::new(0.0, 0.3, 0.0)),
            },
        ];
        t.skin_weights = t
            .vertices
            .iter()
            .map(|v| {
                let w = ((v.y - 0.2) / 0.2).clamp(0.0, 1.0);
                vec![(0, 1.0 - w), (1, w)]
            })
            .collect();
        t.normalize_weights();
        build_adjacency(&t).unwrap()
    }

    fn bent(t: &SkinnedTemplate, angle: f64) -> MotionFrame {
        let pivot = t.joints[1].canonical.translation;
        let bend = RigidTransform::from_translation(pivot)
            .compose(&RigidTransform::from_axis_angle(Vec3::z(), angle))
            .compose(&RigidTransform::from_translation(-pivot));
        MotionFrame {
            frame_index: 0,
            joint_transforms: vec![RigidTransform::identity(), bend.compose(&t.joints[1].canonical)],
        }
    }

    #[test]
    fn zero_deformation_on_vertex_targets() {
        let t = two_joint_capsule(12, 10);
        let m = bent(&t, 0.4);
        let posed = pose_vertices(&t, &m, None).unwrap();
        let target = PointCloud::new(posed.clone());
        let d = TexelMap::zeros(32, 3, TexelKind::Deformation);
        let (loss, grad) = geometry_loss_and_grad(&t, &m, &d, &target, GeometryLossWeights::zero()).unwrap();
        assert_eq!(loss.chamfer, 0.0);
        assert_eq!(loss.total, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
        let (loss, _) = geometry_loss_and_grad(&t, &m, &d, &target, GeometryLossWeights::default()).unwrap();
        assert_eq!(loss.lap, laplacian_loss(&t, &posed).unwrap());
        assert_eq!(loss.chamfer, 0.0);
    }

    #[test]
    fn zero_weights_leave_plain_chamfer() {
        let t = two_joint_capsule(10, 8);
        let m = bent(&t, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = PointCloud::new(random_points(&mut rng, 300).iter().map(|p| p * 0.5).collect());
        let mut d = TexelMap::zeros(16, 3, TexelKind::Deformation);
        for v in &mut d.data {
            *v = rng.gen_range(-0.01..0.01);
        }
        let (loss, _) = geometry_loss_and_grad(&t, &m, &d, &target, GeometryLossWeights::zero()).unwrap();
        let posed = pose_vertices(&t, &m, Some(&d)).unwrap();
        let direct = chamfer(&PointCloud::new(posed), &target).unwrap();
        assert!((loss.total - direct).abs() <= 1e-12 * direct.max(1.0));
        assert_eq!(loss.total, loss.chamfer);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = two_joint_capsule(10, 8);
        let m = bent(&t, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let posed = pose_vertices(&t, &m, None).unwrap();
        let target = PointCloud::new(
            posed
                .iter()
                .map(|p| p + Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.004)
                .collect(),
        );
        let problem = GeometryProblem::new(
            &t,
            &m,
            16,
            &target,
            GeometryLossWeights {
                lap: 1.0,
                iso: 0.1,
                nc: 0.01,
            },
        )
        .unwrap();
        let mut d: Vec<f64> = (0..3 * 256).map(|_| rng.gen_range(-0.003..0.003)).collect();
        let support = problem.support();
        for (i, s) in support.iter().enumerate() {
            if !s {
                d[3 * i..3 * i + 3].fill(0.0);
            }
        }
        let (_, g) = problem.evaluate(&d).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (texel, _) in support.iter().enumerate().filter(|(_, s)| **s).take(40) {
            for c in 0..3 {
                let k = 3 * texel + c;
                let mut plus = d.clone();
                plus[k] += h;
                let mut minus = d.clone();
                minus[k] -= h;
                let fd = (problem.evaluate(&plus).unwrap().0.total - problem.evaluate(&minus).unwrap().0.total) / (2.0 * h);
                let rel = (g[k] - fd).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn fit_stays_near_zero_on_undeformed_target() {
        // One-meter sphere; targets are the vertices themselves with 1 mm noise.
        let t = build_adjacency(&icosphere(3, 0.5)).unwrap();
        let m = MotionFrame::rest(&t.joints, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = PointCloud::new(
            t.vertices
                .iter()
                .map(|v| v + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.001)
                .collect(),
        );
        let out = fit_deformation_at(
            &t,
            &m,
            128,
            &target,
            GeometryLossWeights::default(),
            &FitConfig {
                steps: 60,
                ..Default::default()
            },
        )
        .unwrap();
        let max = out.deformation.data.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        assert!(max < 0.005, "{max}");
        assert!(out.last.total <= out.initial.total);
        assert_eq!(out.log.len(), 61);
    }

    #[test]
    fn fit_recovers_bump_and_respects_support() {
        let t = two_joint_capsule(24, 20);
        let m = bent(&t, 0.3);
        let mut bumped = t.clone();
        for v in &mut bumped.vertices {
            let radial = Vec3::new(v.x, 0.0, v.z);
            if radial.norm() > 1e-9 {
                *v += radial.normalize() * 0.02 * (v.y * 2.0 * std::f64::consts::PI / 0.3).sin();
            }
        }
        let gt_posed = pose_vertices(&bumped, &m, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = PointCloud::new(crate::mesh::sample_surface(&gt_posed, &t.triangles, 60_000, &mut rng));
        let out = fit_deformation_at(&t, &m, 64, &target, GeometryLossWeights::default(), &FitConfig::default()).unwrap();
        assert!(
            out.last.chamfer < 0.5 * out.initial.chamfer,
            "{} vs {}",
            out.last.chamfer,
            out.initial.chamfer
        );
        let problem = GeometryProblem::new(&t, &m, 64, &target, GeometryLossWeights::default()).unwrap();
        for (i, s) in problem.support().iter().enumerate() {
            if !s {
                assert_eq!(out.deformation.texel(i), &[0.0, 0.0, 0.0]);
            }
        }
        let again = fit_deformation_at(&t, &m, 64, &target, GeometryLossWeights::default(), &FitConfig::default()).unwrap();
        assert_eq!(again.deformation, out.deformation);
        let first = crate::unprojection::empty_result(64, 3);
        assert!(fit_deformation(
            &t,
            &m,
            &first,
            &target,
            GeometryLossWeights::default(),
            &FitConfig {
                steps: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn hands_preset() {
        assert_eq!(GeometryLossWeights::hands().iso, 0.5);
        assert_eq!(
            GeometryLossWeights::default(),
            GeometryLossWeights {
                lap: 1.0,
                iso: 0.1,
                nc: 0.001
            }
        );
        assert!(GeometryLossWeights {
            lap: -1.0,
            iso: 0.0,
            nc: 0.0
        }
        .validate()
        .is_err());
    }

    fn rigid() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..3.0,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter("axis", |(a, _, _)| Vec3::from(*a).norm() > 1e-3)
            .prop_map(|(a, ang, tr)| {
                RigidTransform::from_translation(Vec3::from(tr)).compose(&RigidTransform::from_axis_angle(Vec3::from(a), ang))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn regularizers_are_rigid_invariant(g in rigid(), seed in 0u64..1000) {
            let s = build_adjacency(&icosphere(1, 1.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<Vec3> = s.vertices.iter().map(|v| v * (1.0 + 0.1 * rng.gen::<f64>())).collect();
            let moved: Vec<Vec3> = d.iter().map(|p| g.apply_point(p)).collect();
            let a = normal_consistency_loss(&s, &d).unwrap();
            let b = normal_consistency_loss(&s, &moved).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            // Rigidly moving the deformed mesh leaves every edge length unchanged.
            let (a, b) = (isometry_loss(&s, &d).unwrap(), isometry_loss(&s, &moved).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0 && laplacian_loss(&s, &d).unwrap() >= 0.0);
        }
    }
}
