//! Differentiable observation losses: keypoint reprojection, soft-rasterized
//! semantic part alignment, the combined per-stage unit loss, and the
//! fully-supervised 3D losses.
//!
//! The soft rasterizer follows the probabilistic coverage model: per triangle
//! and pixel, coverage D = sigmoid(sign · d² / σ) with d the 2D distance to
//! the projected triangle boundary (sign + inside, − outside). The alpha
//! channel is 1 − Π(1 − D); part channels blend per-triangle one-hot labels
//! with weights softmaxed over inverse mean depth at temperature γ, against
//! a background at inverse depth 0. Hard rasterization is the σ → 0 limit
//! and is implemented independently as the test oracle.

use crate::body::{pose_joints, pose_mesh, prior_loss, Mesh, Skeleton, StateVars,
                  PART_COUNT};
use crate::camera::{project_var, CameraError, Intrinsics, MIN_DEPTH};
use crate::tape::{DiffError, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("part map extent {got:?} does not match raster config {want:?}")]
    ExtentMismatch { got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error("mesh vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("observation has {got} keypoints but the skeleton has {want} joints")]
    KeypointCountMismatch { got: usize, want: usize },
    #[error("part map invariant violated: {0}")]
    BadPartMap(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Dense part-probability map, row-major H×W×(P+1) with the alpha
/// (foreground) channel last. Stored as f32, matching the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PartMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        PartMap { h, w, channels: PART_COUNT + 1, data: vec![0.0; h * w * (PART_COUNT + 1)] }
    }

    pub fn from_f64(h: usize, w: usize, channels: usize, data: &[f64]) -> Self {
        PartMap { h, w, channels, data: data.iter().map(|&x| x as f32).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    /// Part channels per pixel must sum to ≤ 1 and alpha must lie in [0,1].
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.data.len() != self.h * self.w * self.channels {
            return Err(RenderError::BadPartMap(format!(
                "data length {} does not match {}x{}x{}",
                self.data.len(),
                self.h,
                self.w,
                self.channels
            )));
        }
        let c = self.channels;
        for px in 0..self.h * self.w {
            let row = &self.data[px * c..(px + 1) * c];
            let parts: f32 = row[..c - 1].iter().sum();
            if parts > 1.0 + 1e-5 {
                return Err(RenderError::BadPartMap(format!(
                    "pixel {px}: part channels sum to {parts}"
                )));
            }
            let alpha = row[c - 1];
            if !(-1e-6..=1.0 + 1e-6).contains(&alpha) {
                return Err(RenderError::BadPartMap(format!("pixel {px}: alpha {alpha}")));
            }
        }
        Ok(())
    }
}

/// A 2D observation of one person: keypoints with confidences, a semantic
/// part map, and the crop intrinsics they live in. Ground-truth 3D joints
/// and mesh vertices are attached for fully-supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub keypoints: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub part_map: PartMap,
    pub crop_intrinsics: Intrinsics,
    pub gt_joints: Option<Vec<[f64; 3]>>,
    pub gt_mesh_vertices: Option<Vec<[f64; 3]>>,
}

/// Scalar weights balancing the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_k: f64,
    pub lambda_b: f64,
    pub lambda_m: f64,
    pub lambda_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_k: 1.0, lambda_b: 1.0, lambda_m: 1.0, lambda_3d: 1.0 }
    }
}

/// Soft-rasterization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Edge-probability softness, pixels².
    pub sigma: f64,
    /// Depth-aggregation temperature.
    pub gamma: f64,
    pub h: usize,
    pub w: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { sigma: 1.0, gamma: 1e-2, h: 64, w: 64 }
    }
}

/// Per-term breakdown of a unit loss, recorded as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub keypoint: f64,
    pub part: f64,
    pub prior: f64,
}

// ---------------------------------------------------------------------------
// soft rasterization
// ---------------------------------------------------------------------------

struct ProjectedVertex {
    u: Var,
    v: Var,
    z: Var,
    u_val: f64,
    v_val: f64,
}

/// Differentiable soft rasterization of a labeled mesh into an
/// H×W×(P+1) image (P part channels, then alpha).
pub fn soft_rasterize(
    tape: &mut Tape,
    mesh: &Mesh,
    c: &Intrinsics,
    cfg: &RasterConfig,
) -> Result<Var, RenderError> {
    let (h, w) = (cfg.h, cfg.w);
    let hw = h * w;
    let channels = PART_COUNT + 1;

    let vert_vals = tape.val(mesh.vertices).clone();
    let n_verts = if vert_vals.len() == 0 { 0 } else { vert_vals.shape()[0] };
    for i in 0..n_verts {
        let p = &vert_vals.data()[i * 3..(i + 1) * 3];
        if !p.iter().all(|x| x.is_finite()) {
            return Err(RenderError::NonFiniteVertex(i));
        }
        if p[2] <= MIN_DEPTH {
            return Err(CameraError::BehindCamera { index: i, z: p[2] }.into());
        }
    }

    if mesh.triangles.is_empty() {
        let img = tape.constant(Tensor::zeros(&[h, w, channels]));
        return Ok(img);
    }

    // pixel-center grids
    let mut us = vec![0.0; hw];
    let mut vs = vec![0.0; hw];
    for row in 0..h {
        for col in 0..w {
            us[row * w + col] = col as f64 + 0.5;
            vs[row * w + col] = row as f64 + 0.5;
        }
    }
    let grid_u = tape.constant(Tensor::vector(us.clone()));
    let grid_v = tape.constant(Tensor::vector(vs.clone()));

    // project every vertex once
    let mut proj = Vec::with_capacity(n_verts);
    for i in 0..n_verts {
        let row = tape.slice(mesh.vertices, i * 3, i * 3 + 3)?;
        let (u, v) = project_var(tape, row, c)?;
        let z = tape.slice(row, 2, 3)?;
        proj.push(ProjectedVertex {
            u,
            v,
            z,
            u_val: tape.val(u).item(),
            v_val: tape.val(v).item(),
        });
    }

    // inverse mean depth per triangle, and the detached softmax shift
    let mut zbars = Vec::with_capacity(mesh.triangles.len());
    let one = tape.scalar(1.0);
    for tri in &mesh.triangles {
        let zsum3 = {
            let s = tape.add(proj[tri[0]].z, proj[tri[1]].z)?;
            tape.add(s, proj[tri[2]].z)?
        };
        let zmean = tape.scale(zsum3, 1.0 / 3.0)?;
        let zbar = tape.div(one, zmean)?;
        zbars.push(zbar);
    }
    let shift = zbars
        .iter()
        .map(|&z| tape.val(z).item())
        .fold(0.0f64, f64::max); // background inverse depth 0 joins the max

    let mut alpha_prod = tape.constant(Tensor::ones(&[hw]));
    let mut den = tape.scalar((-shift / cfg.gamma).exp()); // background weight
    let mut channel_acc: Vec<Option<Var>> = vec![None; PART_COUNT];

    for (t_idx, tri) in mesh.triangles.iter().enumerate() {
        let (a, b, cc) = (&proj[tri[0]], &proj[tri[1]], &proj[tri[2]]);

        // squared distance from each pixel center to the triangle boundary
        let mut d2_min: Option<Var> = None;
        for (p0, p1) in [(a, b), (b, cc), (cc, a)] {
            let ex = tape.sub(p1.u, p0.u)?;
            let ey = tape.sub(p1.v, p0.v)?;
            let ex2 = tape.mul(ex, ex)?;
            let ey2 = tape.mul(ey, ey)?;
            let len2 = {
                let s = tape.add(ex2, ey2)?;
                tape.add_const(s, 1e-12)?
            };
            let dxa = tape.sub(grid_u, p0.u)?;
            let dya = tape.sub(grid_v, p0.v)?;
            let px_ex = tape.mul(dxa, ex)?;
            let py_ey = tape.mul(dya, ey)?;
            let dot = tape.add(px_ex, py_ey)?;
            let t_raw = tape.div(dot, len2)?;
            let t_cl = tape.clamp01(t_raw)?;
            let cx = {
                let s = tape.mul(t_cl, ex)?;
                tape.add(p0.u, s)?
            };
            let cy = {
                let s = tape.mul(t_cl, ey)?;
                tape.add(p0.v, s)?
            };
            let ddx = tape.sub(grid_u, cx)?;
            let ddy = tape.sub(grid_v, cy)?;
            let dx2 = tape.mul(ddx, ddx)?;
            let dy2 = tape.mul(ddy, ddy)?;
            let d2 = tape.add(dx2, dy2)?;
            d2_min = Some(match d2_min {
                None => d2,
                Some(m) => tape.min(m, d2)?,
            });
        }
        let d2_min = d2_min.expect("three edges");

        // detached inside/outside sign per pixel, folded with 1/σ
        let tri2d = [[a.u_val, a.v_val], [b.u_val, b.v_val], [cc.u_val, cc.v_val]];
        let factor: Vec<f64> = (0..hw)
            .map(|p| {
                let s = if point_in_triangle(us[p], vs[p], &tri2d) { 1.0 } else { -1.0 };
                s / cfg.sigma
            })
            .collect();
        let factor = tape.constant(Tensor::vector(factor));
        let arg = tape.mul(d2_min, factor)?;
        let coverage = tape.sigmoid(arg);

        let omd = {
            let o = tape.scalar(1.0);
            tape.sub(o, coverage)?
        };
        alpha_prod = tape.mul(alpha_prod, omd)?;

        let zshift = tape.add_const(zbars[t_idx], -shift)?;
        let zscaled = tape.scale(zshift, 1.0 / cfg.gamma)?;
        let zweight = tape.exp(zscaled);
        let num = tape.mul(coverage, zweight)?;
        den = tape.add(den, num)?;

        let part = mesh.triangle_parts[t_idx];
        channel_acc[part] = Some(match channel_acc[part] {
            None => num,
            Some(acc) => tape.add(acc, num)?,
        });
    }

    // normalize part channels; alpha = 1 − Π(1 − D)
    let zeros_plane = tape.constant(Tensor::zeros(&[hw]));
    let mut planes = Vec::with_capacity(channels);
    for acc in channel_acc {
        match acc {
            None => planes.push(zeros_plane),
            Some(sum) => planes.push(tape.div(sum, den)?),
        }
    }
    let one_s = tape.scalar(1.0);
    let alpha = tape.sub(one_s, alpha_prod)?;
    planes.push(alpha);

    let stacked = tape.concat(&planes)?;
    let chw = tape.reshape(stacked, vec![channels, hw])?;
    let hwc = tape.transpose(chw)?;
    Ok(tape.reshape(hwc, vec![h, w, channels])?)
}

fn point_in_triangle(px: f64, py: f64, tri: &[[f64; 2]; 3]) -> bool {
    let area = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
        - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0]);
    if area.abs() < 1e-12 {
        return false;
    }
    let sign = area.signum();
    for i in 0..3 {
        let (a, b) = (tri[i], tri[(i + 1) % 3]);
        let cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
        if cross * sign < 0.0 {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// hard rasterization (oracle and dataset generation)
// ---------------------------------------------------------------------------

/// Hard rasterization: nearest covering triangle wins each pixel.
///
/// Deliberately independent of the soft path: plain arithmetic, its own
/// inside test, no tape. Returns row-major H×W×(P+1) data.
pub fn hard_rasterize(
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
    triangle_parts: &[usize],
    c: &Intrinsics,
    cfg: &RasterConfig,
) -> Result<Vec<f64>, RenderError> {
    let channels = PART_COUNT + 1;
    let mut img = vec![0.0; cfg.h * cfg.w * channels];

    let mut proj = Vec::with_capacity(vertices.len());
    for (i, p) in vertices.iter().enumerate() {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(RenderError::NonFiniteVertex(i));
        }
        if p[2] <= MIN_DEPTH {
            return Err(CameraError::BehindCamera { index: i, z: p[2] }.into());
        }
        proj.push([c.fx * p[0] / p[2] + c.cx, c.fy * p[1] / p[2] + c.cy]);
    }

    for row in 0..cfg.h {
        for col in 0..cfg.w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut best: Option<(f64, usize)> = None; // (inverse mean depth, part)
            for (t, tri) in triangles.iter().enumerate() {
                let (a, b, cc) = (proj[tri[0]], proj[tri[1]], proj[tri[2]]);
                let area =
                    (b[0] - a[0]) * (cc[1] - a[1]) - (b[1] - a[1]) * (cc[0] - a[0]);
                if area.abs() < 1e-12 {
                    continue;
                }
                let sign = area.signum();
                let e0 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                let e1 = (cc[0] - b[0]) * (py - b[1]) - (cc[1] - b[1]) * (px - b[0]);
                let e2 = (a[0] - cc[0]) * (py - cc[1]) - (a[1] - cc[1]) * (px - cc[0]);
                if e0 * sign < 0.0 || e1 * sign < 0.0 || e2 * sign < 0.0 {
                    continue;
                }
                let zmean = (vertices[tri[0]][2] + vertices[tri[1]][2] + vertices[tri[2]][2]) / 3.0;
                let zbar = 1.0 / zmean;
                if best.map_or(true, |(bz, _)| zbar > bz) {
                    best = Some((zbar, triangle_parts[t]));
                }
            }
            if let Some((_, part)) = best {
                let base = (row * cfg.w + col) * channels;
                img[base + part] = 1.0;
                img[base + channels - 1] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Per-pixel distance from the pixel center to the nearest projected
/// triangle edge; used to exclude the edge band in soft-vs-hard checks.
pub fn min_edge_distance_map(
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
    c: &Intrinsics,
    cfg: &RasterConfig,
) -> Vec<f64> {
    let proj: Vec<[f64; 2]> = vertices
        .iter()
        .map(|p| [c.fx * p[0] / p[2] + c.cx, c.fy * p[1] / p[2] + c.cy])
        .collect();
    let mut out = vec![f64::INFINITY; cfg.h * cfg.w];
    for row in 0..cfg.h {
        for col in 0..cfg.w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut d = f64::INFINITY;
            for tri in triangles {
                for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                    let (a, b) = (proj[tri[i]], proj[tri[j]]);
                    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                    let len2 = ex * ex + ey * ey;
                    let t = if len2 > 0.0 {
                        (((px - a[0]) * ex + (py - a[1]) * ey) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (cx, cy) = (a[0] + t * ex, a[1] + t * ey);
                    d = d.min(((px - cx).powi(2) + (py - cy).powi(2)).sqrt());
                }
            }
            out[row * cfg.w + col] = d;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Confidence-weighted 2D keypoint reprojection loss:
/// (1/N_j) Σ conf_i · ‖obs_i − Π(J_i(s), C_c)‖₂.
pub fn keypoint_loss(
    tape: &mut Tape,
    sv: &StateVars,
    obs: &Observation,
    skel: &Skeleton,
) -> Result<Var, RenderError> {
    let j = skel.joint_count();
    if obs.keypoints.len() != j || obs.confidences.len() != j {
        return Err(RenderError::KeypointCountMismatch { got: obs.keypoints.len(), want: j });
    }
    let joints = pose_joints(tape, skel, sv)?;
    let mut terms = Vec::with_capacity(j);
    for i in 0..j {
        let row = tape.slice(joints, i * 3, i * 3 + 3)?;
        let (u, v) = project_var(tape, row, &obs.crop_intrinsics)?;
        let du = tape.add_const(u, -obs.keypoints[i][0])?;
        let dv = tape.add_const(v, -obs.keypoints[i][1])?;
        let uv = tape.concat(&[du, dv])?;
        let dist = tape.norm(uv)?;
        terms.push(tape.scale(dist, obs.confidences[i])?);
    }
    let sum = tape.add_many(&terms)?;
    Ok(tape.scale(sum, 1.0 / j as f64)?)
}

/// Mean-per-pixel L1 between the observed part map and a soft render of the
/// given mesh (L1 over all P+1 channels, divided by H·W).
pub fn part_loss_for_mesh(
    tape: &mut Tape,
    mesh: &Mesh,
    obs: &Observation,
    cfg: &RasterConfig,
) -> Result<Var, RenderError> {
    let pm = &obs.part_map;
    if pm.h != cfg.h || pm.w != cfg.w || pm.channels != PART_COUNT + 1 {
        return Err(RenderError::ExtentMismatch {
            got: (pm.h, pm.w, pm.channels),
            want: (cfg.h, cfg.w, PART_COUNT + 1),
        });
    }
    let img = soft_rasterize(tape, mesh, &obs.crop_intrinsics, cfg)?;
    let target = tape.constant(Tensor::new(vec![pm.h, pm.w, pm.channels], pm.to_f64()));
    let diff = tape.sub(img, target)?;
    let l1 = tape.abs(diff);
    let total = tape.sum(l1);
    Ok(tape.scale(total, 1.0 / (cfg.h * cfg.w) as f64)?)
}

/// Semantic part alignment loss for a model state.
pub fn part_loss(
    tape: &mut Tape,
    sv: &StateVars,
    obs: &Observation,
    skel: &Skeleton,
    cfg: &RasterConfig,
) -> Result<Var, RenderError> {
    let mesh = pose_mesh(tape, skel, sv)?;
    part_loss_for_mesh(tape, &mesh, obs, cfg)
}

/// Per-stage self-supervised unit loss
/// L_u = λ_k·L_k + λ_b·L_b + l(θ) + l(β), with a per-term breakdown.
///
/// Terms with zero weight are skipped entirely; the weighted contribution
/// is identically zero either way.
pub fn unit_loss(
    tape: &mut Tape,
    sv: &StateVars,
    obs: &Observation,
    skel: &Skeleton,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<(Var, LossBreakdown), RenderError> {
    let mut total = prior_loss(tape, sv)?;
    let prior_val = tape.val(total).item();
    let mut bd = LossBreakdown { total: prior_val, keypoint: 0.0, part: 0.0, prior: prior_val };

    if weights.lambda_k != 0.0 {
        let lk = keypoint_loss(tape, sv, obs, skel)?;
        let wlk = tape.scale(lk, weights.lambda_k)?;
        bd.keypoint = tape.val(wlk).item();
        total = tape.add(total, wlk)?;
    }
    if weights.lambda_b != 0.0 {
        let lb = part_loss(tape, sv, obs, skel, cfg)?;
        let wlb = tape.scale(lb, weights.lambda_b)?;
        bd.part = tape.val(wlb).item();
        total = tape.add(total, wlb)?;
    }
    bd.total = tape.val(total).item();
    Ok((total, bd))
}

/// Fully-supervised loss: λ_m · mean vertex L2 + λ_3d · mean joint L2.
/// Ground-truth terms that are absent contribute zero.
pub fn fs_loss(
    tape: &mut Tape,
    sv: &StateVars,
    obs: &Observation,
    skel: &Skeleton,
    weights: &LossWeights,
) -> Result<Var, RenderError> {
    let mut total = tape.scalar(0.0);

    if weights.lambda_3d != 0.0 {
        if let Some(gt) = &obs.gt_joints {
            let joints = pose_joints(tape, skel, sv)?;
            let mean = mean_point_distance(tape, joints, gt)?;
            let w = tape.scale(mean, weights.lambda_3d)?;
            total = tape.add(total, w)?;
        }
    }
    if weights.lambda_m != 0.0 {
        if let Some(gt) = &obs.gt_mesh_vertices {
            let mesh = pose_mesh(tape, skel, sv)?;
            let mean = mean_point_distance(tape, mesh.vertices, gt)?;
            let w = tape.scale(mean, weights.lambda_m)?;
            total = tape.add(total, w)?;
        }
    }
    Ok(total)
}

fn mean_point_distance(
    tape: &mut Tape,
    points: Var,
    gt: &[[f64; 3]],
) -> Result<Var, RenderError> {
    let n = tape.val(points).shape()[0];
    if n != gt.len() {
        return Err(RenderError::KeypointCountMismatch { got: gt.len(), want: n });
    }
    let gt_flat: Vec<f64> = gt.iter().flatten().copied().collect();
    let gt_var = tape.constant(Tensor::matrix(n, 3, gt_flat));
    let diff = tape.sub(points, gt_var)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.slice(diff, i * 3, i * 3 + 3)?;
        terms.push(tape.norm(row)?);
    }
    let sum = tape.add_many(&terms)?;
    Ok(tape.scale(sum, 1.0 / n as f64)?)
}
