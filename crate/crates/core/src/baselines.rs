//! Classical optimization baselines over the same differentiable losses:
//! fixed-step gradient descent, dense-inverse-Hessian BFGS with a strong
//! Wolfe line search, refiner→BFGS hybrids, plus Procrustes alignment and
//! the pose evaluation metrics.
//!
//! Cost is compared in loss/gradient evaluation counts, never wall time;
//! every probe the line search makes is counted.

use crate::body::{ModelState, Skeleton, StateVars};
use crate::refiner::{unroll, RefinerError, RefinerParams, Trajectory};
use crate::render::{unit_loss, LossWeights, Observation, RasterConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector, Matrix3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point set is degenerate (rank < 2 after centering)")]
    Degenerate,
    #[error("point counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
}

/// Why an optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradTol,
    LineSearchFailed,
    NonFiniteLoss,
    StepsExhausted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::MaxIters => "max_iters",
            Termination::GradTol => "grad_tol",
            Termination::LineSearchFailed => "line_search_failed",
            Termination::NonFiniteLoss => "non_finite_loss",
            Termination::StepsExhausted => "steps_exhausted",
        }
    }
}

/// Iterates of one fit with exact cumulative evaluation counts.
#[derive(Debug, Clone)]
pub struct OptimizerTrace {
    pub iterates: Vec<ModelState>,
    pub losses: Vec<f64>,
    /// Cumulative loss evaluations at each iterate.
    pub loss_evals: Vec<usize>,
    /// Cumulative gradient evaluations at each iterate.
    pub grad_evals: Vec<usize>,
    pub termination: Termination,
}

impl OptimizerTrace {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

/// Raw trace over flat coordinate vectors.
#[derive(Debug, Clone)]
pub struct MinimizeTrace {
    pub xs: Vec<Vec<f64>>,
    pub fs: Vec<f64>,
    pub loss_evals: Vec<usize>,
    pub grad_evals: Vec<usize>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig { max_iters: 200, grad_tol: 1e-8, c1: 1e-4, c2: 0.9, max_backtracks: 30 }
    }
}

/// Fixed-step gradient descent; records every iterate.
///
/// The objective returns value and gradient together (each call counts one
/// loss and one gradient evaluation) or None when not evaluable.
pub fn minimize_gd<F>(mut eval: F, x0: &[f64], steps: usize, step_size: f64) -> MinimizeTrace
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut trace = MinimizeTrace {
        xs: Vec::new(),
        fs: Vec::new(),
        loss_evals: Vec::new(),
        grad_evals: Vec::new(),
        termination: Termination::StepsExhausted,
    };
    let mut x = x0.to_vec();
    let mut evals = 0usize;
    for i in 0..=steps {
        match eval(&x) {
            Some((f, g)) if f.is_finite() => {
                evals += 1;
                trace.xs.push(x.clone());
                trace.fs.push(f);
                trace.loss_evals.push(evals);
                trace.grad_evals.push(evals);
                if i == steps {
                    break;
                }
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= step_size * gi;
                }
            }
            _ => {
                trace.termination = Termination::NonFiniteLoss;
                return trace;
            }
        }
    }
    trace
}

/// BFGS with a strong Wolfe line search and the standard rank-two inverse
/// Hessian update. The update is skipped when the curvature denominator
/// y·s is at or below 1e-10. Stops on ‖grad‖∞ < grad_tol or max_iters.
pub fn minimize_bfgs<F>(mut eval: F, x0: &[f64], cfg: &BfgsConfig) -> MinimizeTrace
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    assert!(cfg.max_iters >= 1, "BFGS needs max_iters >= 1");
    let n = x0.len();
    let mut trace = MinimizeTrace {
        xs: Vec::new(),
        fs: Vec::new(),
        loss_evals: Vec::new(),
        grad_evals: Vec::new(),
        termination: Termination::MaxIters,
    };
    let mut evals = 0usize;

    let mut x = DVector::from_column_slice(x0);
    let (mut f, mut g) = match eval(x.as_slice()) {
        Some((f, g)) if f.is_finite() => {
            evals += 1;
            (f, DVector::from_vec(g))
        }
        _ => {
            trace.termination = Termination::NonFiniteLoss;
            return trace;
        }
    };
    trace.xs.push(x.as_slice().to_vec());
    trace.fs.push(f);
    trace.loss_evals.push(evals);
    trace.grad_evals.push(evals);

    let mut h = DMatrix::<f64>::identity(n, n);

    for _ in 0..cfg.max_iters {
        if g.amax() < cfg.grad_tol {
            trace.termination = Termination::GradTol;
            return trace;
        }

        let mut p = -(&h * &g);
        let mut dphi0 = p.dot(&g);
        if dphi0 >= 0.0 {
            // curvature information went bad: restart from steepest descent
            h = DMatrix::identity(n, n);
            p = -g.clone();
            dphi0 = p.dot(&g);
        }

        // strong Wolfe search along p by bracketing and bisection
        let mut alpha = 1.0f64;
        let mut lo = 0.0f64;
        let mut hi: Option<f64> = None;
        let mut accepted: Option<(f64, f64, DVector<f64>)> = None; // (α, f, g)
        let mut armijo_fallback: Option<(f64, f64, DVector<f64>)> = None;
        for _ in 0..cfg.max_backtracks {
            let xt = &x + alpha * &p;
            let probe = eval(xt.as_slice());
            evals += 1;
            match probe {
                Some((ft, gt)) if ft.is_finite() => {
                    let gt = DVector::from_vec(gt);
                    if ft > f + cfg.c1 * alpha * dphi0 {
                        hi = Some(alpha); // Armijo failed: step too long
                    } else {
                        let dphi = gt.dot(&p);
                        if armijo_fallback.as_ref().map_or(true, |(_, bf, _)| ft < *bf) {
                            armijo_fallback = Some((alpha, ft, gt.clone()));
                        }
                        if dphi.abs() <= cfg.c2 * dphi0.abs() {
                            accepted = Some((alpha, ft, gt));
                            break;
                        }
                        if dphi >= 0.0 {
                            hi = Some(alpha); // overshot the minimum
                        } else {
                            lo = alpha; // still descending: go further
                        }
                    }
                }
                _ => {
                    hi = Some(alpha); // not evaluable: shrink toward lo
                }
            }
            alpha = match hi {
                Some(h) => 0.5 * (lo + h),
                None => alpha * 2.0,
            };
            if alpha <= f64::EPSILON {
                break;
            }
        }
        let (alpha, ft, gt) = match accepted.or(armijo_fallback) {
            Some(a) => a,
            None => {
                trace.termination = Termination::LineSearchFailed;
                return trace;
            }
        };

        let step = alpha * &p;
        let x_new = &x + &step;
        let y = &gt - &g;
        let ys = y.dot(&step);
        if ys > 1e-10 {
            let rho = 1.0 / ys;
            let sy = &step * y.transpose(); // s yᵀ
            let id = DMatrix::<f64>::identity(n, n);
            let left = &id - rho * &sy;
            let right = &id - rho * sy.transpose();
            h = &left * h * &right + rho * (&step * step.transpose());
        }

        x = x_new;
        f = ft;
        g = gt;
        trace.xs.push(x.as_slice().to_vec());
        trace.fs.push(f);
        trace.loss_evals.push(evals);
        trace.grad_evals.push(evals);
    }
    trace
}

/// Tape-backed unit-loss objective over the flat state vector.
pub fn state_objective<'a>(
    obs: &'a Observation,
    skel: &'a Skeleton,
    weights: &'a LossWeights,
    cfg: &'a RasterConfig,
) -> impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)> + 'a {
    move |x: &[f64]| {
        let mut tape = Tape::new();
        let flat = tape.input(Tensor::vector(x.to_vec()));
        let sv = StateVars::from_flat_var(&mut tape, skel, flat).ok()?;
        if tape.val(sv.trans).data()[2] <= crate::camera::MIN_DEPTH {
            return None;
        }
        let (lu, _) = unit_loss(&mut tape, &sv, obs, skel, weights, cfg).ok()?;
        let v = tape.val(lu).item();
        if !v.is_finite() {
            return None;
        }
        let grad = tape.gradient(lu, &[flat]).ok()?;
        Some((v, grad[0].data().to_vec()))
    }
}

fn to_state_trace(skel: &Skeleton, t: MinimizeTrace) -> OptimizerTrace {
    OptimizerTrace {
        iterates: t.xs.iter().map(|x| ModelState::from_flat(skel, x)).collect(),
        losses: t.fs,
        loss_evals: t.loss_evals,
        grad_evals: t.grad_evals,
        termination: t.termination,
    }
}

/// Plain gradient descent on the unit loss from a given state.
pub fn fit_gd(
    obs: &Observation,
    skel: &Skeleton,
    s_init: &ModelState,
    weights: &LossWeights,
    cfg: &RasterConfig,
    steps: usize,
    step_size: f64,
) -> OptimizerTrace {
    let eval = state_objective(obs, skel, weights, cfg);
    let t = minimize_gd(eval, &s_init.to_flat(), steps, step_size);
    to_state_trace(skel, t)
}

/// BFGS on the unit loss from a given state.
pub fn fit_bfgs(
    obs: &Observation,
    skel: &Skeleton,
    s_init: &ModelState,
    weights: &LossWeights,
    cfg: &RasterConfig,
    bfgs: &BfgsConfig,
) -> OptimizerTrace {
    let eval = state_objective(obs, skel, weights, cfg);
    let t = minimize_bfgs(eval, &s_init.to_flat(), bfgs);
    to_state_trace(skel, t)
}

/// Run the trained refiner for `stages` stages, then BFGS from the reached
/// state. The combined trace carries cumulative evaluation counts across
/// both phases; `max_iters == 0` skips the BFGS phase entirely.
pub fn fit_hybrid(
    obs: &Observation,
    skel: &Skeleton,
    params: &RefinerParams,
    stages: usize,
    weights: &LossWeights,
    cfg: &RasterConfig,
    bfgs: &BfgsConfig,
) -> Result<(OptimizerTrace, Trajectory), RefinerError> {
    // stage 0 still runs the encoder and evaluates s_0
    let traj = unroll(obs, params, skel, stages.max(1), weights, cfg)?;
    let keep = stages.min(traj.states.len() - 1);

    let mut iterates: Vec<ModelState> = traj.states[..=keep].to_vec();
    let mut losses = traj.losses_per_state()[..=keep.min(traj.eval_count.saturating_sub(1))]
        .to_vec();
    let mut loss_evals: Vec<usize> = (1..=losses.len()).collect();
    let mut grad_evals = vec![0usize; losses.len()];
    let mut termination = Termination::StepsExhausted;

    if bfgs.max_iters > 0 && !losses.is_empty() {
        let start = iterates[losses.len() - 1].clone();
        let eval = state_objective(obs, skel, weights, cfg);
        let t = minimize_bfgs(eval, &start.to_flat(), bfgs);
        let base_loss = loss_evals.last().copied().unwrap_or(0);
        let base_grad = grad_evals.last().copied().unwrap_or(0);
        // drop the duplicated starting iterate but keep its evaluation cost
        for i in 1..t.xs.len() {
            iterates.push(ModelState::from_flat(skel, &t.xs[i]));
            losses.push(t.fs[i]);
            loss_evals.push(base_loss + t.loss_evals[i]);
            grad_evals.push(base_grad + t.grad_evals[i]);
        }
        if let (Some(first), Some(&last_total)) = (t.loss_evals.first(), loss_evals.last()) {
            let _ = (first, last_total);
        }
        termination = t.termination;
        // account for the re-evaluation at the junction even if no step was taken
        if t.xs.len() <= 1 {
            if let Some(last) = loss_evals.last_mut() {
                *last += 1;
            }
            if let Some(last) = grad_evals.last_mut() {
                *last += 1;
            }
        }
    }

    Ok((
        OptimizerTrace { iterates, losses, loss_evals, grad_evals, termination },
        traj,
    ))
}

/// Closed-form similarity transform (Umeyama with determinant correction)
/// minimizing ‖s·R·X + t − Y‖².
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2])
                + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2])
                + self.translation[1],
            self.scale * (r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2])
                + self.translation[2],
        ]
    }
}

pub fn procrustes_align(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<Similarity, AlignError> {
    if x.len() != y.len() {
        return Err(AlignError::CountMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(AlignError::TooFewPoints(n));
    }
    let nf = n as f64;

    let mean = |pts: &[[f64; 3]]| {
        let mut m = [0.0; 3];
        for p in pts {
            for k in 0..3 {
                m[k] += p[k];
            }
        }
        [m[0] / nf, m[1] / nf, m[2] / nf]
    };
    let mx = mean(x);
    let my = mean(y);

    let mut var_x = 0.0;
    let mut cov = Matrix3::<f64>::zeros(); // Σ (y−μy)(x−μx)ᵀ / n
    for (px, py) in x.iter().zip(y) {
        let dx = [px[0] - mx[0], px[1] - mx[1], px[2] - mx[2]];
        let dy = [py[0] - my[0], py[1] - my[1], py[2] - my[2]];
        var_x += dx.iter().map(|v| v * v).sum::<f64>();
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += dy[i] * dx[j] / nf;
            }
        }
    }
    var_x /= nf;
    if var_x < 1e-18 {
        return Err(AlignError::Degenerate);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(AlignError::Degenerate)?;
    let vt = svd.v_t.ok_or(AlignError::Degenerate)?;
    let d = svd.singular_values;

    // rank < 2 after centering: rotation is not determined
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(AlignError::Degenerate);
    }

    let det_sign = (u.determinant() * vt.determinant()).signum();
    let s_diag = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, det_sign));
    let r = u * s_diag * vt;
    let scale = (d[0] + d[1] + det_sign * d[2]) / var_x;

    let rot_mx = [
        scale * (r[(0, 0)] * mx[0] + r[(0, 1)] * mx[1] + r[(0, 2)] * mx[2]),
        scale * (r[(1, 0)] * mx[0] + r[(1, 1)] * mx[1] + r[(1, 2)] * mx[2]),
        scale * (r[(2, 0)] * mx[0] + r[(2, 1)] * mx[1] + r[(2, 2)] * mx[2]),
    ];
    Ok(Similarity {
        scale,
        rotation: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        translation: [my[0] - rot_mx[0], my[1] - rot_mx[1], my[2] - rot_mx[2]],
    })
}

/// MPJPE family, in the units of the inputs (meters here).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMetrics {
    pub mpjpe: f64,
    pub mpjpe_pa: f64,
    pub mpjpe_trans: f64,
}

fn mean_dist(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    s / a.len() as f64
}

/// Joint-position error metrics: raw, Procrustes-aligned, and root
/// translation error. Degenerate alignment falls back to the identity
/// transform (mpjpe_pa == mpjpe).
pub fn metrics(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> PoseMetrics {
    assert_eq!(pred.len(), gt.len(), "joint counts must match");
    let mpjpe = mean_dist(pred, gt);
    let mpjpe_pa = match procrustes_align(pred, gt) {
        Ok(sim) => {
            let aligned: Vec<[f64; 3]> = pred.iter().map(|&p| sim.apply(p)).collect();
            mean_dist(&aligned, gt)
        }
        Err(_) => mpjpe,
    };
    let d0 = [
        pred[0][0] - gt[0][0],
        pred[0][1] - gt[0][1],
        pred[0][2] - gt[0][2],
    ];
    let mpjpe_trans = (d0[0] * d0[0] + d0[1] * d0[1] + d0[2] * d0[2]).sqrt();
    PoseMetrics { mpjpe, mpjpe_pa, mpjpe_trans }
}
