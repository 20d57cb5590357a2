//! The neural-descent core: a context encoder that produces the code vector
//! and the initial state estimate, a gated recurrent cell that proposes
//! residual state updates from (previous state, previous unit loss, context),
//! the unrolled refinement trajectory, and the meta-losses that aggregate
//! per-stage losses for training.

use crate::body::{ModelState, Skeleton, StateVars, SHAPE_DIM};
use crate::camera::MIN_DEPTH;
use crate::render::{unit_loss, LossBreakdown, LossWeights, Observation, RasterConfig,
                    RenderError};
use crate::tape::{DiffError, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub use crate::body::PART_COUNT;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("part map {h}x{w} cannot be pooled to {side}x{side} (extent must be a multiple)")]
    BadPoolExtent { h: usize, w: usize, side: usize },
    #[error("observation has {got} keypoints, expected {want}")]
    KeypointCount { got: usize, want: usize },
    #[error("meta-loss of an empty stage sequence")]
    EmptyLossSequence,
    #[error("parameter tensor {name} has shape {got:?}, expected {want:?}")]
    BadParamShape { name: &'static str, got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Canonical 6-D rotation offset added to the encoder's rotation head so a
/// zero head still emits a valid frame.
pub const ROT6_OFFSET: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Architecture dimensions, derived from the skeleton and the part-map
/// extent. `standard` uses the production sizes (context 128, hidden 256);
/// smaller values exist for finite-difference validation of the full
/// training gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerDims {
    pub n_joints: usize,
    pub part_count: usize,
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub state_dim: usize,
    /// Side of the average-pooled part-map features.
    pub pooled_side: usize,
    pub feature_len: usize,
    pub context_dim: usize,
    pub enc_hidden: usize,
    pub hidden: usize,
}

impl RefinerDims {
    pub fn new(
        skel: &Skeleton,
        extent: usize,
        context_dim: usize,
        enc_hidden: usize,
        hidden: usize,
    ) -> Self {
        let n_joints = skel.joint_count();
        let pooled_side = extent.min(8);
        let feature_len =
            3 * n_joints + pooled_side * pooled_side * (PART_COUNT + 1) + 4;
        RefinerDims {
            n_joints,
            part_count: PART_COUNT,
            pose_dim: skel.pose_dim(),
            shape_dim: SHAPE_DIM,
            state_dim: skel.state_dim(),
            pooled_side,
            feature_len,
            context_dim,
            enc_hidden,
            hidden,
        }
    }

    pub fn standard(skel: &Skeleton, extent: usize) -> Self {
        RefinerDims::new(skel, extent, 128, 128, 256)
    }

    /// LSTM input: state ⊕ log(1+L) ⊕ context.
    pub fn cell_input(&self) -> usize {
        self.state_dim + 1 + self.context_dim
    }

    /// Named parameter tensors and their shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("enc_w1", vec![self.enc_hidden, self.feature_len]),
            ("enc_b1", vec![self.enc_hidden]),
            ("enc_w2", vec![self.context_dim, self.enc_hidden]),
            ("enc_b2", vec![self.context_dim]),
            ("head_w", vec![self.state_dim, self.enc_hidden]),
            ("head_b", vec![self.state_dim]),
            ("lstm_wx", vec![4 * self.hidden, self.cell_input()]),
            ("lstm_wh", vec![4 * self.hidden, self.hidden]),
            ("lstm_b", vec![4 * self.hidden]),
            ("out_w", vec![self.state_dim, self.hidden]),
            ("out_b", vec![self.state_dim]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// All trainable weights δ, stored in the order of
/// [`RefinerDims::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub dims: RefinerDims,
    pub tensors: Vec<Tensor>,
}

impl RefinerParams {
    /// Fan-in-scaled uniform weights, zero biases, zero output heads.
    ///
    /// Both the encoder's state head and the refiner's update head start at
    /// zero: the first estimate is the rest state and the first iterate
    /// equals s_0, so training starts from a valid, loss-neutral point.
    pub fn init(dims: RefinerDims, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tensors = dims
            .param_shapes()
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let is_weight = shape.len() == 2;
                let zero_init =
                    matches!(*name, "out_w" | "out_b" | "head_w" | "head_b") || !is_weight;
                if zero_init {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape[1] as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    Tensor::new(
                        shape.clone(),
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )
                }
            })
            .collect();
        RefinerParams { dims, tensors }
    }

    pub fn zeros(dims: RefinerDims) -> Self {
        let tensors = dims.param_shapes().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        RefinerParams { dims, tensors }
    }

    /// Copy with small uniform noise on every tensor, so tests can probe
    /// gradients away from the zero-initialized heads.
    pub fn randomized(&self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                Tensor::new(
                    t.shape().to_vec(),
                    t.data().iter().map(|&x| x + rng.gen_range(-scale..scale)).collect(),
                )
            })
            .collect();
        RefinerParams { dims: self.dims, tensors }
    }

    pub fn validate(&self) -> Result<(), RefinerError> {
        for ((name, want), t) in self.dims.param_shapes().iter().zip(&self.tensors) {
            if t.shape() != want.as_slice() {
                return Err(RefinerError::BadParamShape {
                    name,
                    got: t.shape().to_vec(),
                    want: want.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(dims: RefinerDims, flat: &[f64]) -> Self {
        let mut tensors = Vec::new();
        let mut off = 0;
        for (_, shape) in dims.param_shapes() {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[off..off + n].to_vec()));
            off += n;
        }
        assert_eq!(off, flat.len());
        RefinerParams { dims, tensors }
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.input(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ParamVars { dims: self.dims, vars }
    }
}

/// The parameters laid out on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub dims: RefinerDims,
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Split a single flat input variable into the parameter tensors;
    /// used to finite-difference the training gradient on tiny models.
    pub fn from_flat_var(
        tape: &mut Tape,
        dims: RefinerDims,
        flat: Var,
    ) -> Result<Self, DiffError> {
        let mut vars = Vec::new();
        let mut off = 0;
        for (_, shape) in dims.param_shapes() {
            let n: usize = shape.iter().product();
            let s = tape.slice(flat, off, off + n)?;
            vars.push(tape.reshape(s, shape)?);
            off += n;
        }
        Ok(ParamVars { dims, vars })
    }
}

// parameter indices in storage order
const ENC_W1: usize = 0;
const ENC_B1: usize = 1;
const ENC_W2: usize = 2;
const ENC_B2: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;
const LSTM_WX: usize = 6;
const LSTM_WH: usize = 7;
const LSTM_B: usize = 8;
const OUT_W: usize = 9;
const OUT_B: usize = 10;

/// Recurrent memory (hidden and cell vectors).
#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub hidden: Var,
    pub cell: Var,
}

impl MemoryVars {
    pub fn zeros(tape: &mut Tape, dims: &RefinerDims) -> Self {
        MemoryVars {
            hidden: tape.constant(Tensor::zeros(&[dims.hidden])),
            cell: tape.constant(Tensor::zeros(&[dims.hidden])),
        }
    }
}

/// Observation features: keypoints normalized to [−1,1] by the crop extent,
/// raw confidences, the part map average-pooled to `pooled_side²·(P+1)`,
/// and the crop intrinsics normalized by the crop size.
pub fn featurize(obs: &Observation, dims: &RefinerDims) -> Result<Vec<f64>, RefinerError> {
    if obs.keypoints.len() != dims.n_joints || obs.confidences.len() != dims.n_joints {
        return Err(RefinerError::KeypointCount {
            got: obs.keypoints.len(),
            want: dims.n_joints,
        });
    }
    let pm = &obs.part_map;
    let side = dims.pooled_side;
    if pm.h % side != 0 || pm.w % side != 0 {
        return Err(RefinerError::BadPoolExtent { h: pm.h, w: pm.w, side });
    }

    let mut f = Vec::with_capacity(dims.feature_len);
    let (w, h) = (pm.w as f64, pm.h as f64);
    for kp in &obs.keypoints {
        f.push(2.0 * kp[0] / w - 1.0);
        f.push(2.0 * kp[1] / h - 1.0);
    }
    f.extend_from_slice(&obs.confidences);

    // average-pool each channel into side×side cells
    let (bh, bw) = (pm.h / side, pm.w / side);
    let channels = pm.channels;
    for cy in 0..side {
        for cx in 0..side {
            for ch in 0..channels {
                let mut acc = 0.0f64;
                for dy in 0..bh {
                    for dx in 0..bw {
                        let row = cy * bh + dy;
                        let col = cx * bw + dx;
                        acc += pm.data[(row * pm.w + col) * channels + ch] as f64;
                    }
                }
                f.push(acc / (bh * bw) as f64);
            }
        }
    }

    let c = &obs.crop_intrinsics;
    f.extend_from_slice(&[c.fx / w, c.fy / h, c.cx / w, c.cy / h]);
    debug_assert_eq!(f.len(), dims.feature_len);
    Ok(f)
}

/// Context encoding: s^c and the initial state estimate s_0.
///
/// A zero parameter set yields s^c = 0 and an A-pose s_0 at the canonical
/// frame with t_z = softplus(0) + 1.
pub fn encode_context(
    tape: &mut Tape,
    obs: &Observation,
    pv: &ParamVars,
    _skel: &Skeleton,
) -> Result<(Var, StateVars), RefinerError> {
    let dims = &pv.dims;
    let feats = featurize(obs, dims)?;
    let f = tape.constant(Tensor::vector(feats));

    let w1f = tape.matmul(pv.get(ENC_W1), f)?;
    let pre1 = tape.add(w1f, pv.get(ENC_B1))?;
    let h1 = tape.tanh(pre1);

    let w2h = tape.matmul(pv.get(ENC_W2), h1)?;
    let s_c = tape.add(w2h, pv.get(ENC_B2))?;

    let raw_w = tape.matmul(pv.get(HEAD_W), h1)?;
    let raw = tape.add(raw_w, pv.get(HEAD_B))?;

    let np = dims.pose_dim;
    let ns = dims.shape_dim;
    let theta = tape.slice(raw, 0, np)?;
    let beta = tape.slice(raw, np, np + ns)?;
    let r_raw = tape.slice(raw, np + ns, np + ns + 6)?;
    let r_off = tape.vector(&ROT6_OFFSET);
    let rot6 = tape.add(r_raw, r_off)?;
    let t_xy = tape.slice(raw, np + ns + 6, np + ns + 8)?;
    let t_z_raw = tape.slice(raw, np + ns + 8, np + ns + 9)?;
    let sp = tape.softplus(t_z_raw)?;
    let t_z = tape.add_const(sp, 1.0)?;
    let trans = tape.concat(&[t_xy, t_z])?;

    Ok((s_c, StateVars { theta, beta, rot6, trans }))
}

/// One refinement stage: the gated cell consumes
/// (s_prev, log(1+L_prev), s^c) and the residual head updates the state.
pub fn refine_step(
    tape: &mut Tape,
    s_prev: &StateVars,
    m_prev: &MemoryVars,
    l_prev: Var,
    s_c: Var,
    pv: &ParamVars,
    skel: &Skeleton,
) -> Result<(StateVars, MemoryVars), RefinerError> {
    let dims = &pv.dims;
    let s_flat = tape.concat(&[s_prev.theta, s_prev.beta, s_prev.rot6, s_prev.trans])?;
    let lp1 = tape.add_const(l_prev, 1.0)?;
    let ll = tape.log(lp1);
    let x = tape.concat(&[s_flat, ll, s_c])?;

    let wx = tape.matmul(pv.get(LSTM_WX), x)?;
    let wh = tape.matmul(pv.get(LSTM_WH), m_prev.hidden)?;
    let pre = {
        let s = tape.add(wx, wh)?;
        tape.add(s, pv.get(LSTM_B))?
    };
    let h = dims.hidden;
    let i_pre = tape.slice(pre, 0, h)?;
    let f_pre = tape.slice(pre, h, 2 * h)?;
    let g_pre = tape.slice(pre, 2 * h, 3 * h)?;
    let o_pre = tape.slice(pre, 3 * h, 4 * h)?;
    let i_g = tape.sigmoid(i_pre);
    let f_g = tape.sigmoid(f_pre);
    let g_g = tape.tanh(g_pre);
    let o_g = tape.sigmoid(o_pre);

    let fc = tape.mul(f_g, m_prev.cell)?;
    let ig = tape.mul(i_g, g_g)?;
    let cell = tape.add(fc, ig)?;
    let ct = tape.tanh(cell);
    let hidden = tape.mul(o_g, ct)?;

    let dw = tape.matmul(pv.get(OUT_W), hidden)?;
    let delta = tape.add(dw, pv.get(OUT_B))?;
    let s_next_flat = tape.add(s_flat, delta)?;
    let s_next = StateVars::from_flat_var(tape, skel, s_next_flat)?;

    Ok((s_next, MemoryVars { hidden, cell }))
}

/// A recorded refinement trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// s_0 … s_M (shorter when truncated).
    pub states: Vec<ModelState>,
    /// Unit loss at s_0 (the first cell input).
    pub init_loss: Option<LossBreakdown>,
    /// Unit losses at s_1 … s_M.
    pub stage_losses: Vec<LossBreakdown>,
    /// Number of loss evaluations performed (M+1 when untruncated).
    pub eval_count: usize,
    pub truncated: bool,
}

impl Trajectory {
    /// Loss value per recorded state (init followed by stages).
    pub fn losses_per_state(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(b) = &self.init_loss {
            v.push(b.total);
        }
        v.extend(self.stage_losses.iter().map(|b| b.total));
        v
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.stage_losses.last().map(|b| b.total).or(self.init_loss.map(|b| b.total))
    }

    pub fn breakdown_per_state(&self) -> Vec<LossBreakdown> {
        let mut v = Vec::new();
        if let Some(b) = self.init_loss {
            v.push(b);
        }
        v.extend(self.stage_losses.iter().copied());
        v
    }
}

/// Tape-level unroll output, for training.
pub struct UnrolledVars {
    pub state_vars: Vec<StateVars>,
    /// L_u variables at s_1 … s_M.
    pub stage_loss_vars: Vec<Var>,
    pub init_loss_var: Option<Var>,
    pub trajectory: Trajectory,
}

fn state_projectable(tape: &Tape, sv: &StateVars) -> bool {
    sv.is_finite(tape) && tape.val(sv.trans).data()[2] > MIN_DEPTH
}

/// Unroll the refiner for `stages` stages on one observation.
///
/// The unit loss is evaluated at s_0 … s_M (M+1 evaluations): each stage
/// consumes the previous state's loss, and the final state's loss closes
/// the trajectory. A projection failure truncates the trajectory and sets
/// the flag rather than erroring.
pub fn unroll_on_tape(
    tape: &mut Tape,
    obs: &Observation,
    pv: &ParamVars,
    skel: &Skeleton,
    stages: usize,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<UnrolledVars, RefinerError> {
    assert!(stages >= 1, "unroll needs at least one stage");
    let (s_c, s0) = encode_context(tape, obs, pv, skel)?;
    let mut mem = MemoryVars::zeros(tape, &pv.dims);

    let mut state_vars = vec![s0];
    let mut stage_loss_vars = Vec::with_capacity(stages);
    let mut init_loss_var = None;
    let mut traj = Trajectory {
        states: vec![s0.to_state(tape, skel)],
        init_loss: None,
        stage_losses: Vec::new(),
        eval_count: 0,
        truncated: false,
    };

    for i in 0..=stages {
        let sv = state_vars[i];
        if !state_projectable(tape, &sv) {
            traj.truncated = true;
            break;
        }
        let (l, bd) = match unit_loss(tape, &sv, obs, skel, weights, cfg) {
            Ok(ok) => ok,
            Err(RenderError::Camera(_)) | Err(RenderError::Body(_)) => {
                traj.truncated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        traj.eval_count += 1;
        if i == 0 {
            init_loss_var = Some(l);
            traj.init_loss = Some(bd);
        } else {
            stage_loss_vars.push(l);
            traj.stage_losses.push(bd);
        }
        if i == stages {
            break;
        }
        let (s_next, m_next) = refine_step(tape, &sv, &mem, l, s_c, pv, skel)?;
        mem = m_next;
        state_vars.push(s_next);
        traj.states.push(s_next.to_state(tape, skel));
    }

    Ok(UnrolledVars { state_vars, stage_loss_vars, init_loss_var, trajectory: traj })
}

/// Unroll without gradients and return the plain trajectory.
pub fn unroll(
    obs: &Observation,
    params: &RefinerParams,
    skel: &Skeleton,
    stages: usize,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<Trajectory, RefinerError> {
    let mut tape = Tape::new();
    let pv = params.on_tape(&mut tape, false);
    let u = unroll_on_tape(&mut tape, obs, &pv, skel, stages, weights, cfg)?;
    Ok(u.trajectory)
}

/// Meta-loss kinds aggregating the per-stage losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaLossKind {
    Sum,
    Last,
    Min,
    Max,
    /// Observable improvement: Σ_i min{L^i − min_{j<i} L^j, 0}, with the
    /// first stage contributing zero (empty prefix minimum).
    Oi,
}

impl MetaLossKind {
    pub const ALL: [MetaLossKind; 5] = [
        MetaLossKind::Sum,
        MetaLossKind::Last,
        MetaLossKind::Min,
        MetaLossKind::Max,
        MetaLossKind::Oi,
    ];
}

impl fmt::Display for MetaLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetaLossKind::Sum => "sum",
            MetaLossKind::Last => "last",
            MetaLossKind::Min => "min",
            MetaLossKind::Max => "max",
            MetaLossKind::Oi => "oi",
        };
        f.write_str(s)
    }
}

impl FromStr for MetaLossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(MetaLossKind::Sum),
            "last" => Ok(MetaLossKind::Last),
            "min" => Ok(MetaLossKind::Min),
            "max" => Ok(MetaLossKind::Max),
            "oi" => Ok(MetaLossKind::Oi),
            other => Err(format!("unknown meta-loss kind '{other}'")),
        }
    }
}

/// Aggregate stage losses into the training objective (plain values).
pub fn meta_loss(stage_losses: &[f64], kind: MetaLossKind) -> Result<f64, RefinerError> {
    if stage_losses.is_empty() {
        return Err(RefinerError::EmptyLossSequence);
    }
    Ok(match kind {
        MetaLossKind::Sum => stage_losses.iter().sum(),
        MetaLossKind::Last => *stage_losses.last().unwrap(),
        MetaLossKind::Min => stage_losses.iter().copied().fold(f64::INFINITY, f64::min),
        MetaLossKind::Max => stage_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        MetaLossKind::Oi => {
            let mut best = stage_losses[0];
            let mut total = 0.0;
            for &l in &stage_losses[1..] {
                total += (l - best).min(0.0);
                best = best.min(l);
            }
            total
        }
    })
}

/// Tape version of [`meta_loss`] for differentiable training objectives.
pub fn meta_loss_var(
    tape: &mut Tape,
    stage_losses: &[Var],
    kind: MetaLossKind,
) -> Result<Var, RefinerError> {
    if stage_losses.is_empty() {
        return Err(RefinerError::EmptyLossSequence);
    }
    Ok(match kind {
        MetaLossKind::Sum => tape.add_many(stage_losses)?,
        MetaLossKind::Last => *stage_losses.last().unwrap(),
        MetaLossKind::Min => {
            let mut acc = stage_losses[0];
            for &l in &stage_losses[1..] {
                acc = tape.min(acc, l)?;
            }
            acc
        }
        MetaLossKind::Max => {
            let mut acc = stage_losses[0];
            for &l in &stage_losses[1..] {
                acc = tape.max(acc, l)?;
            }
            acc
        }
        MetaLossKind::Oi => {
            let zero = tape.scalar(0.0);
            let mut best = stage_losses[0];
            let mut total = zero;
            for &l in &stage_losses[1..] {
                let diff = tape.sub(l, best)?;
                let term = tape.min(diff, zero)?;
                total = tape.add(total, term)?;
                best = tape.min(best, l)?;
            }
            total
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{default_skeleton, pose_joints_values, sample_state, DEFAULT_T_RANGE};
    use crate::camera::{project_points, Intrinsics};
    use crate::render::PartMap;

    fn test_cfg() -> RasterConfig {
        RasterConfig { sigma: 1.0, gamma: 1e-2, h: 8, w: 8 }
    }

    fn test_obs(seed: u64, cfg: &RasterConfig) -> (Skeleton, Observation, ModelState) {
        let skel = default_skeleton();
        let state = sample_state(&skel, seed, 0.3, 0.2, &DEFAULT_T_RANGE);
        let cam = Intrinsics {
            fx: cfg.w as f64 * 1.5,
            fy: cfg.h as f64 * 1.5,
            cx: cfg.w as f64 / 2.0,
            cy: cfg.h as f64 / 2.0,
        };
        let joints = pose_joints_values(&skel, &state).unwrap();
        let kps = project_points(&joints, &cam).unwrap();
        let obs = Observation {
            keypoints: kps,
            confidences: vec![1.0; skel.joint_count()],
            part_map: PartMap::zeros(cfg.h, cfg.w),
            crop_intrinsics: cam,
            gt_joints: Some(joints),
            gt_mesh_vertices: None,
        };
        (skel, obs, state)
    }

    #[test]
    fn feature_length_and_zero_observation() {
        let cfg = test_cfg();
        let (skel, mut obs, _) = test_obs(1, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        // 3·N_j + pooled²·(P+1) + 4
        assert_eq!(dims.feature_len, 3 * 17 + 64 * 16 + 4);
        let f = featurize(&obs, &dims).unwrap();
        assert_eq!(f.len(), dims.feature_len);

        // all-ones part map pools to ones
        obs.part_map.data.iter_mut().for_each(|x| *x = 1.0);
        let f = featurize(&obs, &dims).unwrap();
        let pooled = &f[3 * 17..3 * 17 + 64 * 16];
        assert!(pooled.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        // zero keypoints/confidences zero their block, intrinsics stay
        obs.keypoints = vec![[0.0, 0.0]; 17];
        obs.confidences = vec![0.0; 17];
        let f = featurize(&obs, &dims).unwrap();
        assert!(f[..34].iter().all(|&x| x == -1.0)); // normalized zero pixel
        assert!(f[34..51].iter().all(|&x| x == 0.0));
        assert!(f[dims.feature_len - 4..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_params_give_rest_estimate() {
        let cfg = test_cfg();
        let (skel, obs, _) = test_obs(2, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        let params = RefinerParams::zeros(dims);
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape, false);
        let (s_c, s0) = encode_context(&mut tape, &obs, &pv, &skel).unwrap();
        assert!(tape.val(s_c).data().iter().all(|&x| x == 0.0));
        assert!(tape.val(s0.theta).data().iter().all(|&x| x == 0.0));
        assert!(tape.val(s0.beta).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.val(s0.rot6).data(), &ROT6_OFFSET);
        let t = tape.val(s0.trans).data();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 0.0);
        assert!((t[2] - (2.0f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = test_cfg();
        let (skel, obs, _) = test_obs(3, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        let params = RefinerParams::init(dims, 7);
        let run = || {
            let mut tape = Tape::new();
            let pv = params.on_tape(&mut tape, false);
            let (s_c, s0) = encode_context(&mut tape, &obs, &pv, &skel).unwrap();
            (tape.val(s_c).data().to_vec(), s0.to_state(&tape, &skel))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        // tiny dims so the flattened parameter vector stays small
        let cfg = RasterConfig { sigma: 1.0, gamma: 1e-2, h: 4, w: 4 };
        let (skel, obs, _) = test_obs(4, &cfg);
        let dims = RefinerDims::new(&skel, 4, 5, 6, 8);
        let params = RefinerParams::init(dims, 11);
        // randomize all tensors a bit so the zero-init head also gets checked
        let mut flat = params.flatten();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for x in flat.iter_mut() {
            *x += 0.05 * rng.gen_range(-1.0..1.0f64);
        }
        let skel_ref = &skel;
        let obs_ref = &obs;
        let err = crate::tape::check_gradient(
            move |t, x| {
                let pv = ParamVars::from_flat_var(t, dims, x)?;
                let (s_c, s0) = encode_context(t, obs_ref, &pv, skel_ref)
                    .map_err(|_| DiffError::NonFinite("encode"))?;
                // one coordinate of s_0 plus a touch of s_c
                let tz = t.slice(s0.trans, 2, 3)?;
                let sc0 = t.slice(s_c, 0, 1)?;
                let th0 = t.slice(s0.theta, 0, 1)?;
                let a = t.add(tz, sc0)?;
                let b = t.add(a, th0)?;
                Ok(t.sum(b))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn zero_output_head_is_identity_refinement() {
        let cfg = test_cfg();
        let (skel, obs, _) = test_obs(5, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        let params = RefinerParams::init(dims, 13); // out head zero by init
        let w = LossWeights { lambda_b: 0.0, ..Default::default() };
        let traj = unroll(&obs, &params, &skel, 5, &w, &cfg).unwrap();
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.eval_count, 6);
        assert!(!traj.truncated);
        for s in &traj.states[1..] {
            assert_eq!(s, &traj.states[0]);
        }
        let losses = traj.losses_per_state();
        for l in &losses[1..] {
            assert!((l - losses[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_evolves_with_fixed_state() {
        let cfg = test_cfg();
        let (skel, obs, _) = test_obs(6, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        let params = RefinerParams::init(dims, 17);
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape, false);
        let (s_c, s0) = encode_context(&mut tape, &obs, &pv, &skel).unwrap();
        let mem0 = MemoryVars::zeros(&mut tape, &dims);
        let l = tape.scalar(1.0);
        let (_, mem1) = refine_step(&mut tape, &s0, &mem0, l, s_c, &pv, &skel).unwrap();
        let (_, mem2) = refine_step(&mut tape, &s0, &mem1, l, s_c, &pv, &skel).unwrap();
        let h1 = tape.val(mem1.hidden).data().to_vec();
        let h2 = tape.val(mem2.hidden).data().to_vec();
        assert_ne!(h1, h2, "memory must evolve even when the state is fixed");

        // determinism of a single step
        let (s_a, _) = refine_step(&mut tape, &s0, &mem0, l, s_c, &pv, &skel).unwrap();
        let (s_b, _) = refine_step(&mut tape, &s0, &mem0, l, s_c, &pv, &skel).unwrap();
        assert_eq!(s_a.to_state(&tape, &skel), s_b.to_state(&tape, &skel));
    }

    #[test]
    fn meta_loss_table() {
        let ls = [5.0, 4.0, 6.0, 3.0];
        assert_eq!(meta_loss(&ls, MetaLossKind::Sum).unwrap(), 18.0);
        assert_eq!(meta_loss(&ls, MetaLossKind::Last).unwrap(), 3.0);
        assert_eq!(meta_loss(&ls, MetaLossKind::Min).unwrap(), 3.0);
        assert_eq!(meta_loss(&ls, MetaLossKind::Max).unwrap(), 6.0);
        // stages: (4−5)=−1, (6−4)→0, (3−4)=−1 → −2
        assert_eq!(meta_loss(&ls, MetaLossKind::Oi).unwrap(), -2.0);
        assert!(meta_loss(&[], MetaLossKind::Sum).is_err());
    }

    #[test]
    fn meta_loss_oi_properties() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let m = rng.gen_range(1..8);
            let ls: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..10.0)).collect();
            let oi = meta_loss(&ls, MetaLossKind::Oi).unwrap();
            assert!(oi <= 0.0);
            let mn = meta_loss(&ls, MetaLossKind::Min).unwrap();
            let mx = meta_loss(&ls, MetaLossKind::Max).unwrap();
            let last = meta_loss(&ls, MetaLossKind::Last).unwrap();
            assert!(mn <= last && last <= mx);

            // telescoping on sorted-decreasing sequences
            let mut dec = ls.clone();
            dec.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oi_dec = meta_loss(&dec, MetaLossKind::Oi).unwrap();
            assert!((oi_dec - (dec[dec.len() - 1] - dec[0])).abs() < 1e-12);

            // oi == 0 iff no stage improves on the running best
            let improves = (1..ls.len()).any(|i| ls[i] < ls[..i].iter().cloned().fold(f64::INFINITY, f64::min));
            assert_eq!(oi < 0.0, improves, "{ls:?} oi={oi}");
            let _ = oi;
        }
        // M = 1: oi is 0 by the empty-prefix convention
        assert_eq!(meta_loss(&[4.2], MetaLossKind::Oi).unwrap(), 0.0);
    }

    #[test]
    fn meta_loss_var_agrees_with_plain() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        for _ in 0..50 {
            let m = rng.gen_range(1..7);
            let ls: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..5.0)).collect();
            for kind in MetaLossKind::ALL {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ls.iter().map(|&l| tape.scalar(l)).collect();
                let v = meta_loss_var(&mut tape, &vars, kind).unwrap();
                let plain = meta_loss(&ls, kind).unwrap();
                assert!((tape.val(v).item() - plain).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unroll_records_six_states_for_five_stages() {
        let cfg = test_cfg();
        let (skel, obs, _) = test_obs(8, &cfg);
        let dims = RefinerDims::standard(&skel, cfg.h);
        let mut params = RefinerParams::init(dims, 19);
        // give the output head small random weights so states actually move
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let out_w = &mut params.tensors[OUT_W];
        let fresh: Vec<f64> = (0..out_w.len()).map(|_| rng.gen_range(-0.01..0.01)).collect();
        *out_w = Tensor::new(out_w.shape().to_vec(), fresh);

        let w = LossWeights { lambda_b: 0.0, ..Default::default() };
        let traj = unroll(&obs, &params, &skel, 5, &w, &cfg).unwrap();
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.stage_losses.len(), 5);
        assert_eq!(traj.eval_count, 6);

        // unrolling must not mutate the observation
        let (_, obs2, _) = test_obs(8, &cfg);
        assert_eq!(obs, obs2);
    }
}
