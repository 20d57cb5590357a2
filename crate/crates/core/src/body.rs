//! Simplified articulated 3D human body: kinematic tree posing, a linear
//! bone-length shape space, 6D global rotation, per-bone prism mesh with
//! semantic part labels, Gaussian priors, and prior sampling.
//!
//! The model state is s = (θ, β, r, t): per-joint axis-angle pose relative
//! to the rest pose, shape coefficients acting on log bone lengths, a 6-D
//! global rotation, and a camera-space translation in meters.

use crate::tape::{DiffError, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of semantic body-part labels.
pub const PART_COUNT: usize = 15;
/// Shape-space dimensionality.
pub const SHAPE_DIM: usize = 4;
/// Seed for the fixed random orthonormal shape basis.
pub const DEFAULT_SHAPE_BASIS_SEED: u64 = 17;
/// Girth of a bone prism as a fraction of its rest length.
const GIRTH_RATIO: f64 = 0.1;
/// Tolerance below which the 6-D rotation input counts as degenerate.
const ROT6D_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("degenerate 6d rotation: orthogonalized vector norm {norm} < {ROT6D_TOL}")]
    DegenerateRotation { norm: f64 },
    #[error("model state contains non-finite values")]
    NonFiniteState,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Fixed kinematic tree with rest offsets, part labels, and the shape basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent index per joint; the root points at itself.
    pub parents: Vec<usize>,
    /// Bone offset from the parent joint in the rest pose, meters.
    pub rest_offsets: Vec<[f64; 3]>,
    /// Semantic part id in [0, PART_COUNT) for the bone ending at each joint.
    pub part_of_joint: Vec<usize>,
    /// J×SHAPE_DIM basis mapping β to per-bone log scales, row-major.
    pub shape_basis: Vec<f64>,
    /// Seed the basis was drawn from (stored for reproducibility).
    pub shape_basis_seed: u64,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Pose dimensionality N_p = 3·(J−1).
    pub fn pose_dim(&self) -> usize {
        3 * (self.joint_count() - 1)
    }

    /// Full state dimensionality N_p + N_s + 6 + 3.
    pub fn state_dim(&self) -> usize {
        self.pose_dim() + SHAPE_DIM + 9
    }

    pub fn vertex_count(&self) -> usize {
        8 * (self.joint_count() - 1)
    }

    pub fn triangle_count(&self) -> usize {
        12 * (self.joint_count() - 1)
    }

    /// Accumulated rest offsets: joint positions of the A-pose before the
    /// global rigid transform.
    pub fn rest_joints(&self) -> Vec<[f64; 3]> {
        let j = self.joint_count();
        let mut out = vec![[0.0; 3]; j];
        for i in 1..j {
            let p = self.parents[i];
            for k in 0..3 {
                out[i][k] = out[p][k] + self.rest_offsets[i][k];
            }
        }
        out
    }
}

/// The default 17-joint humanoid used throughout: pelvis root, spine, chest,
/// neck, head, and symmetric shoulder/elbow/wrist and hip/knee/ankle chains.
/// Offsets are in meters with +y pointing down (image convention).
pub fn default_skeleton() -> Skeleton {
    skeleton_with_basis_seed(DEFAULT_SHAPE_BASIS_SEED)
}

pub fn skeleton_with_basis_seed(seed: u64) -> Skeleton {
    let parents = vec![0, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15];
    let rest_offsets = vec![
        [0.0, 0.0, 0.0],     // pelvis (root)
        [0.0, -0.15, 0.0],   // spine
        [0.0, -0.15, 0.0],   // chest
        [0.0, -0.12, 0.0],   // neck
        [0.0, -0.12, 0.0],   // head
        [0.16, -0.02, 0.0],  // l_shoulder
        [0.22, 0.10, 0.0],   // l_elbow
        [0.20, 0.12, 0.0],   // l_wrist
        [-0.16, -0.02, 0.0], // r_shoulder
        [-0.22, 0.10, 0.0],  // r_elbow
        [-0.20, 0.12, 0.0],  // r_wrist
        [0.09, 0.02, 0.0],   // l_hip
        [0.02, 0.40, 0.0],   // l_knee
        [0.0, 0.42, 0.0],    // l_ankle
        [-0.09, 0.02, 0.0],  // r_hip
        [-0.02, 0.40, 0.0],  // r_knee
        [0.0, 0.42, 0.0],    // r_ankle
    ];
    // Both hip bones share part id 10, folding 16 bones onto 15 labels.
    let part_of_joint = vec![0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 10, 13, 14];
    let shape_basis = random_orthonormal_basis(parents.len(), SHAPE_DIM, seed);
    Skeleton { parents, rest_offsets, part_of_joint, shape_basis, shape_basis_seed: seed }
}

/// Random J×k matrix with orthonormal columns, deterministic in the seed.
fn random_orthonormal_basis(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..cols {
        for j in 0..i {
            let d: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            for r in 0..rows {
                columns[i][r] -= d * columns[j][r];
            }
        }
        let n: f64 = columns[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in columns[i].iter_mut() {
            *x /= n;
        }
    }
    let mut flat = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            flat[r * cols + c] = columns[c][r];
        }
    }
    flat
}

/// Optimized variables of the body model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Per-joint axis-angle, length 3·(J−1), radians.
    pub theta: Vec<f64>,
    /// Shape coefficients, length SHAPE_DIM.
    pub beta: Vec<f64>,
    /// 6-D global rotation (two 3-vectors before Gram-Schmidt).
    pub rot6: [f64; 6],
    /// Camera-space translation, meters.
    pub trans: [f64; 3],
}

impl ModelState {
    /// Rest configuration: A-pose at the canonical frame.
    pub fn rest(skel: &Skeleton) -> Self {
        ModelState {
            theta: vec![0.0; skel.pose_dim()],
            beta: vec![0.0; SHAPE_DIM],
            rot6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            trans: [0.0, 0.0, 0.0],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + self.beta.len() + 9);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.rot6);
        v.extend_from_slice(&self.trans);
        v
    }

    pub fn from_flat(skel: &Skeleton, flat: &[f64]) -> Self {
        let np = skel.pose_dim();
        assert_eq!(flat.len(), skel.state_dim());
        ModelState {
            theta: flat[..np].to_vec(),
            beta: flat[np..np + SHAPE_DIM].to_vec(),
            rot6: flat[np + SHAPE_DIM..np + SHAPE_DIM + 6].try_into().unwrap(),
            trans: flat[np + SHAPE_DIM + 6..].try_into().unwrap(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// The state laid out on a tape as four variables.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub theta: Var,
    pub beta: Var,
    pub rot6: Var,
    pub trans: Var,
}

impl StateVars {
    pub fn constants(tape: &mut Tape, s: &ModelState) -> Self {
        StateVars {
            theta: tape.constant(Tensor::vector(s.theta.clone())),
            beta: tape.constant(Tensor::vector(s.beta.clone())),
            rot6: tape.constant(Tensor::vector(s.rot6.to_vec())),
            trans: tape.constant(Tensor::vector(s.trans.to_vec())),
        }
    }

    pub fn inputs(tape: &mut Tape, s: &ModelState) -> Self {
        StateVars {
            theta: tape.input(Tensor::vector(s.theta.clone())),
            beta: tape.input(Tensor::vector(s.beta.clone())),
            rot6: tape.input(Tensor::vector(s.rot6.to_vec())),
            trans: tape.input(Tensor::vector(s.trans.to_vec())),
        }
    }

    /// Split a flat [state_dim] variable into the four blocks.
    pub fn from_flat_var(tape: &mut Tape, skel: &Skeleton, flat: Var) -> Result<Self, DiffError> {
        let np = skel.pose_dim();
        Ok(StateVars {
            theta: tape.slice(flat, 0, np)?,
            beta: tape.slice(flat, np, np + SHAPE_DIM)?,
            rot6: tape.slice(flat, np + SHAPE_DIM, np + SHAPE_DIM + 6)?,
            trans: tape.slice(flat, np + SHAPE_DIM + 6, np + SHAPE_DIM + 9)?,
        })
    }

    pub fn to_state(&self, tape: &Tape, skel: &Skeleton) -> ModelState {
        let mut flat = Vec::with_capacity(skel.state_dim());
        flat.extend_from_slice(tape.val(self.theta).data());
        flat.extend_from_slice(tape.val(self.beta).data());
        flat.extend_from_slice(tape.val(self.rot6).data());
        flat.extend_from_slice(tape.val(self.trans).data());
        ModelState::from_flat(skel, &flat)
    }

    pub fn is_finite(&self, tape: &Tape) -> bool {
        tape.val(self.theta).all_finite()
            && tape.val(self.beta).all_finite()
            && tape.val(self.rot6).all_finite()
            && tape.val(self.trans).all_finite()
    }
}

/// Gram-Schmidt a 6-vector into an orthonormal rotation matrix (3×3).
///
/// The first 3-vector normalizes to column 1, the second is orthogonalized
/// against it for column 2, and column 3 is their cross product. Degenerate
/// inputs (zero or parallel vectors, tolerance 1e-9) are rejected.
pub fn rot6d_to_matrix(tape: &mut Tape, r: Var) -> Result<Var, BodyError> {
    let rv = tape.val(r);
    if rv.len() != 6 {
        return Err(BodyError::Diff(DiffError::BadShape {
            op: "rot6d_to_matrix",
            expected: "6-vector",
            got: rv.shape().to_vec(),
        }));
    }
    let a_norm = rv.data()[..3].iter().map(|x| x * x).sum::<f64>().sqrt();
    if a_norm < ROT6D_TOL {
        return Err(BodyError::DegenerateRotation { norm: a_norm });
    }

    let a = tape.slice(r, 0, 3)?;
    let b = tape.slice(r, 3, 6)?;
    let c1 = tape.normalize(a)?;
    let d = tape.dot(c1, b)?;
    let proj = tape.mul(c1, d)?;
    let b_perp = tape.sub(b, proj)?;
    let perp_norm = tape.val(b_perp).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if perp_norm < ROT6D_TOL {
        return Err(BodyError::DegenerateRotation { norm: perp_norm });
    }
    let c2 = tape.normalize(b_perp)?;
    let c3 = tape.cross(c1, c2)?;

    // assemble with c1, c2, c3 as columns
    let mut entries = Vec::with_capacity(9);
    for row in 0..3 {
        for col in [c1, c2, c3] {
            entries.push(tape.slice(col, row, row + 1)?);
        }
    }
    let flat = tape.concat(&entries)?;
    Ok(tape.reshape(flat, vec![3, 3])?)
}

/// Encode a rotation matrix (row-major 3×3) as its first two columns.
pub fn rot6d_encode(m: &[f64; 9]) -> [f64; 6] {
    [m[0], m[3], m[6], m[1], m[4], m[7]]
}

/// Axis-angle (Rodrigues) rotation for one joint; exact and smooth at θ = 0
/// via the series branch for tiny angles.
fn rodrigues(tape: &mut Tape, aa: Var) -> Result<Var, DiffError> {
    let c = tape.sumsq(aa)?; // squared angle
    let c_val = tape.val(c).item();
    let (a_coef, b_coef) = if c_val < 1e-8 {
        // sin(w)/w and (1-cos w)/w² as series in c = w²
        let c2 = tape.mul(c, c)?;
        let a1 = tape.scale(c, -1.0 / 6.0)?;
        let a2 = tape.scale(c2, 1.0 / 120.0)?;
        let a12 = tape.add(a1, a2)?;
        let a = tape.add_const(a12, 1.0)?;
        let b1 = tape.scale(c, -1.0 / 24.0)?;
        let b2 = tape.scale(c2, 1.0 / 720.0)?;
        let b12 = tape.add(b1, b2)?;
        let b = tape.add_const(b12, 0.5)?;
        (a, b)
    } else {
        let w = tape.sqrt(c);
        let sw = tape.sin(w);
        let a = tape.div(sw, w)?;
        let cw = tape.cos(w);
        let one = tape.scalar(1.0);
        let omc = tape.sub(one, cw)?;
        let b = tape.div(omc, c)?;
        (a, b)
    };

    let x = tape.slice(aa, 0, 1)?;
    let y = tape.slice(aa, 1, 2)?;
    let z = tape.slice(aa, 2, 3)?;
    let nx = tape.scale(x, -1.0)?;
    let ny = tape.scale(y, -1.0)?;
    let nz = tape.scale(z, -1.0)?;
    let zero = tape.scalar(0.0);
    let k_flat = tape.concat(&[zero, nz, y, z, zero, nx, ny, x, zero])?;
    let k = tape.reshape(k_flat, vec![3, 3])?;
    let k2 = tape.matmul(k, k)?;
    let ak = tape.mul(k, a_coef)?;
    let bk2 = tape.mul(k2, b_coef)?;
    let eye = tape.constant(Tensor::matrix(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let r1 = tape.add(eye, ak)?;
    tape.add(r1, bk2)
}

/// Per-joint positive bone scale factors: scale = exp(S·β).
pub fn bone_scales(tape: &mut Tape, skel: &Skeleton, beta: Var) -> Result<Var, DiffError> {
    let s = tape.constant(Tensor::matrix(
        skel.joint_count(),
        SHAPE_DIM,
        skel.shape_basis.clone(),
    ));
    let log_scales = tape.matmul(s, beta)?;
    Ok(tape.exp(log_scales))
}

/// Forward-kinematics output: world position and global rotation per joint,
/// plus the per-joint scales.
pub struct PosedFrames {
    pub positions: Vec<Var>,
    pub rotations: Vec<Var>,
    pub scales: Var,
}

/// Run forward kinematics over the tree.
///
/// Joint j (non-root) sits at
/// `parent_pos + parent_R · (scale_j · (R(θ_j) · rest_offset_j))`;
/// the root takes the 6-D rotation and the translation.
pub fn pose_frames(
    tape: &mut Tape,
    skel: &Skeleton,
    sv: &StateVars,
) -> Result<PosedFrames, BodyError> {
    if !sv.is_finite(tape) {
        return Err(BodyError::NonFiniteState);
    }
    let j = skel.joint_count();
    let scales = bone_scales(tape, skel, sv.beta)?;

    let root_rot = rot6d_to_matrix(tape, sv.rot6)?;
    let mut positions = vec![sv.trans; j];
    let mut rotations = vec![root_rot; j];

    for i in 1..j {
        let p = skel.parents[i];
        let aa = tape.slice(sv.theta, 3 * (i - 1), 3 * i)?;
        let local = rodrigues(tape, aa)?;
        let offset = tape.vector(&skel.rest_offsets[i]);
        let rotated = tape.matmul(local, offset)?;
        let scale_i = tape.slice(scales, i, i + 1)?;
        let scaled = tape.mul(rotated, scale_i)?;
        let world_dir = tape.matmul(rotations[p], scaled)?;
        positions[i] = tape.add(positions[p], world_dir)?;
        rotations[i] = tape.matmul(rotations[p], local)?;
    }
    Ok(PosedFrames { positions, rotations, scales })
}

/// Camera-space joint positions as a [J,3] variable.
pub fn pose_joints(tape: &mut Tape, skel: &Skeleton, sv: &StateVars) -> Result<Var, BodyError> {
    let frames = pose_frames(tape, skel, sv)?;
    let flat = tape.concat(&frames.positions)?;
    Ok(tape.reshape(flat, vec![skel.joint_count(), 3])?)
}

/// Convenience evaluation without gradients.
pub fn pose_joints_values(skel: &Skeleton, s: &ModelState) -> Result<Vec<[f64; 3]>, BodyError> {
    let mut tape = Tape::new();
    let sv = StateVars::constants(&mut tape, s);
    let jv = pose_joints(&mut tape, skel, &sv)?;
    let data = tape.val(jv).data();
    Ok((0..skel.joint_count())
        .map(|i| [data[i * 3], data[i * 3 + 1], data[i * 3 + 2]])
        .collect())
}

/// Posed mesh: one rigid prism per bone, with per-vertex semantic labels.
pub struct Mesh {
    /// [N_v, 3] vertex positions on the tape.
    pub vertices: Var,
    /// Triangle vertex indices.
    pub triangles: Vec<[usize; 3]>,
    /// Semantic part id per triangle (unanimous per prism).
    pub triangle_parts: Vec<usize>,
    /// Semantic part id per vertex.
    pub vertex_parts: Vec<usize>,
}

impl Mesh {
    /// One-hot semantics per vertex: PART_COUNT part channels plus a
    /// constant alpha of 1. Every row sums to 2.
    pub fn vertex_semantics(&self) -> Vec<Vec<f64>> {
        self.vertex_parts
            .iter()
            .map(|&p| {
                let mut row = vec![0.0; PART_COUNT + 1];
                row[p] = 1.0;
                row[PART_COUNT] = 1.0;
                row
            })
            .collect()
    }

    pub fn vertex_values(&self, tape: &Tape) -> Vec<[f64; 3]> {
        let data = tape.val(self.vertices).data();
        (0..data.len() / 3)
            .map(|i| [data[i * 3], data[i * 3 + 1], data[i * 3 + 2]])
            .collect()
    }
}

// Box corner order: index = u*4 + s2*2 + s3 with u along the bone.
const PRISM_TRIANGLES: [[usize; 3]; 12] = [
    [0, 2, 1],
    [1, 2, 3], // near face (u = 0)
    [4, 5, 6],
    [5, 7, 6], // far face (u = 1)
    [0, 1, 4],
    [1, 5, 4], // s2 = 0 side
    [2, 6, 3],
    [3, 6, 7], // s2 = 1 side
    [0, 4, 2],
    [2, 4, 6], // s3 = 0 side
    [1, 3, 5],
    [3, 7, 5], // s3 = 1 side
];

/// Prism corner offsets in the bone's local rest frame.
fn prism_corners(offset: [f64; 3]) -> [[f64; 3]; 8] {
    let len = (offset[0] * offset[0] + offset[1] * offset[1] + offset[2] * offset[2]).sqrt();
    let e1 = [offset[0] / len, offset[1] / len, offset[2] / len];
    // stable perpendicular pair
    let pick = if e1[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut e2 = [
        pick[1] * e1[2] - pick[2] * e1[1],
        pick[2] * e1[0] - pick[0] * e1[2],
        pick[0] * e1[1] - pick[1] * e1[0],
    ];
    let n2 = (e2[0] * e2[0] + e2[1] * e2[1] + e2[2] * e2[2]).sqrt();
    e2 = [e2[0] / n2, e2[1] / n2, e2[2] / n2];
    let e3 = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let g = GIRTH_RATIO * len;
    let mut corners = [[0.0; 3]; 8];
    for u in 0..2 {
        for s2 in 0..2 {
            for s3 in 0..2 {
                let f2 = if s2 == 0 { -g } else { g };
                let f3 = if s3 == 0 { -g } else { g };
                let idx = u * 4 + s2 * 2 + s3;
                for k in 0..3 {
                    corners[idx][k] = u as f64 * offset[k] + f2 * e2[k] + f3 * e3[k];
                }
            }
        }
    }
    corners
}

/// Pose the per-bone prism mesh; differentiable w.r.t. the state.
pub fn pose_mesh(tape: &mut Tape, skel: &Skeleton, sv: &StateVars) -> Result<Mesh, BodyError> {
    let frames = pose_frames(tape, skel, sv)?;
    let j = skel.joint_count();
    let mut vert_vars = Vec::with_capacity(8 * (j - 1));
    let mut triangles = Vec::with_capacity(12 * (j - 1));
    let mut triangle_parts = Vec::with_capacity(12 * (j - 1));
    let mut vertex_parts = Vec::with_capacity(8 * (j - 1));

    for i in 1..j {
        let p = skel.parents[i];
        let base = vert_vars.len();
        let scale_i = tape.slice(frames.scales, i, i + 1)?;
        for corner in prism_corners(skel.rest_offsets[i]) {
            let c = tape.vector(&corner);
            let sc = tape.mul(c, scale_i)?;
            let world_dir = tape.matmul(frames.rotations[i], sc)?;
            let v = tape.add(frames.positions[p], world_dir)?;
            vert_vars.push(v);
            vertex_parts.push(skel.part_of_joint[i]);
        }
        for t in PRISM_TRIANGLES {
            triangles.push([base + t[0], base + t[1], base + t[2]]);
            triangle_parts.push(skel.part_of_joint[i]);
        }
    }

    let flat = tape.concat(&vert_vars)?;
    let vertices = tape.reshape(flat, vec![vert_vars.len(), 3])?;
    Ok(Mesh { vertices, triangles, triangle_parts, vertex_parts })
}

/// Gaussian prior negative log-likelihood: ‖θ‖² + ‖β‖².
pub fn prior_loss(tape: &mut Tape, sv: &StateVars) -> Result<Var, DiffError> {
    let t = tape.sumsq(sv.theta)?;
    let b = tape.sumsq(sv.beta)?;
    tape.add(t, b)
}

/// Sampling ranges for the translation, meters.
pub type TransRange = [[f64; 2]; 3];

/// Default translation range: modest lateral offsets, 2–6 m depth.
pub const DEFAULT_T_RANGE: TransRange = [[-0.5, 0.5], [-0.5, 0.5], [2.0, 6.0]];

/// Draw a state from the prior: θ, β Gaussian, uniform random rotation,
/// translation uniform in the given box. Deterministic in the seed.
pub fn sample_state(
    skel: &Skeleton,
    seed: u64,
    pose_scale: f64,
    shape_scale: f64,
    t_range: &TransRange,
) -> ModelState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sample_state_with(skel, &mut rng, pose_scale, shape_scale, t_range)
}

pub fn sample_state_with<R: Rng>(
    skel: &Skeleton,
    rng: &mut R,
    pose_scale: f64,
    shape_scale: f64,
    t_range: &TransRange,
) -> ModelState {
    let theta = (0..skel.pose_dim())
        .map(|_| pose_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let beta = (0..SHAPE_DIM)
        .map(|_| shape_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    // uniform rotation via a normalized quaternion
    let q: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
    let m = [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ];
    let rot6 = rot6d_encode(&m);

    let trans = [
        rng.gen_range(t_range[0][0]..=t_range[0][1]),
        rng.gen_range(t_range[1][0]..=t_range[1][1]),
        rng.gen_range(t_range[2][0]..=t_range[2][1]),
    ];
    ModelState { theta, beta, rot6, trans }
}
