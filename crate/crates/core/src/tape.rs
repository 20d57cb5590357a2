//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are evaluated eagerly and recorded on a [`Tape`]; calling
//! [`Tape::gradient`] replays the record in reverse to accumulate exact
//! adjoints for every leaf marked with `requires_grad`. First-order only:
//! the tape never differentiates its own backward pass.
//!
//! Conventions at non-smooth points: elementwise `min`/`max` send the
//! adjoint to the first operand on ties, `abs` uses subgradient 0 at zero,
//! and `sqrt` uses subgradient 0 at zero (so L2 norms are quiet at perfect
//! alignment instead of emitting infinities).

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: slice {start}..{end} out of bounds for {len} elements")]
    SliceOutOfBounds { op: &'static str, start: usize, end: usize, len: usize },
    #[error("gradient target must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("gradient input #{0} was not marked requires_grad before forward")]
    InputNotDifferentiable(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("check_gradient requires step > 0, got {0}")]
    BadStep(f64),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Pow(Var, f64),
    Cross(Var, Var),
    Normalize(Var),
}

/// Records a computation as a linear sequence of primitive operations.
///
/// Single-writer: one tape per forward/backward pass. Independent tapes
/// may run concurrently; there is no shared state.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    needs_grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, op: Op, val: Tensor, needs_grad: bool) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        self.needs_grad.push(needs_grad);
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.idx()]
    }

    /// Leaf that will receive a gradient.
    pub fn input(&mut self, val: Tensor) -> Var {
        self.push(Op::Leaf, val, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, val: Tensor) -> Var {
        self.push(Op::Leaf, val, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.constant(Tensor::vector(data.to_vec()))
    }

    /// Current value of a recorded variable.
    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.idx()]
    }

    // ---- binary elementwise ----------------------------------------------

    fn bin_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        let out = broadcast_map2(name, ta, tb, f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(op, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; on ties the adjoint goes to the first operand.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; on ties the adjoint goes to the first operand.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin_elementwise("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    // ---- unary elementwise -----------------------------------------------

    fn un_elementwise(&mut self, v: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.vals[v.idx()];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let ng = self.ng(v);
        self.push(op, out, ng)
    }

    pub fn exp(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::exp, Op::Exp(v))
    }

    pub fn log(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::ln, Op::Log(v))
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::tanh, Op::Tanh(v))
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.un_elementwise(v, sigmoid_scalar, Op::Sigmoid(v))
    }

    pub fn sqrt(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::sqrt, Op::Sqrt(v))
    }

    pub fn sin(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::sin, Op::Sin(v))
    }

    pub fn cos(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::cos, Op::Cos(v))
    }

    /// |x| with subgradient 0 at x = 0.
    pub fn abs(&mut self, v: Var) -> Var {
        self.un_elementwise(v, f64::abs, Op::Abs(v))
    }

    /// Elementwise x^p for a fixed exponent.
    pub fn pow(&mut self, v: Var, p: f64) -> Var {
        self.un_elementwise(v, |x| x.powf(p), Op::Pow(v, p))
    }

    // ---- structure ---------------------------------------------------------

    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = &self.vals[v.idx()];
        if shape.iter().product::<usize>() != t.len() {
            return Err(DiffError::BadShape {
                op: "reshape",
                expected: "same element count",
                got: shape,
            });
        }
        let out = t.clone().reshaped(shape);
        let ng = self.ng(v);
        Ok(self.push(Op::Reshape(v), out, ng))
    }

    pub fn transpose(&mut self, v: Var) -> Result<Var, DiffError> {
        let t = &self.vals[v.idx()];
        if t.shape().len() != 2 {
            return Err(DiffError::BadShape {
                op: "transpose",
                expected: "2-D tensor",
                got: t.shape().to_vec(),
            });
        }
        let out = t.transposed_2d();
        let ng = self.ng(v);
        Ok(self.push(Op::Transpose(v), out, ng))
    }

    /// Concatenates the inputs, each flattened, into one 1-D vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::BadShape {
                op: "concat",
                expected: "at least one input",
                got: vec![],
            });
        }
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            data.extend_from_slice(self.vals[p.idx()].data());
            ng |= self.ng(p);
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), ng))
    }

    /// 1-D slice of the flattened input: elements `start..end`.
    pub fn slice(&mut self, v: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = &self.vals[v.idx()];
        if start > end || end > t.len() {
            return Err(DiffError::SliceOutOfBounds { op: "slice", start, end, len: t.len() });
        }
        let out = Tensor::vector(t.data()[start..end].to_vec());
        let ng = self.ng(v);
        Ok(self.push(Op::Slice(v, start, end), out, ng))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, v: Var) -> Var {
        let s: f64 = self.vals[v.idx()].data().iter().sum();
        let ng = self.ng(v);
        self.push(Op::Sum(v), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, v: Var) -> Var {
        let t = &self.vals[v.idx()];
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(v);
        self.push(Op::Mean(v), Tensor::scalar(s), ng)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k] × [k,n] -> [m,n]` or `[m,k] × [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        let out = matmul_val(ta, tb).ok_or_else(|| DiffError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    /// 3-vector cross product.
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        if ta.len() != 3 || tb.len() != 3 {
            return Err(DiffError::ShapeMismatch {
                op: "cross",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::vector(cross_val(ta.data(), tb.data()).to_vec());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Cross(a, b), out, ng))
    }

    /// v / ‖v‖ for a vector; NaN if the norm is zero (callers guard).
    pub fn normalize(&mut self, v: Var) -> Result<Var, DiffError> {
        let t = &self.vals[v.idx()];
        if t.shape().len() != 1 {
            return Err(DiffError::BadShape {
                op: "normalize",
                expected: "1-D vector",
                got: t.shape().to_vec(),
            });
        }
        let n = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let out = Tensor::vector(t.data().iter().map(|x| x / n).collect());
        let ng = self.ng(v);
        Ok(self.push(Op::Normalize(v), out, ng))
    }

    // ---- composite helpers -------------------------------------------------

    pub fn add_many(&mut self, vars: &[Var]) -> Result<Var, DiffError> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, v: Var, c: f64) -> Result<Var, DiffError> {
        let cv = self.scalar(c);
        self.mul(v, cv)
    }

    pub fn add_const(&mut self, v: Var, c: f64) -> Result<Var, DiffError> {
        let cv = self.scalar(c);
        self.add(v, cv)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Σ v², the squared L2 norm.
    pub fn sumsq(&mut self, v: Var) -> Result<Var, DiffError> {
        let p = self.mul(v, v)?;
        Ok(self.sum(p))
    }

    /// ‖v‖₂ with subgradient 0 at the origin.
    pub fn norm(&mut self, v: Var) -> Result<Var, DiffError> {
        let s = self.sumsq(v)?;
        Ok(self.sqrt(s))
    }

    /// log(1 + exp(x)), evaluated stably for large |x|.
    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        let zero = self.scalar(0.0);
        let m = self.max(x, zero)?; // max(x, 0)
        let neg_m = self.scale(m, -1.0)?;
        let a = self.exp(neg_m); // e^{-m}
        let xm = self.sub(x, m)?;
        let b = self.exp(xm); // e^{x-m}
        let s = self.add(a, b)?;
        let l = self.log(s);
        self.add(m, l)
    }

    /// Clamp every element into [0, 1].
    pub fn clamp01(&mut self, v: Var) -> Result<Var, DiffError> {
        let zero = self.scalar(0.0);
        let one = self.scalar(1.0);
        let lo = self.max(v, zero)?;
        self.min(lo, one)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode gradients of a scalar output with respect to `inputs`.
    ///
    /// Every requested input must have been created with [`Tape::input`].
    /// Inputs that do not contribute to the output receive zero gradients.
    pub fn gradient(&self, output: Var, inputs: &[Var]) -> Result<Vec<Tensor>, DiffError> {
        let out_val = &self.vals[output.idx()];
        if !out_val.is_scalar() {
            return Err(DiffError::NonScalarOutput(out_val.shape().to_vec()));
        }
        for (i, v) in inputs.iter().enumerate() {
            if !matches!(self.ops[v.idx()], Op::Leaf) || !self.needs_grad[v.idx()] {
                return Err(DiffError::InputNotDifferentiable(i));
            }
        }

        let n = output.idx() + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[output.idx()] = Some(Tensor::filled(out_val.shape(), 1.0));

        for i in (0..n).rev() {
            if adj[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue; // keep leaf adjoints for collection
            }
            let g = adj[i].take().expect("adjoint present");
            self.backprop_node(i, &g, &mut adj);
        }

        Ok(inputs
            .iter()
            .map(|v| match adj[v.idx()].take() {
                Some(t) => t,
                None => Tensor::zeros(self.vals[v.idx()].shape()),
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, g.clone());
                self.accum(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, g.clone());
                let neg = map1(g, |x| -x);
                self.accum(adj, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
                self.accum_bc(adj, *a, g, tb, |gi, bi| gi * bi);
                self.accum_bc(adj, *b, g, ta, |gi, ai| gi * ai);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
                self.accum_bc(adj, *a, g, tb, |gi, bi| gi / bi);
                // d/db (a/b) = -a / b²
                let ratio = broadcast_map2("div-vjp", ta, tb, |ai, bi| -ai / (bi * bi))
                    .expect("shapes already validated");
                self.accum_bc(adj, *b, g, &ratio, |gi, ri| gi * ri);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(self.ops[i], Op::Min(..));
                let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
                // Ties route to the first operand.
                let pick_a = broadcast_map2("minmax-vjp", ta, tb, |x, y| {
                    let first = if is_min { x <= y } else { x >= y };
                    if first {
                        1.0
                    } else {
                        0.0
                    }
                })
                .expect("shapes already validated");
                self.accum_bc(adj, *a, g, &pick_a, |gi, m| gi * m);
                self.accum_bc(adj, *b, g, &pick_a, |gi, m| gi * (1.0 - m));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
                let (da, db) = matmul_vjp(ta, tb, g);
                self.accum(adj, *a, da);
                self.accum(adj, *b, db);
            }
            Op::Reshape(a) => {
                let back = g.clone().reshaped(self.vals[a.idx()].shape().to_vec());
                self.accum(adj, *a, back);
            }
            Op::Transpose(a) => {
                self.accum(adj, *a, g.transposed_2d());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.vals[p.idx()].len();
                    let chunk = Tensor::new(
                        self.vals[p.idx()].shape().to_vec(),
                        g.data()[off..off + len].to_vec(),
                    );
                    self.accum(adj, p, chunk);
                    off += len;
                }
            }
            Op::Slice(a, start, _end) => {
                let src = &self.vals[a.idx()];
                let mut back = Tensor::zeros(src.shape());
                back.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                self.accum(adj, *a, back);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(adj, *a, Tensor::filled(self.vals[a.idx()].shape(), gv));
            }
            Op::Mean(a) => {
                let src = &self.vals[a.idx()];
                let gv = g.item() / src.len() as f64;
                self.accum(adj, *a, Tensor::filled(src.shape(), gv));
            }
            Op::Exp(a) => {
                let y = &self.vals[i];
                self.accum(adj, *a, map2_same(g, y, |gi, yi| gi * yi));
            }
            Op::Log(a) => {
                let x = &self.vals[a.idx()];
                self.accum(adj, *a, map2_same(g, x, |gi, xi| gi / xi));
            }
            Op::Tanh(a) => {
                let y = &self.vals[i];
                self.accum(adj, *a, map2_same(g, y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(a) => {
                let y = &self.vals[i];
                self.accum(adj, *a, map2_same(g, y, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::Sqrt(a) => {
                let y = &self.vals[i];
                self.accum(
                    adj,
                    *a,
                    map2_same(g, y, |gi, yi| if yi > 0.0 { gi * 0.5 / yi } else { 0.0 }),
                );
            }
            Op::Sin(a) => {
                let x = &self.vals[a.idx()];
                self.accum(adj, *a, map2_same(g, x, |gi, xi| gi * xi.cos()));
            }
            Op::Cos(a) => {
                let x = &self.vals[a.idx()];
                self.accum(adj, *a, map2_same(g, x, |gi, xi| -gi * xi.sin()));
            }
            Op::Abs(a) => {
                let x = &self.vals[a.idx()];
                self.accum(
                    adj,
                    *a,
                    map2_same(g, x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Pow(a, p) => {
                let x = &self.vals[a.idx()];
                let p = *p;
                self.accum(adj, *a, map2_same(g, x, |gi, xi| gi * p * xi.powf(p - 1.0)));
            }
            Op::Cross(a, b) => {
                let (ta, tb) = (self.vals[a.idx()].data(), self.vals[b.idx()].data());
                // d(a×b)/da adjoint: b × g; d/db adjoint: g × a
                let da = cross_val(&[tb[0], tb[1], tb[2]], g.data());
                let db = cross_val(g.data(), &[ta[0], ta[1], ta[2]]);
                self.accum(adj, *a, Tensor::vector(da.to_vec()));
                self.accum(adj, *b, Tensor::vector(db.to_vec()));
            }
            Op::Normalize(a) => {
                let x = &self.vals[a.idx()];
                let y = &self.vals[i];
                let n = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let ydotg: f64 =
                    y.data().iter().zip(g.data()).map(|(yi, gi)| yi * gi).sum();
                let back = Tensor::new(
                    x.shape().to_vec(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(yi, gi)| (gi - yi * ydotg) / n)
                        .collect(),
                );
                self.accum(adj, *a, back);
            }
        }
    }

    /// Accumulate `g` (already shaped like target's broadcasted output) into
    /// the adjoint of `target`, summing when the target was a broadcast scalar.
    fn accum(&self, adj: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.needs_grad[target.idx()] {
            return;
        }
        let tgt_len = self.vals[target.idx()].len();
        let reduced = if g.len() == tgt_len {
            g
        } else {
            // target was broadcast as a scalar
            Tensor::new(
                self.vals[target.idx()].shape().to_vec(),
                vec![g.data().iter().sum::<f64>()],
            )
        };
        match &mut adj[target.idx()] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(reduced.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(reduced),
        }
    }

    /// Accumulate g ∘ f(other) into target's adjoint, broadcasting `other`.
    fn accum_bc(
        &self,
        adj: &mut [Option<Tensor>],
        target: Var,
        g: &Tensor,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs_grad[target.idx()] {
            return;
        }
        let prod = broadcast_map2("vjp", g, other, f).expect("shapes already validated");
        self.accum(adj, target, prod);
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

/// Elementwise combine of two same-length tensors (no broadcasting).
fn map2_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Elementwise combine with scalar broadcasting on either side.
fn broadcast_map2(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, DiffError> {
    if a.shape() == b.shape() {
        Ok(map2_same(a, b, f))
    } else if a.is_scalar() {
        let av = a.data()[0];
        Ok(Tensor::new(b.shape().to_vec(), b.data().iter().map(|&y| f(av, y)).collect()))
    } else if b.is_scalar() {
        let bv = b.data()[0];
        Ok(Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x, bv)).collect()))
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn cross_val(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn matmul_val(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => {
            let (m, k, n) = (*m, *k, *n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..k {
                    let av = a.data()[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data()[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Some(Tensor::new(vec![m, n], out))
        }
        ([m, k], [k2]) if k == k2 => {
            let (m, k) = (*m, *k);
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data()[i * k..(i + 1) * k];
                out[i] = row.iter().zip(b.data()).map(|(x, y)| x * y).sum();
            }
            Some(Tensor::vector(out))
        }
        _ => None,
    }
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match (a.shape(), b.shape()) {
        ([m, k], [_, n]) if b.shape().len() == 2 => {
            let (m, k, n) = (*m, *k, *n);
            // dA = g · Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    let brow = &b.data()[l * n..(l + 1) * n];
                    let grow = &g.data()[i * n..(i + 1) * n];
                    da[i * k + l] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                }
            }
            // dB = Aᵀ · g
            let mut db = vec![0.0; k * n];
            for l in 0..k {
                for i in 0..m {
                    let av = a.data()[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let drow = &mut db[l * n..(l + 1) * n];
                    for j in 0..n {
                        drow[j] += av * grow[j];
                    }
                }
            }
            (Tensor::new(vec![m, k], da), Tensor::new(vec![k, n], db))
        }
        ([m, k], [_]) => {
            let (m, k) = (*m, *k);
            // y = A·x: dA = g ⊗ x, dx = Aᵀ·g
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let gi = g.data()[i];
                for l in 0..k {
                    da[i * k + l] = gi * b.data()[l];
                }
            }
            let mut dx = vec![0.0; k];
            for i in 0..m {
                let gi = g.data()[i];
                if gi == 0.0 {
                    continue;
                }
                let arow = &a.data()[i * k..(i + 1) * k];
                for l in 0..k {
                    dx[l] += gi * arow[l];
                }
            }
            (Tensor::new(vec![m, k], da), Tensor::vector(dx))
        }
        _ => unreachable!("matmul shapes validated at forward"),
    }
}

/// Max relative error between the analytic gradient of `f` and central
/// finite differences with the given step, over every coordinate of `point`.
///
/// Relative error is |analytic − numeric| / max(1, |analytic|). Central
/// differences are unreliable at kinks; probe smooth points.
pub fn check_gradient<F>(f: F, point: &[f64], step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::BadStep(step));
    }

    let eval = |coords: &[f64]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(coords.to_vec()));
        let y = f(&mut tape, x)?;
        let v = tape.val(y);
        if !v.is_scalar() {
            return Err(DiffError::NonScalarOutput(v.shape().to_vec()));
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(DiffError::NonFinite("check_gradient"));
        }
        Ok(out)
    };

    // analytic gradient
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(point.to_vec()));
    let y = f(&mut tape, x)?;
    if !tape.val(y).is_scalar() {
        return Err(DiffError::NonScalarOutput(tape.val(y).shape().to_vec()));
    }
    if !tape.val(y).item().is_finite() {
        return Err(DiffError::NonFinite("check_gradient"));
    }
    let analytic = tape.gradient(y, &[x])?.remove(0);

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = eval(&probe)?;
        probe[i] = orig - step;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_direct_evaluation() {
        let mut t = Tape::new();
        let v = t.vector(&[1.0, 2.0, 3.0]);
        let s = t.sum(v);
        assert_eq!(t.val(s).item(), 6.0);

        let eye = t.constant(Tensor::matrix(3, 3, vec![
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
        ]));
        let x = t.vector(&[4.0, 5.0, 6.0]);
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.val(y).data(), &[4.0, 5.0, 6.0]);

        let z = t.scalar(0.0);
        let sg = t.sigmoid(z);
        assert_eq!(t.val(sg).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_identifies_primitive() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn gradient_of_square() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]));
        let c = t.scalar(7.0);
        let y = t.mul(c, c).unwrap();
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]));
        let y = t.mul(x, x).unwrap();
        assert!(matches!(t.gradient(y, &[x]), Err(DiffError::NonScalarOutput(_))));
    }

    #[test]
    fn unmarked_input_rejected() {
        let mut t = Tape::new();
        let x = t.vector(&[1.0]);
        let y = t.sum(x);
        assert!(matches!(
            t.gradient(y, &[x]),
            Err(DiffError::InputNotDifferentiable(0))
        ));
    }

    #[test]
    fn check_gradient_quadratic() {
        // f(x) = ‖x‖², analytic gradient 2x
        let err = check_gradient(
            |t, x| t.sumsq(x),
            &[1.0, -2.0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn check_gradient_constant_fn() {
        let err = check_gradient(
            |t, x| {
                let c = t.scalar(4.0);
                let _ = x;
                Ok(c)
            },
            &[0.3, 0.7],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_gradient_rejects_bad_step() {
        assert!(matches!(
            check_gradient(|t, x| t.sum(x).pipe_ok(), &[1.0], 0.0),
            Err(DiffError::BadStep(_))
        ));
    }

    // tiny helper so the closure above typechecks
    trait PipeOk: Sized {
        fn pipe_ok(self) -> Result<Self, DiffError> {
            Ok(self)
        }
    }
    impl PipeOk for Var {}

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![0.3, -1.2, 2.7]));
        let e = t.exp(x);
        let s = t.sin(e);
        let y = t.sum(s);
        let g1 = t.gradient(y, &[x]).unwrap();
        let g2 = t.gradient(y, &[x]).unwrap();
        assert_eq!(g1[0].data(), g2[0].data());
    }

    #[test]
    fn linearity_of_gradients() {
        // gradient(a·f + b·g) = a·∇f + b·∇g
        let point = [0.7, -0.4, 1.1];
        let (a, b) = (2.5, -1.25);

        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>| {
            let mut t = Tape::new();
            let x = t.input(Tensor::vector(point.to_vec()));
            let y = build(&mut t, x).unwrap();
            t.gradient(y, &[x]).unwrap().remove(0)
        };

        let f = |t: &mut Tape, x: Var| -> Result<Var, DiffError> {
            let e = t.exp(x);
            Ok(t.sum(e))
        };
        let g = |t: &mut Tape, x: Var| -> Result<Var, DiffError> { t.sumsq(x) };

        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let combined = grad_of(&|t: &mut Tape, x: Var| {
            let fv = f(t, x)?;
            let gv = g(t, x)?;
            let af = t.scale(fv, a)?;
            let bg = t.scale(gv, b)?;
            t.add(af, bg)
        });

        for i in 0..point.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn min_max_ties_take_first_operand() {
        let mut t = Tape::new();
        let a = t.input(Tensor::scalar(1.0));
        let b = t.input(Tensor::scalar(1.0));
        let m = t.min(a, b).unwrap();
        let g = t.gradient(m, &[a, b]).unwrap();
        assert_eq!(g[0].item(), 1.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![0.0, -2.0, 3.0]));
        let a = t.abs(x);
        let y = t.sum(a);
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn norm_subgradient_zero_at_origin() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![0.0, 0.0]));
        let n = t.norm(x).unwrap();
        let g = t.gradient(n, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn every_primitive_passes_gradcheck_at_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(41);
        for trial in 0..10 {
            let p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.25..1.75)).collect();
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>)> = vec![
                ("add/mul", Box::new(|t, x| {
                    let y = t.mul(x, x)?;
                    let z = t.add(x, y)?;
                    Ok(t.sum(z))
                })),
                ("sub/div", Box::new(|t, x| {
                    let c = t.scalar(3.0);
                    let d = t.div(c, x)?;
                    let s = t.sub(d, x)?;
                    Ok(t.sum(s))
                })),
                ("matmul", Box::new(|t, x| {
                    let m = t.reshape(x, vec![2, 3])?;
                    let mt = t.transpose(m)?;
                    let p = t.matmul(m, mt)?;
                    Ok(t.sum(p))
                })),
                ("exp/log", Box::new(|t, x| {
                    let e = t.exp(x);
                    let l = t.log(e);
                    let m = t.mul(e, l)?;
                    Ok(t.sum(m))
                })),
                ("tanh/sigmoid", Box::new(|t, x| {
                    let a = t.tanh(x);
                    let b = t.sigmoid(x);
                    let m = t.mul(a, b)?;
                    Ok(t.sum(m))
                })),
                ("sqrt/pow", Box::new(|t, x| {
                    let s = t.sqrt(x);
                    let p = t.pow(x, 2.5);
                    let m = t.mul(s, p)?;
                    Ok(t.sum(m))
                })),
                ("sin/cos", Box::new(|t, x| {
                    let s = t.sin(x);
                    let c = t.cos(x);
                    let m = t.mul(s, c)?;
                    Ok(t.sum(m))
                })),
                ("minmax/abs", Box::new(|t, x| {
                    let c = t.scalar(1.0);
                    let lo = t.min(x, c)?;
                    let hi = t.max(x, c)?;
                    let d = t.sub(lo, hi)?;
                    let a = t.abs(d);
                    Ok(t.sum(a))
                })),
                ("concat/slice/reshape", Box::new(|t, x| {
                    let a = t.slice(x, 0, 3)?;
                    let b = t.slice(x, 3, 6)?;
                    let c = t.concat(&[b, a])?;
                    let m = t.mul(c, x)?;
                    Ok(t.mean(m))
                })),
                ("cross/normalize", Box::new(|t, x| {
                    let a = t.slice(x, 0, 3)?;
                    let b = t.slice(x, 3, 6)?;
                    let an = t.normalize(a)?;
                    let c = t.cross(an, b)?;
                    t.sumsq(c)
                })),
            ];
            for (name, f) in cases {
                let err = check_gradient(f.as_ref(), &p, 1e-6).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: err = {err}");
            }
        }
    }
}
