//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node holding its output value and enough cached state
//! to run its backward rule. `backward` walks the nodes in exact reverse
//! recording order, so the tape is topologically ordered by construction.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` holding one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        n: usize,
        k: usize,
        m: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        a: Var,
        c: T,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single-threaded recording of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    nonfinite: Option<String>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `tensor`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = cols_of(shape);
    (shape.iter().product::<usize>() / c, c)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(SQRT_2_OVER_PI);
    let t = (c * (x + T::of(GELU_C) * x * x * x)).tanh();
    let dinner = c * (T::one() + T::of(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row softmax with max subtraction. With `causal`, row `i` only sees columns `<= i`
/// (row index taken modulo the number of columns).
fn softmax_rows_into<T: Scalar>(x: &[T], cols: usize, causal: bool, out: &mut [T]) {
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let visible = if causal { (r % cols) + 1 } else { cols };
        let mx = row[..visible]
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in 0..visible {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            total = total + e;
        }
        for o in &mut orow[..visible] {
            *o = *o / total;
        }
        for o in &mut orow[visible..] {
            *o = T::zero();
        }
    }
}

fn softmax_rows_backward<T: Scalar>(p: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((prow, grow), drow) in p.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            drow[j] = drow[j] + prow[j] * (grow[j] - dot);
        }
    }
}

/// Strided gemm on sub-blocks of row-major buffers.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: usize,
    csa: usize,
    b: *const T,
    rsb: usize,
    csb: usize,
    beta: T,
    c: *mut T,
    rsc: usize,
    alpha: T,
) {
    T::gemm(
        m,
        k,
        n,
        alpha,
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        1,
    );
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            nonfinite: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op finiteness check (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if self.check_finite && self.nonfinite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.nonfinite = Some(format!("node {} ({})", self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-d operands, got {sa:?} and {sb:?}"
            )));
        }
        let (n, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, m) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {sa:?} and {sb:?}: inner dimensions differ"
            )));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_into(
            self.value(a),
            ta,
            self.value(b),
            tb,
            &mut out,
            n,
            k,
            m,
            T::one(),
            T::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            vec![n, m],
            rg,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                n,
                k,
                m,
            },
        ))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{kind:?} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<T> = match kind {
            Binary::Add => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, rg, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, rg, Op::Scale { a, c })
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let out = match kind {
            Unary::Gelu => x.iter().map(|&v| gelu(v)).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Ln => x.iter().map(|&v| v.ln()).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, rg, Op::Unary { a, kind })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::Sum { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Softmax over a square matrix with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if r != c {
            return Err(Error::Shape(format!(
                "causal softmax needs a square input, got {r}×{c}"
            )));
        }
        Ok(self.softmax_impl(a, true))
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Var {
        let cols = cols_of(self.shape(a));
        let mut out = vec![T::zero(); self.value(a).len()];
        softmax_rows_into(self.value(a), cols, causal, &mut out);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, rg, Op::Softmax { a, cols })
    }

    /// Per-row normalization to zero mean / unit variance, then `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layernorm eps must be > 0, got {eps}"
            )));
        }
        let cols = cols_of(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Shape(format!(
                "layernorm over {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / cols;
        let inv_d = T::one() / T::of(cols as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over all rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x)).collect();
        self.cross_entropy_masked(logits, &t)
    }

    /// Cross-entropy averaged over rows whose target is `Some`; `None` rows are ignored.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!(
                "target index {bad} out of range for {vocab} classes"
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract(
                "cross entropy needs at least one target".into(),
            ));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        softmax_rows_into(self.value(logits), vocab, false, &mut probs);
        let lv = self.value(logits);
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &lv[r * vocab..(r + 1) * vocab];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                total = total + (lse - row[t]);
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(table));
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            vec![ids.len(), cols],
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
        ))
    }

    /// Multi-head causal self-attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `[N×d]`; head `h` uses columns `h*d/heads..(h+1)*d/heads`.
    /// Rows in different segments never attend to each other.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
            || shape.len() != 2
        {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "{d} columns not divisible into {heads} heads"
            )));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::Shape(
                    "attention segments must tile the rows in order".into(),
                ));
            }
            covered += s.len;
        }
        if covered != n {
            return Err(Error::Shape(format!(
                "segments cover {covered} of {n} rows"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for s in segments {
            let len = s.len;
            for h in 0..heads {
                let off = s.start * d + h * dh;
                let mut scores = vec![T::zero(); len * len];
                // SAFETY: every view stays within rows [start, start+len) and the head's columns.
                unsafe {
                    gemm_view(
                        len,
                        dh,
                        len,
                        qv.as_ptr().add(off),
                        d,
                        1,
                        kv.as_ptr().add(off),
                        1,
                        d,
                        T::zero(),
                        scores.as_mut_ptr(),
                        len,
                        scale,
                    );
                }
                let mut p = vec![T::zero(); len * len];
                softmax_rows_into(&scores, len, true, &mut p);
                unsafe {
                    gemm_view(
                        len,
                        len,
                        dh,
                        p.as_ptr(),
                        len,
                        1,
                        vv.as_ptr().add(off),
                        d,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(off),
                        d,
                        T::one(),
                    );
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Error recorded by the finiteness check, if any op produced NaN/Inf.
    pub fn check(&self) -> Result<()> {
        match &self.nonfinite {
            Some(msg) => Err(Error::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively across reuse.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                n,
                k,
                m,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.grad_slot(grads, a) {
                    if ta {
                        // stored [k×n] = op(b) · gᵀ
                        gemm_into(bv, tb, g, true, da, k, m, n, T::one(), T::one());
                    } else {
                        gemm_into(g, false, bv, !tb, da, n, m, k, T::one(), T::one());
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    if tb {
                        // stored [m×k] = gᵀ · op(a)
                        gemm_into(g, true, av, ta, db, m, n, k, T::one(), T::one());
                    } else {
                        gemm_into(av, !ta, g, false, db, k, n, m, T::one(), T::one());
                    }
                }
            }
            &Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.grad_slot(grads, a) {
                    match kind {
                        Binary::Add | Binary::Sub => {
                            da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x)
                        }
                        Binary::Mul => da
                            .iter_mut()
                            .zip(g.iter().zip(bv))
                            .for_each(|(d, (&x, &y))| *d = *d + x * y),
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    match kind {
                        Binary::Add => db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x),
                        Binary::Sub => db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x),
                        Binary::Mul => db
                            .iter_mut()
                            .zip(g.iter().zip(av))
                            .for_each(|(d, (&x, &y))| *d = *d + x * y),
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * c);
                }
            }
            &Op::Unary { a, kind } => {
                let av = self.value(a);
                if let Some(da) = self.grad_slot(grads, a) {
                    for ((d, &x), &gy) in da.iter_mut().zip(av).zip(g) {
                        let local = match kind {
                            Unary::Gelu => gelu_grad(x),
                            Unary::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Ln => T::one() / x,
                        };
                        *d = *d + gy * local;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::Softmax { a, cols, .. } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    softmax_rows_backward(&node.value, g, cols, da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = self.value(*gain).to_vec();
                if let Some(dg) = self.grad_slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for grow in g.chunks(cols) {
                        for j in 0..cols {
                            db[j] = db[j] + grow[j];
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let inv_d = T::one() / T::of(cols as f64);
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hrow[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        let drow = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            drow[j] = drow[j] + rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let vocab = probs.len() / targets.len();
                    let w = g[0] / T::of(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            for j in 0..vocab {
                                row[j] = row[j] + w * probs[r * vocab + j];
                            }
                            row[t] = row[t] - w;
                        }
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                let cols = *cols;
                if let Some(dt) = self.grad_slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        let dst = &mut dt[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[Vec<T>],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let need_q = self.nodes[q.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let need_v = self.nodes[v.0].requires_grad;
        let mut dq = need_q.then(|| vec![T::zero(); qv.len()]);
        let mut dk = need_k.then(|| vec![T::zero(); kv.len()]);
        let mut dv = need_v.then(|| vec![T::zero(); vv.len()]);
        let mut pi = 0;
        for s in segments {
            let len = s.len;
            for h in 0..heads {
                let off = s.start * d + h * dh;
                let p = &probs[pi];
                pi += 1;
                // SAFETY: views stay inside the segment rows and head columns.
                unsafe {
                    if let Some(dv) = dv.as_mut() {
                        // dV_h += Pᵀ · dO_h
                        gemm_view(
                            len,
                            len,
                            dh,
                            p.as_ptr(),
                            1,
                            len,
                            g.as_ptr().add(off),
                            d,
                            1,
                            T::one(),
                            dv.as_mut_ptr().add(off),
                            d,
                            T::one(),
                        );
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    // dP = dO_h · V_hᵀ
                    let mut dp = vec![T::zero(); len * len];
                    gemm_view(
                        len,
                        dh,
                        len,
                        g.as_ptr().add(off),
                        d,
                        1,
                        vv.as_ptr().add(off),
                        1,
                        d,
                        T::zero(),
                        dp.as_mut_ptr(),
                        len,
                        T::one(),
                    );
                    let mut ds = vec![T::zero(); len * len];
                    softmax_rows_backward(p, &dp, len, &mut ds);
                    if let Some(dq) = dq.as_mut() {
                        gemm_view(
                            len,
                            len,
                            dh,
                            ds.as_ptr(),
                            len,
                            1,
                            kv.as_ptr().add(off),
                            d,
                            1,
                            T::one(),
                            dq.as_mut_ptr().add(off),
                            d,
                            scale,
                        );
                    }
                    if let Some(dk) = dk.as_mut() {
                        gemm_view(
                            len,
                            len,
                            dh,
                            ds.as_ptr(),
                            1,
                            len,
                            qv.as_ptr().add(off),
                            d,
                            1,
                            T::one(),
                            dk.as_mut_ptr().add(off),
                            d,
                            scale,
                        );
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(local), Some(slot)) = (local, self.grad_slot(grads, var)) {
                slot.iter_mut().zip(&local).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Binary { .. } => "binary",
        Op::Scale { .. } => "scale",
        Op::Unary { .. } => "unary",
        Op::Sum { .. } => "sum",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Gather { .. } => "gather",
        Op::Attention { .. } => "attention",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap().with_grad()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.leaf(&Tensor::identity(2));
        let m = tape.leaf(&t(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let im = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(im), tape.value(m));

        let a = tape.leaf(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(&t(&[&[0.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);

        let x = tape.leaf(&Tensor::zeros(&[3, 4]));
        let y = tape.leaf(&Tensor::zeros(&[5, 2]));
        let err = tape.matmul(x, y).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[&[1.0, -3.0, 0.5]]));
        let z = tape.leaf(&Tensor::zeros(&[1, 3]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let r = tape.leaf(&t(&[&[-1.5, 2.0]]));
        let rr = tape.relu(r);
        assert_eq!(tape.value(rr), &[0.0, 2.0]);
        let zero = tape.leaf(&t(&[&[0.0]]));
        let gz = tape.gelu(zero);
        assert_eq!(tape.value(gz), &[0.0]);
        assert!(tape.add(x, r).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[&[0.0, 0.0, 0.0]]));
        let p = tape.softmax_rows(x);
        for &v in tape.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = tape.leaf(&t(&[&[1000.0, 0.0]]));
        let pb = tape.softmax_rows(big);
        assert!(tape.value(pb).iter().all(|v| v.is_finite()));
        assert!((tape.value(pb)[0] - 1.0).abs() < 1e-12);
        let l2 = tape.leaf(&t(&[&[2f64.ln(), 0.0]]));
        let pl = tape.softmax_rows(l2);
        assert!((tape.value(pl)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(pl)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = rand_tensor(&mut rng, &[5, 7]);
        let shifted: Vec<f64> = x
            .data()
            .chunks(7)
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |v| v + r as f64 * 3.5))
            .collect();
        let a = tape.leaf(&x);
        let b = tape.constant(vec![5, 7], shifted).unwrap();
        let pa = tape.softmax_rows(a);
        let pb = tape.softmax_rows(b);
        for row in tape.value(pa).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (u, v) in tape.value(pa).iter().zip(tape.value(pb)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let zeros = tape.leaf(&Tensor::zeros(&[2]));
        let c = tape.leaf(&t(&[&[4.0, 4.0]]));
        let y = tape.layernorm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let x = tape.leaf(&t(&[&[1.0, -1.0]]));
        let y = tape.layernorm(x, ones, zeros, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-9 && (tape.value(y)[1] + 1.0).abs() < 1e-9);
        let bias = tape.leaf(&Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let gz = tape.leaf(&Tensor::zeros(&[2]));
        let y = tape.layernorm(x, gz, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.3, -0.7]);
        assert!(tape.layernorm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(&t(&[&[0.5, 0.5, 0.5, 0.5]]));
        let l = tape.cross_entropy(u, &[2]).unwrap();
        assert!((tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);
        let sat = tape.leaf(&t(&[&[30.0, -30.0]]));
        let l = tape.cross_entropy(sat, &[0]).unwrap();
        assert!(tape.scalar_value(l) < 1e-20);
        let x = tape.leaf(&t(&[&[3f64.ln(), 0.0]]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(x, &[2]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap().with_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn fan_out_gradients_add() {
        // f = sum(x·W) + sum(relu(x)) ; x used along two paths
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let path = |use_a: bool, use_b: bool| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let mut parts = Vec::new();
            if use_a {
                let m = tape.matmul(xv, wv).unwrap();
                parts.push(tape.sum(m));
            }
            if use_b {
                let r = tape.relu(xv);
                parts.push(tape.sum(r));
            }
            let loss = if parts.len() == 2 {
                tape.add(parts[0], parts[1]).unwrap()
            } else {
                parts[0]
            };
            tape.backward(loss).unwrap().get(xv).unwrap().to_vec()
        };
        let both = path(true, true);
        let a = path(true, false);
        let b = path(false, true);
        for i in 0..both.len() {
            assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = tape.leaf(&t(&[&[1.0, 1.0]]).with_grad());
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn nonfinite_values_are_reported() {
        let mut tape = Tape::<f64>::new();
        tape.set_check_finite(true);
        let x = tape.leaf(&t(&[&[-1.0]]).with_grad());
        let l = tape.ln(x);
        let s = tape.sum(l);
        assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn attention_rejects_bad_segments() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&Tensor::zeros(&[4, 4]));
        let seg = |start, len| Segment { start, len };
        assert!(tape.causal_attention(q, q, q, 2, &[seg(0, 4)]).is_ok());
        assert!(tape.causal_attention(q, q, q, 3, &[seg(0, 4)]).is_err());
        assert!(tape.causal_attention(q, q, q, 2, &[seg(0, 3)]).is_err());
        assert!(tape.causal_attention(q, q, q, 2, &[seg(1, 3)]).is_err());
    }

    fn gradcheck_op(seed: u64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, shapes: &[&[usize]]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Tensor<f64>> =
            shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check_gradients(
            &mut inputs,
            |tape, vars| Ok(build(tape, vars)),
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }

    #[test]
    fn gradcheck_each_op() {
        for seed in 0..5 {
            gradcheck_op(
                seed,
                |t, v| {
                    let m = t.matmul(v[0], v[1]).unwrap();
                    t.sum(m)
                },
                &[&[3, 4], &[4, 2]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let m = t.matmul_t(v[0], true, v[1], true).unwrap();
                    let w = t.mul(m, m).unwrap();
                    t.sum(w)
                },
                &[&[4, 3], &[2, 4]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let m = t.matmul_t(v[0], false, v[1], true).unwrap();
                    let w = t.mul(m, m).unwrap();
                    t.sum(w)
                },
                &[&[3, 4], &[2, 4]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let a = t.sub(v[0], v[1]).unwrap();
                    let b = t.mul(a, v[1]).unwrap();
                    let c = t.scale(b, 0.7);
                    t.sum(c)
                },
                &[&[2, 3], &[2, 3]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let g = t.relu(v[0]);
                    let m = t.mul(g, v[1]).unwrap();
                    t.sum(m)
                },
                &[&[3, 3], &[3, 3]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let g = t.gelu(v[0]);
                    let m = t.mul(g, v[1]).unwrap();
                    t.sum(m)
                },
                &[&[3, 3], &[3, 3]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let s = t.softmax_rows(v[0]);
                    let m = t.mul(s, v[1]).unwrap();
                    t.sum(m)
                },
                &[&[3, 5], &[3, 5]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let s = t.causal_softmax(v[0]).unwrap();
                    let m = t.mul(s, v[1]).unwrap();
                    t.sum(m)
                },
                &[&[4, 4], &[4, 4]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let y = t.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
                    let m = t.mul(y, v[3]).unwrap();
                    t.sum(m)
                },
                &[&[3, 6], &[6], &[6], &[3, 6]],
            );
            gradcheck_op(
                seed,
                |t, v| t.cross_entropy(v[0], &[1, 4, 0]).unwrap(),
                &[&[3, 5]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    t.cross_entropy_masked(v[0], &[None, Some(2), Some(0)])
                        .unwrap()
                },
                &[&[3, 5]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let g = t.gather(v[0], &[2, 0, 2]).unwrap();
                    let m = t.mul(g, v[1]).unwrap();
                    t.sum(m)
                },
                &[&[3, 4], &[3, 4]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let sq = t.mul(v[0], v[0]).unwrap();
                    let s = t.sum(sq);
                    t.ln(s)
                },
                &[&[2, 3]],
            );
            gradcheck_op(
                seed,
                |t, v| {
                    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
                    let o = t.causal_attention(v[0], v[1], v[2], 2, &segs).unwrap();
                    let m = t.mul(o, v[3]).unwrap();
                    t.sum(m)
                },
                &[&[5, 4], &[5, 4], &[5, 4], &[5, 4]],
            );
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[&[-1.5, 2.0, 0.3]]).with_grad());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[16, 16]).cast::<f32>();
        let b = rand_tensor(&mut rng, &[16, 8]).cast::<f32>();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let (x, y) = (tape.leaf(&a), tape.leaf(&b));
            let m = tape.matmul(x, y).unwrap();
            let g = tape.gelu(m);
            let s = tape.softmax_rows(g);
            tape.value(s).to_vec()
        };
        let (r1, r2) = (run(), run());
        assert!(r1.iter().zip(&r2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
