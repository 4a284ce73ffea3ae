//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix (scalars are `1×1`). Operations are
//! recorded eagerly: the forward value is computed when the node is pushed, and
//! [`Graph::backward`] walks the tape in reverse accumulating adjoints.
//!
//! Nodes created with [`Graph::constant`] do not require gradients, and neither
//! does any node whose inputs are all constants; their adjoints are never
//! materialised.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key mask for fused attention: `valid[row]` marks rows usable as keys.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub seq_len: usize,
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmrSpec {
    pub delta: f64,
    pub lambda_reg: f64,
    pub sigma_floor: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    LnClamp(Var, f64),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanRows(Var),
    PickPerRow(Var, Vec<usize>),
    SqDist(Var, Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<Mat> },
    Rmr { beta: Var, targets: Vec<f64>, spec: RmrSpec },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Value and partial derivatives of the Gaussian-prior regression term for one row.
/// Returns `(loss, dloss/dbeta)`; `target` is 1-based.
pub(crate) fn rmr_row(beta: &[f64], target: f64, spec: &RmrSpec) -> (f64, Vec<f64>) {
    let idx = |z: usize| (z + 1) as f64;
    let mu: f64 = beta.iter().enumerate().map(|(z, b)| b * idx(z)).sum();
    let var: f64 = beta
        .iter()
        .enumerate()
        .map(|(z, b)| b * (idx(z) - mu).powi(2))
        .sum();
    let clamped = var < spec.sigma_floor;
    let sigma2 = if clamped { spec.sigma_floor } else { var };
    let err = target - mu;
    let (loss, d_mu, d_sigma2) = if err.abs() <= spec.delta {
        let loss = err * err / sigma2 + spec.lambda_reg * 0.5 * sigma2.ln();
        let d_mu = -2.0 * err / sigma2;
        let d_sigma2 = -err * err / (sigma2 * sigma2) + spec.lambda_reg / (2.0 * sigma2);
        (loss, d_mu, d_sigma2)
    } else {
        let loss = spec.delta * err.abs() - spec.delta * spec.delta / 2.0;
        (loss, -spec.delta * err.signum(), 0.0)
    };
    let grad = (0..beta.len())
        .map(|z| {
            let mut g = d_mu * idx(z);
            if !clamped {
                g += d_sigma2 * (idx(z) - mu).powi(2);
            }
            g
        })
        .collect();
    (loss, grad)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a non-differentiable matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        assert_eq!(self.shape(a), m.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &m;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, m), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise standardisation (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamp(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(floor).ln());
        let rg = self.rg(a);
        self.push(value, Op::LnClamp(a, floor), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Row gather; indices may repeat (the backward pass scatter-adds).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// `out[i] = a[i, idx[i]]`, shape `m×1`.
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), idx.len());
        let value = Mat::from_shape_fn((idx.len(), 1), |(i, _)| x[[i, idx[i]]]);
        let rg = self.rg(a);
        self.push(value, Op::PickPerRow(a, idx), rg)
    }

    /// Pairwise squared Euclidean distances between rows: `m×d, n×d → m×n`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.ncols(), y.ncols(), "sq_dist: width mismatch");
        let value = Mat::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
            x.row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum()
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::SqDist(a, b), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut value = x.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows { x: a, norms }, rg)
    }

    /// Fused multi-head scaled dot-product attention over a stack of
    /// `rows / seq_len` independent sequences. `q`, `k`, `v` are `rows×D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (rows, dim) = self.shape(q);
        assert_eq!(self.shape(k), (rows, dim));
        assert_eq!(self.shape(v), (rows, dim));
        assert_eq!(rows % spec.seq_len, 0, "attention: rows not a multiple of seq_len");
        assert_eq!(dim % spec.heads, 0, "attention: dim not divisible by heads");
        if let Some(mask) = &spec.key_valid {
            assert_eq!(mask.len(), rows);
        }
        let t = spec.seq_len;
        let dh = dim / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros((rows, dim));
        let mut probs = Vec::with_capacity(rows / t * spec.heads);
        for b in 0..rows / t {
            let r0 = b * t;
            for h in 0..spec.heads {
                let c0 = h * dh;
                let qb = qm.slice(s![r0..r0 + t, c0..c0 + dh]);
                let kb = km.slice(s![r0..r0 + t, c0..c0 + dh]);
                let vb = vm.slice(s![r0..r0 + t, c0..c0 + dh]);
                let mut scores = qb.dot(&kb.t()) * scale;
                if let Some(mask) = &spec.key_valid {
                    for j in 0..t {
                        if !mask[r0 + j] {
                            scores.column_mut(j).fill(f64::NEG_INFINITY);
                        }
                    }
                }
                let p = softmax_rows(&scores);
                out.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, rg)
    }

    /// Per-row Gaussian-prior regression loss on distributions `beta` (`m×n`)
    /// against 1-based real targets. Output is `m×1`.
    pub fn rmr(&mut self, beta: Var, targets: Vec<f64>, spec: RmrSpec) -> Var {
        let b = self.value(beta);
        assert_eq!(b.nrows(), targets.len());
        let value = Mat::from_shape_fn((targets.len(), 1), |(i, _)| {
            rmr_row(&b.row(i).to_vec(), targets[i], &spec).0
        });
        let rg = self.rg(beta);
        self.push(value, Op::Rmr { beta, targets, spec }, rg)
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if rg(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g * val(*b));
                }
                if rg(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if rg(*a) {
                    acc(*a, g * val(*row));
                }
                if rg(*row) {
                    acc(*row, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MulConst(a, m) => acc(*a, g * m),
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let mut d = g.clone();
                for ((mut drow, yrow), inv) in d.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let n = drow.len() as f64;
                    let mean_g = drow.sum() / n;
                    let mean_gy = drow.dot(&yrow) / n;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &y| *dv = inv * (*dv - mean_g - y * mean_gy));
                }
                acc(*x, d);
            }
            Op::Softmax(a) => {
                let mut d = g * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y * s);
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for ((mut drow, grow), yrow) in d.rows_mut().into_iter().zip(g.rows()).zip(out.rows()) {
                    let s = grow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y.exp() * s);
                }
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::LnClamp(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d = if x > *floor { *d / x } else { 0.0 });
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::Gather(a, idx) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if rg(p) {
                        acc(p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SumAll(a) => acc(*a, Mat::from_elem(val(*a).raw_dim(), g[[0, 0]])),
            Op::MeanRows(a) => {
                let x = val(*a);
                let m = x.nrows() as f64;
                let row = g / m;
                acc(*a, Mat::from_shape_fn(x.raw_dim(), |(_, j)| row[[0, j]]));
            }
            Op::PickPerRow(a, idx) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                for (i, &j) in idx.iter().enumerate() {
                    d[[i, j]] += g[[i, 0]];
                }
                acc(*a, d);
            }
            Op::SqDist(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if rg(*a) {
                    let rs = g.sum_axis(Axis(1));
                    let mut d = x * &rs.insert_axis(Axis(1));
                    d -= &g.dot(y);
                    acc(*a, d * 2.0);
                }
                if rg(*b) {
                    let cs = g.sum_axis(Axis(0));
                    let mut d = y * &cs.insert_axis(Axis(1));
                    d -= &g.t().dot(x);
                    acc(*b, d * 2.0);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let mut d = g.clone();
                for ((mut drow, yrow), n) in d.rows_mut().into_iter().zip(out.rows()).zip(norms) {
                    let proj = drow.dot(&yrow);
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv = (*dv - y * proj) / n);
                }
                acc(*x, d);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let (rows, dim) = qm.dim();
                let t = spec.seq_len;
                let dh = dim / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros((rows, dim));
                let mut dk = Mat::zeros((rows, dim));
                let mut dv = Mat::zeros((rows, dim));
                for b in 0..rows / t {
                    let r0 = b * t;
                    for h in 0..spec.heads {
                        let c0 = h * dh;
                        let p = &probs[b * spec.heads + h];
                        let go = g.slice(s![r0..r0 + t, c0..c0 + dh]);
                        let qb = qm.slice(s![r0..r0 + t, c0..c0 + dh]);
                        let kb = km.slice(s![r0..r0 + t, c0..c0 + dh]);
                        let vb = vm.slice(s![r0..r0 + t, c0..c0 + dh]);
                        dv.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vb.t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let sum = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * sum);
                        }
                        ds *= scale;
                        dq.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&ds.dot(&kb));
                        dk.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&ds.t().dot(&qb));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Rmr { beta, targets, spec } => {
                let b = val(*beta);
                let mut d = Mat::zeros(b.raw_dim());
                for (i, &tgt) in targets.iter().enumerate() {
                    let (_, grad) = rmr_row(&b.row(i).to_vec(), tgt, spec);
                    for (z, gz) in grad.into_iter().enumerate() {
                        d[[i, z]] = gz * g[[i, 0]];
                    }
                }
                acc(*beta, d);
            }
        }
    }
}
