//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the nodes in reverse creation order
//! and accumulates vector-Jacobian products. Nodes built only from constant
//! leaves are skipped. Shape errors are programming errors and panic.

use crate::linear_ode::{expm, expm_adjoint};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var, usize),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Recip(Var),
    Sqrt(Var),
    LayerNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    SelectRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Block(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Expm(Var),
    Sum(Var),
    MeanRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Deliberate adjoint corruptions used to confirm that gradient checks can
/// fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    /// Negates the matrix-exponential vector-Jacobian product.
    NegateExpm,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Gradients of a scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, zero-filled if nothing flowed into it.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` stored as `d_out × d_in` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "mul_row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i]` for an `n × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows(), 1), cv.shape(), "mul_col shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.as_slice()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a · s[idx]` where `s` is a node.
    pub fn scale_by(&mut self, a: Var, s: Var, idx: usize) -> Var {
        let c = self.value(s).as_slice()[idx];
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleBy(a, s, idx), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Mat::zeros(idx.len(), c);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SelectRows(a, idx.to_vec()), rg)
    }

    /// Adds row `i` of `a` into row `idx[i]` of an `n_rows × c` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "scatter_rows index count");
        let c = av.cols();
        let mut out = Mat::zeros(n_rows, c);
        for (i, &r) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(r).iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::ScatterRows(a, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(pv.as_slice());
        }
        let out = Mat::from_vec(total, c, data).expect("concat_rows");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(r, total);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), r, "concat_cols row mismatch");
            out.set_block(0, c0, pv);
            c0 += pv.cols();
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn block(&mut self, a: Var, r0: usize, c0: usize, nr: usize, nc: usize) -> Var {
        let v = self.value(a).block(r0, c0, nr, nc);
        let rg = self.rg(&[a]);
        self.push(v, Op::Block(a, r0, c0), rg)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, nc: usize) -> Var {
        let r = self.value(a).rows();
        self.block(a, 0, c0, r, nc)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn expm(&mut self, a: Var) -> crate::error::Result<Var> {
        let v = expm(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Expm(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Mat::filled(1, 1, s), Op::Sum(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = Mat::zeros(1, c);
        for r in 0..n {
            for (o, x) in out.as_mut_slice().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let out = out.scale(1.0 / n as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn l2_normalize_rows(&mut self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = n.max(floor);
            norms.push(if n > floor { n } else { -floor });
            for o in out.row_mut(r) {
                *o /= d;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeRows(a, norms), rg)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.as_slice()[0]
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        assert_eq!(self.value(out).shape(), (1, 1), "backward from non-scalar");
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, s) in ga.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.as_slice()[r];
                        for o in ga.row_mut(r) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*col) {
                    let av = self.value(*a);
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Mat::from_vec(g.rows(), 1, data).unwrap());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::ScaleBy(a, s, idx) => {
                let c = self.value(*s).as_slice()[*idx];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.scale(c));
                }
                if self.requires_grad(*s) {
                    let (r, cc) = self.value(*s).shape();
                    let mut gs = Mat::zeros(r, cc);
                    gs.as_mut_slice()[*idx] = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Silu(a) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                });
                self.accumulate(grads, *a, g.zip_map(&d, |g, d| g * d));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |g, e| g * e)),
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x))
            }
            Op::Recip(a) => self.accumulate(grads, *a, g.zip_map(y, |g, r| -g * r * r)),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |g, r| 0.5 * g / r)),
            Op::LayerNorm(a, inv_std) => {
                let (n, c) = y.shape();
                let mut ga = Mat::zeros(n, c);
                for r in 0..n {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, idx) => {
                let (n, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(n, c);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let c = g.cols();
                let mut ga = Mat::zeros(idx.len(), c);
                for (i, &r) in idx.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let (nr, nc) = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.block(r0, 0, nr, nc));
                    }
                    r0 += nr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let (nr, nc) = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.block(0, c0, nr, nc));
                    }
                    c0 += nc;
                }
            }
            Op::Block(a, r0, c0) => {
                let (n, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(n, c);
                ga.set_block(*r0, *c0, g);
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (n, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.clone().reshaped(n, c).unwrap());
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Expm(a) => {
                let mut ga = expm_adjoint(self.value(*a), g).expect("expm adjoint");
                if self.fault == Some(AdjointFault::NegateExpm) {
                    ga = ga.scale(-1.0);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (n, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Mat::filled(n, c, g.as_slice()[0]));
            }
            Op::MeanRows(a) => {
                let (n, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(n, c);
                for r in 0..n {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = x / n as f64;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let n = norms[r];
                    if n > 0.0 {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gi - yi * s) / n;
                        }
                    } else {
                        for (o, gi) in ga.row_mut(r).iter_mut().zip(gr) {
                            *o = gi / -n;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
