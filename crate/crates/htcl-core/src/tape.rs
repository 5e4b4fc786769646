//! Reverse-mode differentiation over dense matrices.
//!
//! Operations are recorded on a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. Nodes hold whole matrices,
//! not scalars, so a training step records a few dozen nodes rather than
//! millions. Loss-specific kernels (pairwise distances, covariance, row
//! softmax) are fused ops with hand-derived adjoints; every adjoint is held
//! to the central finite-difference contract in `gradcheck`.

use crate::matrix::RealMatrix;

/// Additive guard for ratio denominators and logs of non-negative values.
/// Identical representations are legal (e.g. at initialization), so every
/// ratio built from distances must tolerate an exact zero.
pub const EPS_DIV: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddConst(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// Add a 1 x cols bias row to every row of the left operand.
    AddRowBroadcast(usize, usize),
    Relu(usize),
    Ln(usize),
    /// Elementwise x*ln(x) with the 0*ln(0) := 0 convention.
    Xlnx(usize),
    SumAll(usize),
    /// n x c -> n x 1, summing each row.
    SumRows(usize),
    /// n x c -> 1 x c, averaging the rows.
    MeanRows(usize),
    GatherRows(usize, Vec<usize>),
    /// n x c -> n x 1, picking entry `idx[i]` from row i.
    SelectPerRow(usize, Vec<usize>),
    LogSoftmaxRows(usize),
    SoftmaxRows(usize),
    /// Minimum entry; gradient flows to the first minimizer in row-major order.
    MinAll(usize, (usize, usize)),
    /// Sample covariance of the rows with 1/(n-1) normalization.
    Covariance(usize),
    /// Mean pairwise distance within a group, normalized by n^2 - n
    /// (the ordered-pair count applied to an unordered-pair sum).
    WithinDist(usize),
    /// Mean distance over all cross pairs of two groups.
    CrossDist(usize, usize),
}

struct Node {
    value: RealMatrix,
    op: Op,
}

/// Gradient accumulator returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<RealMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Zero matrix when the loss
    /// does not depend on it (a disconnected parameter is not an error).
    pub fn get(&self, tape: &Tape, var: Var) -> RealMatrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = &tape.nodes[var.0].value;
                RealMatrix::zeros(v.rows(), v.cols())
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &RealMatrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: RealMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: RealMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(RealMatrix::scalar(v), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = RealMatrix::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = RealMatrix::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(out, Op::Mul(a.0, b.0))
    }

    /// Elementwise division. Callers must keep the denominator away from zero
    /// (all in-crate uses add [`EPS_DIV`] first).
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()), "div shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
        let out = RealMatrix::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(out, Op::Div(a.0, b.0))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v + k);
        self.push(out, Op::AddConst(a.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * k);
        self.push(out, Op::Scale(a.0, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "bias width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (x, b) in row.iter_mut().zip(vb.row(0)) {
                *x += b;
            }
        }
        self.push(out, Op::AddRowBroadcast(a.0, bias.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a.0))
    }

    /// Elementwise natural log. Inputs must be strictly positive; in-crate
    /// callers guarantee this by adding [`EPS_DIV`] to non-negative values.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::ln);
        debug_assert!(out.is_finite(), "ln produced a non-finite entry");
        self.push(out, Op::Ln(a.0))
    }

    pub fn xlnx(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| if v > 0.0 { v * v.ln() } else { 0.0 });
        self.push(out, Op::Xlnx(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(RealMatrix::scalar(s), Op::SumAll(a.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = RealMatrix::zeros(v.rows(), 1);
        for i in 0..v.rows() {
            out.set(i, 0, v.row(i).iter().sum());
        }
        self.push(out, Op::SumRows(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.rows() > 0, "mean_rows on empty matrix");
        let mut out = RealMatrix::zeros(1, v.cols());
        for i in 0..v.rows() {
            for (j, &x) in v.row(i).iter().enumerate() {
                out.set(0, j, out.get(0, j) + x);
            }
        }
        out.scale_assign(1.0 / v.rows() as f64);
        self.push(out, Op::MeanRows(a.0))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.nodes[a.0].value.gather_rows(idx);
        self.push(out, Op::GatherRows(a.0, idx.to_vec()))
    }

    pub fn select_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rows(), idx.len(), "one index per row required");
        let mut out = RealMatrix::zeros(v.rows(), 1);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < v.cols(), "select index out of range");
            out.set(i, 0, v.get(i, j));
        }
        self.push(out, Op::SelectPerRow(a.0, idx.to_vec()))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = RealMatrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let row = v.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                out.set(i, j, x - lse);
            }
        }
        self.push(out, Op::LogSoftmaxRows(a.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = RealMatrix::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let row = v.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - m).exp();
            }
            for (j, &x) in row.iter().enumerate() {
                out.set(i, j, (x - m).exp() / z);
            }
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    pub fn min_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut best = f64::INFINITY;
        let mut arg = (0, 0);
        for i in 0..v.rows() {
            for (j, &x) in v.row(i).iter().enumerate() {
                if x < best {
                    best = x;
                    arg = (i, j);
                }
            }
        }
        self.push(RealMatrix::scalar(best), Op::MinAll(a.0, arg))
    }

    /// Sample covariance of the rows (1/(n-1) normalization), n >= 2.
    pub fn covariance(&mut self, a: Var) -> Var {
        let out = covariance_value(&self.nodes[a.0].value);
        self.push(out, Op::Covariance(a.0))
    }

    pub fn within_dist(&mut self, a: Var) -> Var {
        let out = RealMatrix::scalar(within_dist_value(&self.nodes[a.0].value));
        self.push(out, Op::WithinDist(a.0))
    }

    pub fn cross_dist(&mut self, a: Var, b: Var) -> Var {
        let out =
            RealMatrix::scalar(cross_dist_value(&self.nodes[a.0].value, &self.nodes[b.0].value));
        self.push(out, Op::CrossDist(a.0, b.0))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let lv = &self.nodes[loss.0].value;
        assert!(lv.rows() == 1 && lv.cols() == 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<RealMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(RealMatrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &RealMatrix, grads: &mut [Option<RealMatrix>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, g, self);
                add_grad(grads, *b, g, self);
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g, self);
                let neg = g.map(|v| -v);
                add_grad(grads, *b, &neg, self);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = elementwise(g, vb, |x, y| x * y);
                let gb = elementwise(g, va, |x, y| x * y);
                add_grad(grads, *a, &ga, self);
                add_grad(grads, *b, &gb, self);
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = elementwise(g, vb, |x, y| x / y);
                add_grad(grads, *a, &ga, self);
                let mut gb = RealMatrix::zeros(vb.rows(), vb.cols());
                for (i, out) in gb.data_mut().iter_mut().enumerate() {
                    let y = vb.data()[i];
                    *out = -g.data()[i] * va.data()[i] / (y * y);
                }
                add_grad(grads, *b, &gb, self);
            }
            Op::AddConst(a) => add_grad(grads, *a, g, self),
            Op::Scale(a, k) => {
                let ga = g.map(|v| v * k);
                add_grad(grads, *a, &ga, self);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = g.matmul_transpose(vb);
                let gb = va.transpose_matmul(g);
                add_grad(grads, *a, &ga, self);
                add_grad(grads, *b, &gb, self);
            }
            Op::AddRowBroadcast(a, bias) => {
                add_grad(grads, *a, g, self);
                let mut gb = RealMatrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (j, &x) in g.row(i).iter().enumerate() {
                        gb.set(0, j, gb.get(0, j) + x);
                    }
                }
                add_grad(grads, *bias, &gb, self);
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let ga = elementwise(g, va, |x, v| if v > 0.0 { x } else { 0.0 });
                add_grad(grads, *a, &ga, self);
            }
            Op::Ln(a) => {
                let va = &self.nodes[*a].value;
                let ga = elementwise(g, va, |x, v| x / v);
                add_grad(grads, *a, &ga, self);
            }
            Op::Xlnx(a) => {
                let va = &self.nodes[*a].value;
                let ga = elementwise(g, va, |x, v| if v > 0.0 { x * (v.ln() + 1.0) } else { 0.0 });
                add_grad(grads, *a, &ga, self);
            }
            Op::SumAll(a) => {
                let va = &self.nodes[*a].value;
                let s = g.as_scalar();
                let ga = RealMatrix::from_vec(va.rows(), va.cols(), vec![s; va.rows() * va.cols()])
                    .unwrap();
                add_grad(grads, *a, &ga, self);
            }
            Op::SumRows(a) => {
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let s = g.get(i, 0);
                    for x in ga.row_mut(i) {
                        *x = s;
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::MeanRows(a) => {
                let va = &self.nodes[*a].value;
                let inv = 1.0 / va.rows() as f64;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                        *x = g.get(0, j) * inv;
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::GatherRows(a, idx) => {
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for (t, &i) in idx.iter().enumerate() {
                    for (j, &x) in g.row(t).iter().enumerate() {
                        ga.set(i, j, ga.get(i, j) + x);
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::SelectPerRow(a, idx) => {
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for (i, &j) in idx.iter().enumerate() {
                    ga.set(i, j, g.get(i, 0));
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::LogSoftmaxRows(a) => {
                // out = a - lse(a); d a_ik = g_ik - softmax_ik * sum_j g_ij
                let out = &node.value;
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                        *x = g.get(i, j) - out.get(i, j).exp() * gsum;
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::SoftmaxRows(a) => {
                // d a_ij = p_ij * (g_ij - sum_k g_ik p_ik)
                let p = &node.value;
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let dot: f64 =
                        g.row(i).iter().zip(p.row(i)).map(|(&x, &y)| x * y).sum();
                    for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                        *x = p.get(i, j) * (g.get(i, j) - dot);
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::MinAll(a, arg) => {
                let va = &self.nodes[*a].value;
                let mut ga = RealMatrix::zeros(va.rows(), va.cols());
                ga.set(arg.0, arg.1, g.as_scalar());
                add_grad(grads, *a, &ga, self);
            }
            Op::Covariance(a) => {
                // C = Xc^T Xc / (n-1); dX = center_rows(Xc (G + G^T)) / (n-1)
                let x = &self.nodes[*a].value;
                let n = x.rows();
                let d = x.cols();
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        mean[j] += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let mut sym = RealMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        sym.set(i, j, g.get(i, j) + g.get(j, i));
                    }
                }
                let mut xc = x.clone();
                for i in 0..n {
                    for (j, v) in xc.row_mut(i).iter_mut().enumerate() {
                        *v -= mean[j];
                    }
                }
                let mut ga = xc.matmul(&sym);
                ga.scale_assign(1.0 / (n as f64 - 1.0));
                // Centering projector applied to the gradient: subtract column means.
                let mut colmean = vec![0.0; d];
                for i in 0..n {
                    for (j, &v) in ga.row(i).iter().enumerate() {
                        colmean[j] += v;
                    }
                }
                for m in colmean.iter_mut() {
                    *m /= n as f64;
                }
                for i in 0..n {
                    for (j, v) in ga.row_mut(i).iter_mut().enumerate() {
                        *v -= colmean[j];
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::WithinDist(a) => {
                let x = &self.nodes[*a].value;
                let n = x.rows();
                let norm = (n * n - n) as f64;
                let s = g.as_scalar() / norm;
                let mut ga = RealMatrix::zeros(n, x.cols());
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d = RealMatrix::row_distance(x, i, x, j);
                        if d == 0.0 {
                            continue;
                        }
                        for k in 0..x.cols() {
                            let diff = (x.get(i, k) - x.get(j, k)) / d * s;
                            ga.set(i, k, ga.get(i, k) + diff);
                            ga.set(j, k, ga.get(j, k) - diff);
                        }
                    }
                }
                add_grad(grads, *a, &ga, self);
            }
            Op::CrossDist(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let norm = (xa.rows() * xb.rows()) as f64;
                let s = g.as_scalar() / norm;
                let mut ga = RealMatrix::zeros(xa.rows(), xa.cols());
                let mut gb = RealMatrix::zeros(xb.rows(), xb.cols());
                for i in 0..xa.rows() {
                    for j in 0..xb.rows() {
                        let d = RealMatrix::row_distance(xa, i, xb, j);
                        if d == 0.0 {
                            continue;
                        }
                        for k in 0..xa.cols() {
                            let diff = (xa.get(i, k) - xb.get(j, k)) / d * s;
                            ga.set(i, k, ga.get(i, k) + diff);
                            gb.set(j, k, gb.get(j, k) - diff);
                        }
                    }
                }
                add_grad(grads, *a, &ga, self);
                add_grad(grads, *b, &gb, self);
            }
        }
    }
}

fn elementwise(g: &RealMatrix, v: &RealMatrix, f: impl Fn(f64, f64) -> f64) -> RealMatrix {
    debug_assert_eq!((g.rows(), g.cols()), (v.rows(), v.cols()));
    let data = g.data().iter().zip(v.data()).map(|(&x, &y)| f(x, y)).collect();
    RealMatrix::from_vec(g.rows(), g.cols(), data).unwrap()
}

fn add_grad(grads: &mut [Option<RealMatrix>], id: usize, g: &RealMatrix, _tape: &Tape) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Sample covariance of the rows of `x` with 1/(n-1) normalization.
/// Requires n >= 2; callers enforce the precondition.
pub fn covariance_value(x: &RealMatrix) -> RealMatrix {
    let n = x.rows();
    assert!(n >= 2, "covariance requires at least 2 rows");
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut xc = x.clone();
    for i in 0..n {
        for (j, v) in xc.row_mut(i).iter_mut().enumerate() {
            *v -= mean[j];
        }
    }
    let mut cov = xc.transpose_matmul(&xc);
    cov.scale_assign(1.0 / (n as f64 - 1.0));
    cov
}

/// Unordered-pair distance sum divided by the ordered-pair count n^2 - n.
/// For homogeneous groups this is half the mean pairwise distance, so the
/// sum of two group values is commensurate with one cross-group mean.
pub fn within_dist_value(x: &RealMatrix) -> f64 {
    let n = x.rows();
    assert!(n >= 2, "within_dist requires at least 2 rows");
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += RealMatrix::row_distance(x, i, x, j);
        }
    }
    sum / (n * n - n) as f64
}

/// Mean Euclidean distance over all pairs drawn one from each group.
pub fn cross_dist_value(a: &RealMatrix, b: &RealMatrix) -> f64 {
    assert!(a.rows() >= 1 && b.rows() >= 1, "cross_dist requires nonempty groups");
    assert_eq!(a.cols(), b.cols(), "cross_dist dimension mismatch");
    let mut sum = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            sum += RealMatrix::row_distance(a, i, b, j);
        }
    }
    sum / (a.rows() * b.rows()) as f64
}
