use std::f64::consts::PI;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LogSumExpCols(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    SoftmaxEntropy(Var),
    GaussianLogDensity { mu: Var, logvar: Var, x: Var },
    Reparameterize { mu: Var, logvar: Var, noise: Tensor },
    KlStdNormal { mu: Var, logvar: Var },
    L1Norm(Var),
    L2Distance(Var, Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    /// op-specific forward cache (softmax probabilities and similar)
    aux: Option<Tensor>,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for backpropagation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of the graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::new(self.shapes[v.0].clone(), vec![0.0; self.shapes[v.0].iter().product()])
                .expect("shape recorded from a valid tensor"),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::new(self.shapes[v.0].clone(), vec![0.0; self.shapes[v.0].iter().product()])
                .expect("shape recorded from a valid tensor"),
        }
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, t.shape(), &[0, 0]))
    }
}

/// `b` is either the same shape as `a` or a `[1, cols]` row broadcast over `a`.
fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols() && a.is_matrix() && b.is_matrix())
}

fn reduce_rows(g: &Tensor, target_rows: usize) -> Tensor {
    if g.rows() == target_rows {
        return g.clone();
    }
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::matrix(1, c, out)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::matrix(x.rows(), c, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, aux: Option<Tensor>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        assert!(t.is_finite(), "leaf tensors must be finite");
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matrix("matmul", ta)?;
        check_matrix("matmul", tb)?;
        let out = ta.matmul(tb)?;
        self.push("matmul", out, Op::MatMul(a, b), None)
    }

    fn zip_broadcast(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta, tb) {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let bd = tb.data();
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
        };
        Ok(Tensor::matrix(ta.rows(), c, data))
    }

    /// Elementwise `a + b`; `b` may be a `[1, cols]` row broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_broadcast("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_broadcast("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_broadcast("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push("scale", out, Op::Scale(a, k), None)
    }

    /// Leaky ReLU; the subgradient at exactly zero is `alpha`.
    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push("leaky_relu", out, Op::LeakyRelu(a, alpha), None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), None)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), None)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        check_matrix("slice_cols", t)?;
        if start >= end || end > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor::matrix(t.rows(), w, data);
        self.push("slice_cols", out, Op::SliceCols(a, start), None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let t = self.value(p);
            check_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, width, data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), None)
    }

    /// Row-wise `log(sum(exp(x)))`, giving `[n, 1]`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_matrix("logsumexp_cols", t)?;
        let data = (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = Tensor::matrix(t.rows(), 1, data);
        self.push("logsumexp_cols", out, Op::LogSumExpCols(a), None)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_matrix("softmax_cross_entropy", t)?;
        if labels.len() != t.rows() || labels.iter().any(|&l| l >= t.cols()) {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let logp = log_softmax_rows(t);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| logp.get(r, l))
            .sum::<f64>()
            / labels.len() as f64;
        let probs = logp.map(f64::exp);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Some(probs),
        )
    }

    /// Mean over rows of the softmax entropy `-sum p log p`, with `log p`
    /// floored at `ln(1e-12)`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        check_matrix("softmax_entropy", t)?;
        let logp = log_softmax_rows(t).map(|v| v.max(LOG_FLOOR));
        let n = t.rows() as f64;
        let h = -logp.data().iter().map(|&lp| lp.exp() * lp).sum::<f64>() / n;
        self.push("softmax_entropy", Tensor::scalar(h), Op::SoftmaxEntropy(logits), Some(logp))
    }

    /// Row-wise diagonal Gaussian log density `log N(x; mu, exp(logvar))`,
    /// giving `[n, 1]`. `mu` and `logvar` may be `[1, d]` rows broadcast over `x`.
    pub fn gaussian_log_density(&mut self, mu: Var, logvar: Var, x: Var) -> Result<Var> {
        let (tm, tl, tx) = (self.value(mu), self.value(logvar), self.value(x));
        if !broadcast_ok(tx, tm) || !broadcast_ok(tx, tl) {
            return Err(Error::shape("gaussian_log_density", tx.shape(), tm.shape()));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let ln2pi = (2.0 * PI).ln();
        let data = (0..n)
            .map(|r| {
                let mr = if tm.rows() == 1 { 0 } else { r };
                let lr = if tl.rows() == 1 { 0 } else { r };
                let mut acc = 0.0;
                for j in 0..d {
                    let diff = tx.get(r, j) - tm.get(mr, j);
                    let lv = tl.get(lr, j);
                    acc += ln2pi + lv + diff * diff * (-lv).exp();
                }
                -0.5 * acc
            })
            .collect();
        let out = Tensor::matrix(n, 1, data);
        self.push("gaussian_log_density", out, Op::GaussianLogDensity { mu, logvar, x }, None)
    }

    /// `mu + exp(logvar / 2) * noise`; zero noise returns `mu` exactly.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: Tensor) -> Result<Var> {
        let (tm, tl) = (self.value(mu), self.value(logvar));
        if tm.shape() != tl.shape() || tm.shape() != noise.shape() {
            return Err(Error::shape("reparameterize", tm.shape(), noise.shape()));
        }
        let data = tm
            .data()
            .iter()
            .zip(tl.data())
            .zip(noise.data())
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        let out = Tensor::matrix(tm.rows(), tm.cols(), data);
        self.push("reparameterize", out, Op::Reparameterize { mu, logvar, noise }, None)
    }

    /// Mean over rows of `KL(N(mu, exp(logvar)) || N(0, I))`.
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (tm, tl) = (self.value(mu), self.value(logvar));
        if tm.shape() != tl.shape() {
            return Err(Error::shape("kl_standard_normal", tm.shape(), tl.shape()));
        }
        let kl = tm
            .data()
            .iter()
            .zip(tl.data())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - l - 1.0))
            .sum::<f64>()
            / tm.rows() as f64;
        self.push("kl_standard_normal", Tensor::scalar(kl), Op::KlStdNormal { mu, logvar }, None)
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        self.push("l1_norm", Tensor::scalar(s), Op::L1Norm(a), None)
    }

    /// Row-wise Euclidean distance `||a - b||`, giving `[n, 1]`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta, tb) {
            return Err(Error::shape("l2_distance", ta.shape(), tb.shape()));
        }
        let bd = |r: usize, j: usize| if tb.rows() == 1 { tb.get(0, j) } else { tb.get(r, j) };
        let data = (0..ta.rows())
            .map(|r| {
                (0..ta.cols())
                    .map(|j| (ta.get(r, j) - bd(r, j)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data);
        self.push("l2_distance", out, Op::L2Distance(a, b), None)
    }

    /// Mean over all entries of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let m = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        self.push("mse", Tensor::scalar(m), Op::Mse(a, b), None)
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                acc(*a, Tensor::matrix(m, k, da));
                acc(*b, Tensor::matrix(k, n, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_rows(g, self.value(*b).rows()));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_rows(&g.map(|v| -v), self.value(*b).rows()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let bcast = ta.rows() != tb.rows();
                let bd = tb.data();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * if bcast { bd[i % c] } else { bd[i] })
                    .collect();
                let gb_full: Vec<f64> = g.data().iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                acc(*a, Tensor::matrix(ta.rows(), c, ga));
                acc(*b, reduce_rows(&Tensor::matrix(ta.rows(), c, gb_full), tb.rows()));
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::LeakyRelu(a, alpha) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { gv * alpha })
                    .collect();
                acc(*a, Tensor::matrix(x.rows(), x.cols(), data));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                acc(*a, Tensor::matrix(y.rows(), y.cols(), data));
            }
            Op::Exp(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect();
                acc(*a, Tensor::matrix(y.rows(), y.cols(), data));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(gv, xv)| 2.0 * gv * xv).collect();
                acc(*a, Tensor::matrix(x.rows(), x.cols(), data));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, x.map(|_| g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = g.item() / x.len() as f64;
                acc(*a, x.map(|_| s));
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let w = g.cols();
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for j in 0..w {
                        out.set(r, start + j, g.get(r, j));
                    }
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.cols();
                    let mut data = Vec::with_capacity(t.len());
                    for r in 0..t.rows() {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    acc(p, Tensor::matrix(t.rows(), w, data));
                    offset += w;
                }
            }
            Op::LogSumExpCols(a) => {
                let x = self.value(*a);
                let mut data = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    data.extend(x.row_slice(r).iter().map(|v| gr * (v - lse).exp()));
                }
                acc(*a, Tensor::matrix(x.rows(), x.cols(), data));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let probs = node.aux.as_ref().expect("softmax cache");
                let n = labels.len() as f64;
                let s = g.item() / n;
                let mut d = probs.map(|p| p * s);
                for (r, &l) in labels.iter().enumerate() {
                    let v = d.get(r, l) - s;
                    d.set(r, l, v);
                }
                acc(*logits, d);
            }
            Op::SoftmaxEntropy(logits) => {
                let logp = node.aux.as_ref().expect("log-softmax cache");
                let n = logp.rows();
                let s = g.item() / n as f64;
                let mut data = Vec::with_capacity(logp.len());
                for r in 0..n {
                    let row = logp.row_slice(r);
                    let h: f64 = -row.iter().map(|lp| lp.exp() * lp).sum::<f64>();
                    data.extend(row.iter().map(|lp| -s * lp.exp() * (lp + h)));
                }
                acc(*logits, Tensor::matrix(n, logp.cols(), data));
            }
            Op::GaussianLogDensity { mu, logvar, x } => {
                let (tm, tl, tx) = (self.value(*mu), self.value(*logvar), self.value(*x));
                let (n, d) = (tx.rows(), tx.cols());
                let mut gx = Tensor::zeros(n, d);
                let mut gm = Tensor::zeros(tm.rows(), d);
                let mut gl = Tensor::zeros(tl.rows(), d);
                for r in 0..n {
                    let gr = g.get(r, 0);
                    let mr = if tm.rows() == 1 { 0 } else { r };
                    let lr = if tl.rows() == 1 { 0 } else { r };
                    for j in 0..d {
                        let diff = tx.get(r, j) - tm.get(mr, j);
                        let inv = (-tl.get(lr, j)).exp();
                        gx.set(r, j, -gr * diff * inv);
                        gm.set(mr, j, gm.get(mr, j) + gr * diff * inv);
                        gl.set(lr, j, gl.get(lr, j) + gr * (-0.5 + 0.5 * diff * diff * inv));
                    }
                }
                acc(*x, gx);
                acc(*mu, gm);
                acc(*logvar, gl);
            }
            Op::Reparameterize { mu, logvar, noise } => {
                let tl = self.value(*logvar);
                acc(*mu, g.clone());
                let data = g
                    .data()
                    .iter()
                    .zip(tl.data())
                    .zip(noise.data())
                    .map(|((gv, l), e)| gv * e * 0.5 * (0.5 * l).exp())
                    .collect();
                acc(*logvar, Tensor::matrix(tl.rows(), tl.cols(), data));
            }
            Op::KlStdNormal { mu, logvar } => {
                let (tm, tl) = (self.value(*mu), self.value(*logvar));
                let s = g.item() / tm.rows() as f64;
                acc(*mu, tm.map(|m| s * m));
                acc(*logvar, tl.map(|l| s * 0.5 * (l.exp() - 1.0)));
            }
            Op::L1Norm(a) => {
                let x = self.value(*a);
                let s = g.item();
                acc(*a, x.map(|v| s * v.signum() * if v == 0.0 { 0.0 } else { 1.0 }));
            }
            Op::L2Distance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, d) = (ta.rows(), ta.cols());
                let mut ga = Tensor::zeros(n, d);
                for r in 0..n {
                    let dist = node.value.get(r, 0);
                    if dist == 0.0 {
                        continue;
                    }
                    let k = g.get(r, 0) / dist;
                    for j in 0..d {
                        let bv = if tb.rows() == 1 { tb.get(0, j) } else { tb.get(r, j) };
                        ga.set(r, j, k * (ta.get(r, j) - bv));
                    }
                }
                let gb = reduce_rows(&ga.map(|v| -v), tb.rows());
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / ta.len() as f64;
                let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| s * (x - y)).collect();
                let neg: Vec<f64> = data.iter().map(|v| -v).collect();
                acc(*a, Tensor::matrix(ta.rows(), ta.cols(), data));
                acc(*b, Tensor::matrix(ta.rows(), ta.cols(), neg));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
