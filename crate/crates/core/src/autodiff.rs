//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node whose inputs already exist on the tape, so node
//! order is a topological order and the backward sweep is a single reverse scan.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            // relu'(0) = 0 and relu(0) = 0
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Lipschitz constant of the activation.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    /// Mean softmax cross-entropy over rows; stores the softmax probabilities.
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Per-row margin; `picks[r] = (true column, runner-up column)` or
    /// `(0, usize::MAX)` with a sign for single-column scores.
    Margin {
        scores: Var,
        picks: Vec<(usize, usize)>,
        signs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` is not on the loss path.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_on_path(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a bias vector to every row of a 2-D tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n || xv.shape().len() != 2 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push_checked("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(a);
        }
        let out = self.value(a).map(|x| act.apply(x));
        self.push_checked("activation", out, Op::Act(a, act), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::from_parts(vec![1], vec![self.value(a).sum()]);
        self.push_checked("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(vec![1], vec![t.sum() / t.numel() as f64]);
        self.push_checked("mean", out, Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, k) = (lv.rows(), lv.cols());
        if labels.len() != m || lv.shape().len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), lv.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for r in 0..m {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - mx).exp() / z;
            }
            total += z.ln() + mx - row[labels[r]];
        }
        let out = Tensor::from_parts(vec![1], vec![total / m as f64]);
        self.push_checked(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Per-row classification margin: `s[y] − max_{k≠y} s[k]` for multi-column
    /// scores, `(2y − 1)·s` for a single score column with labels in {0, 1}.
    /// Ties in the runner-up go to the lowest index.
    pub fn margin(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        let (m, k) = (sv.rows(), sv.cols());
        if labels.len() != m {
            return Err(Error::shape("margin", "label count differs from rows"));
        }
        let mut picks = Vec::with_capacity(m);
        let mut signs = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for (r, &y) in labels.iter().enumerate() {
            let row = sv.row(r);
            if k == 1 {
                if y > 1 {
                    return Err(Error::shape("margin", "single-score margin needs labels in {0,1}"));
                }
                let s = if y == 1 { 1.0 } else { -1.0 };
                picks.push((0, usize::MAX));
                signs.push(s);
                out.push(s * row[0]);
            } else {
                if y >= k {
                    return Err(Error::shape("margin", format!("label {y} >= {k}")));
                }
                let mut other = usize::MAX;
                for (c, &v) in row.iter().enumerate() {
                    if c != y && (other == usize::MAX || v > row[other]) {
                        other = c;
                    }
                }
                picks.push((y, other));
                signs.push(1.0);
                out.push(row[y] - row[other]);
            }
        }
        let out = Tensor::from_parts(vec![m], out);
        self.push_checked(
            "margin",
            out,
            Op::Margin {
                scores,
                picks,
                signs,
            },
            &[scores],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        shapes.truncate(self.nodes.len());
        // values that never required grad carry no meaningful gradient
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    self.accumulate(grads, *a, kernels::matmul_nt(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    self.accumulate(grads, *b, kernels::matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Act(a, act) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = match act {
                    Activation::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Identity => g.to_vec(),
                };
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (m, k) = (lv.rows(), lv.cols());
                let scale = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Margin {
                scores,
                picks,
                signs,
            } => {
                let k = self.value(*scores).cols();
                let mut d = vec![0.0; self.value(*scores).numel()];
                for (r, (&(y, other), &s)) in picks.iter().zip(signs).enumerate() {
                    if other == usize::MAX {
                        d[r * k] += s * g[r];
                    } else {
                        d[r * k + y] += g[r];
                        d[r * k + other] -= g[r];
                    }
                }
                self.accumulate(grads, *scores, d);
            }
        }
    }
}

/// One dense layer on the tape: `act(x · W + b)`.
pub fn forward_dense(
    tape: &mut Tape,
    weights: Var,
    bias: Var,
    input: Var,
    act: Activation,
) -> Result<Var> {
    let z = tape.matmul(input, weights)?;
    let z = tape.add_bias(z, bias)?;
    tape.activation(z, act)
}

/// Tape-free dense layer with the same kernels as [`forward_dense`].
pub fn dense_values(weights: &Tensor, bias: &Tensor, input: &Tensor, act: Activation) -> Result<Tensor> {
    let (m, k) = (input.rows(), input.cols());
    if weights.rows() != k || bias.numel() != weights.cols() {
        return Err(Error::shape(
            "forward_dense",
            format!(
                "input {:?}, weights {:?}, bias {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let n = weights.cols();
    let mut data = kernels::matmul(input.data(), weights.data(), m, k, n);
    for row in data.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o = act.apply(*o + b);
        }
    }
    let out = Tensor::from_parts(vec![m, n], data);
    out.check_finite("forward_dense")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::second_order::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_negative_side_is_zero() {
        for x0 in [-1.0, 0.0] {
            let mut tape = Tape::new();
            let x = tape.param(t(&[1], &[x0]));
            let y = tape.relu(x).unwrap();
            let g = tape.backward(y).unwrap();
            assert_eq!(g.get(x).data(), &[0.0]);
        }
    }

    #[test]
    fn off_path_gets_zero_and_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
        assert!(!g.is_on_path(unused));
        assert!(tape.backward(x).is_err());
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn dense_examples() {
        let out = dense_values(
            &Tensor::identity(2),
            &t(&[2], &[0.0, 0.0]),
            &t(&[1, 2], &[1.0, -2.0]),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        let out = dense_values(&t(&[1, 1], &[2.0]), &t(&[1], &[1.0]), &t(&[1, 1], &[3.0]), Activation::Identity)
            .unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert!(dense_values(&Tensor::identity(3), &t(&[3], &[0.; 3]), &t(&[1, 2], &[1., 2.]), Activation::Relu).is_err());
    }

    #[test]
    fn dense_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (5, 4, 3);
        let w: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = dense_values(&t(&[k, n], &w), &t(&[n], &b), &t(&[m, k], &x), Activation::Tanh).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = b[j];
                for p in 0..k {
                    acc += x[i * k + p] * w[p * n + j];
                }
                assert!((got.get2(i, j) - acc.tanh()).abs() <= 1e-12);
            }
        }
        let mut tape = Tape::new();
        let (wv, bv, xv) = (
            tape.constant(t(&[k, n], &w)),
            tape.constant(t(&[n], &b)),
            tape.constant(t(&[m, k], &x)),
        );
        let y = forward_dense(&mut tape, wv, bv, xv, Activation::Tanh).unwrap();
        assert_eq!(tape.value(y), &got);
    }

    /// Builds a scalar function of a flat vector through one op so each op's
    /// gradient can be checked against central differences.
    fn check_op(build: impl Fn(&mut Tape, Var) -> Var, dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let point: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let f = |p: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::vector(p.to_vec()).unwrap());
                let y = build(&mut tape, x);
                let g = tape.backward(y).unwrap();
                (tape.value(y).data()[0], g.get(x).into_data())
            };
            let err = finite_diff_check(f, &point, 1e-5);
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // matmul + add_bias + tanh
        check_op(
            |tp, x| {
                let m = tp.constant(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 1.1, 0.4, -0.7]).unwrap());
                let w = tp.constant(Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
                let xr = x_as_row(tp, x);
                let row = tp.matmul(xr, w).unwrap();
                let b = tp.constant(Tensor::vector(vec![0.1, -0.3]).unwrap());
                let z = tp.add_bias(row, b).unwrap();
                let z = tp.tanh(z).unwrap();
                let z2 = tp.matmul(z, m).unwrap();
                tp.sum(z2).unwrap()
            },
            6,
            1,
        );
        // sub, scale, mean, mul
        check_op(
            |tp, x| {
                let c = tp.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]).unwrap());
                let d = tp.sub(x, c).unwrap();
                let e = tp.mul(d, x).unwrap();
                let f = tp.scale(e, -1.7).unwrap();
                let g = tp.add(f, x).unwrap();
                tp.mean(g).unwrap()
            },
            4,
            2,
        );
        // relu away from the kink
        check_op(
            |tp, x| {
                let sq = tp.mul(x, x).unwrap();
                let shifted = tp.add(sq, x).unwrap();
                let r = tp.relu(shifted).unwrap();
                tp.sum(r).unwrap()
            },
            5,
            3,
        );
        // softmax cross-entropy on 2 rows x 3 classes
        check_op(
            |tp, x| {
                let logits = x_as_matrix(tp, x, 2, 3);
                tp.softmax_cross_entropy(logits, &[2, 0]).unwrap()
            },
            6,
            4,
        );
        // margin (multi-column and single-column)
        check_op(
            |tp, x| {
                let s = x_as_matrix(tp, x, 2, 3);
                let m = tp.margin(s, &[1, 2]).unwrap();
                tp.sum(m).unwrap()
            },
            6,
            5,
        );
        check_op(
            |tp, x| {
                let s = x_as_matrix(tp, x, 3, 1);
                let m = tp.margin(s, &[1, 0, 1]).unwrap();
                tp.sum(m).unwrap()
            },
            3,
            6,
        );
    }

    /// Reshapes a flat parameter into a matrix on the tape via a matmul with
    /// an identity, keeping it differentiable.
    fn x_as_matrix(tp: &mut Tape, x: Var, rows: usize, cols: usize) -> Var {
        let n = rows * cols;
        // X = E · diag(x) · F with 0/1 selector matrices E: [rows, n], F: [n, cols]
        let mut e = vec![0.0; rows * n];
        let mut f = vec![0.0; n * cols];
        for r in 0..rows {
            for c in 0..cols {
                e[r * n + r * cols + c] = 1.0;
                f[(r * cols + c) * cols + c] = 1.0;
            }
        }
        let ev = tp.constant(Tensor::new(vec![rows, n], e).unwrap());
        let fv = tp.constant(Tensor::new(vec![n, cols], f).unwrap());
        let xr = x_as_row(tp, x);
        // D = diag(x) built as I ⊙ (1ᵀ x): ones[n,1] · xr[1,n]
        let ones = tp.constant(Tensor::new(vec![n, 1], vec![1.0; n]).unwrap());
        let bcast = tp.matmul(ones, xr).unwrap();
        let eye = tp.constant(Tensor::identity(n));
        let diag = tp.mul(bcast, eye).unwrap();
        let left = tp.matmul(ev, diag).unwrap();
        tp.matmul(left, fv).unwrap()
    }

    fn x_as_row(tp: &mut Tape, x: Var) -> Var {
        let n = tp.value(x).numel();
        // row = 0[1,n] + x
        let zeros = tp.constant(Tensor::zeros(&[1, n]));
        tp.add_bias(zeros, x).unwrap()
    }
}
