//! Reverse-mode automatic differentiation over a flat computation graph.
//!
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order. `backward` walks them from the root down to index 0
//! and visits every reachable node exactly once.

use super::tensor::{log_softmax, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    /// Multiplication by a constant.
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Row {
        table: NodeId,
        index: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    SoftmaxCe {
        logits: NodeId,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op))
    }

    /// Adds an input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient; `None` means zero (no backward pass reached it yet).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub(crate) fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] · [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked(value, Op::MatMul(a, b), "matmul")
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        self.value(id)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", self.value(id).shape())))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.is_scalar() {
            va.shape().to_vec()
        } else if va.is_scalar() {
            vb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        let numel = shape.iter().product::<usize>();
        let (da, db) = (va.data(), vb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = (0..numel).map(|i| f(at(da, i), at(db, i))).collect();
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::Binary(op, a, b), "elementwise")
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = va.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::domain("log", format!("argument {bad} is not positive")));
            }
        }
        let out: Vec<f64> = match op {
            UnaryOp::Tanh => va.data().iter().map(|v| v.tanh()).collect(),
            UnaryOp::Sigmoid => va.data().iter().map(|v| sigmoid(*v)).collect(),
            UnaryOp::Exp => va.data().iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => va.data().iter().map(|v| v.ln()).collect(),
            UnaryOp::Square => va.data().iter().map(|v| v * v).collect(),
            UnaryOp::Scale(s) => va.data().iter().map(|v| v * s).collect(),
        };
        if op == UnaryOp::Exp && out.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("exp", "result overflows"));
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push_checked(value, Op::Unary(op, a), "unary")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(UnaryOp::Scale(factor), a)
    }

    /// Row `index` of a matrix as a `[1, n]` node (embedding lookup).
    pub fn row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(table, "row")?;
        if index >= m {
            return Err(Error::IndexOutOfRange { index, len: m });
        }
        let data = self.value(table).data()[index * n..(index + 1) * n].to_vec();
        Ok(self.push(Tensor::row(data), Op::Row { table, index }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(src, "slice_cols")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let data = self.value(src).data();
        let out = (0..m)
            .flat_map(|i| data[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(value, Op::SliceCols { src, start, len }))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        self.push_checked(Tensor::scalar(total), Op::Sum(a), "sum")
    }

    /// `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if target >= v.numel() {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: v.numel(),
            });
        }
        let loss = -log_softmax(v.data())[target];
        let probs = softmax(v.data());
        self.push_checked(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, target, probs },
            "softmax_cross_entropy",
        )
    }

    /// Accumulates `d root / d node` into every node reachable from `root`.
    ///
    /// Gradients are added to whatever is already stored; call
    /// [`Graph::zero_grad`] between independent passes.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; n];
        bufs[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = bufs[i].take() else { continue };
            self.propagate(i, &g, &mut bufs);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = va.dims2().expect("checked at construction");
                let (_, n) = vb.dims2().expect("checked at construction");
                matmul_bt_acc(g, vb.data(), slot(bufs, *a, m * k), m, k, n);
                matmul_at_acc(va.data(), g, slot(bufs, *b, k * n), m, k, n);
            }
            Op::Binary(op, a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                let at = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(j, x)| x * at(vb, j)).collect(),
                        g.iter().enumerate().map(|(j, x)| x * at(va, j)).collect(),
                    ),
                };
                reduce_into(slot(bufs, *a, va.len()), &ga);
                reduce_into(slot(bufs, *b, vb.len()), &gb);
            }
            Op::Unary(op, a) => {
                let x = self.nodes[a.0].value.data();
                let y = node.value.data();
                let dst = slot(bufs, *a, x.len());
                for j in 0..x.len() {
                    let local = match op {
                        UnaryOp::Tanh => 1.0 - y[j] * y[j],
                        UnaryOp::Sigmoid => y[j] * (1.0 - y[j]),
                        UnaryOp::Exp => y[j],
                        UnaryOp::Log => 1.0 / x[j],
                        UnaryOp::Square => 2.0 * x[j],
                        UnaryOp::Scale(s) => *s,
                    };
                    dst[j] += g[j] * local;
                }
            }
            Op::Row { table, index } => {
                let (m, n) = self.nodes[table.0].value.dims2().expect("matrix");
                let dst = slot(bufs, *table, m * n);
                for (d, x) in dst[index * n..(index + 1) * n].iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::SliceCols { src, start, len } => {
                let (m, n) = self.nodes[src.0].value.dims2().expect("matrix");
                let dst = slot(bufs, *src, m * n);
                for r in 0..m {
                    for c in 0..*len {
                        dst[r * n + start + c] += g[r * len + c];
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.numel();
                for d in slot(bufs, *a, len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::SoftmaxCe { logits, target, probs } => {
                let dst = slot(bufs, *logits, probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    dst[j] += g[0] * (p - onehot);
                }
            }
        }
    }
}

fn slot(bufs: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    bufs[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` into `dst`, summing over broadcast positions when `dst` is a scalar.
fn reduce_into(dst: &mut [f64], g: &[f64]) {
    if dst.len() == g.len() {
        for (d, x) in dst.iter_mut().zip(g) {
            *d += x;
        }
    } else {
        dst[0] += g.iter().sum::<f64>();
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-6;

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / numeric.abs().max(1.0)
    }

    /// Central differences of a scalar function of one flat input.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += H;
                let mut minus = x.clone();
                minus.data_mut()[i] -= H;
                (f(&plus) - f(&minus)) / (2.0 * H)
            })
            .collect()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Builds `sum(w ⊙ op(x))` with a fixed random weighting so every output
    /// element contributes a distinct gradient.
    fn check_unary(op: UnaryOp, lo: f64, hi: f64) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3], lo, hi);
            let w = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            let eval = |x: &Tensor| {
                let mut g = Graph::new();
                let xn = g.leaf(x.clone());
                let wn = g.leaf(w.clone());
                let y = g.unary(op, xn).unwrap();
                let p = g.mul(y, wn).unwrap();
                let s = g.sum(p).unwrap();
                (g, xn, s)
            };
            let (mut g, xn, s) = eval(&x);
            g.backward(s).unwrap();
            let analytic = g.grad(xn).unwrap().data().to_vec();
            let numeric = numeric_grad(&x, &|x| {
                let (g, _, s) = eval(x);
                g.value(s).item()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-5, "{op:?} seed {seed}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn unary_gradients_match_central_differences() {
        check_unary(UnaryOp::Tanh, -2.0, 2.0);
        check_unary(UnaryOp::Sigmoid, -3.0, 3.0);
        check_unary(UnaryOp::Exp, -2.0, 2.0);
        check_unary(UnaryOp::Log, 0.2, 3.0);
        check_unary(UnaryOp::Square, -2.0, 2.0);
        check_unary(UnaryOp::Scale(-1.7), -2.0, 2.0);
    }

    #[test]
    fn binary_gradients_match_central_differences() {
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            for scalar_rhs in [false, true] {
                for seed in 0..20 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let a = random_tensor(&mut rng, &[1, 4], -2.0, 2.0);
                    let b = if scalar_rhs {
                        random_tensor(&mut rng, &[1], -2.0, 2.0)
                    } else {
                        random_tensor(&mut rng, &[1, 4], -2.0, 2.0)
                    };
                    let w = random_tensor(&mut rng, &[1, 4], -1.0, 1.0);
                    let eval = |a: &Tensor, b: &Tensor| {
                        let mut g = Graph::new();
                        let an = g.leaf(a.clone());
                        let bn = g.leaf(b.clone());
                        let wn = g.leaf(w.clone());
                        let y = g.binary(op, an, bn).unwrap();
                        let y = g.square(y).unwrap();
                        let p = g.mul(y, wn).unwrap();
                        let s = g.sum(p).unwrap();
                        (g, an, bn, s)
                    };
                    let (mut g, an, bn, s) = eval(&a, &b);
                    g.backward(s).unwrap();
                    let na = numeric_grad(&a, &|a| {
                        let (g, _, _, s) = eval(a, &b);
                        g.value(s).item()
                    });
                    let nb = numeric_grad(&b, &|b| {
                        let (g, _, _, s) = eval(&a, b);
                        g.value(s).item()
                    });
                    for (x, y) in g.grad(an).unwrap().data().iter().zip(&na) {
                        assert!(rel_err(*x, *y) < 1e-5, "{op:?} lhs seed {seed}");
                    }
                    for (x, y) in g.grad(bn).unwrap().data().iter().zip(&nb) {
                        assert!(rel_err(*x, *y) < 1e-5, "{op:?} rhs seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_values_and_gradient() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[11.0]);
        let s = g.sum(ab).unwrap();
        g.backward(s).unwrap();
        let ga = g.grad(a).unwrap().data();
        assert!((ga[0] - 3.0).abs() < 1e-12 && (ga[1] - 4.0).abs() < 1e-12);

        assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_random_shapes() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
            let eval = |a: &Tensor, b: &Tensor| {
                let mut g = Graph::new();
                let an = g.leaf(a.clone());
                let bn = g.leaf(b.clone());
                let p = g.matmul(an, bn).unwrap();
                let t = g.tanh(p).unwrap();
                let s = g.sum(t).unwrap();
                (g, an, bn, s)
            };
            let (mut g, an, bn, s) = eval(&a, &b);
            g.backward(s).unwrap();
            let na = numeric_grad(&a, &|a| eval(a, &b).0.value(eval(a, &b).3).item());
            let nb = numeric_grad(&b, &|b| eval(&a, b).0.value(eval(&a, b).3).item());
            for (x, y) in g.grad(an).unwrap().data().iter().zip(&na) {
                assert!(rel_err(*x, *y) < 1e-5);
            }
            for (x, y) in g.grad(bn).unwrap().data().iter().zip(&nb) {
                assert!(rel_err(*x, *y) < 1e-5);
            }
        }
    }

    #[test]
    fn structural_ops_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let t = random_tensor(&mut rng, &[4, 6], -1.0, 1.0);
            let w = random_tensor(&mut rng, &[1, 3], -1.0, 1.0);
            let eval = |t: &Tensor| {
                let mut g = Graph::new();
                let tn = g.leaf(t.clone());
                let wn = g.leaf(w.clone());
                let r = g.row(tn, 2).unwrap();
                let s1 = g.slice_cols(r, 1, 3).unwrap();
                let s2 = g.slice_cols(tn, 3, 3).unwrap();
                let s2 = g.sum(s2).unwrap();
                let y = g.mul(s1, wn).unwrap();
                let y = g.sigmoid(y).unwrap();
                let y = g.mul(y, s2).unwrap();
                let s = g.sum(y).unwrap();
                (g, tn, s)
            };
            let (mut g, tn, s) = eval(&t);
            g.backward(s).unwrap();
            let num = numeric_grad(&t, &|t| {
                let (g, _, s) = eval(t);
                g.value(s).item()
            });
            for (x, y) in g.grad(tn).unwrap().data().iter().zip(&num) {
                assert!(rel_err(*x, *y) < 1e-5);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let zero = g.constant(0.0);
        let t = g.tanh(zero).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let one = g.constant(1.0);
        let l = g.log(one).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let s = g.sigmoid(zero).unwrap();
        g.backward(s).unwrap();
        assert!((g.grad(zero).unwrap().item() - 0.25).abs() < 1e-12);
        // finite-difference check of the same derivative
        let fd = (sigmoid(H) - sigmoid(-H)) / (2.0 * H);
        assert!((fd - 0.25).abs() < 1e-9);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let neg = g.leaf(Tensor::row(vec![1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
        let big = g.constant(1000.0);
        assert!(matches!(g.exp(big), Err(Error::Domain { .. })));
        let a = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let b = g.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::new();
        let uniform = g.leaf(Tensor::row(vec![0.3; 4]));
        let l = g.softmax_cross_entropy(uniform, 2).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sharp = g.leaf(Tensor::row(vec![10.0, -10.0]));
        let l = g.softmax_cross_entropy(sharp, 0).unwrap();
        // direct evaluation: log(1 + e^-20)
        let direct = (-20f64).exp().ln_1p();
        assert!((g.value(l).item() - direct).abs() / direct < 1e-12);
        assert!((g.value(l).item() - 2.06e-9).abs() < 1e-11);

        assert!(matches!(
            g.softmax_cross_entropy(sharp, 2),
            Err(Error::IndexOutOfRange { .. })
        ));

        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let logits = random_tensor(&mut rng, &[1, 7], -3.0, 3.0);
            let target = rng.random_range(0..7);
            let eval = |x: &Tensor| {
                let mut g = Graph::new();
                let xn = g.leaf(x.clone());
                let l = g.softmax_cross_entropy(xn, target).unwrap();
                (g, xn, l)
            };
            let (mut g, xn, l) = eval(&logits);
            g.backward(l).unwrap();
            let num = numeric_grad(&logits, &|x| {
                let (g, _, l) = eval(x);
                g.value(l).item()
            });
            let probs = softmax(logits.data());
            for (j, (a, n)) in g.grad(xn).unwrap().data().iter().zip(&num).enumerate() {
                assert!(rel_err(*a, *n) < 1e-6);
                let expected = probs[j] - if j == target { 1.0 } else { 0.0 };
                assert!((a - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_rules() {
        // constant root: nothing reachable but the root itself
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(3.0);
        g.backward(c).unwrap();
        assert!(g.grad(p).is_none());

        // sum of squares: 2 * param
        let sq = g.square(p).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);

        // repeated calls accumulate
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(p).is_none());

        assert!(matches!(g.backward(sq), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn node_used_twice_sums_contributions() {
        // f(x) = x*x + x, f'(x) = 2x + 1
        let mut g = Graph::new();
        let x = g.constant(1.5);
        let xx = g.mul(x, x).unwrap();
        let f = g.add(xx, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn deep_tanh_chain_matches_finite_differences() {
        let w = 1.0;
        let eval = |x: f64| {
            let mut g = Graph::new();
            let xn = g.constant(x);
            let mut h = xn;
            for _ in 0..50 {
                let s = g.scale(h, w).unwrap();
                h = g.tanh(s).unwrap();
            }
            (g, xn, h)
        };
        for x0 in [0.05, 0.3, -0.7] {
            let (mut g, xn, h) = eval(x0);
            g.backward(h).unwrap();
            let analytic = g.grad(xn).unwrap().item();
            let numeric =
                (eval(x0 + H).0.value(eval(x0 + H).2).item() - eval(x0 - H).0.value(eval(x0 - H).2).item()) / (2.0 * H);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
            assert!(analytic.abs() > 1e-3 && rel < 1e-4, "{analytic} vs {numeric}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::row(vec![0.1, -0.4, 2.0]));
            let t = g.tanh(a).unwrap();
            let e = g.exp(t).unwrap();
            let s = g.sum(e).unwrap();
            g.value(s).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
