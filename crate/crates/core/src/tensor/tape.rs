//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so the node list is already a topological order and the backward
//! pass is a single reverse sweep. One tape serves one training step; build a
//! fresh tape for the next batch.

use crate::error::{Error, Result};
use crate::tensor::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherCols(Var, Vec<usize>),
    RowL2Norm(Var),
    SqDist(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backpropagated: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed to it.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        }),
    }
}

fn broadcast_zip(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return Matrix::from_vec(
            shape.0,
            shape.1,
            a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    Matrix::from_fn(shape.0, shape.1, |i, j| {
        f(
            a.get(i.min(a.rows() - 1), j.min(a.cols() - 1)),
            b.get(i.min(b.rows() - 1), j.min(b.cols() - 1)),
        )
    })
}

/// Sum `g` down to `shape`, undoing a row/column broadcast.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (i.min(shape.0 - 1), j.min(shape.1 - 1));
            out.set(oi, oj, out.get(oi, oj) + g.get(i, j));
        }
    }
    out
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub(crate) fn sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum()
    })
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, va, vb)?;
        let value = broadcast_zip(va, vb, shape, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; either operand may be a row vector, column vector or 1×1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Matrix::scalar(c));
        self.add(a, k).expect("scalar broadcast always fits")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// `max(a, floor)` elementwise; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Per-row sum across columns: `b×m → b×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let sums: Vec<f64> = (0..va.rows()).map(|i| va.row(i).iter().sum()).collect();
        let value = Matrix::column(&sums);
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Per-column mean across rows: `b×m → 1×m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).column_means();
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::hconcat(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Numerically stable `log(softmax(a))` per row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Columns of `a` at `indices`, in the given order. Gradient scatters back.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&j| j >= va.cols()) {
            return Err(Error::Bounds {
                index: bad,
                len: va.cols(),
            });
        }
        let value = Matrix::from_fn(va.rows(), indices.len(), |i, j| va.get(i, indices[j]));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherCols(a, indices.to_vec()), rg))
    }

    /// Euclidean norm of each row as a `b×1` column. Zero rows are rejected.
    pub fn rowwise_l2norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::contract("rowwise_l2norm of an empty matrix"));
        }
        let mut norms = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let n = dot(va.row(i), va.row(i)).sqrt();
            if n == 0.0 {
                return Err(Error::ZeroRow { row: i });
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Matrix::column(&norms), Op::RowL2Norm(a), rg))
    }

    /// `out[i][j] = ‖a_i − b_j‖²` over rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Dimension {
                op: "sq_dist",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let value = sq_dist(va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::SqDist(a, b), rg))
    }

    /// Accumulate gradients of the scalar `loss` into every reachable node.
    ///
    /// A tape can be swept once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backpropagated {
            return Err(Error::contract("backward already ran on this tape"));
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contrib) in self.local_grads(node, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc
                        .as_mut_slice()
                        .iter_mut()
                        .zip(contrib.as_slice())
                        .for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Vec<(Var, Matrix)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b)).expect("shapes checked in forward");
                let gb = val(*a).transpose().matmul(g).expect("shapes checked in forward");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a).shape())),
                (*b, reduce_to(g.clone(), val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), val(*a).shape())),
                (*b, reduce_to(g.scale(-1.0), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_zip(g, vb, g.shape(), |x, y| x * y);
                let gb = broadcast_zip(g, va, g.shape(), |x, y| x * y);
                vec![(*a, reduce_to(ga, va.shape())), (*b, reduce_to(gb, vb.shape()))]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = broadcast_zip(g, vb, g.shape(), |x, d| x / d);
                // d(a/b)/db = -y/b
                let gy = g.zip_map(y, |x, q| x * q).expect("same shape");
                let gb = broadcast_zip(&gy, vb, g.shape(), |x, d| -x / d);
                vec![(*a, reduce_to(ga, va.shape())), (*b, reduce_to(gb, vb.shape()))]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 })
                    .expect("same shape"),
            )],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |x, t| x * (1.0 - t * t)).expect("same shape"))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |x, s| x * s * (1.0 - s)).expect("same shape"))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, v| x / v).expect("same shape"))],
            Op::ClampMin(a, floor) => vec![(
                *a,
                g.zip_map(val(*a), |x, v| if v > *floor { x } else { 0.0 })
                    .expect("same shape"),
            )],
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0)))]
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64))]
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let n = r as f64;
                vec![(*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) / n))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = val(p).shape();
                        let piece = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        offset += c;
                        (p, piece)
                    })
                    .collect()
            }
            Op::SoftmaxRows(a) => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = dot(g.row(i), y.row(i));
                    for j in 0..y.cols() {
                        out.set(i, j, y.get(i, j) * (g.get(i, j) - inner));
                    }
                }
                vec![(*a, out)]
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for j in 0..y.cols() {
                        out.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                    }
                }
                vec![(*a, out)]
            }
            Op::GatherCols(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in indices.iter().enumerate() {
                        out.set(i, j, out.get(i, j) + g.get(i, k));
                    }
                }
                vec![(*a, out)]
            }
            Op::RowL2Norm(a) => {
                let va = val(*a);
                let out = Matrix::from_fn(va.rows(), va.cols(), |i, k| g.get(i, 0) * va.get(i, k) / y.get(i, 0));
                vec![(*a, out)]
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let m = va.cols();
                let mut ga = Matrix::zeros(va.rows(), m);
                let mut gb = Matrix::zeros(vb.rows(), m);
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let w = 2.0 * g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            let d = w * (va.get(i, k) - vb.get(j, k));
                            ga.set(i, k, ga.get(i, k) + d);
                            gb.set(j, k, gb.get(j, k) - d);
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let w = t.param(m(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let loss = t.sum(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w), Matrix::ones(2, 2));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::new();
        let w = t.param(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(w), m(&[vec![2.0, 4.0], vec![6.0, 8.0]]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut t = Tape::new();
        let w = t.param(Matrix::ones(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn rowwise_l2norm_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![3.0, 4.0]]));
        let n = t.rowwise_l2norm(a).unwrap();
        assert_eq!(t.value(n), &m(&[vec![5.0]]));
        let i3 = t.constant(Matrix::identity(3));
        let n = t.rowwise_l2norm(i3).unwrap();
        assert_eq!(t.value(n), &Matrix::ones(3, 1));
        let z = t.constant(m(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert!(matches!(t.rowwise_l2norm(z), Err(Error::ZeroRow { row: 1 })));
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::ones(3, 2));
        let row = t.constant(m(&[vec![1.0, 2.0]]));
        let col = t.constant(Matrix::column(&[1.0, 2.0, 3.0]));
        let r = t.add(a, row).unwrap();
        assert_eq!(t.value(r).row(2), &[2.0, 3.0]);
        let c = t.mul(a, col).unwrap();
        assert_eq!(t.value(c).row(2), &[3.0, 3.0]);
        let bad = t.constant(Matrix::ones(2, 2));
        assert!(matches!(t.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.param(Matrix::ones(2, 2));
        let c = t.constant(Matrix::ones(2, 2));
        let p = t.mul(w, c).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(c), Matrix::zeros(2, 2));
    }

    #[test]
    fn gather_cols_rejects_out_of_range() {
        let mut t = Tape::new();
        let a = t.param(Matrix::ones(2, 3));
        assert!(matches!(t.gather_cols(a, &[0, 3]), Err(Error::Bounds { index: 3, .. })));
    }
}
