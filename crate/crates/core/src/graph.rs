//! Minimal matrix-level reverse-mode tape.
//!
//! Every operation appends a node holding its value; [`Graph::backward`] walks
//! the nodes in reverse and accumulates adjoints. Nodes that receive no
//! adjoint are skipped, so unused branches (for example the decoder passes of
//! losing PIT permutations) cost nothing on the way back.

use crate::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 x n` row over every row of `a`.
    AddRow(Var, Var),
    Tanh(Var),
    Scale(Var, T),
    /// Concatenate frames `t - r ..= t + r` (zero padded) along columns.
    Context(Var, usize),
    /// Mean over consecutive groups of `s` rows; the remainder is dropped.
    AvgPool(Var, usize),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SoftmaxRows(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Matrix<T>) -> Var {
        if id >= self.params.len() {
            self.params.resize(id + 1, None);
        }
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.params[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension mismatch");
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        matmul_nt_acc(
            av.as_slice(),
            bv.as_slice(),
            out.as_mut_slice(),
            av.rows(),
            av.cols(),
            bv.rows(),
        );
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), T::one());
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.cols(), "bias width mismatch");
        for r in 0..value.rows() {
            for (x, &y) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    /// `a * w + b`
    pub fn affine(&mut self, a: Var, w: Var, b: Var) -> Var {
        let m = self.matmul(a, w);
        self.add_row(m, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn context(&mut self, a: Var, radius: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let width = 2 * radius + 1;
        let mut out = Matrix::zeros(rows, cols * width);
        for t in 0..rows {
            for j in 0..width {
                let src = t as isize + j as isize - radius as isize;
                if src >= 0 && (src as usize) < rows {
                    out.row_mut(t)[j * cols..(j + 1) * cols].copy_from_slice(av.row(src as usize));
                }
            }
        }
        self.push(out, Op::Context(a, radius))
    }

    pub fn avg_pool(&mut self, a: Var, stride: usize) -> Var {
        let av = self.value(a);
        let rows = av.rows() / stride;
        let inv = T::one() / T::from_usize_lossy(stride);
        let mut out = Matrix::zeros(rows, av.cols());
        for t in 0..rows {
            for u in 0..stride {
                for (o, &x) in out.row_mut(t).iter_mut().zip(av.row(t * stride + u)) {
                    *o += x;
                }
            }
            out.row_mut(t).iter_mut().for_each(|o| *o *= inv);
        }
        self.push(out, Op::AvgPool(a, stride))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let av = self.value(a);
        let value = Matrix::from_vec(1, av.cols(), av.row(r).to_vec());
        self.push(value, Op::Row(a, r))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(pv.as_slice());
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&crate::scalar::softmax(av.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Back-propagates the given output adjoints. Returns one gradient per
    /// parameter id seen by this graph (`None` if no adjoint reached it).
    pub fn backward(&self, seeds: &[(Var, &Matrix<T>)]) -> Vec<Option<Matrix<T>>> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape mismatch");
            accumulate(&mut grads, v, g.clone());
        }
        let mut param_grads = vec![None; self.params.len()];
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = Matrix::zeros(m, k);
                    matmul_nt_acc(g.as_slice(), bv.as_slice(), ga.as_mut_slice(), m, n, k);
                    let mut gb = Matrix::zeros(k, n);
                    matmul_tn_acc(av.as_slice(), g.as_slice(), gb.as_mut_slice(), m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut ga = Matrix::zeros(m, k);
                    matmul_acc(g.as_slice(), bv.as_slice(), ga.as_mut_slice(), m, n, k);
                    let mut gb = Matrix::zeros(n, k);
                    matmul_tn_acc(g.as_slice(), av.as_slice(), gb.as_mut_slice(), m, n, k);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &y) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *x *= T::one() - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Context(a, radius) => {
                    let (rows, cols) = self.value(*a).shape();
                    let width = 2 * radius + 1;
                    let mut ga = Matrix::zeros(rows, cols);
                    for t in 0..rows {
                        for j in 0..width {
                            let src = t as isize + j as isize - *radius as isize;
                            if src >= 0 && (src as usize) < rows {
                                let gr = &g.row(t)[j * cols..(j + 1) * cols];
                                for (x, &y) in ga.row_mut(src as usize).iter_mut().zip(gr) {
                                    *x += y;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::AvgPool(a, stride) => {
                    let (rows, cols) = self.value(*a).shape();
                    let inv = T::one() / T::from_usize_lossy(*stride);
                    let mut ga = Matrix::zeros(rows, cols);
                    for t in 0..g.rows() {
                        for u in 0..*stride {
                            for (x, &y) in ga.row_mut(t * stride + u).iter_mut().zip(g.row(t)) {
                                *x += y * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Row(a, r) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.row_mut(*r).copy_from_slice(g.row(0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let gp = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let gp =
                            Matrix::from_vec(rows, cols, g.as_slice()[offset * cols..(offset + rows) * cols].to_vec());
                        offset += rows;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&gi, &yi)| gi * yi).sum();
                        for ((x, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *x = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        param_grads
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar objective `sum(out * weights)` for a fixed weight matrix.
    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Matrix<f64>) {
        let mut g = Graph::new();
        let x = g.param(0, &input);
        let out = build(&mut g, x);
        let shape = g.value(out).shape();
        let w = Matrix::from_fn(shape.0, shape.1, |r, c| ((r * 31 + c * 17) % 7) as f64 * 0.25 - 0.7);
        let grads = g.backward(&[(out, &w)]);
        let analytic = grads[0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));

        let objective = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let x = g.param(0, m);
            let out = build(&mut g, x);
            g.value(out)
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..input.as_slice().len() {
            let mut plus = input.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = input.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.as_slice()[i];
            assert!(
                (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn sample(rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.13 - 0.6)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let w = sample(3, 4);
        check(
            |g, x| {
                let w = g.input(w.clone());
                g.matmul(x, w)
            },
            sample(5, 3),
        );
        check(
            |g, x| {
                let w = g.input(sample(4, 3));
                g.matmul(w, x)
            },
            sample(3, 2),
        );
        check(
            |g, x| {
                let k = g.input(sample(6, 3));
                g.matmul_nt(x, k)
            },
            sample(2, 3),
        );
        check(
            |g, x| {
                let q = g.input(sample(2, 3));
                g.matmul_nt(q, x)
            },
            sample(6, 3),
        );
        check(
            |g, x| {
                let b = g.input(sample(1, 3));
                g.add_row(x, b)
            },
            sample(4, 3),
        );
        check(
            |g, x| {
                let a = g.input(sample(4, 3));
                g.add_row(a, x)
            },
            sample(1, 3),
        );
        check(|g, x| g.tanh(x), sample(3, 3));
        check(|g, x| g.scale(x, 0.37), sample(2, 3));
        check(|g, x| g.context(x, 1), sample(5, 2));
        check(|g, x| g.context(x, 2), sample(3, 2));
        check(|g, x| g.avg_pool(x, 2), sample(7, 3));
        check(|g, x| g.row(x, 2), sample(4, 3));
        check(
            |g, x| {
                let t = g.tanh(x);
                g.concat_cols(&[x, t, x])
            },
            sample(2, 3),
        );
        check(
            |g, x| {
                let a = g.row(x, 1);
                let b = g.row(x, 0);
                g.stack_rows(&[a, b, a])
            },
            sample(3, 4),
        );
        check(|g, x| g.softmax_rows(x), sample(3, 5));
        check(
            |g, x| {
                let y = g.tanh(x);
                g.add(x, y)
            },
            sample(2, 2),
        );
    }

    #[test]
    fn params_are_shared_leaves() {
        let mut g = Graph::<f64>::new();
        let m = sample(2, 2);
        let a = g.param(3, &m);
        let b = g.param(3, &m);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let grads = g.backward(&[(s, &Matrix::filled(2, 2, 1.0))]);
        assert_eq!(grads.len(), 4);
        assert_eq!(grads[3].as_ref().unwrap(), &Matrix::filled(2, 2, 2.0));
        assert!(grads[0].is_none());
    }

    #[test]
    fn avg_pool_drops_remainder() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Matrix::from_fn(9, 1, |r, _| r as f64));
        let p = g.avg_pool(x, 4);
        assert_eq!(g.value(p).as_slice(), &[1.5, 5.5]);
    }
}
