//! A small tape-based reverse-mode differentiation engine over dense
//! row-major matrices.
//!
//! Each forward operation appends a node holding its value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse, seeding the
//! output with a caller-supplied adjoint, and returns the adjoint of every
//! node. Parameters enter the tape as borrowed leaves, so building a graph
//! for pure inference does not copy weights.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    /// One-hot rows: row `i` has a 1 at column `indices[i]`.
    pub fn one_hot_rows(indices: &[usize], cols: usize) -> Self {
        let mut m = Self::zeros(indices.len(), cols);
        for (r, &c) in indices.iter().enumerate() {
            m.data[r * cols + c] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `self^T * other`.
    fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    /// `a + 1 * row` where `row` is `1 x cols`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// Column means, `1 x cols`.
    MeanRows(Var),
    SelectRow(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

/// Recording of one evaluation. Lifetime `'a` bounds borrowed leaves.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value (parameters).
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    /// Leaf that owns its value (inputs, constants).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Matrix::from_vec(x.rows, x.cols, data);
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "broadcast operand must be a row");
        assert_eq!(x.cols, r.cols, "broadcast width");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(Cow::Owned(out), Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Matrix::from_vec(x.rows, x.cols, data);
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        self.push(Cow::Owned(out), Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(Cow::Owned(out), Op::Tanh(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        self.push(Cow::Owned(out), Op::MeanRows(a))
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        assert!(r < x.rows, "row index out of range");
        let out = Matrix::row_vector(x.row(r).to_vec());
        self.push(Cow::Owned(out), Op::SelectRow(a, r))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero mass.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        self.push(Cow::Owned(out), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Cow::Owned(out), Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Cow::Owned(Matrix::from_vec(1, 1, vec![s])), Op::SumAll(a))
    }

    /// Propagates `seed` (the adjoint of `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(b));
                    let gb = self.value(a).matmul_at(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, row, gr);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(a), self.value(b));
                    let ga = zip_map(&g, y, |p, q| p * q);
                    let gb = zip_map(&g, x, |p, q| p * q);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale(a, k) => {
                    let ga = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * k).collect());
                    accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |p, y| p * (1.0 - y * y));
                    accumulate(&mut grads, a, ga);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(a).rows;
                    let inv = 1.0 / rows as f64;
                    let mut ga = Matrix::zeros(rows, g.cols);
                    for i in 0..rows {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(&g.data) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SelectRow(a, r) => {
                    let x = self.value(a);
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    ga.row_mut(r).copy_from_slice(&g.data);
                    accumulate(&mut grads, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = Matrix::zeros(p.rows, p.cols);
                    for i in 0..p.rows {
                        let (pr, gr) = (p.row(i), g.row(i));
                        let dot: f64 = pr.iter().zip(gr).filter(|(q, _)| **q > 0.0).map(|(q, h)| q * h).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = if pr[j] > 0.0 { pr[j] * (gr[j] - dot) } else { 0.0 };
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let lp = &node.value;
                    let mut ga = Matrix::zeros(lp.rows, lp.cols);
                    for i in 0..lp.rows {
                        let gr = g.row(i);
                        let total: f64 = gr.iter().sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = gr[j] - lp.get(i, j).exp() * total;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let x = self.value(a);
                    let ga = Matrix::from_vec(x.rows, x.cols, vec![g.data[0]; x.rows * x.cols]);
                    accumulate(&mut grads, a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

/// Adjoints of every node reachable from the seeded output.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Scalar test function touching every op; returns the value and
    /// gradients with respect to the three inputs.
    fn graph(a: &Matrix, b: &Matrix, c: &Matrix) -> (f64, [Matrix; 3]) {
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.param(a), tape.param(b), tape.param(c));
        let h = tape.matmul(va, vb);
        let pooled = tape.mean_rows(h);
        let h = tape.add_row(h, pooled);
        let h = tape.tanh(h);
        let bias = tape.select_row(vc, 1);
        let h = tape.add_row(h, bias);
        let p = tape.softmax_rows(h);
        let lp = tape.log_softmax_rows(h);
        let m = tape.mul(p, lp);
        let h2 = tape.add(m, h);
        let s = tape.scale(h2, 0.7);
        let out = tape.sum_all(s);
        let v = tape.value(out).data[0];
        let mut g = tape.backward(out, Matrix::from_vec(1, 1, vec![1.0]));
        let ga = g.take(va).unwrap();
        let gb = g.take(vb).unwrap();
        let gc = g.take(vc).unwrap();
        (v, [ga, gb, gc])
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (r, k, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..5));
            let mut inputs = [random(r, k, &mut rng), random(k, c, &mut rng), random(3, c, &mut rng)];
            let (_, grads) = graph(&inputs[0], &inputs[1], &inputs[2]);
            let h = 1e-6;
            for which in 0..3 {
                for idx in 0..inputs[which].data.len() {
                    let orig = inputs[which].data[idx];
                    inputs[which].data[idx] = orig + h;
                    let (fp, _) = graph(&inputs[0], &inputs[1], &inputs[2]);
                    inputs[which].data[idx] = orig - h;
                    let (fm, _) = graph(&inputs[0], &inputs[1], &inputs[2]);
                    inputs[which].data[idx] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads[which].data[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel < 1e-4, "input {which}[{idx}]: fd={fd} analytic={an}");
                }
            }
        }
    }

    #[test]
    fn softmax_handles_negative_infinity() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(vec![0.0, f64::NEG_INFINITY, 1.0]));
        let p = tape.softmax_rows(x);
        assert_eq!(tape.value(p).data[1], 0.0);
        let g = tape.backward(p, Matrix::row_vector(vec![1.0, 5.0, -1.0]));
        assert!(g.get(x).unwrap().is_finite());
        assert_eq!(g.get(x).unwrap().data[1], 0.0);
    }

    #[test]
    fn unused_inputs_get_no_gradient() {
        let a = Matrix::zeros(2, 2);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vb = tape.constant(Matrix::zeros(2, 2));
        let out = tape.sum_all(vb);
        let g = tape.backward(out, Matrix::from_vec(1, 1, vec![1.0]));
        assert!(g.get(va).is_none());
        assert!(g.get(vb).is_some());
    }
}
