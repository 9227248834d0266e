//! Wengert tape over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller than
//! its child's. `backward` walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::DiagonalMetric;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Selu(Var),
    SumCols(Var),
    Mean(Var),
    Concat(Vec<Var>),
    /// Diagonal metric evaluated per row; `jacobians` holds dG_a/dx_b per row (d×d).
    Metric { input: Var, jacobians: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    /// Adds the 1×m row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row expects a single bias row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.cols(), "add_row width");
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Multiplies row `i` of `a` by `col[i]`, where `col` is n×1.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let s = self.value(col);
        let mut value = self.value(a).clone();
        assert_eq!(s.shape(), (value.rows(), 1), "mul_col expects an n×1 column");
        let cols = value.cols();
        for (row, &si) in value.data_mut().chunks_mut(cols.max(1)).zip(s.data()) {
            for x in row.iter_mut() {
                *x *= si;
            }
        }
        self.push(Op::MulCol(a, col), value)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(selu);
        self.push(Op::Selu(a), value)
    }

    /// Per-row sum, n×m → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        self.push(Op::SumCols(a), Matrix::column(sums))
    }

    /// Mean of all entries, → 1×1.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.data().len();
        let mean = m.data().iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(a), Matrix::scalar(mean))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hconcat(&mats);
        self.push(Op::Concat(parts.to_vec()), value)
    }

    /// Row-wise diagonal of `metric` at the points in `x` (n×d → n×d).
    pub fn metric_diag<M: DiagonalMetric + ?Sized>(&mut self, x: Var, metric: &M) -> Var {
        let xs = self.value(x);
        let (n, d) = xs.shape();
        let mut diag = Matrix::zeros(n, d);
        let mut jacobians = vec![0.0; n * d * d];
        for i in 0..n {
            metric.diag_and_jacobian(xs.row(i), diag.row_mut(i), &mut jacobians[i * d * d..(i + 1) * d * d]);
        }
        self.push(Op::Metric { input: x, jacobians }, diag)
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            // Leaf gradients are kept for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transposed(self.value(*b));
                    let gb = self.value(*a).transposed_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Matrix::from_vec(1, cols, gb).unwrap());
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|v| v * c)),
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let s = self.value(*col);
                    let cols = av.cols();
                    let mut ga = g.clone();
                    let mut gs = vec![0.0; s.rows()];
                    for i in 0..s.rows() {
                        let si = s.data()[i];
                        let gi = &mut ga.data_mut()[i * cols..(i + 1) * cols];
                        gs[i] = gi.iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                        for x in gi.iter_mut() {
                            *x *= si;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, Matrix::column(gs));
                }
                Op::Selu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * selu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(n, m);
                    for i in 0..n {
                        let gi = g.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let (n, m) = self.value(*a).shape();
                    let each = g.item() / (n * m) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(n, m, each));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (n, w) = self.value(*p).shape();
                        let mut gp = Matrix::zeros(n, w);
                        for i in 0..n {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::Metric { input, jacobians } => {
                    let (n, d) = g.shape();
                    let mut gx = Matrix::zeros(n, d);
                    for i in 0..n {
                        let jac = &jacobians[i * d * d..(i + 1) * d * d];
                        let gi = g.row(i);
                        let out = gx.row_mut(i);
                        for (a, &ga) in gi.iter().enumerate() {
                            for (b, o) in out.iter_mut().enumerate() {
                                *o += ga * jac[a * d + b];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v` flattened row-major; zeros when `v` is unused.
    pub fn flat_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(m) => m.data().to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(w, w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(2.0));
        let c = tape.leaf(Matrix::scalar(5.0));
        let y = tape.scale(c, 2.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.flat_or_zeros(w, 1), vec![0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn selu_gradient_matches_central_difference() {
        let h = 1e-5;
        for &x in &[-1.0, -0.3, 0.7, 2.0] {
            let mut tape = Tape::new();
            let w = tape.leaf(Matrix::scalar(x));
            let y = tape.selu(w);
            let g = tape.backward(y).unwrap().get(w).unwrap().item();
            let fd = (selu(x + h) - selu(x - h)) / (2.0 * h);
            assert!(((g - fd) / fd).abs() < 1e-6, "x={x}: {g} vs {fd}");
        }
    }

    #[test]
    fn selu_is_continuous_at_zero() {
        assert!((selu(1e-12) - selu(-1e-12)).abs() < 1e-11);
        assert_eq!(selu(0.0), 0.0);
    }

    #[test]
    fn shared_leaf_gradients_accumulate() {
        // f(a) = sum(a * a + 2a) over a 2x2 matrix, df/da = 2a + 2.
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let sq = tape.mul(a, a);
        let two_a = tape.scale(a, 2.0);
        let s = tape.add(sq, two_a);
        let rows = tape.sum_cols(s);
        let m = tape.mean(rows);
        let g = tape.backward(m).unwrap();
        let expect: Vec<f64> = [1.0, -2.0, 0.5, 3.0].iter().map(|x| (2.0 * x + 2.0) / 2.0).collect();
        assert_eq!(g.get(a).unwrap().data(), &expect[..]);
    }
}
