//! A small reverse-mode autodiff tape over row-major 2-D `f64` tensors.
//!
//! Both model families are expressed as graphs built per batch; gradients
//! are checked against central finite differences in the test suites.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, o: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols), "elementwise shape mismatch");
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }
}

/// `C = op(A) * op(B)`, where `ta`/`tb` select transposition.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimensions differ");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    let mut out = vec![0.0; m * n];
    // split rows of C into blocks; every row is computed by the same kernel
    // call pattern, so results do not depend on thread count
    const BLOCK: usize = 2048;
    if m * n * k > 1 << 22 && m > BLOCK {
        out.par_chunks_mut(BLOCK * n).enumerate().for_each(|(bi, chunk)| {
            let r0 = bi * BLOCK;
            let rows = chunk.len() / n;
            unsafe {
                matrixmultiply::dgemm(
                    rows, k, n, 1.0,
                    a.data.as_ptr().offset(r0 as isize * rsa), rsa, csa,
                    b.data.as_ptr(), rsb, csb,
                    0.0, chunk.as_mut_ptr(), n as isize, 1,
                );
            }
        });
    } else if m > 0 && n > 0 {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.data.as_ptr(), rsa, csa,
                b.data.as_ptr(), rsb, csb,
                0.0, out.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    Tensor::new(m, n, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A differentiable operation implemented outside the built-in set.
pub trait CustomOp: Send + Sync {
    /// Gradients with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    /// Row-wise normalization; stores the per-row inverse std.
    LayerNorm(Var, Vec<f64>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named parameter leaf; see [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.variable(t);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = gemm(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Var {
        let (t, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, t.cols), "row broadcast shape mismatch");
        let mut out = t.clone();
        for chunk in out.data.chunks_mut(t.cols) {
            for (o, &b) in chunk.iter_mut().zip(&r.data) {
                if mul {
                    *o *= b
                } else {
                    *o += b
                }
            }
        }
        let ng = self.ng(a) || self.ng(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        self.push(out, op, ng)
    }

    /// `a + row`, broadcasting a `1 x cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Mean over all elements, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows * w);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let v = Tensor::new(t.rows, w, data);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.rows);
        let v = Tensor::new(end - start, t.cols, t.data[start * t.cols..end * t.cols].to_vec());
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(index.len() * t.cols);
        for &i in index.iter() {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(index.len(), t.cols, data);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, index), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let mut inv = Vec::with_capacity(t.rows);
        for chunk in out.data.chunks_mut(t.cols) {
            let mu = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let var = chunk.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / chunk.len() as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for x in chunk.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv), ng)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|p| self.ng(*p));
        self.push(output, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_inputs(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let give = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    give(*a, gemm(g, false, val(*b), true), grads);
                }
                if self.ng(*b) {
                    give(*b, gemm(val(*a), true, g, false), grads);
                }
            }
            Op::Add(a, b) => {
                give(*a, g.clone(), grads);
                give(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                give(*a, g.clone(), grads);
                give(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    give(*a, g.zip(val(*b), |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    give(*b, g.zip(val(*a), |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, row) => {
                give(*a, g.clone(), grads);
                if self.ng(*row) {
                    let mut s = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (o, x) in s.data.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    give(*row, s, grads);
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data.chunks_mut(g.cols) {
                        for (o, r) in chunk.iter_mut().zip(&tr.data) {
                            *o *= r;
                        }
                    }
                    give(*a, ga, grads);
                }
                if self.ng(*row) {
                    let mut s = Tensor::zeros(1, g.cols);
                    for (gc, ac) in g.data.chunks(g.cols).zip(ta.data.chunks(g.cols)) {
                        for ((o, x), y) in s.data.iter_mut().zip(gc).zip(ac) {
                            *o += x * y;
                        }
                    }
                    give(*row, s, grads);
                }
            }
            Op::Scale(a, k) => give(*a, g.map(|x| x * k), grads),
            Op::Sigmoid(a) => give(*a, g.zip(&node.value, |x, s| x * s * (1.0 - s)), grads),
            Op::Tanh(a) => give(*a, g.zip(&node.value, |x, t| x * (1.0 - t * t)), grads),
            Op::Abs(a) => give(*a, g.zip(val(*a), |x, v| x * v.signum() * f64::from(v != 0.0)), grads),
            Op::Square(a) => give(*a, g.zip(val(*a), |x, v| 2.0 * x * v), grads),
            Op::Mean(a) => {
                let t = val(*a);
                give(*a, Tensor::full(t.rows, t.cols, g.item() / t.len() as f64), grads);
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    ga.data[r * t.cols + start..r * t.cols + start + g.cols]
                        .copy_from_slice(g.row(r));
                }
                give(*a, ga, grads);
            }
            Op::SliceRows(a, start) => {
                let t = val(*a);
                let mut ga = Tensor::zeros(t.rows, t.cols);
                ga.data[start * t.cols..start * t.cols + g.len()].copy_from_slice(&g.data);
                give(*a, ga, grads);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = val(*p).cols;
                    if self.ng(*p) {
                        let mut gp = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            gp.extend_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        give(*p, Tensor::new(g.rows, w, gp), grads);
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let t = val(*p);
                    if self.ng(*p) {
                        let d = g.data[r0 * g.cols..(r0 + t.rows) * g.cols].to_vec();
                        give(*p, Tensor::new(t.rows, t.cols, d), grads);
                    }
                    r0 += t.rows;
                }
            }
            Op::GatherRows(a, index) => {
                let t = val(*a);
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for (o, &i) in index.iter().enumerate() {
                    for c in 0..t.cols {
                        ga.data[i * t.cols + c] += g.data[o * t.cols + c];
                    }
                }
                give(*a, ga, grads);
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..y.cols {
                        ga.data[r * y.cols + c] = inv[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                give(*a, ga, grads);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                for (v, t) in inputs.iter().zip(gs) {
                    give(*v, t, grads);
                }
            }
        }
    }

    /// Gradients of every named parameter present in the graph.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &self.params {
            let t = self.value(*v);
            let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn rand_t(rows: usize, cols: usize, s: u64) -> Tensor {
        let mut rng = seed::rng(s, "graph-test", &[]);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(build(x))/dx for every element of x.
    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let out = build(&mut g, xv);
        let grads = g.backward(out);
        let an = grads.get(xv).cloned().unwrap_or(Tensor::zeros(x.rows, x.cols));
        let h = 1e-6;
        for i in 0..x.len() {
            let f = |d: f64| {
                let mut xp = x.clone();
                xp.data[i] += d;
                let mut g = Graph::new();
                let xv = g.variable(xp);
                let o = build(&mut g, xv);
                g.value(o).item()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let err = (fd - an.data[i]).abs() / fd.abs().max(an.data[i].abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: fd {fd} vs analytic {}", an.data[i]);
        }
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let w = rand_t(3, 4, 1);
        let row = rand_t(1, 4, 2);
        check(rand_t(5, 3, 3), |g, x| {
            let w = g.constant(w.clone());
            let r = g.constant(row.clone());
            let y = g.matmul(x, w);
            let y = g.add_row(y, r);
            let y = g.mul_row(y, r);
            let s = g.sigmoid(y);
            let t = g.tanh(y);
            let m = g.mul(s, t);
            let q = g.sub(m, y);
            let q = g.square(q);
            let a = g.slice_cols(q, 1, 3);
            let b = g.slice_rows(q, 2, 5);
            let b = g.slice_cols(b, 0, 2);
            let c = g.concat_rows(&[a, b]);
            let c = g.layer_norm(c);
            let d = g.gather_rows(c, Arc::new(vec![0, 3, 3, 7, 1]));
            let e = g.concat_cols(&[d, d]);
            let e = g.scale(e, 0.7);
            let e = g.abs(e);
            g.mean(e)
        });
    }

    #[test]
    fn matmul_grads_both_sides() {
        let a = rand_t(4, 6, 5);
        check(rand_t(6, 2, 6), |g, x| {
            let a = g.variable(a.clone());
            let y = g.matmul(a, x);
            let y = g.mul(y, y);
            g.mean(y)
        });
        let b = rand_t(6, 2, 7);
        check(rand_t(4, 6, 8), |g, x| {
            let b = g.constant(b.clone());
            let y = g.matmul(x, b);
            let y = g.tanh(y);
            g.mean(y)
        });
    }

    #[test]
    fn blocked_gemm_matches_plain() {
        let a = rand_t(5000, 40, 9);
        let b = rand_t(40, 30, 10);
        let c = gemm(&a, false, &b, false);
        for &(r, col) in &[(0, 0), (2047, 5), (2048, 29), (4999, 17)] {
            let want: f64 = (0..40).map(|k| a.get(r, k) * b.get(k, col)).sum();
            assert!((c.get(r, col) - want).abs() < 1e-12);
        }
        let ct = gemm(&b, true, &a, true);
        assert!((ct.get(3, 4000) - c.get(4000, 3)).abs() < 1e-12);
    }

    #[test]
    fn param_grads_accumulate_reuse() {
        let mut g = Graph::new();
        let p = g.param("w", Tensor::scalar(3.0));
        let q = g.param("w", Tensor::scalar(3.0));
        let y = g.mul(p, q);
        let grads = g.backward(y);
        assert_eq!(g.param_grads(&grads)["w"].item(), 6.0);
    }
}
