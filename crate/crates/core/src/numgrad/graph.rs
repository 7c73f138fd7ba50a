//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep. Parameter leaves remember their
//! [`ParamId`]; [`Graph::accumulate`] adds their gradients into the store.

use std::collections::BTreeSet;

use super::array::{gemm, gemm_strided};
use super::{Array, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Guards zero-norm vectors in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Probability clamp used by binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Gelu { x: Var, grad: Vec<f64> },
    Log(Var),
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array, inv_std: Vec<f64> },
    Cosine { a: Var, b: Var, norm_a: Vec<f64>, norm_b: Vec<f64> },
    Bce { p: Var, target: Array },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, indices: Vec<usize> },
    MaskRows { x: Var, token: Var, mask: Vec<bool> },
    Upsample { x: Var, factor: usize },
    Im2Col { x: Var, kernel: usize },
    RelPosBias { table: Var, max_distance: usize },
    SumRowGroups { x: Var, group: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    MultiHeadAttention { q: Var, k: Var, v: Var, heads: usize, bias: Vec<Var>, weights: Vec<Array> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A differentiable computation recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: BTreeSet<ParamId>,
    no_grad: bool,
}

/// Node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable and tracked.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU value and derivative at `x`, sharing one `tanh`.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    let value = 0.5 * x * (1.0 + t);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (value, grad)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that tracks no gradients at all (evaluation / teacher passes).
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    /// Parameters in `ids` enter this graph as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Array, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that does not receive gradients.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false, None)
    }

    /// An input leaf whose gradient is tracked (used for input-sensitivity checks).
    pub fn variable(&mut self, value: Array) -> Var {
        self.leaf(value, true, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !self.frozen.contains(&id);
        self.leaf(store.value(id).clone(), trainable, Some(id))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, false);
        Ok(self.push(
            Array::matrix(m, n, out),
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            &[a, b],
        ))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(dim_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), &mut out, false);
        Ok(self.push(
            Array::matrix(m, n, out),
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x).clone().reshape(&[rows, cols])?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(dim_err(op, av, bv));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = av.dims2();
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::matrix(r, c, data)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Array {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        Array::matrix(r, c, xv.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.dims2() != (1, av.cols()) {
            return Err(dim_err(op, av, rv));
        }
        Ok(())
    }

    /// `a + row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("add_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let (r, c) = av.dims2();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        Ok(self.push(Array::matrix(r, c, data), Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("mul_row", a, row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let (r, c) = av.dims2();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x *= b;
            }
        }
        Ok(self.push(Array::matrix(r, c, data), Op::MulRow(a, row), &[a, row]))
    }

    /// `a * col`, broadcasting an `r × 1` column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (r, c) = av.dims2();
        if cv.dims2() != (r, 1) {
            return Err(dim_err("mul_col", av, cv));
        }
        let mut data = av.data().to_vec();
        for (chunk, &s) in data.chunks_exact_mut(c.max(1)).zip(cv.data()) {
            for x in chunk {
                *x *= s;
            }
        }
        Ok(self.push(Array::matrix(r, c, data), Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.unary(x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.unary(x, |a| a + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary(x, sigmoid_scalar);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope >= 0.0) {
            return Err(Error::Parameter(format!("leaky relu slope {slope} must be >= 0")));
        }
        let v = self.unary(x, |a| if a >= 0.0 { a } else { slope * a });
        Ok(self.push(v, Op::LeakyRelu(x, slope), &[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let track = !self.no_grad && self.nodes[x.0].requires_grad;
        let mut grad = Vec::with_capacity(if track { r * c } else { 0 });
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let (y, dy) = gelu_with_grad(v);
                if track {
                    grad.push(dy);
                }
                y
            })
            .collect();
        self.push(Array::matrix(r, c, data), Op::Gelu { x, grad }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.unary(x, f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    // ----- normalizations -------------------------------------------------

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature {temperature} must be > 0"
            )));
        }
        Ok(())
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut data = vec![0.0; r * c];
        for (out, row) in data.chunks_exact_mut(c.max(1)).zip(xv.data().chunks_exact(c.max(1))) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = ((v - max) / temperature).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(
            Array::matrix(r, c, data),
            Op::Softmax { x, temperature },
            &[x],
        ))
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut data = vec![0.0; r * c];
        for (out, row) in data.chunks_exact_mut(c.max(1)).zip(xv.data().chunks_exact(c.max(1))) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v / temperature - max).exp())
                    .sum::<f64>()
                    .ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / temperature - lse;
            }
        }
        Ok(self.push(
            Array::matrix(r, c, data),
            Op::LogSoftmax { x, temperature },
            &[x],
        ))
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.broadcast_row("layer_norm", x, gain)?;
        self.broadcast_row("layer_norm", x, bias)?;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, d) = xv.dims2();
        let mut xhat = vec![0.0; r * d];
        let mut out = vec![0.0; r * d];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            Array::matrix(r, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Array::matrix(r, d, xhat),
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Pairwise cosine similarity between the rows of `a` (`n × d`) and `b`
    /// (`m × d`), giving `n × m`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, d), (m, d2)) = (av.dims2(), bv.dims2());
        if d != d2 || d == 0 {
            return Err(dim_err("cosine_similarity", av, bv));
        }
        let norm = |arr: &Array, rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|i| arr.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        };
        let (norm_a, norm_b) = (norm(av, n), norm(bv, m));
        let mut dots = vec![0.0; n * m];
        gemm(n, d, m, av.data(), (d, 1), bv.data(), (1, d), &mut dots, false);
        for i in 0..n {
            for j in 0..m {
                dots[i * m + j] /= norm_a[i] * norm_b[j] + COSINE_EPS;
            }
        }
        Ok(self.push(
            Array::matrix(n, m, dots),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            &[a, b],
        ))
    }

    /// Elementwise binary cross-entropy between probabilities `p` and a
    /// constant target of the same shape, with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, target: Array) -> Result<Var> {
        let pv = self.value(p);
        if pv.dims2() != target.dims2() {
            return Err(dim_err("bce", pv, &target));
        }
        let (r, c) = pv.dims2();
        let data = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| bce_scalar(p, y))
            .collect();
        Ok(self.push(Array::matrix(r, c, data), Op::Bce { p, target }, &[p]))
    }

    // ----- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(Array::matrix(r, len, data), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(*p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        Ok(self.push(
            Array::matrix(r, total, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Rows of `x` at `indices` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let v = xv.select_rows(indices);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows where `mask` is true are replaced by the `1 × d` `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        self.broadcast_row("mask_rows", x, token)?;
        let (xv, tv) = (self.value(x), self.value(token));
        let (r, c) = xv.dims2();
        if mask.len() != r {
            return Err(Error::Contract(format!(
                "mask length {} does not match {r} rows",
                mask.len()
            )));
        }
        let mut data = xv.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].copy_from_slice(tv.data());
            }
        }
        Ok(self.push(
            Array::matrix(r, c, data),
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            &[x, token],
        ))
    }

    /// Linear interpolation along rows by an integer factor; the last source
    /// row is replicated past the end, so output length is exactly
    /// `rows · factor`.
    pub fn upsample_linear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = upsample_linear(self.value(x), factor)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Unfolds `x` (`T × c`) into `T × (kernel·c)` windows, zero padded so
    /// that output row `t` is centred on input row `t`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel {kernel} must be odd")));
        }
        let xv = self.value(x);
        let (t, c) = xv.dims2();
        let pad = kernel / 2;
        let width = kernel * c;
        let mut data = vec![0.0; t * width];
        for i in 0..t {
            for o in 0..kernel {
                let src = i as isize + o as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    data[i * width + o * c..i * width + (o + 1) * c]
                        .copy_from_slice(xv.row(src as usize));
                }
            }
        }
        Ok(self.push(
            Array::matrix(t, width, data),
            Op::Im2Col { x, kernel },
            &[x],
        ))
    }

    /// Expands a `1 × (2R+1)` table into a `len × len` bias with entry
    /// `(i, j) = table[clamp(i - j, -R, R) + R]`.
    pub fn relative_position_bias(&mut self, table: Var, len: usize) -> Result<Var> {
        let tv = self.value(table);
        let (one, width) = tv.dims2();
        if one != 1 || width % 2 == 0 {
            return Err(Error::Dimension {
                op: "relative_position_bias",
                left: tv.shape().to_vec(),
                right: vec![1, 2 * (width / 2) + 1],
            });
        }
        let max_distance = width / 2;
        let mut data = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                data[i * len + j] = tv.data()[rel_index(i, j, max_distance)];
            }
        }
        Ok(self.push(
            Array::matrix(len, len, data),
            Op::RelPosBias {
                table,
                max_distance,
            },
            &[table],
        ))
    }

    /// Sums consecutive groups of `group` rows: `(n·group) × c → n × c`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if group == 0 || r % group != 0 {
            return Err(Error::Dimension {
                op: "sum_row_groups",
                left: xv.shape().to_vec(),
                right: vec![group],
            });
        }
        let n = r / group;
        let mut data = vec![0.0; n * c];
        for i in 0..r {
            let g = i / group;
            for (o, v) in data[g * c..(g + 1) * c].iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(Array::matrix(n, c, data), Op::SumRowGroups { x, group }, &[x]))
    }

    /// Column-wise maximum over rows (`r × c → 1 × c`); ties go to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if r == 0 {
            return Err(Error::Contract("max over zero rows".into()));
        }
        let mut argmax = vec![0usize; c];
        let mut best = xv.row(0).to_vec();
        for i in 1..r {
            for j in 0..c {
                if xv.get(i, j) > best[j] {
                    best[j] = xv.get(i, j);
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Array::matrix(1, c, best), Op::MaxRows { x, argmax }, &[x]))
    }

    /// Single-head scaled dot-product attention
    /// `softmax(q kᵀ / √d + bias) · v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let d = self.value(q).cols();
        if self.value(k).cols() != d {
            return Err(dim_err("attention", self.value(q), self.value(k)));
        }
        if self.value(k).rows() != self.value(v).rows() {
            return Err(dim_err("attention", self.value(k), self.value(v)));
        }
        let scores = self.matmul_nt(q, k)?;
        let mut scores = self.scale(scores, 1.0 / (d.max(1) as f64).sqrt());
        if let Some(b) = bias {
            scores = self.add(scores, b)?;
        }
        let weights = self.softmax(scores, 1.0)?;
        self.matmul(weights, v)
    }

    /// Multi-head attention over `heads` equal column blocks of `q`, `k`
    /// and `v`, concatenated back in head order. `bias` is empty or holds one
    /// `Tq × Tk` logit bias per head.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: &[Var]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let ((tq, d), (tk, dk)) = (qv.dims2(), kv.dims2());
        if heads == 0 || d % heads != 0 || dk != d {
            return Err(dim_err("multi_head_attention", qv, kv));
        }
        if vv.dims2() != (tk, d) {
            return Err(dim_err("multi_head_attention", kv, vv));
        }
        if !bias.is_empty() && bias.len() != heads {
            return Err(Error::Contract(format!("{} bias tensors for {heads} heads", bias.len())));
        }
        for b in bias {
            if self.value(*b).dims2() != (tq, tk) {
                return Err(dim_err("multi_head_attention bias", self.value(*b), qv));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq * d];
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let o = h * dh;
            let mut w = vec![0.0; tq * tk];
            gemm_strided(tq, dh, tk, scale, &qv.data()[o..], (d, 1), &kv.data()[o..], (1, d), 0.0, &mut w, (tk, 1));
            if let Some(b) = bias.get(h) {
                add_into(&mut w, self.value(*b).data());
            }
            for row in w.chunks_exact_mut(tk.max(1)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
            gemm_strided(tq, tk, dh, 1.0, &w, (tk, 1), &vv.data()[o..], (d, 1), 0.0, &mut out[o..], (d, 1));
            weights.push(Array::matrix(tq, tk, w));
        }
        let mut parents = vec![q, k, v];
        parents.extend_from_slice(bias);
        Ok(self.push(
            Array::matrix(tq, d, out),
            Op::MultiHeadAttention {
                q,
                k,
                v,
                heads,
                bias: bias.to_vec(),
                weights,
            },
            &parents,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Array::matrix(1, 1, vec![1.0]));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter-leaf gradients into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                for (acc, v) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    /// [`Graph::backward`] followed by [`Graph::accumulate`].
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(())
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Array>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.dims2();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Array::matrix(r, c, vec![0.0; r * c]))
                .data_mut(),
        )
    }

    fn backprop(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MultiHeadAttention {
                q,
                k,
                v,
                heads,
                bias,
                weights,
            } => {
                let (tq, d) = out.dims2();
                let tk = weights[0].cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dw = vec![0.0; tq * tk];
                for (h, w) in weights.iter().enumerate() {
                    let o = h * dh;
                    let w = w.data();
                    gemm_strided(tq, dh, tk, 1.0, &gd[o..], (d, 1), &vv[o..], (1, d), 0.0, &mut dw, (tk, 1));
                    if let Some(dv) = self.grad_buf(grads, *v) {
                        gemm_strided(tk, tq, dh, 1.0, w, (1, tk), &gd[o..], (d, 1), 1.0, &mut dv[o..], (d, 1));
                    }
                    // softmax backward in place: dS = W ⊙ (dW − rowdot(dW, W))
                    for (dr, wr) in dw.chunks_exact_mut(tk).zip(w.chunks_exact(tk)) {
                        let dot: f64 = dr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        for (x, y) in dr.iter_mut().zip(wr) {
                            *x = y * (*x - dot);
                        }
                    }
                    if let Some(b) = bias.get(h) {
                        if let Some(db) = self.grad_buf(grads, *b) {
                            add_into(db, &dw);
                        }
                    }
                    if let Some(dq) = self.grad_buf(grads, *q) {
                        gemm_strided(tq, tk, dh, scale, &dw, (tk, 1), &kv[o..], (d, 1), 1.0, &mut dq[o..], (d, 1));
                    }
                    if let Some(dk) = self.grad_buf(grads, *k) {
                        gemm_strided(tk, tq, dh, scale, &dw, (1, tk), &qv[o..], (d, 1), 1.0, &mut dk[o..], (d, 1));
                    }
                }
            }
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = out.cols();
                if let Some(da) = self.grad_buf(grads, *a) {
                    if *b_transposed {
                        // b is n×k: dA = dC · b
                        gemm(m, n, k, gd, (n, 1), bv.data(), (k, 1), da, true);
                    } else {
                        // b is k×n: dA = dC · bᵀ
                        gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), da, true);
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if *b_transposed {
                        // db (n×k) = dCᵀ · a
                        gemm(n, m, k, gd, (1, n), av.data(), (k, 1), db, true);
                    } else {
                        // db (k×n) = aᵀ · dC
                        gemm(k, m, n, av.data(), (1, k), gd, (n, 1), db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, *v) {
                        add_into(d, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(bv.data()) {
                        *x += y * w;
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(av.data()) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let c = out.cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = self.grad_buf(grads, *row) {
                    for chunk in gd.chunks_exact(c) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = out.cols();
                let (av, rv) = (self.value(*a), self.value(*row));
                if let Some(d) = self.grad_buf(grads, *a) {
                    for (dc, gc) in d.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                        for ((x, y), w) in dc.iter_mut().zip(gc).zip(rv.data()) {
                            *x += y * w;
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *row) {
                    for (gc, ac) in gd.chunks_exact(c).zip(av.data().chunks_exact(c)) {
                        for ((x, y), w) in d.iter_mut().zip(gc).zip(ac) {
                            *x += y * w;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = out.cols().max(1);
                let (av, cv) = (self.value(*a), self.value(*col));
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((dc, gc), &s) in d.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(cv.data()) {
                        for (x, y) in dc.iter_mut().zip(gc) {
                            *x += y * s;
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *col) {
                    for ((x, gc), ac) in d.iter_mut().zip(gd.chunks_exact(c)).zip(av.data().chunks_exact(c)) {
                        *x += gc.iter().zip(ac).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (a, y) in d.iter_mut().zip(gd) {
                        *a += y * s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    add_into(d, gd);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((a, y), s) in d.iter_mut().zip(gd).zip(out.data()) {
                        *a += y * s * (1.0 - s);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((a, y), v) in d.iter_mut().zip(gd).zip(xv.data()) {
                        *a += if *v >= 0.0 { *y } else { slope * y };
                    }
                }
            }
            Op::Gelu { x, grad } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((a, y), dy) in d.iter_mut().zip(gd).zip(grad) {
                        *a += y * dy;
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((a, y), v) in d.iter_mut().zip(gd).zip(xv.data()) {
                        *a += y / v;
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                let c = out.cols().max(1);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dc, gc), yc) in d
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                        for ((a, gy), y) in dc.iter_mut().zip(gc).zip(yc) {
                            *a += y * (gy - dot) / temperature;
                        }
                    }
                }
            }
            Op::LogSoftmax { x, temperature } => {
                let c = out.cols().max(1);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dc, gc), yc) in d
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let total: f64 = gc.iter().sum();
                        for ((a, gy), y) in dc.iter_mut().zip(gc).zip(yc) {
                            *a += (gy - y.exp() * total) / temperature;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.value(*gain);
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for (gc, hc) in gd.chunks_exact(d).zip(xhat.data().chunks_exact(d)) {
                        for ((a, y), h) in dg.iter_mut().zip(gc).zip(hc) {
                            *a += y * h;
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for gc in gd.chunks_exact(d) {
                        add_into(db, gc);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let n = d as f64;
                    let mut dh = vec![0.0; d];
                    for (row, ((dxc, gc), hc)) in dx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(xhat.data().chunks_exact(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gc[j] * gv.data()[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hc).map(|(a, b)| a * b).sum();
                        let inv = inv_std[row];
                        for j in 0..d {
                            dxc[j] += inv / n * (n * dh[j] - sum_dh - hc[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, dim) = av.dims2();
                let m = bv.rows();
                let track_a = self.nodes[a.0].requires_grad;
                let track_b = self.nodes[b.0].requires_grad;
                let mut ga = vec![0.0; if track_a { n * dim } else { 0 }];
                let mut gb = vec![0.0; if track_b { m * dim } else { 0 }];
                for i in 0..n {
                    let ai = av.row(i);
                    for j in 0..m {
                        let gy = gd[i * m + j];
                        if gy == 0.0 {
                            continue;
                        }
                        let bj = bv.row(j);
                        let denom = norm_a[i] * norm_b[j] + COSINE_EPS;
                        let dot: f64 = ai.iter().zip(bj).map(|(p, q)| p * q).sum();
                        let coef = gy * dot / (denom * denom);
                        if track_a {
                            let ua = if norm_a[i] > 0.0 { norm_b[j] / norm_a[i] } else { 0.0 };
                            for t in 0..dim {
                                ga[i * dim + t] += gy * bj[t] / denom - coef * ua * ai[t];
                            }
                        }
                        if track_b {
                            let ub = if norm_b[j] > 0.0 { norm_a[i] / norm_b[j] } else { 0.0 };
                            for t in 0..dim {
                                gb[j * dim + t] += gy * ai[t] / denom - coef * ub * bj[t];
                            }
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, &ga);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    add_into(d, &gb);
                }
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p);
                if let Some(d) = self.grad_buf(grads, *p) {
                    for (((a, y), &pr), &t) in d.iter_mut().zip(gd).zip(pv.data()).zip(target.data()) {
                        if pr > PROB_CLAMP && pr < 1.0 - PROB_CLAMP {
                            *a += y * (-t / pr + (1.0 - t) / (1.0 - pr));
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(d) = self.grad_buf(grads, *x) {
                    for a in d.iter_mut() {
                        *a += s;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2();
                if let Some(d) = self.grad_buf(grads, *x) {
                    // x is c×r
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = out.dims2();
                let c = self.value(*x).cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &gd[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(d) = self.grad_buf(grads, *p) {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &gd[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, indices } => {
                let c = out.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (k, &src) in indices.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::MaskRows { x, token, mask } => {
                let c = out.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut d[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *token) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(d, &gd[i * c..(i + 1) * c]);
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let (src_rows, c) = self.value(*x).dims2();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for t in 0..src_rows {
                        let next = (t + 1).min(src_rows - 1);
                        for j in 0..*factor {
                            let w = j as f64 / *factor as f64;
                            let o = (t * factor + j) * c;
                            for col in 0..c {
                                let gy = gd[o + col];
                                d[t * c + col] += (1.0 - w) * gy;
                                d[next * c + col] += w * gy;
                            }
                        }
                    }
                }
            }
            Op::Im2Col { x, kernel } => {
                let (t, c) = self.value(*x).dims2();
                let pad = kernel / 2;
                let width = kernel * c;
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..t {
                        for o in 0..*kernel {
                            let src = i as isize + o as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                add_into(
                                    &mut d[s * c..(s + 1) * c],
                                    &gd[i * width + o * c..i * width + (o + 1) * c],
                                );
                            }
                        }
                    }
                }
            }
            Op::RelPosBias {
                table,
                max_distance,
            } => {
                let len = out.rows();
                if let Some(d) = self.grad_buf(grads, *table) {
                    for i in 0..len {
                        for j in 0..len {
                            d[rel_index(i, j, *max_distance)] += gd[i * len + j];
                        }
                    }
                }
            }
            Op::SumRowGroups { x, group } => {
                let c = out.cols();
                let r = self.value(*x).rows();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        let g = i / group;
                        add_into(&mut d[i * c..(i + 1) * c], &gd[g * c..(g + 1) * c]);
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = out.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (j, &row) in argmax.iter().enumerate() {
                        d[row * c + j] += gd[j];
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn rel_index(i: usize, j: usize, max_distance: usize) -> usize {
    let r = max_distance as isize;
    ((i as isize - j as isize).clamp(-r, r) + r) as usize
}

pub(crate) fn bce_scalar(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Plain-array linear upsampling along rows.
pub fn upsample_linear(x: &Array, factor: usize) -> Result<Array> {
    if factor < 1 {
        return Err(Error::Parameter("upsampling factor must be >= 1".into()));
    }
    let (t, c) = x.dims2();
    if t == 0 {
        return Err(Error::Contract("cannot upsample an empty sequence".into()));
    }
    let mut data = vec![0.0; t * factor * c];
    for s in 0..t {
        let next = (s + 1).min(t - 1);
        for j in 0..factor {
            let w = j as f64 / factor as f64;
            let o = (s * factor + j) * c;
            for col in 0..c {
                data[o + col] = if j == 0 {
                    x.get(s, col)
                } else {
                    (1.0 - w) * x.get(s, col) + w * x.get(next, col)
                };
            }
        }
    }
    Ok(Array::matrix(t * factor, c, data))
}

/// Elementwise logistic function.
pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}
