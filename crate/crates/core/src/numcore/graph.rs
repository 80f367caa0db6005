//! Dynamic reverse-mode tape.
//!
//! Every op appends one node holding its forward value; operands always have
//! a smaller index than their consumer, so a single reverse sweep over the
//! node list is a valid topological replay.

use rand::Rng;

use super::tensor::{check_shape, numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale { x: Var, c: T },
    Shift { x: Var },
    MulScalarVar { x: Var, s: Var },
    AddRow { x: Var, b: Var, cols: usize },
    AddCol { x: Var, b: Var, cols: usize },
    Sum(Var),
    Mean(Var),
    MeanLast { x: Var, len: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    ClampMin { x: Var, lo: T },
    SmoothL1(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmaxRows { x: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
    Narrow { x: Var, start: usize },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    Concat0 { parts: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize>, cols: usize },
    Im2col(Box<Im2colGeom>, Var),
    AdaptivePool { x: Var, d: usize, out: usize },
    Diag { x: Var, n: usize },
    Index { x: Var, i: usize },
}

#[derive(Debug, Clone, Copy)]
struct Im2colGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not influence the loss or was not differentiable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Per-column attention mask; `true` keeps the column.
pub type KeyMask<'a> = Option<&'a [bool]>;

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn as_matrix(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(format!("{op}: expected a matrix, got shape {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    /// First element of `v`; meant for `[1]`-shaped results.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- leaves -------------------------------------------------------

    /// Copies `t` onto the tape, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_matrix("transpose", self.shape(x))?;
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, ng))
    }

    // ---- elementwise binary ------------------------------------------

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    // ---- scalar helpers ----------------------------------------------

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Shift { x }, ng)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::dim(format!(
                "mul_scalar_var: multiplier has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.scalar(s);
        let out = self.value(x).iter().map(|&v| v * sv).collect();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalarVar { x, s }, ng))
    }

    // ---- broadcasting adds -------------------------------------------

    /// `x[m,n] + b[n]` broadcast down the rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = as_matrix("add_row", self.shape(x))?;
        if self.shape(b) != [n] {
            return Err(Error::dim(format!(
                "add_row: bias {:?} does not match matrix {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::AddRow { x, b, cols: n }, ng))
    }

    /// `x[m,n] + b[m]` broadcast across the columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = as_matrix("add_col", self.shape(x))?;
        if self.shape(b) != [m] {
            return Err(Error::dim(format!(
                "add_col: bias {:?} does not match matrix {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o += bv[r];
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::AddCol { x, b, cols: n }, ng))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Mean over the last axis: `[.., n] -> [..]` (a vector reduces to `[1]`).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("non-empty shape");
        let inv = T::one() / T::lit(len as f64);
        let out: Vec<T> = self
            .value(x)
            .chunks(len)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let ng = self.ng(x);
        self.push(out_shape, out, Op::MeanLast { x, len }, ng)
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        self.unary(x, |v| if v >= lo { v } else { lo }, Op::ClampMin { x, lo })
    }

    /// Huber-style `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, smooth_l1, Op::SmoothL1(x))
    }

    // ---- normalisation -----------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} invalid for shape {shape:?}")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, ng))
    }

    /// Row-wise softmax of a matrix where masked-out columns get probability 0.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: KeyMask<'_>) -> Result<Var> {
        let Some(mask) = mask else {
            return self.softmax(x, 1);
        };
        let (rows, cols) = as_matrix("masked_softmax_rows", self.shape(x))?;
        if mask.len() != cols {
            return Err(Error::dim(format!(
                "masked_softmax_rows: mask length {} for {cols} columns",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::dim("masked_softmax_rows: every column is masked"));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for c in 0..cols {
                if mask[c] {
                    dst[c] = (row[c] - mx).exp();
                    z += dst[c];
                }
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(x);
        // Masked entries are exactly zero, so the plain softmax backward applies.
        Ok(self.push(vec![rows, cols], out, Op::Softmax { x, outer: rows, len: cols, inner: 1 }, ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_matrix("log_softmax_rows", self.shape(x))?;
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, cols], out, Op::LogSoftmaxRows { x, cols }, ng))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match normalised axis of {shape:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = src.len() / cols;
        let n = T::lit(cols as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, cols, xhat, rstd }, ng))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..numel(self.shape(x)))
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, ng))
    }

    // ---- structural --------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::dim(format!(
                "reshape: {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// Contiguous flat slice of `x` starting at `start`, reshaped to `shape`.
    pub fn narrow(&mut self, x: Var, start: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = numel(&shape);
        let total = numel(self.shape(x));
        if start + n > total {
            return Err(Error::dim(format!(
                "narrow: range {start}..{} exceeds {total} elements",
                start + n
            )));
        }
        let out = self.value(x)[start..start + n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Narrow { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_cols", self.shape(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!(
                "slice_cols: columns {start}..{} of {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, rows, cols, start, len }, ng))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (rows, _) = as_matrix("column", self.shape(x))?;
        let c = self.slice_cols(x, j, 1)?;
        self.reshape(c, vec![rows])
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("row", self.shape(x))?;
        if i >= rows {
            return Err(Error::dim(format!("row {i} of {:?}", self.shape(x))));
        }
        self.narrow(x, i * cols, vec![cols])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols: no inputs"))?;
        let (rows, _) = as_matrix("concat_cols", self.shape(first))?;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(Error::dim(format!(
                    "concat_cols: {:?} and {:?} have different row counts",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            meta.push((p, c));
        }
        let total: usize = meta.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &meta {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: meta, rows }, ng))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat: no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: {:?} and {s:?} differ beyond the first axis",
                    self.shape(first)
                )));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat0 { parts: parts.to_vec() }, ng))
    }

    /// Looks up rows of `table[v, c]`, producing `[ids.len(), c]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, cols) = as_matrix("gather_rows", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows { table, ids: ids.to_vec(), cols },
            ng,
        ))
    }

    /// Unfolds `x[c, h, w]` into `[c*k*k, oh*ow]` patches for convolution.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("im2col: expected [c, h, w], got {s:?}"))),
        };
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Parameter(format!(
                "im2col: kernel {k} stride {stride} pad {pad} invalid for {h}x{w}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let geom = Im2colGeom { c, h, w, k, stride, pad, oh, ow };
        let src = self.value(x);
        let mut out = vec![T::zero(); c * k * k * oh * ow];
        im2col_visit(&geom, |row, col, idx| out[row * oh * ow + col] = src[idx]);
        let ng = self.ng(x);
        Ok(self.push(vec![c * k * k, oh * ow], out, Op::Im2col(Box::new(geom), x), ng))
    }

    /// Adaptive average pooling of a vector of width `d` to width `out`:
    /// bin `i` averages `v[floor(i*d/out) .. ceil((i+1)*d/out))`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out: usize) -> Result<Var> {
        if out == 0 {
            return Err(Error::Parameter("adaptive_avg_pool1d: output width must be positive".into()));
        }
        let d = match *self.shape(x) {
            [d] => d,
            ref s => return Err(Error::dim(format!("adaptive_avg_pool1d: expected a vector, got {s:?}"))),
        };
        let src = self.value(x);
        let vals = (0..out)
            .map(|i| {
                let (s, e) = pool_bin(i, d, out);
                src[s..e].iter().copied().sum::<T>() / T::lit((e - s) as f64)
            })
            .collect();
        let ng = self.ng(x);
        Ok(self.push(vec![out], vals, Op::AdaptivePool { x, d, out }, ng))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix("diag", self.shape(x))?;
        if r != c {
            return Err(Error::dim(format!("diag: matrix {:?} is not square", self.shape(x))));
        }
        let out = (0..r).map(|i| self.value(x)[i * r + i]).collect();
        let ng = self.ng(x);
        Ok(self.push(vec![r], out, Op::Diag { x, n: r }, ng))
    }

    /// Element `i` of the flattened tensor as a `[1]` node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self.value(x).get(i).ok_or_else(|| {
            Error::dim(format!("index {i} out of range for {:?}", self.shape(x)))
        })?;
        let ng = self.ng(x);
        Ok(self.push(vec![1], vec![v], Op::Index { x, i }, ng))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of every node reachable
    /// from a differentiable leaf are accumulated additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].data.len()]);
            f(slot);
        };
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let av = self.value(a);
                let bv = self.value(b);
                acc(a, &mut |ga| {
                    // ga[i,p] += sum_j g[i,j] * b[p,j]
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(gr, br);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    // gb[p,:] += a[i,p] * g[i,:]
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += s * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(a), self.value(b));
                let pick_a = |i: usize| if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        if pick_a(i) {
                            ga[i] += g[i];
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c)
            }),
            &Op::Shift { x } => acc(x, &mut |gx| add_into(gx, g)),
            &Op::MulScalarVar { x, s } => {
                let sv = self.scalar(s);
                let xv = self.value(x);
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * sv));
                acc(s, &mut |gs| gs[0] += dot(g, xv));
            }
            &Op::AddRow { x, b, cols } => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(b, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::AddCol { x, b, cols } => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(b, &mut |gb| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        gb[r] += row.iter().copied().sum::<T>();
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let s = g[0] / T::lit(self.nodes[x.0].data.len() as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += s))
            }
            &Op::MeanLast { x, len } => {
                let inv = T::one() / T::lit(len as f64);
                acc(x, &mut |gx| {
                    for (r, chunk) in gx.chunks_mut(len).enumerate() {
                        chunk.iter_mut().for_each(|o| *o += g[r] * inv);
                    }
                })
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            &Op::Sigmoid(x) => acc(x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }),
            &Op::Exp(x) => acc(x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }),
            &Op::Ln(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                })
            }
            &Op::Sqrt(x) => acc(x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] / (T::lit(2.0) * y[i]);
                }
            }),
            &Op::Abs(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sign(xv[i]);
                    }
                })
            }
            &Op::ClampMin { x, lo } => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] >= lo {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            &Op::SmoothL1(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        let d = xv[i];
                        // Both one-sided derivatives equal ±1 at |d| = 1.
                        let dd = if d.abs() < T::one() { d } else { sign(d) };
                        gx[i] += g[i] * dd;
                    }
                })
            }
            &Op::Softmax { x, outer, len, inner } => acc(x, &mut |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let s: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }),
            &Op::LogSoftmaxRows { x, cols } => acc(x, &mut |gx| {
                for (r, gr) in g.chunks(cols).enumerate() {
                    let s: T = gr.iter().copied().sum();
                    for c in 0..cols {
                        let p = y[r * cols + c].exp();
                        gx[r * cols + c] += gr[c] - p * s;
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                let cols = *cols;
                let gv = self.value(*gain);
                let n = T::lit(cols as f64);
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks(cols).enumerate() {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            m1 += d;
                            m2 += d * xh[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            gx[r * cols + c] += rstd[r] * (d - m1 - xh[c] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (r, gr) in g.chunks(cols).enumerate() {
                        for c in 0..cols {
                            gg[c] += gr[c] * xhat[r * cols + c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            &Op::Narrow { x, start } => acc(x, &mut |gx| add_into(&mut gx[start..start + g.len()], g)),
            &Op::SliceCols { x, rows, cols, start, len } => acc(x, &mut |gx| {
                for r in 0..rows {
                    add_into(&mut gx[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                }
            }),
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    acc(p, &mut |gp| {
                        for r in 0..*rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::Concat0 { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows { table, ids, cols } => acc(*table, &mut |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::Im2col(geom, x) => {
                let ncol = geom.oh * geom.ow;
                acc(*x, &mut |gx| im2col_visit(geom, |row, col, idx| gx[idx] += g[row * ncol + col]));
            }
            &Op::AdaptivePool { x, d, out } => acc(x, &mut |gx| {
                for i in 0..out {
                    let (s, e) = pool_bin(i, d, out);
                    let share = g[i] / T::lit((e - s) as f64);
                    gx[s..e].iter_mut().for_each(|o| *o += share);
                }
            }),
            &Op::Diag { x, n } => acc(x, &mut |gx| {
                for i in 0..n {
                    gx[i * n + i] += g[i];
                }
            }),
            &Op::Index { x, i } => acc(x, &mut |gx| gx[i] += g[0]),
        }
    }
}

/// Half-open input range `[floor(i*d/out), ceil((i+1)*d/out))` of pooling bin `i`.
pub fn pool_bin(i: usize, d: usize, out: usize) -> (usize, usize) {
    (i * d / out, ((i + 1) * d).div_ceil(out))
}

fn im2col_visit(geom: &Im2colGeom, mut f: impl FnMut(usize, usize, usize)) {
    let Im2colGeom { c, h, w, k, stride, pad, oh, ow } = *geom;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        f(row, oy * ow + ox, (ch * h + iy as usize) * w + ix as usize);
                    }
                }
            }
        }
    }
}

fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}
