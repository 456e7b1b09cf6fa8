//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node to a [`Graph`] and returns a [`Var`]
//! handle. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every node that depends on a differentiable leaf.
//!
//! The operator set is closed: it covers what the motion tokenizer
//! (strided 1D convolutions, nearest upsampling), the sequence model
//! (affine maps, attention, layer norm, cross-entropy) and the pose fitter
//! (axis-angle rotations, L1/L2 norms) need, and nothing more.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParamStore, CHECKPOINT_MAGIC,
};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{Adam, AdamConfig, CosineSchedule, OptimizerState};

use crate::error::{shape_err, Result, SokeError};
use crate::motion::{rodrigues_with_jacobian, Mat3};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    Norm2(Var),
    WeightedAbsSum {
        x: Var,
        weights: Vec<f64>,
    },
    StraightThrough {
        encoder: Var,
    },
    AxisAngle {
        r: Var,
        jac: [Mat3; 3],
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Conv1d { .. } => "conv1d",
            Op::Upsample { .. } => "upsample",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Norm2(..) => "norm2",
            Op::WeightedAbsSum { .. } => "weighted_abs_sum",
            Op::StraightThrough { .. } => "straight_through",
            Op::AxisAngle { .. } => "axis_angle",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Computation tape. Confined to one thread; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    non_finite: Option<String>,
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && value.data.iter().any(|v| !v.is_finite()) {
            self.non_finite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Name of the first operation that produced a non-finite value.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable input tagged with a parameter index so its gradient
    /// can be collected by [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    /// `x * s` where `s` is a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("mul_scalar", format!("scale has shape {:?}", self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = {
            let xv = self.value(x);
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|v| v * sv).collect(),
            }
        };
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar(x, s), rg))
    }

    /// Adds a row vector `b` (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).numel() != cols || self.shape(x).len() > 2 {
            return shape_err("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let t = {
            let xv = self.value(x);
            let bv = &self.value(b).data;
            let mut data = xv.data.clone();
            for row in data.chunks_exact_mut(cols) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    /// `a [n,k] · b [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]"));
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a [n,k] · bᵀ` for `b [m,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul_t", a)?;
        let (m, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return shape_err("matmul_t", format!("[{n},{k}] x [{m},{k2}]ᵀ"));
        }
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                data[i * m + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMulT(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("transpose", a)?;
        let av = &self.value(a).data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = av[i * m + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    /// Temporal 1D convolution. `x [T, C_in]`, `w [K, C_in, C_out]`,
    /// `b [C_out]`, zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (t_in, c_in) = self.dims2("conv1d", x)?;
        let (k, wc_in, c_out) = match self.shape(w) {
            [k, ci, co] => (*k, *ci, *co),
            s => return shape_err("conv1d", format!("weight shape {s:?}")),
        };
        if wc_in != c_in || self.value(b).numel() != c_out || stride == 0 {
            return shape_err(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            );
        }
        if t_in + 2 * pad < k {
            return shape_err("conv1d", format!("input length {t_in} shorter than kernel {k}"));
        }
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut data = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let out = &mut data[t * c_out..(t + 1) * c_out];
            out.copy_from_slice(bv);
            for kk in 0..k {
                let src = (t * stride + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let xr = &xv[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xval) in xr.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wr = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                    axpy(out, xval, wr);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![t_out, c_out],
                data,
            },
            Op::Conv1d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour temporal upsampling of `x [T, C]` by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (t, c) = self.dims2("upsample", x)?;
        if factor == 0 {
            return shape_err("upsample", "factor must be positive");
        }
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(t * factor * c);
        for i in 0..t {
            for _ in 0..factor {
                data.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![t * factor, c],
                data,
            },
            Op::Upsample { x, factor },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2("softmax_rows", x)?;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::SoftmaxRows(x),
            rg,
        ))
    }

    /// Row-wise layer normalisation with gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2("layer_norm", x)?;
        if self.value(g).numel() != m || self.value(b).numel() != m {
            return shape_err("layer_norm", format!("gain/bias must have {m} values"));
        }
        let xv = &self.value(x).data;
        let gv = &self.value(g).data;
        let bv = &self.value(b).data;
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                data[i * m + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::LayerNorm { x, g, b, xhat, rstd },
            rg,
        ))
    }

    /// Rows of `table [V, D]` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("gather", format!("row {bad} out of range for {v} rows"));
        }
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2("slice_cols", x)?;
        if start + len > m {
            return shape_err("slice_cols", format!("{start}+{len} > {m}"));
        }
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, len],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2("slice_rows", x)?;
        if start + len > n {
            return shape_err("slice_rows", format!("{start}+{len} > {n}"));
        }
        let data = self.value(x).data[start * m..(start + len) * m].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![len, m],
                data,
            },
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "nothing to concatenate");
        }
        let n = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != n {
                return shape_err("concat_cols", format!("row counts {r} vs {n}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "nothing to concatenate");
        }
        let m = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != m || v.shape.len() > 2 {
                return shape_err("concat_rows", format!("{:?} vs {m} columns", v.shape));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, m],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Mean softmax cross-entropy of `logits [n, V]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n || n == 0 {
            return shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return shape_err("cross_entropy", format!("target {bad} out of range for {v} classes"));
        }
        let mut probs = self.value(logits).data.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Euclidean norm of all entries. The gradient at zero is taken as zero.
    pub fn norm2(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Norm2(x), rg)
    }

    /// `Σ w_i |x_i|`. The subgradient at zero is taken as zero.
    pub fn weighted_abs_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err(
                "weighted_abs_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            );
        }
        let s = self.value(x).data.iter().zip(weights).map(|(v, w)| w * v.abs()).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedAbsSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let n = self.value(d).numel().max(1) as f64;
        let s = self.sum_squares(d);
        Ok(self.scale(s, 1.0 / n))
    }

    /// Forward value of `quantized`, gradient passed unchanged to `encoder`.
    /// `quantized` itself receives no gradient through this node.
    pub fn straight_through(&mut self, encoder: Var, quantized: Var) -> Result<Var> {
        self.same_shape("straight_through", encoder, quantized)?;
        let t = self.value(quantized).clone();
        let rg = self.rg(encoder);
        Ok(self.push(t, Op::StraightThrough { encoder }, rg))
    }

    /// Rotation matrix `[3, 3]` of an axis-angle vector `r [3]`.
    pub fn axis_angle(&mut self, r: Var) -> Result<Var> {
        if self.value(r).numel() != 3 {
            return shape_err("axis_angle", format!("expected 3 values, got {:?}", self.shape(r)));
        }
        let rv = &self.value(r).data;
        let (rot, jac) = rodrigues_with_jacobian([rv[0], rv[1], rv[2]]);
        let data = rot.iter().flatten().copied().collect();
        let rg = self.rg(r);
        Ok(self.push(
            Tensor {
                shape: vec![3, 3],
                data,
            },
            Op::AxisAngle { r, jac },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. A second call without
    /// [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(SokeError::Graph("backward already ran; call zero_grad first".into()));
        }
        if let Some(op) = &self.non_finite {
            return Err(SokeError::NonFinite(op.clone()));
        }
        if self.value(loss).numel() != 1 {
            return Err(SokeError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        if self.grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(SokeError::NonFinite("backward".into()));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` for every parameter leaf reached by backward.
    /// Leaves that received no gradient report zeros.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.param.map(|id| {
                    let g = self.grads.get(i).and_then(|g| g.clone());
                    (id, g.unwrap_or_else(|| vec![0.0; n.value.numel()]))
                })
            })
            .collect()
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Graph)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(&mut g, self);
        self.grads[v.0] = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out temporarily so gradients can be written while
        // reading cached forward data.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| axpy(ga, 1.0, g));
                self.acc(*b, |gb, _| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| axpy(ga, 1.0, g));
                self.acc(*b, |gb, _| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, s| {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(&s.value(b).data) {
                        *o += gi * bv;
                    }
                });
                self.acc(b, |gb, s| {
                    for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(&s.value(a).data) {
                        *o += gi * av;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(*x, |gx, _| axpy(gx, 1.0, g));
                self.acc(*b, |gb, _| {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            Op::MulScalarVar(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.value(s).item();
                self.acc(x, |gx, _| axpy(gx, sv, g));
                self.acc(s, |gs, gr| gs[0] += dot(g, &gr.value(x).data));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(*x, |gx, _| axpy(gx, s, g));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.value(a).rows(), self.value(a).cols());
                let m = self.value(b).cols();
                self.acc(a, |ga, s| {
                    let bv = &s.value(b).data;
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bv[p * m..(p + 1) * m]);
                        }
                    }
                });
                self.acc(b, |gb, s| {
                    let av = &s.value(a).data;
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(&mut gb[p * m..(p + 1) * m], a_ip, gr);
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.value(a).rows(), self.value(a).cols());
                let m = self.value(b).rows();
                self.acc(a, |ga, s| {
                    let bv = &s.value(b).data;
                    for i in 0..n {
                        for j in 0..m {
                            axpy(&mut ga[i * k..(i + 1) * k], g[i * m + j], &bv[j * k..(j + 1) * k]);
                        }
                    }
                });
                self.acc(b, |gb, s| {
                    let av = &s.value(a).data;
                    for i in 0..n {
                        for j in 0..m {
                            axpy(&mut gb[j * k..(j + 1) * k], g[i * m + j], &av[i * k..(i + 1) * k]);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (self.value(*a).rows(), self.value(*a).cols());
                self.acc(*a, |ga, _| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.acc(x, |gx, s| {
                    for ((o, &gi), &xv) in gx.iter_mut().zip(g).zip(&s.value(x).data) {
                        if xv > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let out = &self.nodes[i].value.data.clone();
                self.acc(*x, |gx, _| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (t_in, c_in) = (self.value(x).rows(), self.value(x).cols());
                let k = self.shape(w)[0];
                let c_out = self.shape(w)[2];
                let t_out = g.len() / c_out;
                let src = |t: usize, kk: usize| -> Option<usize> {
                    let s = (t * stride + kk) as isize - pad as isize;
                    (s >= 0 && (s as usize) < t_in).then_some(s as usize)
                };
                self.acc(x, |gx, s| {
                    let wv = &s.value(w).data;
                    for t in 0..t_out {
                        let gr = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let Some(si) = src(t, kk) else { continue };
                            for ci in 0..c_in {
                                let wr = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                gx[si * c_in + ci] += dot(gr, wr);
                            }
                        }
                    }
                });
                self.acc(w, |gw, s| {
                    let xv = &s.value(x).data;
                    for t in 0..t_out {
                        let gr = &g[t * c_out..(t + 1) * c_out];
                        for kk in 0..k {
                            let Some(si) = src(t, kk) else { continue };
                            for ci in 0..c_in {
                                let xval = xv[si * c_in + ci];
                                if xval != 0.0 {
                                    axpy(
                                        &mut gw[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out],
                                        xval,
                                        gr,
                                    );
                                }
                            }
                        }
                    }
                });
                self.acc(b, |gb, _| {
                    for row in g.chunks_exact(c_out) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let (x, factor) = (*x, *factor);
                let c = self.value(x).cols();
                self.acc(x, |gx, _| {
                    for (t, row) in g.chunks_exact(c).enumerate() {
                        let dst = t / factor;
                        axpy(&mut gx[dst * c..(dst + 1) * c], 1.0, row);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data.clone();
                let m = self.nodes[i].value.cols();
                self.acc(*x, |gx, _| {
                    for ((gxr, yr), gr) in gx.chunks_exact_mut(m).zip(y.chunks_exact(m)).zip(g.chunks_exact(m)) {
                        let s = dot(gr, yr);
                        for j in 0..m {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                g: gain,
                b,
                xhat,
                rstd,
            } => {
                let (x, gain, b) = (*x, *gain, *b);
                let m = self.value(x).cols();
                self.acc(gain, |gg, _| {
                    for (gr, hr) in g.chunks_exact(m).zip(xhat.chunks_exact(m)) {
                        for j in 0..m {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(b, |gb, _| {
                    for gr in g.chunks_exact(m) {
                        axpy(gb, 1.0, gr);
                    }
                });
                self.acc(x, |gx, s| {
                    let gv = &s.value(gain).data;
                    let mut dh = vec![0.0; m];
                    for (r, ((gxr, gr), hr)) in gx
                        .chunks_exact_mut(m)
                        .zip(g.chunks_exact(m))
                        .zip(xhat.chunks_exact(m))
                        .enumerate()
                    {
                        for j in 0..m {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dhh = dot(&dh, hr) / m as f64;
                        for j in 0..m {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.acc(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let m = self.value(x).cols();
                let len = self.nodes[i].value.cols();
                self.acc(x, |gx, _| {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        axpy(&mut gx[r * m + start..r * m + start + len], 1.0, gr);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let m = self.value(*x).cols();
                let off = *start * m;
                self.acc(*x, |gx, _| axpy(&mut gx[off..off + g.len()], 1.0, g));
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |gp, _| {
                        for (r, gpr) in gp.chunks_exact_mut(w).enumerate() {
                            axpy(gpr, 1.0, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(p, |gp, _| axpy(gp, 1.0, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape(x) => {
                self.acc(*x, |gx, _| axpy(gx, 1.0, g));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let n = targets.len() as f64;
                let scale = g[0] / n;
                self.acc(*logits, |gl, _| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * v..(r + 1) * v];
                        let gr = &mut gl[r * v..(r + 1) * v];
                        axpy(gr, scale, pr);
                        gr[t] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::SumSquares(x) => {
                let (x, s) = (*x, g[0]);
                self.acc(x, |gx, gr| axpy(gx, 2.0 * s, &gr.value(x).data));
            }
            Op::Norm2(x) => {
                let x = *x;
                let n = self.nodes[i].value.item();
                if n > 0.0 {
                    let s = g[0] / n;
                    self.acc(x, |gx, gr| axpy(gx, s, &gr.value(x).data));
                }
            }
            Op::WeightedAbsSum { x, weights } => {
                let (x, s) = (*x, g[0]);
                self.acc(x, |gx, gr| {
                    for ((o, &v), &w) in gx.iter_mut().zip(&gr.value(x).data).zip(weights) {
                        if v != 0.0 {
                            *o += s * w * v.signum();
                        }
                    }
                });
            }
            Op::StraightThrough { encoder } => {
                self.acc(*encoder, |ge, _| axpy(ge, 1.0, g));
            }
            Op::AxisAngle { r, jac } => {
                self.acc(*r, |gr, _| {
                    for (c, dr) in jac.iter().enumerate() {
                        gr[c] += dr.iter().flatten().zip(g).map(|(d, gi)| d * gi).sum::<f64>();
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(row, a_ip, &b[p * m..(p + 1) * m]);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Natural-log softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
