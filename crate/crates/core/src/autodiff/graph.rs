//! Tape of recorded operations and the reverse sweep over it.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! one node holding its output value; [`Graph::backward`] walks the tape in
//! reverse and returns a [`Gradients`] table indexed by node.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        rows: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanOf(Vec<Var>),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
    },
    AvgPool(Var, Vec<(usize, usize)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Rope { .. } => "rope",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MaskedMse { .. } => "masked_mse",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanOf(_) => "mean_of",
            Op::Reshape(_) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::AvgPool(..) => "avg_pool",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: Vec<Option<Var>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            first_non_finite: None,
        }
    }

    /// A graph that can read parameters from `store`.
    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// First op (tape index, name) that produced a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dims(op, s, &[0, 0])),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().expect("rank >= 1")
    }

    // ---- leaves ----

    /// Leaf holding a copy of `t`; differentiable when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::dims("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Leaf bound to a stored parameter; created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dims("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Adds vector `b` to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.last_dim(a);
        if self.shape(b).iter().product::<usize>() != n {
            return Err(Error::dims("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// Exact-erf GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.last_dim(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row, o);
        }
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x);
        if self.shape(gamma).iter().product::<usize>() != d
            || self.shape(beta).iter().product::<usize>() != d
        {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if d == 1 && eps == 0.0 {
            return Err(Error::Numeric {
                op: "layer_norm",
                detail: "single-feature rows with eps = 0 divide by zero".into(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            if var + eps <= 0.0 {
                return Err(Error::Numeric {
                    op: "layer_norm",
                    detail: "zero variance with eps = 0".into(),
                });
            }
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, ng))
    }

    /// Inverted dropout; the identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask), ng))
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::dims("slice_cols", &[m, n], &[start, len]));
        }
        let x = self.value(a);
        let out = (0..m)
            .flat_map(|i| x[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::dims("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::dims("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(vec![len, n], out, Op::SliceRows(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::dims("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += r;
        }
        let out = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dims("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    /// Rotary embedding of `x: [n, head_dim]`; row `r` is rotated by `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let (n, hd) = self.dims2(x, "rope")?;
        if hd % 2 != 0 {
            return Err(Error::Config(format!("rotary head dim must be even, got {hd}")));
        }
        if positions.len() != n {
            return Err(Error::dims("rope", &[n, hd], &[positions.len()]));
        }
        let half = hd / 2;
        let mut cos = vec![0.0; n * half];
        let mut sin = vec![0.0; n * half];
        for (r, &m) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = (m as f64 * theta).sin_cos();
                cos[r * half + i] = c;
                sin[r * half + i] = s;
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n * hd];
        for r in 0..n {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let (a, b) = (xv[r * hd + 2 * i], xv[r * hd + 2 * i + 1]);
                out[r * hd + 2 * i] = a * c - b * s;
                out[r * hd + 2 * i + 1] = a * s + b * c;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n, hd], out, Op::Rope { x, cos, sin }, ng))
    }

    // ---- 1-D signal ops ----

    /// `x: [c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (ci, len) = self.dims2(x, "conv1d")?;
        let (co, ci2, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::dims("conv1d", s, &[0, ci, 0])),
        };
        if ci != ci2 {
            return Err(Error::dims("conv1d", self.shape(x), self.shape(w)));
        }
        if self.value(b).len() != co {
            return Err(Error::dims("conv1d", self.shape(w), self.shape(b)));
        }
        let padded = len + pad_left + pad_right;
        if stride == 0 || padded < k {
            return Err(Error::Parameter(format!(
                "conv1d input of length {len} too short for kernel {k}"
            )));
        }
        let lo = (padded - k) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; co * lo];
        for o in 0..co {
            let orow = &mut out[o * lo..(o + 1) * lo];
            orow.fill(bv[o]);
            for c in 0..ci {
                let xrow = &xv[c * len..(c + 1) * len];
                for kk in 0..k {
                    let wt = wv[(o * ci + c) * k + kk];
                    for (t, acc) in orow.iter_mut().enumerate() {
                        let j = (t * stride + kk) as isize - pad_left as isize;
                        if j >= 0 && (j as usize) < len {
                            *acc += wt * xrow[j as usize];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let op = Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad_left,
        };
        Ok(self.push(vec![co, lo], out, op, ng))
    }

    /// Adaptive average pooling of `x: [c, len]` to `[c, bins]`; bin `j`
    /// averages `[floor(j*len/bins), floor((j+1)*len/bins))`, widened to one
    /// element when that range is empty.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let (c, len) = self.dims2(x, "adaptive_avg_pool")?;
        if bins == 0 {
            return Err(Error::Parameter("pool to zero bins".into()));
        }
        let ranges = pool_ranges(len, bins);
        let xv = self.value(x);
        let mut out = vec![0.0; c * bins];
        for ch in 0..c {
            let row = &xv[ch * len..(ch + 1) * len];
            for (j, &(s, e)) in ranges.iter().enumerate() {
                out[ch * bins + j] = row[s..e].iter().sum::<f64>() / (e - s) as f64;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![c, bins], out, Op::AvgPool(x, ranges), ng))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Mean of several scalar nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("mean of zero terms".into()));
        }
        let mut s = 0.0;
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(Error::dims("mean_of", self.shape(p), &[1]));
            }
            s += self.scalar(p);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            vec![1],
            vec![s / parts.len() as f64],
            Op::MeanOf(parts.to_vec()),
            ng,
        ))
    }

    /// `logsumexp(z) - z[target]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::Data(format!(
                "label {target} out of range for {} classes",
                z.len()
            )));
        }
        let mut probs = vec![0.0; z.len()];
        softmax_into(z, &mut probs);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            probs,
            target,
        };
        Ok(self.push(vec![1], vec![loss], op, ng))
    }

    /// Mean squared error over the rows flagged in `rows`; zero when no row is flagged.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], rows: &[bool]) -> Result<Var> {
        let (m, d) = self.dims2(pred, "masked_mse")?;
        if target.len() != m * d || rows.len() != m {
            return Err(Error::dims("masked_mse", &[m, d], &[rows.len(), target.len()]));
        }
        let p = self.value(pred);
        let count = rows.iter().filter(|&&r| r).count() * d;
        let mut s = 0.0;
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            for j in 0..d {
                s += (p[i * d + j] - target[i * d + j]).powi(2);
            }
        }
        let loss = if count == 0 { 0.0 } else { s / count as f64 };
        let ng = self.ng(pred);
        let op = Op::MaskedMse {
            pred,
            target: target.to_vec(),
            rows: rows.to_vec(),
            count,
        };
        Ok(self.push(vec![1], vec![loss], op, ng))
    }

    // ---- reverse sweep ----

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(node, g, lo);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(da) = self.slot(lo, *a) {
                    gemm_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(lo, *b) {
                    gemm_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(da) = self.slot(lo, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(lo, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(lo, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(lo, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.slot(lo, *a) {
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y);
                }
                if let Some(db) = self.slot(lo, *b) {
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(lo, *a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, g), &x) in da.iter_mut().zip(g).zip(x) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                if let Some(da) = self.slot(lo, *a) {
                    for ((d, y), g) in da.chunks_mut(n).zip(node.value.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let gm = val(*gamma);
                if let Some(dx) = self.slot(lo, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += inv / d as f64 * (d as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(dg) = self.slot(lo, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (g, h))| *o += g * h);
                    }
                }
                if let Some(db) = self.slot(lo, *beta) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(da) = self.slot(lo, *a) {
                    da.iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (g, m))| *d += g * m);
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.nodes[a.0].shape[1];
                let (m, w) = (node.shape[0], node.shape[1]);
                if let Some(da) = self.slot(lo, *a) {
                    for i in 0..m {
                        add_into(&mut da[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(dp) = self.slot(lo, p) {
                        for i in 0..m {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * n + off..i * n + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.shape[1];
                if let Some(da) = self.slot(lo, *a) {
                    add_into(&mut da[start * n..start * n + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(dp) = self.slot(lo, p) {
                        add_into(dp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Reshape(a) | Op::Sum(a) => {
                if let Some(da) = self.slot(lo, *a) {
                    if g.len() == da.len() {
                        add_into(da, g);
                    } else {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(lo, *a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanOf(parts) => {
                let s = g[0] / parts.len() as f64;
                for &p in parts {
                    if let Some(dp) = self.slot(lo, p) {
                        dp[0] += s;
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let hd = node.shape[1];
                let half = hd / 2;
                if let Some(dx) = self.slot(lo, *x) {
                    for r in 0..node.shape[0] {
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let (ga, gb) = (g[r * hd + 2 * i], g[r * hd + 2 * i + 1]);
                            dx[r * hd + 2 * i] += ga * c + gb * s;
                            dx[r * hd + 2 * i + 1] += -ga * s + gb * c;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
            } => {
                if let Some(dz) = self.slot(lo, *logits) {
                    for (j, (d, p)) in dz.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                rows,
                count,
            } => {
                let p = val(*pred);
                let d = self.nodes[pred.0].shape[1];
                if let Some(dp) = self.slot(lo, *pred) {
                    if *count > 0 {
                        let s = 2.0 * g[0] / *count as f64;
                        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                            for j in 0..d {
                                let k = i * d + j;
                                dp[k] += s * (p[k] - target[k]);
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (ci, len) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (co, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
                let lo_len = node.shape[1];
                let (xv, wv) = (val(*x), val(*w));
                let tap = |t: usize, kk: usize| -> Option<usize> {
                    let j = (t * stride + kk) as isize - *pad_left as isize;
                    (j >= 0 && (j as usize) < len).then_some(j as usize)
                };
                if let Some(dx) = self.slot(lo, *x) {
                    for o in 0..co {
                        let grow = &g[o * lo_len..(o + 1) * lo_len];
                        for c in 0..ci {
                            for kk in 0..k {
                                let wt = wv[(o * ci + c) * k + kk];
                                for (t, gv) in grow.iter().enumerate() {
                                    if let Some(j) = tap(t, kk) {
                                        dx[c * len + j] += wt * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(lo, *w) {
                    for o in 0..co {
                        let grow = &g[o * lo_len..(o + 1) * lo_len];
                        for c in 0..ci {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for (t, gv) in grow.iter().enumerate() {
                                    if let Some(j) = tap(t, kk) {
                                        s += gv * xv[c * len + j];
                                    }
                                }
                                dw[(o * ci + c) * k + kk] += s;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(lo, *b) {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * lo_len..(o + 1) * lo_len].iter().sum::<f64>();
                    }
                }
            }
            Op::AvgPool(x, ranges) => {
                let len = self.nodes[x.0].shape[1];
                let bins = ranges.len();
                if let Some(dx) = self.slot(lo, *x) {
                    for ch in 0..node.shape[0] {
                        for (j, &(s, e)) in ranges.iter().enumerate() {
                            let share = g[ch * bins + j] / (e - s) as f64;
                            dx[ch * len + s..ch * len + e].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` needed one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}

pub(crate) fn pool_ranges(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|j| {
            let s = j * len / bins;
            let e = ((j + 1) * len / bins).max(s + 1).min(len.max(1));
            (s.min(len - 1), e)
        })
        .collect()
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Standard normal CDF via the exact error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], da: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            db[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(d, g)| *d += av * g);
        }
    }
}
