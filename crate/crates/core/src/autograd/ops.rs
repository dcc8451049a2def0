//! Differentiable primitives and their vector-Jacobian products.

use super::tape::{Node, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner: Vec<usize>,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    Select {
        x: usize,
        indices: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Sinusoid {
        pos: usize,
    },
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    SmoothL1 {
        x: usize,
        targets: Vec<f64>,
    },
}

/// Per-node gradient slot for input `id`, allocated lazily; `None` when the
/// input does not participate in differentiation.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] . b[n x k]^T
fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k x n] += a[m x k]^T . b[m x n]
fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Angular frequency of sinusoidal channel `i` for width `d`; odd channels
/// share the frequency of the preceding even channel.
pub fn sinusoid_frequency(i: usize, d: usize) -> f64 {
    let even = i - i % 2;
    1.0 / 10000f64.powf(even as f64 / d as f64)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn normalize_rows(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..cols {
            xhat[i * cols + j] = (row[j] - mean) * inv;
        }
    }
    (xhat, inv_std)
}

/// Column statistics (mean, biased variance) of a `rows x cols` matrix.
pub fn column_stats(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            mean[j] += x[i * cols + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            var[j] += (x[i * cols + j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}

impl<'t> Var<'t> {
    fn binary_same_shape(self, other: Var<'t>, name: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(name, &a, &b));
        }
        Ok(())
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip_with(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.tape.nodes();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(|a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect()).expect("same shape")
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add")?;
        let v = self.zip_with(other, |a, b| a + b);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub")?;
        let v = self.zip_with(other, |a, b| a - b);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul")?;
        let v = self.zip_with(other, |a, b| a * b);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// `x[n x d] + b[d]`, broadcasting `b` over rows.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (xs, rs) = (self.shape(), row.shape());
        let cols = *xs.last().unwrap_or(&0);
        if rs.len() != 1 || rs[0] != cols {
            return Err(Error::shape("add_row", &xs, &rs));
        }
        let v = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let r = nodes[row.id].value.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + r[i % cols])
                .collect();
            Tensor::new(xs.clone(), data)?
        };
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// `x[n x d] * r[d]`, broadcasting `r` over rows.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (xs, rs) = (self.shape(), row.shape());
        let cols = *xs.last().unwrap_or(&0);
        if rs.len() != 1 || rs[0] != cols {
            return Err(Error::shape("mul_row", &xs, &rs));
        }
        let v = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let r = nodes[row.id].value.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * r[i % cols])
                .collect();
            Tensor::new(xs.clone(), data)?
        };
        Ok(self.binary(row, v, Op::MulRow(self.id, row.id)))
    }

    /// `x[n x d] * c[n]`, scaling row `i` by `c[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (xs, cs) = (self.shape(), col.shape());
        if xs.len() != 2 || cs.len() != 1 || cs[0] != xs[0] {
            return Err(Error::shape("mul_col", &xs, &cs));
        }
        let cols = xs[1];
        let v = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let c = nodes[col.id].value.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * c[i / cols])
                .collect();
            Tensor::new(xs.clone(), data)?
        };
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    /// Multiplies every element by a scalar variable of shape `[1]`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let ss = s.shape();
        if ss != [1] {
            return Err(Error::shape("scale_by", &self.shape(), &ss));
        }
        let k = s.item();
        let v = self.map(|x| x * k);
        Ok(self.binary(s, v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.map(|x| x + c);
        self.unary(v, Op::AddConst(self.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Standard matrix product `[m x k] . [k x n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        let (m, k, n) = match (a.as_slice(), b.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &a, &b)),
        };
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            matmul_into(
                nodes[self.id].value.data(),
                nodes[other.id].value.data(),
                m,
                k,
                n,
                &mut out,
            );
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `[m x k] . [n x k]^T`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        let (m, k, n) = match (a.as_slice(), b.as_slice()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul_t", &a, &b)),
        };
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes();
            matmul_nt_into(
                nodes[self.id].value.data(),
                nodes[other.id].value.data(),
                m,
                k,
                n,
                &mut out,
            );
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, v, Op::MatMulT(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        let [r, c] = s.as_slice() else {
            return Err(Error::shape("transpose", &s, &[]));
        };
        let (r, c) = (*r, *c);
        let v = self.with_value(|x| {
            let d = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)
        })?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.with_value(|x| x.data().iter().any(|v| *v <= 0.0)) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let v = self.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    /// Softmax over the last axis, computed shift-stably.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.with_value(|x| {
            if !x.is_finite() {
                return Err(Error::Numeric("softmax of non-finite input".into()));
            }
            let cols = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Normalizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xs = self.shape();
        let d = *xs.last().unwrap_or(&0);
        for p in [gain, bias] {
            if p.shape() != [d] {
                return Err(Error::shape("layer_norm", &xs, &p.shape()));
            }
        }
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (xhat, inv_std) = normalize_rows(x.data(), x.rows(), d, eps);
            let g = nodes[gain.id].value.data();
            let b = nodes[bias.id].value.data();
            let data = xhat
                .iter()
                .enumerate()
                .map(|(i, v)| v * g[i % d] + b[i % d])
                .collect();
            (Tensor::new(xs.clone(), data)?, xhat, inv_std)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Batch normalization of `x[n x c]` with statistics taken over the `n`
    /// rows. Returns the output together with the batch mean and biased
    /// variance so callers can maintain running statistics.
    pub fn batch_norm_train(
        self,
        gain: Var<'t>,
        bias: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let xs = self.shape();
        let [n, c] = xs.as_slice() else {
            return Err(Error::shape("batch_norm", &xs, &[]));
        };
        let (n, c) = (*n, *c);
        if n < 2 {
            return Err(Error::contract("batch statistics need at least two rows"));
        }
        for p in [gain, bias] {
            if p.shape() != [c] {
                return Err(Error::shape("batch_norm", &xs, &p.shape()));
            }
        }
        let (value, xhat, inv_std, mean, var) = {
            let nodes = self.tape.nodes();
            let x = nodes[self.id].value.data();
            let (mean, var) = column_stats(x, n, c);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let g = nodes[gain.id].value.data();
            let b = nodes[bias.id].value.data();
            let mut xhat = vec![0.0; n * c];
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    let h = (x[i * c + j] - mean[j]) * inv_std[j];
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
            (Tensor::new(xs.clone(), out)?, xhat, inv_std, mean, var)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::BatchNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok((self.tape.push(value, op, rg), mean, var))
    }

    /// 1-D convolution of `x[T x c_in]` with `kernels[k x c_in x c_out]`.
    pub fn conv1d(self, kernels: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), kernels.shape());
        let (t, cin, k, cout) = match (xs.as_slice(), ws.as_slice()) {
            ([t, cin], [k, cin2, cout]) if cin == cin2 => (*t, *cin, *k, *cout),
            _ => return Err(Error::shape("conv1d", &xs, &ws)),
        };
        if stride == 0 {
            return Err(Error::contract("conv1d stride must be at least 1"));
        }
        if k > t + 2 * padding {
            return Err(Error::contract(format!(
                "conv1d kernel {k} longer than padded input {}: empty output",
                t + 2 * padding
            )));
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; tout * cout];
        {
            let nodes = self.tape.nodes();
            let x = nodes[self.id].value.data();
            let w = nodes[kernels.id].value.data();
            for o in 0..tout {
                let orow = &mut out[o * cout..(o + 1) * cout];
                for r in 0..k {
                    let src = (o * stride + r) as isize - padding as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let xrow = &x[src as usize * cin..(src as usize + 1) * cin];
                    for (ci, xv) in xrow.iter().enumerate() {
                        if *xv == 0.0 {
                            continue;
                        }
                        let wrow = &w[(r * cin + ci) * cout..(r * cin + ci + 1) * cout];
                        for (ov, wv) in orow.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![tout, cout], out)?;
        Ok(self.binary(
            kernels,
            v,
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                stride,
                padding,
            },
        ))
    }

    /// Elements at the given flat indices, as a 1-D tensor.
    pub fn select(self, indices: &[usize]) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::len);
        if indices.is_empty() {
            return Err(Error::contract("select needs at least one index"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("select index {bad} out of range {n}")));
        }
        let v = self.with_value(|x| Tensor::vector(indices.iter().map(|&i| x.data()[i]).collect()));
        Ok(self.unary(
            v,
            Op::Select {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows of a `[n x d]` table; used for embedding lookup.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let [n, d] = s.as_slice() else {
            return Err(Error::shape("gather_rows", &s, &[]));
        };
        let (n, d) = (*n, *d);
        if indices.is_empty() {
            return Err(Error::contract("gather_rows needs at least one index"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("row index {bad} out of range {n}")));
        }
        let v = self.with_value(|x| {
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![indices.len(), d], out)
        })?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = as_matrix(&s).ok_or_else(|| Error::shape("slice_cols", &s, &[]))?;
        if len == 0 || start + len > c {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range {c}",
                start + len
            )));
        }
        let v = self.with_value(|x| {
            let d = x.data();
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + start + len]);
            }
            let shape = if s.len() == 1 { vec![len] } else { vec![r, len] };
            Tensor::new(shape, out)
        })?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|x| x.reshaped(shape))?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.data().iter().sum()));
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64));
        self.unary(v, Op::Mean(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    /// Sinusoidal encoding of a scalar position into `d` channels: even
    /// channels `sin(pos * w_i)`, odd channels `cos(pos * w_{i-1})`.
    pub fn sinusoid(self, d: usize) -> Result<Var<'t>> {
        if self.shape() != [1] {
            return Err(Error::shape("sinusoid", &self.shape(), &[1]));
        }
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::config(format!(
                "positional encoding width must be even, got {d}"
            )));
        }
        let pos = self.item();
        let data = (0..d)
            .map(|i| {
                let a = pos * sinusoid_frequency(i, d);
                if i % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect();
        Ok(self.unary(Tensor::vector(data), Op::Sinusoid { pos: self.id }))
    }

    /// Mean over rows of the cross entropy between `softmax(logits)` and the
    /// target class of each row.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let [n, v] = s.as_slice() else {
            return Err(Error::shape("softmax_cross_entropy", &s, &[]));
        };
        let (n, v) = (*n, *v);
        if targets.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("target class {bad} out of range {v}")));
        }
        let (loss, probs) = self.with_value(|x| {
            let mut probs = x.data().to_vec();
            let mut loss = 0.0;
            for (i, row) in probs.chunks_mut(v).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                loss += z.ln() - (x.data()[i * v + targets[i]] - max);
                row.iter_mut().for_each(|p| *p /= z);
            }
            (loss / n as f64, probs)
        });
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits(self, targets: &[f64]) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::len);
        if targets.len() != n {
            return Err(Error::shape("bce_with_logits", &self.shape(), &[targets.len()]));
        }
        let loss = self.with_value(|x| {
            x.data()
                .iter()
                .zip(targets)
                .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / n as f64
        });
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sum of smooth-L1 distances to `targets` (quadratic below 1, linear above).
    pub fn smooth_l1(self, targets: &[f64]) -> Result<Var<'t>> {
        let n = self.with_value(Tensor::len);
        if targets.len() != n {
            return Err(Error::shape("smooth_l1", &self.shape(), &[targets.len()]));
        }
        let loss = self.with_value(|x| {
            x.data()
                .iter()
                .zip(targets)
                .map(|(a, b)| smooth_l1(a - b))
                .sum::<f64>()
        });
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                x: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// A gradient-free copy of this value.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Concatenates along axis 0 (`axis == 0`) or the last axis (`axis == 1`) of
/// 1-D or 2-D variables.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let s0 = &shapes[0];
    let ndim = s0.len();
    if ndim == 0 || ndim > 2 || axis >= ndim {
        return Err(Error::shape("concat", s0, &[axis]));
    }
    for s in &shapes[1..] {
        let compatible = s.len() == ndim && (0..ndim).all(|a| a == axis || s[a] == s0[a]);
        if !compatible {
            return Err(Error::shape("concat", s0, s));
        }
    }
    let (outer, inner): (usize, Vec<usize>) = if axis == 0 {
        (1, shapes.iter().map(|s| s.iter().product()).collect())
    } else {
        (s0[0], shapes.iter().map(|s| s[1]).collect())
    };
    let total_inner: usize = inner.iter().sum();
    let mut out = vec![0.0; outer * total_inner];
    {
        let nodes = tape.nodes();
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&inner) {
            let d = nodes[p.id].value.data();
            for o in 0..outer {
                out[o * total_inner + offset..o * total_inner + offset + w]
                    .copy_from_slice(&d[o * w..(o + 1) * w]);
            }
            offset += w;
        }
    }
    let mut shape = s0.clone();
    shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let value = Tensor::new(shape, out)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        value,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            outer,
            inner,
        },
        rg,
    ))
}

impl Op {
    pub(crate) fn backward(&self, nodes: &[Node], out_id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| nodes[id].value.data();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, r) => {
                let cols = nodes[*r].value.len();
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = slot(grads, nodes, *r) {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % cols] += gv;
                    }
                }
            }
            Op::MulRow(x, r) => {
                let cols = nodes[*r].value.len();
                let (xv, rv) = (val(*x), val(*r));
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, gv) in g.iter().enumerate() {
                        gx[i] += gv * rv[i % cols];
                    }
                }
                if let Some(gr) = slot(grads, nodes, *r) {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % cols] += gv * xv[i];
                    }
                }
            }
            Op::MulCol(x, c) => {
                let cols = nodes[*x].value.cols();
                let (xv, cv) = (val(*x), val(*c));
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, gv) in g.iter().enumerate() {
                        gx[i] += gv * cv[i / cols];
                    }
                }
                if let Some(gc) = slot(grads, nodes, *c) {
                    for (i, gv) in g.iter().enumerate() {
                        gc[i / cols] += gv * xv[i];
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (val(*x), val(*s)[0]);
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * sv);
                }
                if let Some(gs) = slot(grads, nodes, *s) {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(grads, nodes, *a) {
                    matmul_nt_into(g, bv, m, n, k, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    matmul_tn_into(av, g, m, k, n, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(grads, nodes, *a) {
                    matmul_into(g, bv, m, n, k, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    matmul_tn_into(g, av, m, n, k, gb);
                }
            }
            Op::Transpose(x) => {
                let s = nodes[*x].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = val(out_id);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Exp(x) => {
                let y = val(out_id);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Softmax(x) => {
                let y = val(out_id);
                let cols = nodes[out_id].value.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..y.len() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in row {
                            gx[i] += y[i] * (g[i] - dot);
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
                let d = nodes[*gain].value.len();
                let gv = val(*gain);
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut sum_gh = 0.0;
                        let mut sum_gh_h = 0.0;
                        for j in 0..d {
                            let gh = g[base + j] * gv[j];
                            sum_gh += gh;
                            sum_gh_h += gh * xhat[base + j];
                        }
                        for j in 0..d {
                            let gh = g[base + j] * gv[j];
                            gx[base + j] +=
                                inv / d as f64 * (d as f64 * gh - sum_gh - xhat[base + j] * sum_gh_h);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = nodes[*gain].value.len();
                let n = g.len() / c;
                let gv = val(*gain);
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for i in 0..g.len() {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for i in 0..g.len() {
                        gb[i % c] += g[i];
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    for j in 0..c {
                        let mut sum_gh = 0.0;
                        let mut sum_gh_h = 0.0;
                        for i in 0..n {
                            let gh = g[i * c + j] * gv[j];
                            sum_gh += gh;
                            sum_gh_h += gh * xhat[i * c + j];
                        }
                        for i in 0..n {
                            let gh = g[i * c + j] * gv[j];
                            gx[i * c + j] +=
                                inv_std[j] / n as f64 * (n as f64 * gh - sum_gh - xhat[i * c + j] * sum_gh_h);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (xs, ws) = (nodes[*x].value.shape(), nodes[*w].value.shape());
                let (t, cin, k, cout) = (xs[0], xs[1], ws[0], ws[2]);
                let tout = g.len() / cout;
                let (xv, wv) = (val(*x), val(*w));
                let src = |o: usize, r: usize| -> Option<usize> {
                    let s = (o * stride + r) as isize - *padding as isize;
                    (s >= 0 && (s as usize) < t).then_some(s as usize)
                };
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..tout {
                        let grow = &g[o * cout..(o + 1) * cout];
                        for r in 0..k {
                            let Some(s) = src(o, r) else { continue };
                            for ci in 0..cin {
                                let wrow = &wv[(r * cin + ci) * cout..(r * cin + ci + 1) * cout];
                                gx[s * cin + ci] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gw) = slot(grads, nodes, *w) {
                    for o in 0..tout {
                        let grow = &g[o * cout..(o + 1) * cout];
                        for r in 0..k {
                            let Some(s) = src(o, r) else { continue };
                            for ci in 0..cin {
                                let xval = xv[s * cin + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                let wrow = &mut gw[(r * cin + ci) * cout..(r * cin + ci + 1) * cout];
                                for (a, b) in wrow.iter_mut().zip(grow) {
                                    *a += xval * b;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut offset = 0;
                for (&id, &w) in inputs.iter().zip(inner) {
                    if let Some(gi) = slot(grads, nodes, id) {
                        for o in 0..*outer {
                            for j in 0..w {
                                gi[o * w + j] += g[o * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, indices } => {
                let d = nodes[*table].value.cols();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Select { x, indices } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, &i) in indices.iter().enumerate() {
                        gx[i] += g[r];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[*x].value.cols();
                let len = nodes[out_id].value.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, gv) in g.iter().enumerate() {
                        let (r, j) = (i / len, i % len);
                        gx[r * c + start + j] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sinusoid { pos } => {
                let p = val(*pos)[0];
                let d = g.len();
                if let Some(gp) = slot(grads, nodes, *pos) {
                    let mut acc = 0.0;
                    for (i, gv) in g.iter().enumerate() {
                        let w = sinusoid_frequency(i, d);
                        acc += if i % 2 == 0 {
                            gv * (p * w).cos() * w
                        } else {
                            -gv * (p * w).sin() * w
                        };
                    }
                    gp[0] += acc;
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n;
                if let Some(gl) = slot(grads, nodes, *logits) {
                    let scale = g[0] / n as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let zv = val(*logits);
                if let Some(gl) = slot(grads, nodes, *logits) {
                    let scale = g[0] / targets.len() as f64;
                    for i in 0..targets.len() {
                        gl[i] += scale * (sigmoid(zv[i]) - targets[i]);
                    }
                }
            }
            Op::SmoothL1 { x, targets } => {
                let xv = val(*x);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..targets.len() {
                        let d = xv[i] - targets[i];
                        gx[i] += g[0] * if d.abs() < 1.0 { d } else { d.signum() };
                    }
                }
            }
        }
    }
}
