//! Primitive operations and their backward rules.

use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const KL_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

// ── dense helpers on raw slices ─────────────────────────────────────────

pub(crate) fn mat_mul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a [m,k] times b [n,k] transposed -> [m,n]
fn mat_mul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// a [m,k] transposed times b [m,n] -> [k,n]
fn mat_mul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mat_transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

// ── elementwise binary ──────────────────────────────────────────────────

macro_rules! same_shape {
    ($op:literal, $a:expr, $b:expr) => {
        if $a.shape() != $b.shape() {
            return Err(shape_err($op, $a, $b));
        }
    };
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape!("add", self, rhs);
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, needed| {
                vec![
                    needed[0].then(|| g.to_vec()),
                    needed[1].then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape!("sub", self, rhs);
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, needed| {
                vec![
                    needed[0].then(|| g.to_vec()),
                    needed[1].then(|| g.iter().map(|x| -x).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape!("mul", self, rhs);
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needed| {
                vec![
                    needed[0].then(|| g.iter().zip(b.values()).map(|(g, b)| g * b).collect()),
                    needed[1].then(|| g.iter().zip(a.values()).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| g.iter().map(|g| g * c).collect())]
            }),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let values = mat_mul(self.values(), m, k, rhs.values(), n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needed| {
                vec![
                    needed[0].then(|| mat_mul_nt(g, m, n, b.values(), k)),
                    needed[1].then(|| mat_mul_tn(a.values(), m, k, g, n)),
                ]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank-2, got shape {:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let values = mat_transpose(self.values(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            values,
            vec![self.clone()],
            Box::new(move |g, needed| vec![needed[0].then(|| mat_transpose(g, c, r))]),
        ))
    }

    // ── shape surgery ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape,
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(|g, needed| vec![needed[0].then(|| g.to_vec())]),
        ))
    }

    /// Contiguous range along `axis`. Rank-1 tensors slice along axis 0,
    /// rank-2 along rows (0) or columns (1).
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let dims = self.shape().to_vec();
        if axis >= dims.len() || start >= end || end > dims[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {dims:?}"),
            ));
        }
        match (dims.len(), axis) {
            (1, 0) => {
                let values = self.values()[start..end].to_vec();
                let n = dims[0];
                Ok(Tensor::from_op(
                    vec![end - start],
                    values,
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| {
                            let mut full = vec![0.0; n];
                            full[start..end].copy_from_slice(g);
                            full
                        })]
                    }),
                ))
            }
            (2, 0) => {
                let cols = dims[1];
                let values = self.values()[start * cols..end * cols].to_vec();
                let rows = dims[0];
                Ok(Tensor::from_op(
                    vec![end - start, cols],
                    values,
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| {
                            let mut full = vec![0.0; rows * cols];
                            full[start * cols..end * cols].copy_from_slice(g);
                            full
                        })]
                    }),
                ))
            }
            (2, 1) => {
                let (rows, cols) = (dims[0], dims[1]);
                let w = end - start;
                let mut values = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    values.extend_from_slice(&self.values()[r * cols + start..r * cols + end]);
                }
                Ok(Tensor::from_op(
                    vec![rows, w],
                    values,
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| {
                            let mut full = vec![0.0; rows * cols];
                            for r in 0..rows {
                                full[r * cols + start..r * cols + end]
                                    .copy_from_slice(&g[r * w..(r + 1) * w]);
                            }
                            full
                        })]
                    }),
                ))
            }
            _ => Err(Error::invalid(
                "slice",
                format!("unsupported rank {} axis {axis}", dims.len()),
            )),
        }
    }

    /// Row of a matrix as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let cols = *self
            .shape()
            .get(1)
            .ok_or_else(|| Error::invalid("row", "expected rank-2"))?;
        self.slice(0, i, i + 1)?.reshape(vec![cols])
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum over `axis`. Rank-1 axis 0 reduces to a rank-0 scalar; rank-2
    /// axis 0 sums rows into a [cols] vector, axis 1 into [rows].
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let dims = self.shape().to_vec();
        if axis >= dims.len() {
            return Err(Error::invalid(
                "reduce",
                format!("axis {axis} on shape {dims:?}"),
            ));
        }
        match (dims.len(), axis) {
            (1, 0) => {
                let n = dims[0];
                let denom = if mean { n as f64 } else { 1.0 };
                let s: f64 = self.values().iter().sum::<f64>() / denom;
                Ok(Tensor::from_op(
                    vec![],
                    vec![s],
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| vec![g[0] / denom; n])]
                    }),
                ))
            }
            (2, 0) => {
                let (rows, cols) = (dims[0], dims[1]);
                let denom = if mean { rows as f64 } else { 1.0 };
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c] += self.values()[r * cols + c];
                    }
                }
                for v in &mut out {
                    *v /= denom;
                }
                Ok(Tensor::from_op(
                    vec![cols],
                    out,
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| {
                            let mut full = vec![0.0; rows * cols];
                            for r in 0..rows {
                                for c in 0..cols {
                                    full[r * cols + c] = g[c] / denom;
                                }
                            }
                            full
                        })]
                    }),
                ))
            }
            (2, 1) => {
                let (rows, cols) = (dims[0], dims[1]);
                let denom = if mean { cols as f64 } else { 1.0 };
                let out: Vec<f64> = (0..rows)
                    .map(|r| self.values()[r * cols..(r + 1) * cols].iter().sum::<f64>() / denom)
                    .collect();
                Ok(Tensor::from_op(
                    vec![rows],
                    out,
                    vec![self.clone()],
                    Box::new(move |g, needed| {
                        vec![needed[0].then(|| {
                            let mut full = vec![0.0; rows * cols];
                            for r in 0..rows {
                                for c in 0..cols {
                                    full[r * cols + c] = g[r] / denom;
                                }
                            }
                            full
                        })]
                    }),
                ))
            }
            _ => Err(Error::invalid(
                "reduce",
                format!("unsupported rank {} axis {axis}", dims.len()),
            )),
        }
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        let n = self.len();
        let s: f64 = self.values().iter().sum();
        Tensor::from_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, needed| vec![needed[0].then(|| vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn exp(&self) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|v| v.exp()).collect();
        let y = values.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| g.iter().zip(&y).map(|(g, y)| g * y).collect())]
            }),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::invalid("log", format!("non-positive input {v}")));
        }
        let values = self.values().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| g.iter().zip(x.values()).map(|(g, x)| g / x).collect())]
            }),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::invalid("sqrt", format!("non-positive input {v}")));
        }
        let values: Vec<f64> = self.values().iter().map(|v| v.sqrt()).collect();
        let y = values.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| g.iter().zip(&y).map(|(g, y)| 0.5 * g / y).collect())]
            }),
        ))
    }

    /// Elementwise power with a constant exponent. Non-integer or negative
    /// exponents require strictly positive inputs.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        let integral = p.fract() == 0.0;
        if (!integral || p < 0.0) && self.values().iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid(
                "power",
                format!("exponent {p} needs positive inputs"),
            ));
        }
        let values = self.values().iter().map(|v| v.powf(p)).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    g.iter()
                        .zip(x.values())
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect()
                })]
            }),
        ))
    }

    pub fn abs(&self) -> Tensor {
        let values = self.values().iter().map(|v| v.abs()).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    g.iter()
                        .zip(x.values())
                        // subgradient 0 at the kink
                        .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                        .collect()
                })]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let values = self
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    g.iter()
                        .zip(x.values())
                        .map(|(g, &v)| {
                            let u = GELU_C * (v + 0.044715 * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect()
                })]
            }),
        )
    }

    // ── normalization & attention ───────────────────────────────────────

    /// Layer normalization over the last axis (no affine parameters),
    /// variance stabilized with epsilon 1e-5.
    pub fn layer_norm(&self) -> Result<Tensor> {
        let (rows, cols) = match *self.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(Error::invalid(
                    "layer-norm",
                    format!("expected rank 1 or 2, got {:?}", self.shape()),
                ))
            }
        };
        let x = self.values();
        let mut values = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let s = (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = 1.0 / s;
            for c in 0..cols {
                values[r * cols + c] = (row[c] - mu) / s;
            }
        }
        let y = values.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gy_mean = gr
                            .iter()
                            .zip(yr)
                            .map(|(g, y)| g * y)
                            .sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] =
                                inv_std[r] * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = match *self.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(Error::invalid(
                    "softmax",
                    format!("expected rank 1 or 2, got {:?}", self.shape()),
                ))
            }
        };
        if cols == 0 {
            return Err(Error::invalid("softmax", "empty input"));
        }
        let x = self.values();
        let mut values = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                values[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                values[r * cols + c] /= sum;
            }
        }
        let p = values.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let pr = &p[r * cols..(r + 1) * cols];
                        let inner: f64 = gr.iter().zip(pr).map(|(g, p)| g * p).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = pr[c] * (gr[c] - inner);
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    /// Temperature softmax over a vector: `softmax(v / tau)`.
    pub fn softmax(&self, tau: f64) -> Result<Tensor> {
        if self.rank() != 1 || self.is_empty() {
            return Err(Error::invalid(
                "softmax",
                format!("expected non-empty vector, got {:?}", self.shape()),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid("softmax", format!("temperature {tau} <= 0")));
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("softmax", "non-finite input"));
        }
        self.scale(1.0 / tau).softmax_rows()
    }

    // ── lookups ─────────────────────────────────────────────────────────

    /// Gathers rows of a [n, w] matrix. Gradient scatters back, which
    /// makes this double as the embedding lookup and the patch keep-mask.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid("embedding-lookup", "table must be rank-2"));
        }
        let (n, w) = (self.shape()[0], self.shape()[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= n) {
            return Err(Error::invalid(
                "embedding-lookup",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding-lookup", "empty index list"));
        }
        let mut values = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            values.extend_from_slice(&self.values()[i * w..(i + 1) * w]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), w],
            values,
            vec![self.clone()],
            Box::new(move |g, needed| {
                vec![needed[0].then(|| {
                    let mut full = vec![0.0; n * w];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..w {
                            full[i * w + c] += g[r * w + c];
                        }
                    }
                    full
                })]
            }),
        ))
    }
}

impl Tensor {
    /// Fused multi-head scaled-dot-product attention. `self` provides
    /// queries [m, w]; keys and values are [n, w]; per head of width
    /// C = w/heads the output rows are softmax(Q K^T / sqrt(C)) V,
    /// concatenated back to [m, w].
    pub fn multi_head_attention(&self, keys: &Tensor, values: &Tensor, heads: usize) -> Result<Tensor> {
        if self.rank() != 2 || keys.rank() != 2 || values.rank() != 2 {
            return Err(Error::invalid("attention", "expected rank-2 inputs"));
        }
        let (m, w) = (self.shape()[0], self.shape()[1]);
        let n = keys.shape()[0];
        if keys.shape()[1] != w || values.shape() != keys.shape() {
            return Err(shape_err("attention", keys, values));
        }
        if heads == 0 || w % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {w} not divisible by {heads} heads"),
            ));
        }
        let c = w / heads;
        let scale = 1.0 / (c as f64).sqrt();

        let qv = self.values();
        let kv = keys.values();
        let vv = values.values();
        let mut out = vec![0.0; m * w];
        // attention weights per head, saved for the backward pass
        let mut attn = vec![0.0; heads * m * n];
        for h in 0..heads {
            let col = h * c;
            for i in 0..m {
                let qrow = &qv[i * w + col..i * w + col + c];
                let arow = &mut attn[(h * m + i) * n..(h * m + i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let krow = &kv[j * w + col..j * w + col + c];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    arow[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for a in arow.iter_mut() {
                    *a = (*a - max).exp();
                    sum += *a;
                }
                for a in arow.iter_mut() {
                    *a /= sum;
                }
                let orow = &mut out[i * w + col..i * w + col + c];
                for j in 0..n {
                    let a = attn[(h * m + i) * n + j];
                    let vrow = &vv[j * w + col..j * w + col + c];
                    for (o, v) in orow.iter_mut().zip(vrow) {
                        *o += a * v;
                    }
                }
            }
        }

        let (q_t, k_t, v_t) = (self.clone(), keys.clone(), values.clone());
        Ok(Tensor::from_op(
            vec![m, w],
            out,
            vec![self.clone(), keys.clone(), values.clone()],
            Box::new(move |g, needed| {
                let qv = q_t.values();
                let kv = k_t.values();
                let vv = v_t.values();
                let mut dq = needed[0].then(|| vec![0.0; m * w]);
                let mut dk = needed[1].then(|| vec![0.0; n * w]);
                let mut dv = needed[2].then(|| vec![0.0; n * w]);
                let mut da = vec![0.0; n];
                for h in 0..heads {
                    let col = h * c;
                    for i in 0..m {
                        let arow = &attn[(h * m + i) * n..(h * m + i + 1) * n];
                        let grow = &g[i * w + col..i * w + col + c];
                        // dV += A^T g
                        if let Some(dv) = dv.as_mut() {
                            for j in 0..n {
                                let a = arow[j];
                                let dvrow = &mut dv[j * w + col..j * w + col + c];
                                for (d, gg) in dvrow.iter_mut().zip(grow) {
                                    *d += a * gg;
                                }
                            }
                        }
                        if dq.is_some() || dk.is_some() {
                            // dA = g V^T, then the softmax backward
                            let mut inner = 0.0;
                            for j in 0..n {
                                let vrow = &vv[j * w + col..j * w + col + c];
                                let d: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                da[j] = d;
                                inner += d * arow[j];
                            }
                            for j in 0..n {
                                // dS scaled
                                let ds = arow[j] * (da[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv[j * w + col..j * w + col + c];
                                if let Some(dq) = dq.as_mut() {
                                    let dqrow = &mut dq[i * w + col..i * w + col + c];
                                    for (d, k) in dqrow.iter_mut().zip(krow) {
                                        *d += ds * k;
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    let qrow = &qv[i * w + col..i * w + col + c];
                                    let dkrow = &mut dk[j * w + col..j * w + col + c];
                                    for (d, q) in dkrow.iter_mut().zip(qrow) {
                                        *d += ds * q;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dq, dk, dv]
            }),
        ))
    }
}

// ── free functions ──────────────────────────────────────────────────────

/// Concatenation along `axis` (rank-1 axis 0, rank-2 axis 0 or 1).
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat", "no inputs"));
    }
    let rank = parts[0].rank();
    for p in parts {
        if p.rank() != rank {
            return Err(shape_err("concat", &parts[0], p));
        }
    }
    match (rank, axis) {
        (1, 0) => {
            let mut values = Vec::new();
            let mut lens = Vec::new();
            for p in parts {
                lens.push(p.len());
                values.extend_from_slice(p.values());
            }
            Ok(Tensor::from_op(
                vec![values.len()],
                values,
                parts.to_vec(),
                Box::new(move |g, needed| {
                    let mut out = Vec::with_capacity(lens.len());
                    let mut off = 0;
                    for (i, &l) in lens.iter().enumerate() {
                        out.push(needed[i].then(|| g[off..off + l].to_vec()));
                        off += l;
                    }
                    out
                }),
            ))
        }
        (2, 0) => {
            let cols = parts[0].shape()[1];
            for p in parts {
                if p.shape()[1] != cols {
                    return Err(shape_err("concat", &parts[0], p));
                }
            }
            let mut values = Vec::new();
            let mut row_counts = Vec::new();
            for p in parts {
                row_counts.push(p.shape()[0]);
                values.extend_from_slice(p.values());
            }
            let total: usize = row_counts.iter().sum();
            Ok(Tensor::from_op(
                vec![total, cols],
                values,
                parts.to_vec(),
                Box::new(move |g, needed| {
                    let mut out = Vec::with_capacity(row_counts.len());
                    let mut off = 0;
                    for (i, &r) in row_counts.iter().enumerate() {
                        out.push(needed[i].then(|| g[off..off + r * cols].to_vec()));
                        off += r * cols;
                    }
                    out
                }),
            ))
        }
        (2, 1) => {
            let rows = parts[0].shape()[0];
            for p in parts {
                if p.shape()[0] != rows {
                    return Err(shape_err("concat", &parts[0], p));
                }
            }
            let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut values = vec![0.0; rows * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                for r in 0..rows {
                    values[r * total + off..r * total + off + w]
                        .copy_from_slice(&p.values()[r * w..(r + 1) * w]);
                }
                off += w;
            }
            Ok(Tensor::from_op(
                vec![rows, total],
                values,
                parts.to_vec(),
                Box::new(move |g, needed| {
                    let mut out = Vec::with_capacity(widths.len());
                    let mut off = 0;
                    for (i, &w) in widths.iter().enumerate() {
                        out.push(needed[i].then(|| {
                            let mut part = vec![0.0; rows * w];
                            for r in 0..rows {
                                part[r * w..(r + 1) * w].copy_from_slice(
                                    &g[r * total + off..r * total + off + w],
                                );
                            }
                            part
                        }));
                        off += w;
                    }
                    out
                }),
            ))
        }
        _ => Err(Error::invalid(
            "concat",
            format!("unsupported rank {rank} axis {axis}"),
        )),
    }
}

/// Inner product of two equal-length vectors, as a rank-0 tensor.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(shape_err("dot", a, b));
    }
    a.mul(b)?.sum_axis(0)
}

/// Cosine similarity of two non-zero vectors, differentiable in both.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(shape_err("cosine", a, b));
    }
    let na: f64 = a.values().iter().map(|v| v * v).sum();
    let nb: f64 = b.values().iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine", "zero-norm input"));
    }
    let num = dot(a, b)?;
    let den = dot(a, a)?.mul(&dot(b, b)?)?.powf(-0.5)?;
    num.mul(&den)
}

/// KL divergence of two probability vectors, with `0 log 0 = 0` and the
/// second argument floored at 1e-12 before the log.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.rank() != 1 || p.shape() != q.shape() {
        return Err(shape_err("kl", p, q));
    }
    for (name, t) in [("p", p), ("q", q)] {
        let s: f64 = t.values().iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "kl",
                format!("{name} sums to {s}, not a probability vector"),
            ));
        }
    }
    let pv = p.values().to_vec();
    let qv = q.values().to_vec();
    let max_diff = pv
        .iter()
        .zip(&qv)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let value = if max_diff <= 1e-12 {
        0.0
    } else {
        let mut s = 0.0;
        for (&pi, &qi) in pv.iter().zip(&qv) {
            if pi > 0.0 {
                s += pi * (pi / qi.max(KL_FLOOR)).ln();
            }
        }
        // True KL of distributions is non-negative; tiny negatives here
        // are float cancellation.
        s.max(0.0)
    };
    Ok(Tensor::from_op(
        vec![],
        vec![value],
        vec![p.clone(), q.clone()],
        Box::new(move |g, needed| {
            let g = g[0];
            vec![
                needed[0].then(|| {
                    pv.iter()
                        .zip(&qv)
                        .map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                g * ((pi / qi.max(KL_FLOOR)).ln() + 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }),
                needed[1].then(|| {
                    pv.iter()
                        .zip(&qv)
                        .map(|(&pi, &qi)| {
                            if qi > KL_FLOOR {
                                -g * pi / qi
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_ones() {
        let a = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_kind() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::vector(vec![4.2; 8]);
        let y = x.layer_norm().unwrap();
        for v in y.values() {
            assert_close(*v, 0.0, 1e-12);
        }
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let x = Tensor::vector(vec![0.0]);
        assert_eq!(x.gelu().values(), &[0.0]);
    }

    #[test]
    fn softmax_uniform_input() {
        let x = Tensor::vector(vec![3.3; 4]);
        for &tau in &[0.07, 1.0, 5.0] {
            let p = x.softmax(tau).unwrap();
            for v in p.values() {
                assert_close(*v, 0.25, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_logits() {
        let p = Tensor::vector(vec![1.0, 0.0]).softmax(1.0).unwrap();
        assert_close(p.values()[0], 0.7311, 1e-4);
        assert_close(p.values()[1], 0.2689, 1e-4);
    }

    #[test]
    fn softmax_sharpens_as_tau_drops() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let mut last = 0.0;
        for &tau in &[1.0, 0.1, 0.01] {
            let p = x.softmax(tau).unwrap();
            assert!(p.values()[0] > last);
            last = p.values()[0];
        }
        assert!(last > 0.999);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::vector(vec![-3.0, 100.0, 0.5, 2.0, -77.0]);
        let p = x.softmax(0.07).unwrap();
        assert_close(p.values().iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_and_bad_tau() {
        assert!(Tensor::vector(vec![]).softmax(1.0).is_err());
        assert!(Tensor::vector(vec![1.0]).softmax(0.0).is_err());
        assert!(Tensor::vector(vec![1.0]).softmax(-1.0).is_err());
    }

    #[test]
    fn cosine_basic_geometry() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 1.0]);
        let c = Tensor::vector(vec![-1.0, 0.0]);
        assert_close(cosine_similarity(&a, &a).unwrap().item(), 1.0, 1e-12);
        assert_close(cosine_similarity(&a, &b).unwrap().item(), 0.0, 1e-12);
        assert_close(cosine_similarity(&a, &c).unwrap().item(), -1.0, 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(cosine_similarity(&a, &b).is_err());
    }

    #[test]
    fn cosine_gradient_zero_at_maximum() {
        let v = vec![0.3, -1.2, 0.8];
        let a = Tensor::leaf(vec![3], v.clone(), true).unwrap();
        let b = Tensor::leaf(vec![3], v, false).unwrap();
        let c = cosine_similarity(&a, &b).unwrap();
        c.backward().unwrap();
        for g in a.grad().unwrap() {
            assert_close(g, 0.0, 1e-12);
        }
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = Tensor::vector(vec![0.25; 4]);
        assert_eq!(kl_divergence(&p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        let p = Tensor::vector(vec![1.0, 0.0]);
        let q = Tensor::vector(vec![0.5, 0.5]);
        assert_close(
            kl_divergence(&p, &q).unwrap().item(),
            std::f64::consts::LN_2,
            1e-12,
        );
    }

    #[test]
    fn kl_matches_direct_sum_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "kl-oracle");
        for _ in 0..20 {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let oracle: f64 = p
                .iter()
                .zip(&q)
                .map(|(&pi, &qi)| pi * (pi / qi).ln())
                .sum();
            let got = kl_divergence(&Tensor::vector(p), &Tensor::vector(q))
                .unwrap()
                .item();
            assert_close(got, oracle, 1e-10);
        }
    }

    #[test]
    fn kl_rejects_non_distributions() {
        let p = Tensor::vector(vec![0.7, 0.7]);
        let q = Tensor::vector(vec![0.5, 0.5]);
        assert!(kl_divergence(&p, &q).is_err());
        let short = Tensor::vector(vec![1.0]);
        assert!(kl_divergence(&q, &short).is_err());
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let table = Tensor::leaf(vec![3, 2], vec![1., 2., 3., 4., 5., 6.], true).unwrap();
        let picked = table.select_rows(&[2, 0, 2]).unwrap();
        assert_eq!(picked.values(), &[5., 6., 1., 2., 5., 6.]);
        picked.sum_all().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap();
        let b = Tensor::matrix(2, 3, vec![4., 5., 6., 7., 8., 9.]).unwrap();
        let cat = concat(&[a, b], 0).unwrap();
        assert_eq!(cat.shape(), &[3, 3]);
        let back = cat.slice(0, 1, 3).unwrap();
        assert_eq!(back.values(), &[4., 5., 6., 7., 8., 9.]);
        let col = cat.slice(1, 2, 3).unwrap();
        assert_eq!(col.values(), &[3., 6., 9.]);
    }

    #[test]
    fn log_sqrt_reject_non_positive() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        assert!(x.log().is_err());
        assert!(x.sqrt().is_err());
        let y = Tensor::vector(vec![1.0, -2.0]);
        assert!(y.powf(0.5).is_err());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::vector(vec![0.1, -0.7, 2.3]);
        let run = || {
            let y = x.gelu().layer_norm().unwrap().softmax(0.5).unwrap();
            y.values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
