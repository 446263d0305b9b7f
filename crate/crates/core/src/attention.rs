//! Attention primitives and their backward passes.
//!
//! Everything here works on row-major `[rows, features]` matrices. Multi-head
//! layouts split the feature axis into `heads` contiguous chunks of
//! `head_dim` columns.

use std::fmt;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Attention-config dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// Query heads; the channel positional table has width `model_dim / query_heads`.
    pub query_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            heads,
            query_heads: heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.model_dim
            )));
        }
        if self.query_heads == 0 || self.model_dim % self.query_heads != 0 {
            return Err(Error::Config("query heads must divide model dim".into()));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("RoPE needs an even head dim, got {}", self.head_dim())));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn channel_pe_dim(&self) -> usize {
        self.model_dim / self.query_heads
    }
}

/// Additive attention mask: `0.0` where attention is enabled, `-inf` where
/// it is blocked.
#[derive(Clone, PartialEq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AdditiveMask {
    pub fn enabled(rows: usize, cols: usize) -> Self {
        AdditiveMask {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn blocked(rows: usize, cols: usize) -> Self {
        AdditiveMask {
            rows,
            cols,
            data: vec![f64::NEG_INFINITY; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut allow: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::blocked(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if allow(r, c) {
                    m.data[r * cols + c] = 0.0;
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_enabled(&self, r: usize, c: usize) -> bool {
        self.value(r, c) == 0.0
    }

    pub fn set(&mut self, r: usize, c: usize, enabled: bool) {
        self.data[r * self.cols + c] = if enabled { 0.0 } else { f64::NEG_INFINITY };
    }

    pub fn row_enabled(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.is_enabled(r, c)).collect()
    }

    /// Text grid: one line per query, `#` enabled, `.` blocked.
    pub fn grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_enabled(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Prepends `n` always-enabled key columns.
    pub fn with_leading_enabled_cols(&self, n: usize) -> Self {
        AdditiveMask::from_fn(self.rows, self.cols + n, |r, c| c < n || self.is_enabled(r, c - n))
    }
}

impl fmt::Debug for AdditiveMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AdditiveMask {}x{}\n{}", self.rows, self.cols, self.grid())
    }
}

/// One independent attention problem inside a batched call: which query rows
/// attend to which key/value rows, under which mask.
#[derive(Debug, Clone)]
pub struct AttnGroup {
    pub q_rows: Vec<usize>,
    pub k_rows: Vec<usize>,
    pub mask: AdditiveMask,
}

/// Saved softmax weights per group, laid out `[head][q][k]`.
#[derive(Debug, Clone, Default)]
pub struct AttnCache {
    probs: Vec<Vec<f64>>,
}

impl AttnCache {
    /// Attention weights of `head` for query `qi` in group `g`.
    pub fn weights(&self, group: &AttnGroup, g: usize, head: usize, qi: usize) -> &[f64] {
        let nk = group.k_rows.len();
        let nq = group.q_rows.len();
        let base = (head * nq + qi) * nk;
        &self.probs[g][base..base + nk]
    }
}

fn check_groups(q: &Mat, k: &Mat, v: &Mat, groups: &[AttnGroup], heads: usize) -> Result<()> {
    let d = q.ncols();
    if k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "attention operands q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
    }
    for g in groups {
        if g.mask.rows() != g.q_rows.len() || g.mask.cols() != g.k_rows.len() {
            return Err(Error::Shape(format!(
                "mask {}x{} for {} queries and {} keys",
                g.mask.rows(),
                g.mask.cols(),
                g.q_rows.len(),
                g.k_rows.len()
            )));
        }
        if g.q_rows.iter().any(|&r| r >= q.nrows()) || g.k_rows.iter().any(|&r| r >= k.nrows()) {
            return Err(Error::Shape("attention group row out of range".into()));
        }
    }
    Ok(())
}

/// Scaled dot-product attention, per head, without output projection.
///
/// Blocked keys are skipped entirely, so their values never enter the
/// arithmetic. A query whose every key is blocked gets a zero row. Query rows
/// not listed in any group are zero as well.
pub fn attention_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    groups: &[AttnGroup],
    heads: usize,
) -> Result<(Mat, AttnCache)> {
    check_groups(q, k, v, groups, heads)?;
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((q.nrows(), d));
    let mut cache = AttnCache {
        probs: Vec::with_capacity(groups.len()),
    };
    let (qs, ks, vs) = (as_slice(q), as_slice(k), as_slice(v));
    let os = out.as_slice_mut().expect("standard layout");
    for g in groups {
        let nq = g.q_rows.len();
        let nk = g.k_rows.len();
        let mut probs = vec![0.0; heads * nq * nk];
        let enabled: Vec<Vec<usize>> = (0..nq).map(|i| g.mask.row_enabled(i)).collect();
        for h in 0..heads {
            let off = h * dh;
            for (i, &qr) in g.q_rows.iter().enumerate() {
                let en = &enabled[i];
                if en.is_empty() {
                    continue;
                }
                let qv = &qs[qr * d + off..qr * d + off + dh];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for &j in en {
                    let kr = g.k_rows[j];
                    let kv = &ks[kr * d + off..kr * d + off + dh];
                    let s = dot(qv, kv) * scale + g.mask.value(i, j);
                    p[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for &j in en {
                    p[j] = (p[j] - max).exp();
                    sum += p[j];
                }
                let o = &mut os[qr * d + off..qr * d + off + dh];
                for &j in en {
                    p[j] /= sum;
                    let vr = g.k_rows[j];
                    let vv = &vs[vr * d + off..vr * d + off + dh];
                    for (oo, vvv) in o.iter_mut().zip(vv) {
                        *oo += p[j] * vvv;
                    }
                }
            }
        }
        cache.probs.push(probs);
    }
    Ok((out, cache))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
pub fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    groups: &[AttnGroup],
    heads: usize,
    cache: &AttnCache,
    grad_out: &Mat,
) -> (Mat, Mat, Mat) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Mat::zeros(q.dim());
    let mut gk = Mat::zeros(k.dim());
    let mut gv = Mat::zeros(v.dim());
    let (qs, ks, vs, gos) = (as_slice(q), as_slice(k), as_slice(v), as_slice(grad_out));
    let gqs = gq.as_slice_mut().expect("standard layout");
    let gks = gk.as_slice_mut().expect("standard layout");
    let gvs = gv.as_slice_mut().expect("standard layout");
    for (gi, g) in groups.iter().enumerate() {
        let nq = g.q_rows.len();
        let nk = g.k_rows.len();
        let probs = &cache.probs[gi];
        let mut dp = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for (i, &qr) in g.q_rows.iter().enumerate() {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &gos[qr * d + off..qr * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..nk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vr = g.k_rows[j];
                    dp[j] = dot(go, &vs[vr * d + off..vr * d + off + dh]);
                    weighted += p[j] * dp[j];
                    let gvv = &mut gvs[vr * d + off..vr * d + off + dh];
                    for (a, b) in gvv.iter_mut().zip(go) {
                        *a += p[j] * b;
                    }
                }
                for j in 0..nk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kr = g.k_rows[j];
                    for c in 0..dh {
                        gqs[qr * d + off + c] += ds * ks[kr * d + off + c];
                        gks[kr * d + off + c] += ds * qs[qr * d + off + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Single-group masked multi-head attention followed by the output
/// projection `W_o` (`[D, D]`, applied as `x · W_o`).
pub fn masked_mha(q: &Mat, k: &Mat, v: &Mat, mask: &AdditiveMask, heads: usize, w_o: &Mat) -> Result<Mat> {
    let group = AttnGroup {
        q_rows: (0..q.nrows()).collect(),
        k_rows: (0..k.nrows()).collect(),
        mask: mask.clone(),
    };
    let (a, _) = attention_forward(q, k, v, std::slice::from_ref(&group), heads)?;
    Ok(a.dot(w_o))
}

/// Row-wise RMS normalization without gain; returns the output and the
/// per-row inverse RMS.
pub fn rmsnorm_forward(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
        let r = 1.0 / (ms + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        inv.push(r);
    }
    (out, inv)
}

pub fn rmsnorm_backward(x: &Mat, inv: &[f64], grad_out: &Mat) -> Mat {
    let n = x.ncols() as f64;
    let mut gx = Mat::zeros(x.dim());
    for (((xr, gr), mut out), &r) in x.rows().into_iter().zip(grad_out.rows()).zip(gx.rows_mut()).zip(inv) {
        let gdotx: f64 = xr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        let coef = gdotx * r * r * r / n;
        for ((o, &xv), &gv) in out.iter_mut().zip(xr.iter()).zip(gr.iter()) {
            *o = gv * r - xv * coef;
        }
    }
    gx
}

/// RMS normalization with a learned gain vector.
pub fn rmsnorm(v: &Mat, gain: &[f64]) -> Mat {
    let (mut y, _) = rmsnorm_forward(v, RMS_EPS);
    for mut row in y.rows_mut() {
        for (a, g) in row.iter_mut().zip(gain) {
            *a *= g;
        }
    }
    y
}

/// Row-wise layer normalization (no affine); returns output and inverse std.
pub fn layernorm_forward(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        inv.push(r);
    }
    (out, inv)
}

/// Backward of [`layernorm_forward`] given its normalized output.
pub fn layernorm_backward(xhat: &Mat, inv: &[f64], grad_out: &Mat) -> Mat {
    let n = xhat.ncols() as f64;
    let mut gx = Mat::zeros(xhat.dim());
    for (((xr, gr), mut out), &r) in xhat.rows().into_iter().zip(grad_out.rows()).zip(gx.rows_mut()).zip(inv) {
        let gsum: f64 = gr.sum();
        let gx_dot: f64 = xr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for ((o, &xv), &gv) in out.iter_mut().zip(xr.iter()).zip(gr.iter()) {
            *o = r * (gv - gsum / n - xv * gx_dot / n);
        }
    }
    gx
}

/// Rotation frequencies `θ_j = base^(-2j/d_h)` for `j < d_h/2`.
pub fn rope_freqs(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

/// Half-split rotary encoding applied independently to every head chunk of
/// every row; row `i` is rotated by `positions[i]`. With `inverse` the
/// rotation angle is negated, which is also the backward pass.
pub fn rope_rows(x: &Mat, positions: &[usize], heads: usize, inverse: bool) -> Mat {
    let d = x.ncols();
    let dh = d / heads;
    let half = dh / 2;
    let freqs = rope_freqs(dh);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Mat::zeros(x.dim());
    let xs = as_slice(x);
    let os = out.as_slice_mut().expect("standard layout");
    let mut cs = vec![(0.0, 0.0); half];
    for (r, &m) in positions.iter().enumerate() {
        for (j, f) in freqs.iter().enumerate() {
            let ang = m as f64 * f;
            cs[j] = (ang.cos(), sign * ang.sin());
        }
        for h in 0..heads {
            let base = r * d + h * dh;
            for (j, &(c, s)) in cs.iter().enumerate() {
                let z1 = xs[base + j];
                let z2 = xs[base + half + j];
                os[base + j] = z1 * c - z2 * s;
                os[base + half + j] = z1 * s + z2 * c;
            }
        }
    }
    out
}

/// Rotary encoding of a single head-width vector at position `m`.
pub fn rope(z: &[f64], m: usize) -> Result<Vec<f64>> {
    if z.len() % 2 != 0 {
        return Err(Error::Config(format!("RoPE needs an even width, got {}", z.len())));
    }
    let x = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(rope_rows(&x.to_owned(), &[m], 1, false).into_raw_vec_and_offset().0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn as_slice(m: &Mat) -> &[f64] {
    m.as_slice().expect("matrices are kept in standard layout")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
