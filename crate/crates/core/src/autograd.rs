//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape; [`Tape::backward`] walks it in reverse and returns gradients for
//! every node that depends on a trainable leaf. Nodes built only from
//! constants are never differentiated.

use std::rc::Rc;

use crate::attention::{self, AttnCache, AttnGroup, Mat};
use crate::convfeat::{adaptive_pool_backward, adaptive_pool_forward, im2col_backward, im2col_forward, ConvGeometry};
use crate::losses;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A single (prediction row, target row) pair scored by the reconstruction loss.
pub type RowPair = (usize, usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, inv: Vec<f64> },
    RmsNorm { x: Var, inv: Vec<f64> },
    Rope { x: Var, positions: Rc<Vec<usize>>, heads: usize },
    Attention { q: Var, k: Var, v: Var, groups: Rc<Vec<AttnGroup>>, heads: usize, cache: AttnCache },
    GatherRows { x: Var, rows: Rc<Vec<Option<usize>>> },
    GatherCols { x: Var, cols: Rc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Im2Col { x: Var, geom: ConvGeometry },
    AdaptivePool { x: Var, patches: usize, lin: usize, lout: usize },
    PatchRmse { pred: Var, target: Rc<Mat>, pairs: Rc<Vec<RowPair>>, split: usize },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, weights: Option<Rc<Vec<f64>>> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation log of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).dim(), (1, self.value(a).ncols()), "bias shape");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a * row` with `row` of shape `[1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).dim(), (1, self.value(a).ncols()), "gain shape");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(attention::gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(attention::silu);
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Var {
        let (value, inv) = attention::layernorm_forward(self.value(x), eps);
        let ng = self.ng(x);
        self.push(value, Op::LayerNorm { x, inv }, ng)
    }

    /// Row-wise RMS normalization (no gain).
    pub fn rmsnorm(&mut self, x: Var, eps: f64) -> Var {
        let (value, inv) = attention::rmsnorm_forward(self.value(x), eps);
        let ng = self.ng(x);
        self.push(value, Op::RmsNorm { x, inv }, ng)
    }

    pub fn rope(&mut self, x: Var, positions: Rc<Vec<usize>>, heads: usize) -> Var {
        assert_eq!(positions.len(), self.value(x).nrows(), "one position per row");
        let value = attention::rope_rows(self.value(x), &positions, heads, false);
        let ng = self.ng(x);
        self.push(value, Op::Rope { x, positions, heads }, ng)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: Rc<Vec<AttnGroup>>, heads: usize) -> Var {
        let (value, cache) = attention::attention_forward(self.value(q), self.value(k), self.value(v), &groups, heads)
            .expect("attention operands validated by the caller");
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                cache,
            },
            ng,
        )
    }

    /// Output row `i` is `x[rows[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<Option<usize>>>) -> Var {
        let src = self.value(x);
        let cols = src.ncols();
        let mut value = Mat::zeros((rows.len(), cols));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                value.row_mut(i).assign(&src.row(r));
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, rows }, ng)
    }

    /// Output column `j` is `x[:, cols[j]]`.
    pub fn gather_cols(&mut self, x: Var, cols: Rc<Vec<usize>>) -> Var {
        let src = self.value(x);
        let value = Mat::from_shape_fn((src.nrows(), cols.len()), |(r, j)| src[[r, cols[j]]]);
        let ng = self.ng(x);
        self.push(value, Op::GatherCols { x, cols }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(1), &views).expect("concat_cols row mismatch");
        let value = value.as_standard_layout().into_owned();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row-major reshape (no data movement).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape size mismatch");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        let value = im2col_forward(self.value(x), &geom);
        let ng = self.ng(x);
        self.push(value, Op::Im2Col { x, geom }, ng)
    }

    pub fn adaptive_pool(&mut self, x: Var, patches: usize, lin: usize, lout: usize) -> Var {
        let value = adaptive_pool_forward(self.value(x), patches, lin, lout);
        let ng = self.ng(x);
        self.push(value, Op::AdaptivePool { x, patches, lin, lout }, ng)
    }

    /// Mean patch RMSE over `pairs`; columns `[0, split)` and `[split, W)`
    /// are scored separately and averaged.
    pub fn patch_rmse(&mut self, pred: Var, target: Rc<Mat>, pairs: Rc<Vec<RowPair>>, split: usize) -> Var {
        let v = losses::paired_rmse(self.value(pred), &target, &pairs, split, None);
        let ng = self.ng(pred);
        self.push(
            Mat::from_elem((1, 1), v),
            Op::PatchRmse {
                pred,
                target,
                pairs,
                split,
            },
            ng,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>, weights: Option<Rc<Vec<f64>>>) -> Var {
        let v = losses::weighted_cross_entropy(self.value(logits), &labels, weights.as_deref().map(|w| &w[..]), None);
        let ng = self.ng(logits);
        self.push(Mat::from_elem((1, 1), v), Op::CrossEntropy { logits, labels, weights }, ng)
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(t, w)| w * self.scalar(t)).sum();
        let ng = terms.iter().any(|&(t, _)| self.ng(t));
        self.push(Mat::from_elem((1, 1), v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagates from scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.ng(*row) {
                    let prod = g * self.value(*a);
                    self.accumulate(grads, *row, prod.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(attention::gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = self.value(*a).mapv(attention::silu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, inv } => {
                self.accumulate(grads, *x, attention::layernorm_backward(&node.value, inv, g));
            }
            Op::RmsNorm { x, inv } => {
                self.accumulate(grads, *x, attention::rmsnorm_backward(self.value(*x), inv, g));
            }
            Op::Rope { x, positions, heads } => {
                self.accumulate(grads, *x, attention::rope_rows(g, positions, *heads, true));
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                cache,
            } => {
                let (gq, gk, gv) = attention::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    groups,
                    *heads,
                    cache,
                    g,
                );
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::GatherRows { x, rows } => {
                if self.ng(*x) {
                    let src = self.value(*x);
                    let mut gx = Mat::zeros(src.dim());
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let mut dst = gx.row_mut(r);
                            dst += &g.row(i);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::GatherCols { x, cols } => {
                if self.ng(*x) {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for r in 0..g.nrows() {
                        for (j, &c) in cols.iter().enumerate() {
                            gx[[r, c]] += g[[r, j]];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(ndarray::s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(ndarray::s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).dim();
                self.accumulate(grads, *x, g.clone().into_shape_with_order(shape).expect("reshape back"));
            }
            Op::Im2Col { x, geom } => {
                self.accumulate(grads, *x, im2col_backward(g, geom));
            }
            Op::AdaptivePool { x, patches, lin, lout } => {
                self.accumulate(grads, *x, adaptive_pool_backward(g, *patches, *lin, *lout));
            }
            Op::PatchRmse {
                pred,
                target,
                pairs,
                split,
            } => {
                let mut gp = Mat::zeros(self.value(*pred).dim());
                losses::paired_rmse(self.value(*pred), target, pairs, *split, Some(&mut gp));
                gp *= g[[0, 0]];
                self.accumulate(grads, *pred, gp);
            }
            Op::CrossEntropy { logits, labels, weights } => {
                let mut gl = Mat::zeros(self.value(*logits).dim());
                losses::weighted_cross_entropy(
                    self.value(*logits),
                    labels,
                    weights.as_deref().map(|w| &w[..]),
                    Some(&mut gl),
                );
                gl *= g[[0, 0]];
                self.accumulate(grads, *logits, gl);
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    self.accumulate(grads, t, Mat::from_elem((1, 1), w * g[[0, 0]]));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Builds a scalar from one parameter through `f`, then compares the
    /// tape gradient with central differences on every entry.
    fn check(init: Mat, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(init.clone());
        let out = f(&mut tape, p);
        let grads = tape.backward(out);
        let analytic = grads.get(p).cloned().unwrap_or_else(|| Mat::zeros(init.dim()));
        let h = 1e-5;
        for idx in 0..init.len() {
            let eval = |delta: f64| {
                let mut m = init.clone();
                m.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let p = t.param(m);
                let o = f(&mut t, p);
                t.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {idx}: analytic {a} numeric {numeric}");
        }
    }

    /// Reduces a matrix node to a scalar with fixed random weights.
    fn project(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(&mut rng, r, c));
        let prod = t.mul(x, w);
        let ones_r = t.constant(Mat::ones((1, r)));
        let ones_c = t.constant(Mat::ones((c, 1)));
        let s = t.matmul(ones_r, prod);
        t.matmul(s, ones_c)
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |t, p| {
            let a = t.gelu(p);
            let b = t.silu(p);
            let c = t.mul(a, b);
            let d = t.sub(c, p);
            let e = t.scale(d, 1.7);
            project(t, e, 9)
        });
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 8);
        check(x.clone(), |t, p| {
            let a = t.layernorm(p, 1e-5);
            project(t, a, 3)
        });
        check(x, |t, p| {
            let a = t.rmsnorm(p, 1e-6);
            project(t, a, 4)
        });
    }

    #[test]
    fn grad_broadcast_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 5, 3);
        let x = random(&mut rng, 4, 5);
        let bias = random(&mut rng, 1, 3);
        check(w, |t, p| {
            let xi = t.constant(x.clone());
            let y = t.matmul(xi, p);
            let b = t.constant(bias.clone());
            let y = t.add_row(y, b);
            let y = t.mul_row(y, b);
            project(t, y, 5)
        });
        check(bias.clone(), |t, p| {
            let xi = t.constant(x.clone());
            let wi = t.constant(random(&mut ChaCha8Rng::seed_from_u64(8), 5, 3));
            let y = t.matmul(xi, wi);
            let y = t.mul_row(y, p);
            let y = t.add_row(y, p);
            project(t, y, 6)
        });
    }

    #[test]
    fn grad_rope_gather_concat_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 8);
        check(x, |t, p| {
            let r = t.rope(p, Rc::new(vec![0, 3, 17]), 2);
            let g = t.gather_rows(r, Rc::new(vec![Some(2), None, Some(0), Some(2)]));
            let c = t.gather_cols(g, Rc::new(vec![0, 1, 1, 7]));
            let cc = t.concat_cols(&[g, c]);
            let cr = t.concat_rows(&[cc, cc]);
            let rs = t.reshape(cr, 12, 8);
            project(t, rs, 7)
        });
    }

    #[test]
    fn grad_attention_all_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kmat = random(&mut rng, 5, 8);
        let vmat = random(&mut rng, 5, 8);
        let groups = Rc::new(vec![
            AttnGroup {
                q_rows: vec![0, 1],
                k_rows: vec![0, 1, 2],
                mask: crate::attention::AdditiveMask::from_fn(2, 3, |i, j| j != 1 || i == 1),
            },
            AttnGroup {
                q_rows: vec![2, 3],
                k_rows: vec![3, 4],
                mask: crate::attention::AdditiveMask::from_fn(2, 2, |i, _| i == 0),
            },
        ]);
        let q = random(&mut rng, 4, 8);
        for which in 0..3 {
            let init = [q.clone(), kmat.clone(), vmat.clone()][which].clone();
            let (qq, kk, vv) = (q.clone(), kmat.clone(), vmat.clone());
            let groups = groups.clone();
            check(init, move |t, p| {
                let qv = if which == 0 { p } else { t.constant(qq.clone()) };
                let kv = if which == 1 { p } else { t.constant(kk.clone()) };
                let vv = if which == 2 { p } else { t.constant(vv.clone()) };
                let a = t.attention(qv, kv, vv, groups.clone(), 2);
                project(t, a, 11)
            });
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Mat::ones((2, 2)));
        let p = t.param(Mat::ones((2, 2)));
        let s = t.mul(c, p);
        let r = project(&mut t, s, 1);
        let g = t.backward(r);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
