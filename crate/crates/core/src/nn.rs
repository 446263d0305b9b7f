//! Parameterized layers built on the tape: linear maps, the gated
//! feed-forward block, and pre-norm self/cross attention.

use std::rc::Rc;

use crate::attention::{AttnGroup, RMS_EPS};
use crate::autograd::{Tape, Var};
use crate::params::{Bound, Init, ParamId, ParamStore, INIT_STD};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &str, input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: store.add(format!("{path}.weight"), (input, output), Init::TruncNormal(INIT_STD)),
            bias: bias.then(|| store.add(format!("{path}.bias"), (1, output), Init::Zeros)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p[self.weight]);
        match self.bias {
            Some(b) => tape.add_row(y, p[b]),
            None => y,
        }
    }
}

/// RMS normalization with a learned gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Self {
        RmsNorm {
            gain: store.add(format!("{path}.gain"), (1, dim), Init::Ones),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.rmsnorm(x, RMS_EPS);
        tape.mul_row(n, p[self.gain])
    }
}

/// `h + W_out · (SiLU(W_in n) ⊙ SiLU(W_gate n))` with `n = RMSNorm(h)`.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    pub norm: RmsNorm,
    pub w_in: Linear,
    pub w_gate: Linear,
    pub w_out: Linear,
}

impl GatedFfn {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, hidden: usize) -> Self {
        GatedFfn {
            norm: RmsNorm::new(store, &format!("{path}.norm"), dim),
            w_in: Linear::new(store, &format!("{path}.w_in"), dim, hidden, false),
            w_gate: Linear::new(store, &format!("{path}.w_gate"), dim, hidden, false),
            w_out: Linear::new(store, &format!("{path}.w_out"), hidden, dim, false),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, h: Var) -> Var {
        let n = self.norm.apply(tape, p, h);
        let a = self.w_in.apply(tape, p, n);
        let a = tape.silu(a);
        let g = self.w_gate.apply(tape, p, n);
        let g = tape.silu(g);
        let act = tape.mul(a, g);
        let out = self.w_out.apply(tape, p, act);
        tape.add(h, out)
    }
}

/// Row positions and optional additive positional rows for one side of an
/// attention call.
#[derive(Debug, Clone)]
pub struct Side {
    pub positions: Rc<Vec<usize>>,
    /// `[rows, D]` rows added after rotation.
    pub pe: Option<Var>,
}

impl Side {
    pub fn new(positions: Rc<Vec<usize>>, pe: Option<Var>) -> Self {
        Side { positions, pe }
    }
}

fn project(tape: &mut Tape, p: &Bound, w: &Linear, x: Var, side: &Side, heads: usize) -> Var {
    let y = w.apply(tape, p, x);
    let y = tape.rope(y, side.positions.clone(), heads);
    match side.pe {
        Some(e) => tape.add(y, e),
        None => y,
    }
}

#[derive(Debug, Clone)]
struct Projections {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl Projections {
    fn new(store: &mut ParamStore, path: &str, dim: usize) -> Self {
        Projections {
            wq: Linear::new(store, &format!("{path}.wq"), dim, dim, false),
            wk: Linear::new(store, &format!("{path}.wk"), dim, dim, false),
            wv: Linear::new(store, &format!("{path}.wv"), dim, dim, false),
            wo: Linear::new(store, &format!("{path}.wo"), dim, dim, false),
        }
    }
}

/// Pre-norm self-attention followed by a gated feed-forward block.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    norm: RmsNorm,
    proj: Projections,
    ffn: GatedFfn,
    heads: usize,
}

impl SelfBlock {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, hidden: usize, heads: usize) -> Self {
        SelfBlock {
            norm: RmsNorm::new(store, &format!("{path}.norm"), dim),
            proj: Projections::new(store, path, dim),
            ffn: GatedFfn::new(store, &format!("{path}.ffn"), dim, hidden),
            heads,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, h: Var, side: &Side, groups: Rc<Vec<AttnGroup>>) -> Var {
        let u = self.norm.apply(tape, p, h);
        let q = project(tape, p, &self.proj.wq, u, side, self.heads);
        let k = project(tape, p, &self.proj.wk, u, side, self.heads);
        let v = self.proj.wv.apply(tape, p, u);
        let a = tape.attention(q, k, v, groups, self.heads);
        let a = self.proj.wo.apply(tape, p, a);
        let h_star = tape.add(h, a);
        self.ffn.apply(tape, p, h_star)
    }
}

/// Pre-norm cross-attention from a query stream into a key/value stream,
/// optionally followed by a gated feed-forward block.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    q_norm: RmsNorm,
    kv_norm: RmsNorm,
    proj: Projections,
    ffn: Option<GatedFfn>,
    heads: usize,
}

impl CrossLayer {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, hidden: Option<usize>, heads: usize) -> Self {
        CrossLayer {
            q_norm: RmsNorm::new(store, &format!("{path}.q_norm"), dim),
            kv_norm: RmsNorm::new(store, &format!("{path}.kv_norm"), dim),
            proj: Projections::new(store, path, dim),
            ffn: hidden.map(|h| GatedFfn::new(store, &format!("{path}.ffn"), dim, h)),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        kv: Var,
        q_side: &Side,
        k_side: &Side,
        groups: Rc<Vec<AttnGroup>>,
    ) -> Var {
        let qn = self.q_norm.apply(tape, p, query);
        let kn = self.kv_norm.apply(tape, p, kv);
        let q = project(tape, p, &self.proj.wq, qn, q_side, self.heads);
        let k = project(tape, p, &self.proj.wk, kn, k_side, self.heads);
        let v = self.proj.wv.apply(tape, p, kn);
        let a = tape.attention(q, k, v, groups, self.heads);
        let a = self.proj.wo.apply(tape, p, a);
        let q_star = tape.add(query, a);
        match &self.ffn {
            Some(ffn) => ffn.apply(tape, p, q_star),
            None => q_star,
        }
    }
}
