use rand::Rng;

use super::graph::{edge_features, pool_edges, EdgeGraph};
use super::layers::{LayerNorm, Linear, Mlp2};
use super::ModelError;
use crate::autodiff::{AutodiffError, ParamStore, Var};

/// Multi-head self-attention within each sample of a stacked `[B·n, d]` batch.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self, AutodiffError> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng, false)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng, false)?,
            heads,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, batch: usize) -> Result<Var<'t>, AutodiffError> {
        let s = x.shape();
        let (rows, d) = (s[0], s[1]);
        let n = rows / batch;
        let (h, dh) = (self.heads, d / self.heads);
        let bh = batch * h;
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[batch, n, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3 * bh, n, dh])?;
        let q = qkv.narrow(0, bh)?;
        let k = qkv.narrow(bh, bh)?;
        let v = qkv.narrow(2 * bh, bh)?;
        let att = q.bmm(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt()).softmax();
        let y = att.bmm(v)?.reshape(&[batch, h, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[rows, d])?;
        self.out.forward(p, y)
    }
}

/// Graph convolution over each token's nearest tokens: shared
/// `Linear(2d → d)` + GELU on `[h_i, h_j − h_i]`, max over neighbors.
#[derive(Clone, Debug)]
pub(crate) struct GeoConv {
    lin: Linear,
}

impl GeoConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self, AutodiffError> {
        Ok(Self { lin: Linear::new(store, &format!("{name}.lin"), 2 * d, d, rng, false)? })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, graph: &EdgeGraph) -> Result<Var<'t>, ModelError> {
        let e = self.lin.forward(p, edge_features(x, graph)?)?.gelu();
        pool_edges(e, graph)
    }
}

/// Sparse mixture of expert perceptrons with a softmax router.
#[derive(Clone, Debug)]
pub struct Moe {
    router: Linear,
    experts: Vec<Mlp2>,
    active: usize,
}

/// Output of one mixture layer. `gates` is `[T, k]` in the order of
/// `assignments[t]`, the experts token `t` was routed to.
pub struct MoeOutput<'t> {
    pub out: Var<'t>,
    pub gates: Var<'t>,
    pub assignments: Vec<Vec<usize>>,
}

impl Moe {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        experts: usize,
        active: usize,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        let router = Linear::new(store, &format!("{name}.router"), d, experts, rng, true)?;
        let experts = (0..experts)
            .map(|e| Mlp2::new(store, &format!("{name}.expert{e}"), [d, 4 * d, d], rng, false))
            .collect::<Result<_, _>>()?;
        Ok(Self { router, experts, active })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<MoeOutput<'t>, AutodiffError> {
        let (t, k) = (x.shape()[0], self.active);
        let probs = self.router.forward(p, x)?.softmax();
        let (top, chosen) = probs.topk(k)?;
        let gates = top.mul_rows(top.sum_axis(1)?.recip())?;
        let gate_flat = gates.reshape(&[t * k])?;
        let mut rows = vec![Vec::new(); self.experts.len()];
        let mut slots = vec![Vec::new(); self.experts.len()];
        let mut assignments = vec![Vec::with_capacity(k); t];
        for (pos, &e) in chosen.iter().enumerate() {
            rows[e].push(pos / k);
            slots[e].push(pos);
            assignments[pos / k].push(e);
        }
        let mut out: Option<Var<'t>> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            if rows[e].is_empty() {
                continue;
            }
            let y = expert.forward(p, x.index_select(&rows[e])?)?;
            let y = y.mul_rows(gate_flat.index_select(&slots[e])?)?.scatter_add_rows(&rows[e], t)?;
            out = Some(match out {
                Some(o) => o.add(y)?,
                None => y,
            });
        }
        Ok(MoeOutput { out: out.expect("at least one expert is active"), gates, assignments })
    }

    /// Every expert weighted by the full router softmax; equals `forward`
    /// when all experts are active.
    pub fn dense_mixture<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let probs = self.router.forward(p, x)?.softmax();
        let mut out: Option<Var<'t>> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let w = probs.transpose()?.narrow(e, 1)?.reshape(&[x.shape()[0]])?;
            let y = expert.forward(p, x)?.mul_rows(w)?;
            out = Some(match out {
                Some(o) => o.add(y)?,
                None => y,
            });
        }
        Ok(out.expect("at least one expert"))
    }

    pub fn experts_len(&self) -> usize {
        self.experts.len()
    }

    pub fn active(&self) -> usize {
        self.active
    }

    #[cfg(test)]
    pub(crate) fn experts(&self) -> &[Mlp2] {
        &self.experts
    }

    #[cfg(test)]
    pub(crate) fn router(&self) -> &Linear {
        &self.router
    }
}

/// Pre-norm block: `x + attn(LN x) [+ geo(LN x)]`, then `x + moe(LN x)`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: LayerNorm,
    attn: Attention,
    geo: Option<GeoConv>,
    ln2: LayerNorm,
    pub moe: Moe,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        experts: usize,
        active: usize,
        geometric: bool,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            geo: if geometric { Some(GeoConv::new(store, &format!("{name}.geo"), d, rng)?) } else { None },
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            moe: Moe::new(store, &format!("{name}.moe"), d, experts, active, rng)?,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        batch: usize,
        graph: &EdgeGraph,
    ) -> Result<(Var<'t>, Vec<Vec<usize>>), ModelError> {
        let y = self.ln1.forward(p, x)?;
        let mut a = self.attn.forward(p, y, batch)?;
        if let Some(geo) = &self.geo {
            a = a.add(geo.forward(p, y, graph)?)?;
        }
        let x = x.add(a)?;
        let m = self.moe.forward(p, self.ln2.forward(p, x)?)?;
        Ok((x.add(m.out)?, m.assignments))
    }
}
