//! Sparse top-k MoE layers: softmax gating, Sinkhorn gating, and the
//! multi-head variant that routes `D/H`-wide sub-tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{declare, Ctx, Init, ParamId, ParamStore, Scheme};
use crate::tensor::{Real, Tensor};

use super::Dropout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Softmax,
    Sinkhorn { iters: usize },
}

/// Per-expert token quota: `⌈cf·tokens·k/E⌉`.
pub fn capacity(capacity_factor: f64, tokens: usize, k: usize, experts: usize) -> usize {
    (capacity_factor * (tokens * k) as f64 / experts as f64).ceil() as usize
}

/// Indices of the `k` largest entries, largest first; ties go to the lower
/// index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// One token admitted to an expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub token: usize,
    /// Flat index of the token's gate weight in the `tokens×k` weight matrix.
    pub weight: usize,
}

/// Assigns `tokens×k` routing choices to experts. Each expert admits at
/// most `cap` tokens in decreasing gate-weight order (lower token first on
/// ties); the rest are dropped.
pub fn plan_dispatch(weights: &[f64], choices: &[usize], k: usize, experts: usize, cap: usize) -> Vec<Vec<Slot>> {
    let mut queues: Vec<Vec<Slot>> = vec![Vec::new(); experts];
    for (flat, &e) in choices.iter().enumerate() {
        queues[e].push(Slot {
            token: flat / k,
            weight: flat,
        });
    }
    for q in &mut queues {
        q.sort_by(|a, b| {
            weights[b.weight]
                .total_cmp(&weights[a.weight])
                .then(a.token.cmp(&b.token))
        });
        q.truncate(cap);
    }
    queues
}

/// Sinkhorn-Knopp on `exp(logits)`: `iters` rounds of row then column
/// normalization, followed by a final row normalization.
pub fn sinkhorn_gate<T: Real>(g: &mut Graph<T>, logits: Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return Err(Error::config("sinkhorn needs at least one iteration"));
    }
    let v = g.value(logits);
    if v.rank() != 2 {
        return Err(Error::dim("sinkhorn_gate", v.shape(), &[]));
    }
    // Per-row shifts are absorbed by the first row normalization.
    let (n, e) = (v.rows(), v.cols());
    let mut shift = Vec::with_capacity(n * e);
    for i in 0..n {
        let m = v.row(i).iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(T::of(-m), e));
    }
    let shift = g.constant(Tensor::matrix(n, e, shift)?);
    let shifted = g.add(logits, shift)?;
    let mut p = g.exp(shifted);
    for _ in 0..iters {
        p = g.normalize_sum(p, 1)?;
        p = g.normalize_sum(p, 0)?;
    }
    g.normalize_sum(p, 1)
}

/// Gate weights over each token's top-k experts, `tokens×k`, plus the
/// chosen expert indices in the same layout.
pub fn gate_weights<T: Real>(g: &mut Graph<T>, logits: Var, k: usize, gate: Gate) -> Result<(Var, Vec<usize>)> {
    let (n, e) = (g.shape(logits)[0], g.shape(logits)[1]);
    if k == 0 || k > e {
        return Err(Error::config(format!("top-k = {k} must lie in 1..={e}")));
    }
    let scores = match gate {
        Gate::Softmax => logits,
        Gate::Sinkhorn { iters } => sinkhorn_gate(g, logits, iters)?,
    };
    let vals = g.value(scores).to_f64_vec();
    let mut choices = Vec::with_capacity(n * k);
    let mut flat = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in top_k(&vals[i * e..(i + 1) * e], k) {
            choices.push(j);
            flat.push(i * e + j);
        }
    }
    let picked = g.gather(scores, &flat, &[n, k])?;
    let w = match gate {
        Gate::Softmax => g.softmax(picked, 1)?,
        Gate::Sinkhorn { .. } => g.normalize_sum(picked, 1)?,
    };
    Ok((w, choices))
}

/// Routing decisions of one forward pass.
pub struct SparseOutput {
    pub y: Var,
    pub weights: Var,
    pub choices: Vec<usize>,
    pub plan: Vec<Vec<Slot>>,
}

/// Shared dispatch: route `tokens` (T×d_in), run `expert(e, rows)` on each
/// expert's admitted rows, and scatter the weighted outputs back.
fn dispatch<T: Real>(
    ctx: &mut Ctx<'_, T>,
    tokens: Var,
    gate: ParamId,
    k: usize,
    kind: Gate,
    cap_factor: f64,
    d_out: usize,
    expert: &dyn Fn(&mut Ctx<'_, T>, usize, Var) -> Result<Var>,
) -> Result<SparseOutput> {
    let n = ctx.graph.shape(tokens)[0];
    let gw = ctx.p(gate);
    let experts = ctx.graph.shape(gw)[0];
    let gt = ctx.graph.transpose(gw)?;
    let logits = ctx.graph.matmul(tokens, gt)?;
    let (weights, choices) = gate_weights(&mut ctx.graph, logits, k, kind)?;
    let cap = capacity(cap_factor, n, k, experts);
    let plan = plan_dispatch(&ctx.graph.value(weights).to_f64_vec(), &choices, k, experts, cap);
    let mut y = ctx.graph.constant(Tensor::zeros(&[n, d_out]));
    for (e, admitted) in plan.iter().enumerate() {
        if admitted.is_empty() {
            continue;
        }
        let rows: Vec<usize> = admitted.iter().map(|s| s.token).collect();
        let flat: Vec<usize> = admitted.iter().map(|s| s.weight).collect();
        let xe = ctx.graph.gather_rows(tokens, &rows)?;
        let he = expert(ctx, e, xe)?;
        let we = ctx.graph.gather(weights, &flat, &[rows.len()])?;
        let ye = ctx.graph.scale_rows(he, we)?;
        let back = ctx.graph.scatter_add_rows(ye, &rows, n)?;
        y = ctx.graph.add(y, back)?;
    }
    Ok(SparseOutput {
        y,
        weights,
        choices,
        plan,
    })
}

/// Top-k MoE whose experts are `ReLU(W_e·x)`.
#[derive(Clone, Debug)]
pub struct SparseMoeLayer {
    pub d: usize,
    pub d_out: usize,
    pub top_k: usize,
    pub gate_kind: Gate,
    pub capacity_train: f64,
    pub capacity_eval: f64,
    pub gate: ParamId,
    pub experts: Vec<ParamId>,
}

impl SparseMoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        d: usize,
        d_out: usize,
        experts: usize,
        top_k: usize,
        gate_kind: Gate,
        capacity: (f64, f64),
        store: &mut ParamStore<T>,
        init: &mut dyn Init<T>,
    ) -> Result<Self> {
        if top_k == 0 || top_k > experts {
            return Err(Error::config(format!("top-k = {top_k} must lie in 1..={experts}")));
        }
        let gate = declare(store, init, "sparse.gate".into(), &[experts, d], Scheme::Uniform { fan_in: d })?;
        let experts = (0..experts)
            .map(|e| declare(store, init, format!("sparse.e{e}.w"), &[d_out, d], Scheme::Uniform { fan_in: d }))
            .collect::<Result<_>>()?;
        Ok(SparseMoeLayer {
            d,
            d_out,
            top_k,
            gate_kind,
            capacity_train: capacity.0,
            capacity_eval: capacity.1,
            gate,
            experts,
        })
    }

    pub fn param_count(d: usize, d_out: usize, experts: usize) -> usize {
        experts * d_out * d + experts * d
    }

    pub fn forward_full<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<SparseOutput> {
        if ctx.graph.shape(x).first() == Some(&0) {
            return Err(Error::EmptyBag);
        }
        let x = ctx.dropout(x, drop.features)?;
        let cf = if ctx.training { self.capacity_train } else { self.capacity_eval };
        let expert = |ctx: &mut Ctx<'_, T>, e: usize, xe: Var| -> Result<Var> {
            let w = ctx.p(self.experts[e]);
            let wt = ctx.graph.transpose(w)?;
            let h = ctx.graph.matmul(xe, wt)?;
            Ok(ctx.graph.relu(h))
        };
        let mut out = dispatch(ctx, x, self.gate, self.top_k, self.gate_kind, cf, self.d_out, &expert)?;
        out.y = ctx.dropout(out.y, drop.ff)?;
        Ok(out)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<Var> {
        Ok(self.forward_full(ctx, x, drop)?.y)
    }
}

/// Hidden width of the multi-head experts, `⌊H·D·D_out/(D + D_out)⌋`.
pub fn multihead_hidden(d: usize, d_out: usize, heads: usize) -> usize {
    heads * d * d_out / (d + d_out)
}

/// Top-k MoE over `N·H` sub-tokens of width `D/H`, with two-layer experts
/// `W2·ReLU(W1·x)` mapping to `D_out/H`.
#[derive(Clone, Debug)]
pub struct MultiheadMoeLayer {
    pub d: usize,
    pub d_out: usize,
    pub heads: usize,
    pub hidden: usize,
    pub top_k: usize,
    pub capacity_train: f64,
    pub capacity_eval: f64,
    pub gate: ParamId,
    pub w1: Vec<ParamId>,
    pub w2: Vec<ParamId>,
}

impl MultiheadMoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        d: usize,
        d_out: usize,
        heads: usize,
        experts: usize,
        top_k: usize,
        capacity: (f64, f64),
        store: &mut ParamStore<T>,
        init: &mut dyn Init<T>,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 || d_out % heads != 0 {
            return Err(Error::config(format!(
                "D = {d} and D_out = {d_out} must both be divisible by H = {heads}"
            )));
        }
        if top_k == 0 || top_k > experts {
            return Err(Error::config(format!("top-k = {top_k} must lie in 1..={experts}")));
        }
        let (dh, oh) = (d / heads, d_out / heads);
        let hidden = multihead_hidden(d, d_out, heads).max(1);
        let gate = declare(store, init, "mh.gate".into(), &[experts, dh], Scheme::Uniform { fan_in: dh })?;
        let mut w1 = Vec::with_capacity(experts);
        let mut w2 = Vec::with_capacity(experts);
        for e in 0..experts {
            w1.push(declare(store, init, format!("mh.e{e}.w1"), &[hidden, dh], Scheme::Uniform { fan_in: dh })?);
            w2.push(declare(
                store,
                init,
                format!("mh.e{e}.w2"),
                &[oh, hidden],
                Scheme::Uniform { fan_in: hidden },
            )?);
        }
        Ok(MultiheadMoeLayer {
            d,
            d_out,
            heads,
            hidden,
            top_k,
            capacity_train: capacity.0,
            capacity_eval: capacity.1,
            gate,
            w1,
            w2,
        })
    }

    pub fn param_count(d: usize, d_out: usize, heads: usize, experts: usize) -> usize {
        let hidden = multihead_hidden(d, d_out, heads).max(1);
        experts * (d / heads) + experts * hidden * (d / heads + d_out / heads)
    }

    pub fn forward_full<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<SparseOutput> {
        let n = match ctx.graph.shape(x) {
            [0, _] => return Err(Error::EmptyBag),
            [n, d] if *d == self.d => *n,
            s => return Err(Error::dim("sparse_multihead", s, &[self.d])),
        };
        let x = ctx.dropout(x, drop.features)?;
        let tokens = ctx.graph.reshape(x, &[n * self.heads, self.d / self.heads])?;
        let cf = if ctx.training { self.capacity_train } else { self.capacity_eval };
        let expert = |ctx: &mut Ctx<'_, T>, e: usize, xe: Var| -> Result<Var> {
            let (w1, w2) = (ctx.p(self.w1[e]), ctx.p(self.w2[e]));
            let w1t = ctx.graph.transpose(w1)?;
            let h = ctx.graph.matmul(xe, w1t)?;
            let h = ctx.graph.relu(h);
            let w2t = ctx.graph.transpose(w2)?;
            ctx.graph.matmul(h, w2t)
        };
        let oh = self.d_out / self.heads;
        let mut out = dispatch(ctx, tokens, self.gate, self.top_k, Gate::Softmax, cf, oh, &expert)?;
        let y = ctx.graph.reshape(out.y, &[n, self.d_out])?;
        out.y = ctx.dropout(y, drop.ff)?;
        Ok(out)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<Var> {
        Ok(self.forward_full(ctx, x, drop)?.y)
    }
}
