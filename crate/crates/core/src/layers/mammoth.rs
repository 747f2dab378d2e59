//! Multi-head soft mixture-of-experts with low-rank experts.
//!
//! Per bag `x: N×D`:
//!
//! 1. project `y = x·Wᵀ` (no bias, no nonlinearity) to `P·H` dims and split
//!    into `H` partitions of width `P`;
//! 2. per head, each of the `E·S` slot prototypes pools the partitions with
//!    a softmax over instances of `⟨x̄_i, s_j⟩`;
//! 3. slot `j` of expert `k` is transformed by
//!    `LayerNorm(ReLU(W_low⁽ᵏ⁾ · Φ · u_j))`, with `Φ` shared by the head's
//!    experts;
//! 4. head outputs are concatenated into an `(E·S)×D_out` slot set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{declare, Ctx, Init, ParamId, ParamStore, Scheme};
use crate::tensor::{Real, Tensor};

use super::Dropout;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Largest rank `Q` keeping the layer within the `D·D_out` budget of a
/// dense linear layer: `⌊(D·D_out − D·P·H) / (H·P + E·D_out)⌋`.
pub fn solve_q(d: usize, d_out: usize, p: usize, heads: usize, experts: usize) -> Result<usize> {
    let budget = (d * d_out) as i128;
    let projection = (d * p * heads) as i128;
    if budget <= projection {
        return Err(Error::config(format!(
            "parameter budget exhausted: D·D_out = {budget} must exceed D·P·H = {projection}"
        )));
    }
    let per_rank = (heads * p + experts * d_out) as i128;
    let q = (budget - projection) / per_rank;
    if q < 1 {
        return Err(Error::config(format!(
            "low-rank dimension Q = {q} < 1: residual budget {} is smaller than H·P + E·D_out = {per_rank}",
            budget - projection
        )));
    }
    Ok(q as usize)
}

/// Slots per expert for a target total slot count: `max(⌊T/E⌋, 1)`.
pub fn slots_per_expert(total: usize, experts: usize) -> usize {
    (total / experts.max(1)).max(1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiSharing {
    /// One `Φ` per head, shared by that head's experts.
    #[default]
    PerHead,
    /// A single `Φ` shared by every head.
    Global,
}

impl std::str::FromStr for PhiSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_head" => Ok(PhiSharing::PerHead),
            "global" => Ok(PhiSharing::Global),
            _ => Err(Error::config(format!("unknown phi sharing `{s}` (expected per_head|global)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MammothConfig {
    pub d: usize,
    pub d_out: usize,
    pub heads: usize,
    pub p: usize,
    pub q: usize,
    pub experts: usize,
    pub slots: usize,
    #[serde(default)]
    pub phi_sharing: PhiSharing,
}

/// Trainable scalar counts by parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MammothParamCount {
    pub projection: usize,
    pub prototypes: usize,
    pub w_low: usize,
    pub phi: usize,
    pub layer_norm: usize,
}

impl MammothParamCount {
    pub fn total(&self) -> usize {
        self.projection + self.prototypes + self.w_low + self.phi + self.layer_norm
    }

    /// The groups the `Q` budget formula accounts for (projection, experts
    /// and `Φ`; prototypes and LayerNorm affines excluded).
    pub fn budgeted(&self) -> usize {
        self.projection + self.w_low + self.phi
    }
}

impl MammothConfig {
    /// Builds a configuration with `Q` from [`solve_q`].
    pub fn new(d: usize, d_out: usize, heads: usize, p: usize, experts: usize, slots: usize) -> Result<Self> {
        let q = solve_q(d, d_out, p, heads, experts)?;
        let cfg = MammothConfig {
            d,
            d_out,
            heads,
            p,
            q,
            experts,
            slots,
            phi_sharing: PhiSharing::PerHead,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `E = 30`, `H = 16`, `S = 9`, `P = 256/H`.
    pub fn reference(d: usize, d_out: usize) -> Result<Self> {
        Self::new(d, d_out, 16, 256 / 16, 30, 9)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("D", self.d),
            ("D_out", self.d_out),
            ("H", self.heads),
            ("P", self.p),
            ("Q", self.q),
            ("E", self.experts),
            ("S", self.slots),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_out % self.heads != 0 {
            return Err(Error::config(format!(
                "D_out = {} is not divisible by H = {}",
                self.d_out, self.heads
            )));
        }
        Ok(())
    }

    pub fn mid_dim(&self) -> usize {
        self.p * self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_out / self.heads
    }

    pub fn total_slots(&self) -> usize {
        self.experts * self.slots
    }

    pub fn param_count(&self) -> MammothParamCount {
        let phi_tables = match self.phi_sharing {
            PhiSharing::PerHead => self.heads,
            PhiSharing::Global => 1,
        };
        MammothParamCount {
            projection: self.mid_dim() * self.d,
            prototypes: self.heads * self.total_slots() * self.p,
            w_low: self.heads * self.experts * self.head_dim() * self.q,
            phi: phi_tables * self.q * self.p,
            layer_norm: 2 * self.d_out,
        }
    }
}

/// Projects `x: N×D` with `w: (P·H)×D` and splits the result into `heads`
/// column blocks of width `p`.
pub fn project_and_partition<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    heads: usize,
    p: usize,
) -> Result<Vec<Var>> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || ws[0] != heads * p {
        return Err(Error::dim("project_and_partition", &xs, &ws));
    }
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    (0..heads)
        .map(|h| g.slice_columns(y, h * p, (h + 1) * p))
        .collect()
}

/// Dispatch weights `alpha: S_tot×N` (softmax over instances of the
/// prototype inner products) and pooled slots `u = alpha · xh: S_tot×P`.
pub fn route_and_pool<T: Real>(g: &mut Graph<T>, xh: Var, prototypes: Var) -> Result<(Var, Var)> {
    let (xs, ps) = (g.shape(xh).to_vec(), g.shape(prototypes).to_vec());
    if xs.len() != 2 || ps.len() != 2 || xs[1] != ps[1] {
        return Err(Error::dim("route_and_pool", &xs, &ps));
    }
    if xs[0] == 0 {
        return Err(Error::EmptyBag);
    }
    let xt = g.transpose(xh)?;
    let logits = g.matmul(prototypes, xt)?;
    let alpha = g.softmax(logits, 1)?;
    let u = g.matmul(alpha, xh)?;
    Ok((alpha, u))
}

/// `LayerNorm(ReLU(W_low⁽ᵏ⁾ · Φ · u))` for every slot row of one head.
/// `w_low` is `E×R×Q`; rows `[k·S, (k+1)·S)` of `u` belong to expert `k`.
pub fn expert_transform<T: Real>(
    g: &mut Graph<T>,
    u: Var,
    phi: Var,
    w_low: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let phi_t = g.transpose(phi)?;
    let reduced = g.matmul(u, phi_t)?;
    let pre = g.grouped_matmul_t(reduced, w_low)?;
    let act = g.relu(pre);
    g.layer_norm(act, gamma, beta, LAYER_NORM_EPS)
}

#[derive(Clone, Debug)]
pub struct MammothLayer {
    pub cfg: MammothConfig,
    pub w: ParamId,
    pub prototypes: Vec<ParamId>,
    pub w_low: Vec<ParamId>,
    pub phi: Vec<ParamId>,
    pub ln_gamma: Vec<ParamId>,
    pub ln_beta: Vec<ParamId>,
}

/// Graph handles produced by one MAMMOTH forward pass.
pub struct MammothOutput {
    /// `(E·S)×D_out` concatenated expert outputs.
    pub z: Var,
    /// Per head, `(E·S)×P` pooled slot embeddings.
    pub pooled: Vec<Var>,
    /// Per head, `(E·S)×N` dispatch weights.
    pub alpha: Vec<Var>,
}

/// Concrete slot embeddings read back from a forward pass.
#[derive(Clone, Debug)]
pub struct SlotOutputs<T> {
    pub pooled: Vec<Tensor<T>>,
    pub transformed: Tensor<T>,
}

impl MammothOutput {
    pub fn slot_outputs<T: Real>(&self, g: &Graph<T>) -> SlotOutputs<T> {
        SlotOutputs {
            pooled: self.pooled.iter().map(|&v| g.value(v).clone()).collect(),
            transformed: g.value(self.z).clone(),
        }
    }

    pub fn routing<T: Real>(&self, g: &Graph<T>, cfg: &MammothConfig, bag_id: &str) -> RoutingRecord {
        let n = g.value(self.alpha[0]).cols();
        RoutingRecord {
            bag_id: bag_id.to_string(),
            n,
            experts: cfg.experts,
            slots: cfg.slots,
            heads: self
                .alpha
                .iter()
                .map(|&a| g.value(a).to_f64_vec())
                .collect(),
        }
    }
}

impl MammothLayer {
    pub fn build<T: Real>(cfg: &MammothConfig, store: &mut ParamStore<T>, init: &mut dyn Init<T>) -> Result<Self> {
        cfg.validate()?;
        let (d, p, q, r) = (cfg.d, cfg.p, cfg.q, cfg.head_dim());
        let w = declare(store, init, "mammoth.w".into(), &[cfg.mid_dim(), d], Scheme::Uniform { fan_in: d })?;
        let proto_std = 1.0 / (p as f64).sqrt();
        let mut layer = MammothLayer {
            cfg: cfg.clone(),
            w,
            prototypes: Vec::new(),
            w_low: Vec::new(),
            phi: Vec::new(),
            ln_gamma: Vec::new(),
            ln_beta: Vec::new(),
        };
        if cfg.phi_sharing == PhiSharing::Global {
            let phi = declare(store, init, "mammoth.phi".into(), &[q, p], Scheme::Uniform { fan_in: p })?;
            layer.phi.push(phi);
        }
        for h in 0..cfg.heads {
            layer.prototypes.push(declare(
                store,
                init,
                format!("mammoth.h{h}.prototypes"),
                &[cfg.total_slots(), p],
                Scheme::Gaussian { std: proto_std },
            )?);
            if cfg.phi_sharing == PhiSharing::PerHead {
                layer.phi.push(declare(
                    store,
                    init,
                    format!("mammoth.h{h}.phi"),
                    &[q, p],
                    Scheme::Uniform { fan_in: p },
                )?);
            }
            layer.w_low.push(declare(
                store,
                init,
                format!("mammoth.h{h}.w_low"),
                &[cfg.experts, r, q],
                Scheme::Uniform { fan_in: q },
            )?);
            layer.ln_gamma.push(declare(
                store,
                init,
                format!("mammoth.h{h}.ln_gamma"),
                &[r],
                Scheme::Constant(1.0),
            )?);
            layer.ln_beta.push(declare(
                store,
                init,
                format!("mammoth.h{h}.ln_beta"),
                &[r],
                Scheme::Constant(0.0),
            )?);
        }
        Ok(layer)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        for list in [&self.prototypes, &self.phi, &self.w_low, &self.ln_gamma, &self.ln_beta] {
            ids.extend(list.iter().copied());
        }
        ids
    }

    fn phi_for(&self, head: usize) -> ParamId {
        match self.cfg.phi_sharing {
            PhiSharing::PerHead => self.phi[head],
            PhiSharing::Global => self.phi[0],
        }
    }

    /// Full layer: input dropout, projection, per-head routing and experts,
    /// output dropout, head concatenation.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<MammothOutput> {
        if ctx.graph.shape(x).first() == Some(&0) {
            return Err(Error::EmptyBag);
        }
        let x = ctx.dropout(x, drop.features)?;
        let w = ctx.p(self.w);
        let parts = project_and_partition(&mut ctx.graph, x, w, self.cfg.heads, self.cfg.p)?;
        let mut zs = Vec::with_capacity(self.cfg.heads);
        let mut pooled = Vec::with_capacity(self.cfg.heads);
        let mut alphas = Vec::with_capacity(self.cfg.heads);
        for (h, &xh) in parts.iter().enumerate() {
            let protos = ctx.p(self.prototypes[h]);
            let (alpha, u) = route_and_pool(&mut ctx.graph, xh, protos)?;
            let (phi, w_low) = (ctx.p(self.phi_for(h)), ctx.p(self.w_low[h]));
            let (gamma, beta) = (ctx.p(self.ln_gamma[h]), ctx.p(self.ln_beta[h]));
            let z = expert_transform(&mut ctx.graph, u, phi, w_low, gamma, beta)?;
            zs.push(z);
            pooled.push(u);
            alphas.push(alpha);
        }
        let z = ctx.graph.concat_last_axis(&zs)?;
        let z = ctx.dropout(z, drop.ff)?;
        Ok(MammothOutput {
            z,
            pooled,
            alpha: alphas,
        })
    }
}

/// Dispatch weights of one bag, exported for interpretability.
#[derive(Clone, Debug, Serialize)]
pub struct RoutingRecord {
    pub bag_id: String,
    pub n: usize,
    pub experts: usize,
    pub slots: usize,
    /// Per head, row-major `(E·S)×N`; row `k·S + s` is slot `s` of expert `k`.
    pub heads: Vec<Vec<f64>>,
}

impl RoutingRecord {
    pub fn rows(&self) -> usize {
        self.experts * self.slots
    }

    pub fn alpha(&self, head: usize, expert: usize, slot: usize, instance: usize) -> f64 {
        self.heads[head][(expert * self.slots + slot) * self.n + instance]
    }

    /// Dispatch weights averaged over heads, `(E·S)×N`.
    pub fn head_mean(&self) -> Vec<f64> {
        let h = self.heads.len() as f64;
        let mut out = vec![0.0; self.rows() * self.n];
        for head in &self.heads {
            for (o, a) in out.iter_mut().zip(head) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= h);
        out
    }

    /// Sum over instances of every (head, slot-row) dispatch row.
    pub fn row_sums(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|head| head.chunks(self.n.max(1)).map(|r| r.iter().sum()))
            .collect()
    }

    /// Expert owning the slot with the largest head-averaged weight for
    /// each instance.
    pub fn argmax_experts(&self) -> Vec<usize> {
        let mean = self.head_mean();
        (0..self.n)
            .map(|i| {
                let mut best = (0, f64::NEG_INFINITY);
                for row in 0..self.rows() {
                    let v = mean[row * self.n + i];
                    if v > best.1 {
                        best = (row, v);
                    }
                }
                best.0 / self.slots
            })
            .collect()
    }

    /// `bag_id,head,expert,slot,instance,alpha`
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "bag_id,head,expert,slot,instance,alpha")?;
        }
        for (h, head) in self.heads.iter().enumerate() {
            for e in 0..self.experts {
                for s in 0..self.slots {
                    let row = e * self.slots + s;
                    for i in 0..self.n {
                        writeln!(w, "{},{h},{e},{s},{i},{}", self.bag_id, head[row * self.n + i])?;
                    }
                }
            }
        }
        Ok(())
    }

    /// `bag_id,expert,slot,instance,alpha_mean`
    pub fn write_mean_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "bag_id,expert,slot,instance,alpha_mean")?;
        }
        let mean = self.head_mean();
        for e in 0..self.experts {
            for s in 0..self.slots {
                let row = e * self.slots + s;
                for i in 0..self.n {
                    writeln!(w, "{},{e},{s},{i},{}", self.bag_id, mean[row * self.n + i])?;
                }
            }
        }
        Ok(())
    }
}
