//! Soft MoE with per-instance (patch) outputs.
//!
//! Slot prototypes score every instance. Dispatch normalizes those logits
//! over instances to pool slot inputs; each expert processes its own slots;
//! combine normalizes the same logits over slots to mix expert outputs
//! back into one row per instance.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{declare, Ctx, Init, ParamId, ParamStore, Scheme};
use crate::tensor::Real;

use super::mammoth::slots_per_expert;
use super::Dropout;

#[derive(Clone, Debug)]
pub struct SoftMoeLayer {
    pub d: usize,
    pub d_out: usize,
    pub experts: usize,
    pub slots: usize,
    pub prototypes: ParamId,
    /// `E×D_out×D`.
    pub w: ParamId,
}

/// Graph handles for one forward pass.
pub struct SoftMoeOutput {
    pub y: Var,
    /// `S_tot×N`, rows sum to 1.
    pub dispatch: Var,
    /// `S_tot×N`, columns sum to 1.
    pub combine: Var,
}

impl SoftMoeLayer {
    /// `total_slots` is split evenly across experts with
    /// [`slots_per_expert`].
    pub fn build<T: Real>(
        d: usize,
        d_out: usize,
        experts: usize,
        total_slots: usize,
        store: &mut ParamStore<T>,
        init: &mut dyn Init<T>,
    ) -> Result<Self> {
        if experts == 0 || total_slots == 0 {
            return Err(Error::config("soft MoE needs at least one expert and one slot"));
        }
        let slots = slots_per_expert(total_slots, experts);
        let prototypes = declare(
            store,
            init,
            "soft.prototypes".into(),
            &[experts * slots, d],
            Scheme::Gaussian { std: 1.0 / (d as f64).sqrt() },
        )?;
        let w = declare(store, init, "soft.w".into(), &[experts, d_out, d], Scheme::Uniform { fan_in: d })?;
        Ok(SoftMoeLayer {
            d,
            d_out,
            experts,
            slots,
            prototypes,
            w,
        })
    }

    pub fn param_count(d: usize, d_out: usize, experts: usize, total_slots: usize) -> usize {
        let s = slots_per_expert(total_slots, experts);
        experts * s * d + experts * d_out * d
    }

    pub fn forward_full<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<SoftMoeOutput> {
        if ctx.graph.shape(x).first() == Some(&0) {
            return Err(Error::EmptyBag);
        }
        let x = ctx.dropout(x, drop.features)?;
        let (protos, w) = (ctx.p(self.prototypes), ctx.p(self.w));
        let g = &mut ctx.graph;
        let xt = g.transpose(x)?;
        let logits = g.matmul(protos, xt)?;
        let dispatch = g.softmax(logits, 1)?;
        let combine = g.softmax(logits, 0)?;
        let slots_in = g.matmul(dispatch, x)?;
        let z = g.grouped_matmul_t(slots_in, w)?;
        let z = g.relu(z);
        let ct = g.transpose(combine)?;
        let y = g.matmul(ct, z)?;
        let y = ctx.dropout(y, drop.ff)?;
        Ok(SoftMoeOutput { y, dispatch, combine })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<Var> {
        Ok(self.forward_full(ctx, x, drop)?.y)
    }
}
