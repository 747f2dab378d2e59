use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{declare, Ctx, Init, ParamId, ParamStore, Scheme};
use crate::tensor::Real;

use super::Dropout;

/// `ReLU(x·Wᵀ)` applied to every instance.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub d: usize,
    pub d_out: usize,
    pub w: ParamId,
}

impl LinearLayer {
    pub fn build<T: Real>(d: usize, d_out: usize, store: &mut ParamStore<T>, init: &mut dyn Init<T>) -> Result<Self> {
        let w = declare(store, init, "linear.w".into(), &[d_out, d], Scheme::Uniform { fan_in: d })?;
        Ok(LinearLayer { d, d_out, w })
    }

    pub fn param_count(d: usize, d_out: usize) -> usize {
        d * d_out
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<Var> {
        let x = ctx.dropout(x, drop.features)?;
        let w = ctx.p(self.w);
        let wt = ctx.graph.transpose(w)?;
        let y = ctx.graph.matmul(x, wt)?;
        let y = ctx.graph.relu(y);
        ctx.dropout(y, drop.ff)
    }
}
