//! Task-specific layers: everything between raw instance features and the
//! MIL aggregator.

pub mod linear;
pub mod mammoth;
pub mod soft;
pub mod sparse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Real;

use linear::LinearLayer;
use mammoth::{MammothConfig, MammothLayer, PhiSharing};
use soft::SoftMoeLayer;
use sparse::{Gate, MultiheadMoeLayer, SparseMoeLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Mammoth,
    Soft,
    SparseSoftmax,
    SparseSinkhorn,
    SparseMh,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Linear,
        LayerKind::Mammoth,
        LayerKind::Soft,
        LayerKind::SparseSoftmax,
        LayerKind::SparseSinkhorn,
        LayerKind::SparseMh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Mammoth => "mammoth",
            LayerKind::Soft => "soft",
            LayerKind::SparseSoftmax => "sparse_softmax",
            LayerKind::SparseSinkhorn => "sparse_sinkhorn",
            LayerKind::SparseMh => "sparse_mh",
        }
    }

    pub fn output_kind(self) -> OutputKind {
        match self {
            LayerKind::Mammoth => OutputKind::SlotSet,
            _ => OutputKind::PerInstance,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LayerKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!("unknown layer `{s}` (expected one of {})", names.join("|")))
            })
    }
}

/// Whether a layer keeps one row per instance or emits a fixed slot set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    PerInstance,
    SlotSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub features: f64,
    pub ff: f64,
}

impl Dropout {
    pub fn none() -> Self {
        Dropout { features: 0.0, ff: 0.0 }
    }
}

impl Default for Dropout {
    fn default() -> Self {
        Dropout {
            features: 0.1,
            ff: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MammothHyper {
    pub heads: usize,
    /// Partition width; `None` means `256/H`.
    pub p: Option<usize>,
    pub experts: usize,
    pub slots: usize,
    /// Overrides the budget solver.
    pub q: Option<usize>,
    pub phi_sharing: PhiSharing,
}

impl Default for MammothHyper {
    fn default() -> Self {
        MammothHyper {
            heads: 16,
            p: None,
            experts: 30,
            slots: 9,
            q: None,
            phi_sharing: PhiSharing::PerHead,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub capacity_train: f64,
    pub capacity_eval: f64,
    pub sinkhorn_iters: usize,
    pub soft_slots: usize,
    pub mh_heads: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            experts: 5,
            top_k: 2,
            capacity_train: 1.25,
            capacity_eval: 2.0,
            sinkhorn_iters: 3,
            soft_slots: 200,
            mh_heads: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub d: usize,
    pub d_out: usize,
    #[serde(default)]
    pub mammoth: MammothHyper,
    #[serde(default)]
    pub moe: MoeConfig,
}

impl LayerConfig {
    pub fn new(kind: LayerKind, d: usize, d_out: usize) -> Self {
        LayerConfig {
            kind,
            d,
            d_out,
            mammoth: MammothHyper::default(),
            moe: MoeConfig::default(),
        }
    }

    pub fn mammoth_config(&self) -> Result<MammothConfig> {
        let h = &self.mammoth;
        if h.heads == 0 {
            return Err(Error::config("H must be at least 1"));
        }
        let p = h.p.unwrap_or((256 / h.heads).max(1));
        let q = match h.q {
            Some(q) => q,
            None => mammoth::solve_q(self.d, self.d_out, p, h.heads, h.experts)?,
        };
        let cfg = MammothConfig {
            d: self.d,
            d_out: self.d_out,
            heads: h.heads,
            p,
            q,
            experts: h.experts,
            slots: h.slots,
            phi_sharing: h.phi_sharing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Exact trainable scalar count, computed from the configuration alone.
    pub fn param_count(&self) -> Result<usize> {
        let (d, o, m) = (self.d, self.d_out, &self.moe);
        Ok(match self.kind {
            LayerKind::Linear => LinearLayer::param_count(d, o),
            LayerKind::Mammoth => self.mammoth_config()?.param_count().total(),
            LayerKind::Soft => SoftMoeLayer::param_count(d, o, m.experts, m.soft_slots),
            LayerKind::SparseSoftmax | LayerKind::SparseSinkhorn => SparseMoeLayer::param_count(d, o, m.experts),
            LayerKind::SparseMh => MultiheadMoeLayer::param_count(d, o, m.mh_heads, m.experts),
        })
    }
}

#[derive(Clone, Debug)]
pub enum TaskLayer {
    Linear(LinearLayer),
    Mammoth(MammothLayer),
    Soft(SoftMoeLayer),
    Sparse(SparseMoeLayer),
    Multihead(MultiheadMoeLayer),
}

impl TaskLayer {
    pub fn build<T: Real>(cfg: &LayerConfig, store: &mut ParamStore<T>, init: &mut dyn Init<T>) -> Result<Self> {
        let (d, o, m) = (cfg.d, cfg.d_out, &cfg.moe);
        let cap = (m.capacity_train, m.capacity_eval);
        Ok(match cfg.kind {
            LayerKind::Linear => TaskLayer::Linear(LinearLayer::build(d, o, store, init)?),
            LayerKind::Mammoth => TaskLayer::Mammoth(MammothLayer::build(&cfg.mammoth_config()?, store, init)?),
            LayerKind::Soft => TaskLayer::Soft(SoftMoeLayer::build(d, o, m.experts, m.soft_slots, store, init)?),
            LayerKind::SparseSoftmax => TaskLayer::Sparse(SparseMoeLayer::build(
                d,
                o,
                m.experts,
                m.top_k,
                Gate::Softmax,
                cap,
                store,
                init,
            )?),
            LayerKind::SparseSinkhorn => TaskLayer::Sparse(SparseMoeLayer::build(
                d,
                o,
                m.experts,
                m.top_k,
                Gate::Sinkhorn {
                    iters: m.sinkhorn_iters,
                },
                cap,
                store,
                init,
            )?),
            LayerKind::SparseMh => TaskLayer::Multihead(MultiheadMoeLayer::build(
                d,
                o,
                m.mh_heads,
                m.experts,
                m.top_k,
                cap,
                store,
                init,
            )?),
        })
    }

    pub fn output_kind(&self) -> OutputKind {
        match self {
            TaskLayer::Mammoth(_) => OutputKind::SlotSet,
            _ => OutputKind::PerInstance,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            TaskLayer::Linear(l) => vec![l.w],
            TaskLayer::Mammoth(l) => l.param_ids(),
            TaskLayer::Soft(l) => vec![l.prototypes, l.w],
            TaskLayer::Sparse(l) => std::iter::once(l.gate).chain(l.experts.iter().copied()).collect(),
            TaskLayer::Multihead(l) => std::iter::once(l.gate)
                .chain(l.w1.iter().copied())
                .chain(l.w2.iter().copied())
                .collect(),
        }
    }

    /// `N×D` instances to an `M×D_out` embedding set.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, drop: Dropout) -> Result<Var> {
        match self {
            TaskLayer::Linear(l) => l.forward(ctx, x, drop),
            TaskLayer::Mammoth(l) => Ok(l.forward(ctx, x, drop)?.z),
            TaskLayer::Soft(l) => l.forward(ctx, x, drop),
            TaskLayer::Sparse(l) => l.forward(ctx, x, drop),
            TaskLayer::Multihead(l) => l.forward(ctx, x, drop),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::RandomInit;
    use crate::rng;

    #[test]
    fn names_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(k.name().parse::<LayerKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("dense".parse::<LayerKind>().is_err());
    }

    #[test]
    fn only_mammoth_emits_slots() {
        for k in LayerKind::ALL {
            assert_eq!(k.output_kind() == OutputKind::SlotSet, k == LayerKind::Mammoth);
        }
    }

    #[test]
    fn analytic_counts_match_built_stores() {
        for kind in LayerKind::ALL {
            let mut cfg = LayerConfig::new(kind, 32, 16);
            cfg.mammoth = MammothHyper {
                heads: 4,
                p: Some(2),
                experts: 3,
                slots: 2,
                ..MammothHyper::default()
            };
            cfg.moe.soft_slots = 12;
            cfg.moe.mh_heads = 4;
            let mut store = ParamStore::<f32>::new();
            let mut r = rng::seeded(0);
            let layer = TaskLayer::build(&cfg, &mut store, &mut RandomInit { rng: &mut r }).unwrap();
            assert_eq!(store.numel(), cfg.param_count().unwrap(), "{kind}");
            assert_eq!(store.numel_of(&layer.param_ids()), store.numel(), "{kind}");
        }
    }

    #[test]
    fn reference_sparse_count() {
        let cfg = LayerConfig::new(LayerKind::SparseSoftmax, 1024, 512);
        assert_eq!(cfg.param_count().unwrap(), 5 * 524_288 + 5 * 1024);
    }
}
