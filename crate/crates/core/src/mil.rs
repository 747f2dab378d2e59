//! MIL aggregators: mean pooling, max-instance selection and gated
//! attention, each followed by a linear classification head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{declare, Ctx, Init, ParamId, ParamStore, Scheme};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggKind {
    Mean,
    Max,
    Abmil,
}

impl AggKind {
    pub const ALL: [AggKind; 3] = [AggKind::Mean, AggKind::Max, AggKind::Abmil];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Mean => "mean",
            AggKind::Max => "max",
            AggKind::Abmil => "abmil",
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown aggregator `{s}` (expected mean|max|abmil)")))
    }
}

pub const ABMIL_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub kind: AggKind,
    pub embed_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    ABMIL_HIDDEN
}

impl AggregatorConfig {
    pub fn new(kind: AggKind, embed_dim: usize, num_classes: usize) -> Self {
        AggregatorConfig {
            kind,
            embed_dim,
            num_classes,
            hidden: ABMIL_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes = {} must be at least 2", self.num_classes)));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::config("aggregator dimensions must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let head = self.num_classes * self.embed_dim + self.num_classes;
        match self.kind {
            AggKind::Abmil => head + 2 * self.hidden * self.embed_dim + self.hidden,
            _ => head,
        }
    }
}

fn require_rows<T: Real>(g: &Graph<T>, z: Var) -> Result<usize> {
    match g.shape(z) {
        [0, _] => Err(Error::EmptyBag),
        [m, _] => Ok(*m),
        s => Err(Error::dim("aggregate", s, &[])),
    }
}

/// `head · x + bias` for a `1×D` row `x`, giving `1×C`.
fn classify<T: Real>(g: &mut Graph<T>, x: Var, head: Var, bias: Var) -> Result<Var> {
    let ht = g.transpose(head)?;
    let l = g.matmul(x, ht)?;
    g.add_row(l, bias)
}

/// Logits of the mean embedding.
pub fn mean_pool_classify<T: Real>(g: &mut Graph<T>, z: Var, head: Var, bias: Var) -> Result<Var> {
    require_rows(g, z)?;
    let m = g.reduce_mean(z)?;
    classify(g, m, head, bias)
}

/// Logits of the single row whose largest logit is globally largest
/// (lowest row on ties). Returns the logits and the selected row.
pub fn max_pool_classify<T: Real>(g: &mut Graph<T>, z: Var, head: Var, bias: Var) -> Result<(Var, usize)> {
    let m = require_rows(g, z)?;
    let all = classify(g, z, head, bias)?;
    let v = g.value(all);
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let row_max = v.row(i).iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        if row_max > best.1 {
            best = (i, row_max);
        }
    }
    Ok((g.gather_rows(all, &[best.0])?, best.0))
}

/// Gated attention pooling. `v`, `u` are `L×D`, `w` is `L×1`. Returns the
/// logits and the `M×1` attention column.
pub fn abmil_classify<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    v: Var,
    u: Var,
    w: Var,
    head: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    require_rows(g, z)?;
    let vt = g.transpose(v)?;
    let a = g.matmul(z, vt)?;
    let a = g.tanh(a);
    let ut = g.transpose(u)?;
    let b = g.matmul(z, ut)?;
    let b = g.sigmoid(b);
    let gated = g.mul(a, b)?;
    let scores = g.matmul(gated, w)?;
    let attn = g.softmax(scores, 0)?;
    let at = g.transpose(attn)?;
    let pooled = g.matmul(at, z)?;
    Ok((classify(g, pooled, head, bias)?, attn))
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    pub head: ParamId,
    pub bias: ParamId,
    /// `(V, U, w)` for gated attention.
    pub attention: Option<(ParamId, ParamId, ParamId)>,
}

/// Aggregator outputs for one bag.
pub struct AggOutput {
    /// `1×C`.
    pub logits: Var,
    pub attention: Option<Var>,
    pub selected: Option<usize>,
}

impl Aggregator {
    pub fn build<T: Real>(cfg: &AggregatorConfig, store: &mut ParamStore<T>, init: &mut dyn Init<T>) -> Result<Self> {
        cfg.validate()?;
        let (c, d, l) = (cfg.num_classes, cfg.embed_dim, cfg.hidden);
        let attention = if cfg.kind == AggKind::Abmil {
            let v = declare(store, init, "abmil.v".into(), &[l, d], Scheme::Uniform { fan_in: d })?;
            let u = declare(store, init, "abmil.u".into(), &[l, d], Scheme::Uniform { fan_in: d })?;
            let w = declare(store, init, "abmil.w".into(), &[l, 1], Scheme::Uniform { fan_in: l })?;
            Some((v, u, w))
        } else {
            None
        };
        let head = declare(store, init, "head.w".into(), &[c, d], Scheme::Uniform { fan_in: d })?;
        let bias = declare(store, init, "head.b".into(), &[c], Scheme::Constant(0.0))?;
        Ok(Aggregator {
            cfg: cfg.clone(),
            head,
            bias,
            attention,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((v, u, w)) = self.attention {
            ids.extend([v, u, w]);
        }
        ids.extend([self.head, self.bias]);
        ids
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<AggOutput> {
        let (head, bias) = (ctx.p(self.head), ctx.p(self.bias));
        let g = &mut ctx.graph;
        Ok(match self.cfg.kind {
            AggKind::Mean => AggOutput {
                logits: mean_pool_classify(g, z, head, bias)?,
                attention: None,
                selected: None,
            },
            AggKind::Max => {
                let (logits, row) = max_pool_classify(g, z, head, bias)?;
                AggOutput {
                    logits,
                    attention: None,
                    selected: Some(row),
                }
            }
            AggKind::Abmil => {
                let (v, u, w) = self.attention.expect("gated attention parameters");
                let (v, u, w) = (ctx.p(v), ctx.p(u), ctx.p(w));
                let (logits, attn) = abmil_classify(&mut ctx.graph, z, v, u, w, head, bias)?;
                AggOutput {
                    logits,
                    attention: Some(attn),
                    selected: None,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eye_head(g: &mut Graph<f64>) -> (Var, Var) {
        (g.constant(Tensor::identity(2)), g.constant(Tensor::vector(vec![0.0, 0.0])))
    }

    #[test]
    fn mean_examples() {
        let mut g = Graph::<f64>::new();
        let (h, b) = eye_head(&mut g);
        let z = g.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![-1.5, 2.0]]));
        let l = mean_pool_classify(&mut g, z, h, b).unwrap();
        assert_eq!(g.value(l).data(), &[0.0, 0.0]);
        let one = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let l = mean_pool_classify(&mut g, one, h, b).unwrap();
        assert_eq!(g.value(l).data(), &[3.0, 4.0]);
        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(mean_pool_classify(&mut g, empty, h, b), Err(Error::EmptyBag)));
    }

    #[test]
    fn max_examples() {
        let mut g = Graph::<f64>::new();
        let (h, b) = eye_head(&mut g);
        let z = g.constant(Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 1.0]]));
        let (l, row) = max_pool_classify(&mut g, z, h, b).unwrap();
        assert_eq!(g.value(l).data(), &[10.0, 0.0]);
        assert_eq!(row, 0);
        let dup = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![2.0, 0.0]]));
        let (_, row) = max_pool_classify(&mut g, dup, h, b).unwrap();
        assert_eq!(row, 1);
    }

    #[test]
    fn max_gradient_reaches_only_the_selected_row() {
        let mut g = Graph::<f64>::new();
        let (h, b) = eye_head(&mut g);
        let z = g.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]));
        let (l, _) = max_pool_classify(&mut g, z, h, b).unwrap();
        let loss = g.cross_entropy_with_logits(l, 0).unwrap();
        let grads = g.backward(loss).unwrap();
        let gz = grads.get(z).unwrap();
        assert_eq!(gz.row(0), &[0.0, 0.0]);
        assert!(gz.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn abmil_examples() {
        let mut g = Graph::<f64>::new();
        let (h, b) = eye_head(&mut g);
        let v = g.constant(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.5], vec![-0.4, 0.2]]));
        let u = g.constant(Tensor::from_rows(&[vec![0.2, 0.1], vec![-0.3, 0.4], vec![0.6, -0.1]]));
        let w = g.constant(Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]));
        let one = g.constant(Tensor::from_rows(&[vec![0.7, -1.1]]));
        let (l, a) = abmil_classify(&mut g, one, v, u, w, h, b).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert_eq!(g.value(l).data(), &[0.7, -1.1]);
        let same = g.constant(Tensor::from_rows(&vec![vec![0.2, 0.9]; 4]));
        let (_, a) = abmil_classify(&mut g, same, v, u, w, h, b).unwrap();
        assert!(g.value(a).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn head_bias_starts_at_zero_and_counts_match() {
        use crate::params::RandomInit;
        let mut r = crate::rng::seeded(0);
        for kind in AggKind::ALL {
            let cfg = AggregatorConfig::new(kind, 6, 3);
            let mut store = ParamStore::<f32>::new();
            let agg = Aggregator::build(&cfg, &mut store, &mut RandomInit { rng: &mut r }).unwrap();
            assert!(store.get(agg.bias).data().iter().all(|&v| v == 0.0));
            assert_eq!(store.numel(), cfg.param_count());
        }
        assert!(AggregatorConfig::new(AggKind::Mean, 4, 1).validate().is_err());
    }
}
