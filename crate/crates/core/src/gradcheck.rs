//! Central finite-difference gradient checks in `f64`.
//!
//! The reference derivative is `(f(x + h) - f(x - h)) / 2h` with
//! `h = 1e-5`, evaluated through forward passes only, so it shares no code
//! with the backward rules it checks.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::layers::mammoth::PhiSharing;
use crate::layers::{Dropout, LayerConfig, LayerKind, MammothHyper, MoeConfig};
use crate::mil::AggKind;
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, ParamStore, RandomInit};
use crate::rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Magnitude below which errors are measured absolutely. Finite
/// differences at `h = 1e-5` carry roughly 1e-10 of rounding noise, which
/// is meaningless relative to a gradient entry of that size.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes further apart than this mark a non-differentiable
/// point; smooth functions differ by O(h·f'').
fn is_kink(left: f64, right: f64) -> bool {
    (right - left).abs() > 1e-2 * left.abs().max(right.abs()) + 1e-3
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Coordinates within `h` of a kink (ReLU, max, top-k), left out.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evenly spaced coordinates, at most `max` of them.
fn coords(numel: usize, max: usize) -> impl Iterator<Item = usize> {
    let stride = numel.div_ceil(max.max(1)).max(1);
    (0..numel).step_by(stride)
}

fn compare(
    name: &str,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    max_coords: usize,
    value: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut skipped = 0;
    let base = value(inputs)?;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for c in coords(inputs[t].numel(), max_coords) {
            let orig = inputs[t].data()[c];
            probe[t].data_mut()[c] = orig + STEP;
            let up = value(&probe)?;
            probe[t].data_mut()[c] = orig - STEP;
            let down = value(&probe)?;
            probe[t].data_mut()[c] = orig;
            if is_kink((base - down) / STEP, (up - base) / STEP) {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[c], numeric));
            count += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        coords: count,
        skipped,
    })
}

/// Checks the gradient of a scalar graph function with respect to every
/// input tensor.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], max_coords: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !track {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = run(inputs, true)?;
    compare(name, inputs, &analytic, max_coords, &|xs| run(xs, false).map(|r| r.0))
}

/// Checks the gradient of a model-level scalar with respect to every
/// parameter in `store`. The forward runs in inference mode.
pub fn check_store<F>(name: &str, store: &ParamStore<f64>, max_coords: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut s = store.clone();
        for (dst, src) in s.tensors_mut().iter_mut().zip(xs) {
            *dst = src.clone();
        }
        let mut r = rng::seeded(0);
        let mut ctx = Ctx::new(&s, false, track, &mut r);
        let loss = f(&mut ctx)?;
        let value = ctx.graph.value(loss).data()[0];
        if !track {
            return Ok((value, Vec::new()));
        }
        let grads = ctx.graph.backward(loss)?;
        Ok((value, ctx.param_grads(&grads)))
    };
    let inputs = store.tensors().to_vec();
    let (_, analytic) = run(&inputs, true)?;
    compare(name, &inputs, &analytic, max_coords, &|xs| run(xs, false).map(|r| r.0))
}

/// Reduces any tensor to a scalar through a fixed pseudo-random weighting,
/// so that symmetric cancellations cannot hide gradient errors.
pub fn projection_loss(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed;
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            state = rng::splitmix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn tiny_layer(kind: LayerKind, r: &mut rng::Rng) -> LayerConfig {
    let heads = 2;
    let d = 2 * r.random_range(2..4);
    let mut cfg = LayerConfig::new(kind, d, heads * r.random_range(2..4));
    cfg.mammoth = MammothHyper {
        heads,
        p: Some(r.random_range(2..4)),
        experts: r.random_range(1..4),
        slots: r.random_range(1..3),
        q: Some(r.random_range(1..4)),
        phi_sharing: if r.random_bool(0.5) {
            PhiSharing::PerHead
        } else {
            PhiSharing::Global
        },
    };
    cfg.moe = MoeConfig {
        experts: r.random_range(2..4),
        top_k: r.random_range(1..3),
        soft_slots: r.random_range(2..7),
        mh_heads: heads,
        ..MoeConfig::default()
    };
    cfg
}

/// One pass over every differentiable op, task layer and aggregator at
/// random tiny shapes drawn from `seed`.
pub fn suite_instance(seed: u64, max_coords: usize) -> Result<Vec<GradCheck>> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = random(&[m, k], r);
    let b = random(&[k, n], r);
    let c = random(&[m, k], r);
    let row = random(&[1, k], r);
    let col = random(&[m, 1], r);
    let s = seed;
    let mut out = Vec::new();
    macro_rules! unary {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {
            out.push(check_fn($name, &[$x.clone()], max_coords, |$g, vs| {
                let $v = vs[0];
                let y = $body;
                projection_loss($g, y, s)
            })?)
        };
    }
    out.push(check_fn("matmul", &[a.clone(), b.clone()], max_coords, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    unary!("transpose", a, |g, v| g.transpose(v)?);
    out.push(check_fn("add", &[a.clone(), c.clone()], max_coords, |g, v| {
        let y = g.add(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    out.push(check_fn("add_row", &[a.clone(), row.clone()], max_coords, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    out.push(check_fn("mul", &[a.clone(), c.clone()], max_coords, |g, v| {
        let y = g.mul(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    unary!("scale", a, |g, v| g.scale(v, -1.7));
    unary!("add_scalar", a, |g, v| g.add_scalar(v, 0.3));
    out.push(check_fn("scale_rows", &[a.clone(), col.clone()], max_coords, |g, v| {
        let y = g.scale_rows(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    unary!("relu", a, |g, v| g.relu(v));
    unary!("tanh", a, |g, v| g.tanh(v));
    unary!("sigmoid", a, |g, v| g.sigmoid(v));
    unary!("exp", a, |g, v| g.exp(v));
    unary!("softmax_rows", a, |g, v| g.softmax(v, 1)?);
    unary!("softmax_cols", a, |g, v| g.softmax(v, 0)?);
    unary!("normalize_sum_rows", a, |g, v| {
        let e = g.exp(v);
        g.normalize_sum(e, 1)?
    });
    unary!("normalize_sum_cols", a, |g, v| {
        let e = g.exp(v);
        g.normalize_sum(e, 0)?
    });
    let ln_in = random(&[m, k + 1], r);
    let gamma = random(&[k + 1], r);
    let beta = random(&[k + 1], r);
    out.push(check_fn("layer_norm", &[ln_in, gamma, beta], max_coords, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        projection_loss(g, y, s)
    })?);
    unary!("dropout", a, |g, v| g.dropout(v, 0.5, true, &mut rng::seeded(s))?);
    out.push(check_fn("concat_last_axis", &[a.clone(), col.clone()], max_coords, |g, v| {
        let y = g.concat_last_axis(&[v[0], v[1]])?;
        projection_loss(g, y, s)
    })?);
    out.push(check_fn("concat_rows", &[a.clone(), row.clone()], max_coords, |g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        projection_loss(g, y, s)
    })?);
    let (c0, r0) = (r.random_range(0..k), r.random_range(0..m));
    unary!("slice_columns", a, |g, v| g.slice_columns(v, c0, k)?);
    unary!("slice_rows", a, |g, v| g.slice_rows(v, r0, m)?);
    unary!("reshape", a, |g, v| g.reshape(v, &[k, m])?);
    unary!("reduce_mean", a, |g, v| g.reduce_mean(v)?);
    unary!("reduce_max", a, |g, v| g.reduce_max_with_argmax(v)?.0);
    unary!("sum", a, |g, v| g.sum(v));
    let target = r.random_range(0..k);
    out.push(check_fn("cross_entropy", &[row.clone()], max_coords, |g, v| {
        g.cross_entropy_with_logits(v[0], target)
    })?);
    let (groups, slots, q, rr) = (r.random_range(1..4), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let gx = random(&[groups * slots, q], r);
    let gw = random(&[groups, rr, q], r);
    out.push(check_fn("grouped_matmul_t", &[gx, gw], max_coords, |g, v| {
        let y = g.grouped_matmul_t(v[0], v[1])?;
        projection_loss(g, y, s)
    })?);
    let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..m)).collect();
    unary!("gather_rows", a, |g, v| g.gather_rows(v, &idx)?);
    let n_rows = r.random_range(1..5);
    let scatter: Vec<usize> = (0..m).map(|_| r.random_range(0..n_rows)).collect();
    unary!("scatter_add_rows", a, |g, v| g.scatter_add_rows(v, &scatter, n_rows)?);
    let flat: Vec<usize> = (0..4).map(|_| r.random_range(0..m * k)).collect();
    unary!("gather", a, |g, v| g.gather(v, &flat, &[2, 2])?);

    let n_inst = r.random_range(1..6);
    for kind in LayerKind::ALL {
        let cfg = tiny_layer(kind, r);
        // One instance makes every Sinkhorn score exactly 1/E, so top-k
        // rests on a tie that finite differences flip.
        let rows = if kind == LayerKind::SparseSinkhorn { n_inst.max(2) } else { n_inst };
        let x = random(&[rows, cfg.d], r);
        for agg in [AggKind::Mean, AggKind::Max, AggKind::Abmil] {
            let mut mc = ModelConfig::new(cfg.clone(), agg, 3);
            mc.agg.hidden = 4;
            let mut ir = rng::child(s, kind.name());
            let model = Model::<f64>::build(&mc, &mut RandomInit { rng: &mut ir })?;
            let name = format!("{}+{}", kind.name(), agg.name());
            out.push(check_store(&name, &model.store, max_coords, |ctx| {
                let xv = ctx.graph.constant(x.clone());
                let o = model.forward(ctx, xv, Dropout::none())?;
                let layer_term = projection_loss(&mut ctx.graph, o.embeddings, s)?;
                let ce = ctx.graph.cross_entropy_with_logits(o.agg.logits, 1)?;
                ctx.graph.add(layer_term, ce)
            })?);
        }
    }
    Ok(out)
}

/// `instances` independent draws of [`suite_instance`].
pub fn suite(seed: u64, instances: usize, max_coords: usize) -> Result<Vec<GradCheck>> {
    let mut all = Vec::new();
    for i in 0..instances {
        let mut checks = suite_instance(rng::child_seed(seed, &format!("gradcheck/{i}")), max_coords)?;
        for c in &mut checks {
            c.name = format!("{}#{i}", c.name);
        }
        all.extend(checks);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_draw() {
        let checks = suite(3, 1, 8).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(checks.len() > 40);
    }

    #[test]
    fn square_passes() {
        let x = Tensor::<f64>::vector(vec![0.5, -1.5, 2.0]);
        let ok = check_fn("square", &[x.clone()], 10, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!((ok.coords, ok.skipped), (3, 0));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Detaching the input zeroes its analytic gradient.
        let x = Tensor::<f64>::vector(vec![0.3, 0.7]);
        let bad = check_fn("detached", &[x], 10, |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let e = g.exp(c);
            Ok(g.sum(e))
        })
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn kinks_are_skipped_not_hidden() {
        let x = Tensor::<f64>::vector(vec![0.0, 0.5]);
        let c = check_fn("relu_at_zero", &[x], 10, |g, v| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!((c.coords, c.skipped), (1, 1));
        assert!(c.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-6) < 1e-5);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn coordinate_sampling_is_bounded() {
        assert_eq!(coords(10, 100).count(), 10);
        assert!(coords(10_000, 50).count() <= 50);
    }
}
