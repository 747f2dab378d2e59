//! Analytic cost model and forward-pass timing for the task layers.

use std::io::Write;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::mammoth::slots_per_expert;
use crate::layers::sparse::multihead_hidden;
use crate::layers::{Dropout, LayerConfig, LayerKind, TaskLayer};
use crate::params::{Ctx, ParamStore, RandomInit};
use crate::rng;
use crate::tensor::Tensor;

const BYTES: u64 = 4;

fn u(x: usize) -> u64 {
    x as u64
}

/// Multiply-accumulates of every matrix product in one forward pass over
/// an `N×D` bag, routing logits and weighted pooling included. Sparse
/// variants assume all `N·k` assignments fit within capacity.
pub fn count_macs(cfg: &LayerConfig, n: usize) -> Result<u64> {
    let (n, d, o) = (u(n), u(cfg.d), u(cfg.d_out));
    let m = &cfg.moe;
    Ok(match cfg.kind {
        LayerKind::Linear => n * d * o,
        LayerKind::Mammoth => {
            let c = cfg.mammoth_config()?;
            let (h, p, q, r) = (u(c.heads), u(c.p), u(c.q), u(c.head_dim()));
            let s = u(c.total_slots());
            n * d * u(c.mid_dim()) + h * (2 * s * n * p + s * p * q + s * q * r)
        }
        LayerKind::Soft => {
            let s = u(slots_per_expert(m.soft_slots, m.experts) * m.experts);
            2 * s * n * d + s * d * o + n * s * o
        }
        LayerKind::SparseSoftmax | LayerKind::SparseSinkhorn => {
            n * d * u(m.experts) + n * u(m.top_k) * d * o
        }
        LayerKind::SparseMh => {
            let h = u(m.mh_heads);
            let hidden = u(multihead_hidden(cfg.d, cfg.d_out, m.mh_heads));
            let t = n * h;
            t * (d / h) * u(m.experts) + t * u(m.top_k) * ((d / h) * hidden + hidden * (o / h))
        }
    })
}

/// Bytes of the input plus every forward intermediate at f32, as all of
/// them stay alive on the tape for the backward pass.
pub fn peak_bytes(cfg: &LayerConfig, n: usize) -> Result<u64> {
    let (n, d, o) = (u(n), u(cfg.d), u(cfg.d_out));
    let m = &cfg.moe;
    let elems = match cfg.kind {
        // x, dropout, xWᵀ, relu, dropout
        LayerKind::Linear => 2 * n * d + 3 * n * o,
        LayerKind::Mammoth => {
            let c = cfg.mammoth_config()?;
            let (h, p, q, r) = (u(c.heads), u(c.p), u(c.q), u(c.head_dim()));
            let s = u(c.total_slots());
            let mid = u(c.mid_dim());
            // x, dropout, projection, head slices; per head logits, alpha,
            // pooled, reduced, expanded, relu, norm; concat, dropout
            2 * n * d + 2 * n * mid + h * (2 * s * n + s * p + s * q + 3 * s * r) + 2 * s * o
        }
        LayerKind::Soft => {
            let s = u(slots_per_expert(m.soft_slots, m.experts) * m.experts);
            // logits, dispatch, combine, slot inputs, expert out, relu, output
            2 * n * d + 3 * s * n + s * d + 2 * s * o + 3 * n * o
        }
        LayerKind::SparseSoftmax | LayerKind::SparseSinkhorn => {
            let (e, k) = (u(m.experts), u(m.top_k));
            // gate logits and weights, gathered rows, expert out, relu,
            // scaled, scattered per expert, output
            2 * n * d + 2 * n * e + n * k * (d + 3 * o) + e * n * o + 3 * n * o
        }
        LayerKind::SparseMh => {
            let (h, e, k) = (u(m.mh_heads), u(m.experts), u(m.top_k));
            let hidden = u(multihead_hidden(cfg.d, cfg.d_out, m.mh_heads));
            let t = n * h;
            2 * n * d + 2 * t * e + t * k * (d / h + 2 * hidden + 2 * (o / h)) + e * n * o + 3 * n * o
        }
    };
    Ok(elems * BYTES)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Use every core for the matmul kernels instead of one thread.
    pub parallel: bool,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            trials: 1000,
            warmup: 50,
            seed: 0,
            parallel: false,
        }
    }
}

fn random_input(n: usize, d: usize, r: &mut rng::Rng) -> Tensor<f32> {
    let data = (0..n * d).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

fn time_forward(layer: &TaskLayer, store: &ParamStore<f32>, x: Tensor<f32>) -> Result<f64> {
    let mut r = rng::seeded(0);
    let start = Instant::now();
    let mut ctx = Ctx::new(store, false, false, &mut r);
    let xv = ctx.graph.constant(x);
    let out = layer.forward(&mut ctx, xv, Dropout::none())?;
    std::hint::black_box(ctx.graph.value(out));
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Mean and sample standard deviation of forward latency over fresh
/// random inputs; warmup passes are not recorded.
pub fn measure_latency(cfg: &LayerConfig, n: usize, lc: &LatencyConfig) -> Result<Latency> {
    if lc.trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let mut init_rng = rng::child(lc.seed, rng::stream::INIT);
    let mut store = ParamStore::new();
    let layer = TaskLayer::build(cfg, &mut store, &mut RandomInit { rng: &mut init_rng })?;
    let mut data_rng = rng::child(lc.seed, rng::stream::BENCH);
    let mut run = || -> Result<Vec<f64>> {
        let mut times = Vec::with_capacity(lc.trials);
        for t in 0..lc.warmup + lc.trials {
            let x = random_input(n, cfg.d, &mut data_rng);
            let ms = time_forward(&layer, &store, x)?;
            if t >= lc.warmup {
                times.push(ms);
            }
        }
        Ok(times)
    };
    let times = if lc.parallel {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::config(e.to_string()))?
            .install(run)?
    };
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let std = if times.len() < 2 {
        0.0
    } else {
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64).sqrt()
    };
    Ok(Latency { mean_ms: mean, std_ms: std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub variant: String,
    pub params: usize,
    pub exceeds_linear: bool,
}

/// Exact parameter counts; flags variants above `D·D_out`.
pub fn compare_params(variants: &[(String, LayerConfig)]) -> Result<Vec<ParamRow>> {
    let Some((_, first)) = variants.first() else {
        return Ok(Vec::new());
    };
    let (d, o) = (first.d, first.d_out);
    variants
        .iter()
        .map(|(name, cfg)| {
            if (cfg.d, cfg.d_out) != (d, o) {
                return Err(Error::config(format!(
                    "variant {name} has shape {}→{}, expected {d}→{o}",
                    cfg.d, cfg.d_out
                )));
            }
            let params = cfg.param_count()?;
            Ok(ParamRow {
                variant: name.clone(),
                params,
                exceeds_linear: params > d * o,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    pub n: usize,
    pub d: usize,
    pub d_out: usize,
    pub macs: u64,
    pub latency: Option<Latency>,
    pub params: usize,
    pub peak_bytes: u64,
}

impl BenchResult {
    /// Cost model only; `latency` is filled by [`measure_latency`].
    pub fn analytic(variant: &str, cfg: &LayerConfig, n: usize) -> Result<Self> {
        Ok(BenchResult {
            variant: variant.to_string(),
            n,
            d: cfg.d,
            d_out: cfg.d_out,
            macs: count_macs(cfg, n)?,
            latency: None,
            params: cfg.param_count()?,
            peak_bytes: peak_bytes(cfg, n)?,
        })
    }
}

/// `variant,N,D,D_out,macs,latency_ms_mean,latency_ms_std,params,peak_bytes`
pub fn write_csv<W: Write>(rows: &[BenchResult], mut w: W) -> std::io::Result<()> {
    writeln!(w, "variant,N,D,D_out,macs,latency_ms_mean,latency_ms_std,params,peak_bytes")?;
    for r in rows {
        let (mean, std) = r
            .latency
            .map(|l| (l.mean_ms.to_string(), l.std_ms.to_string()))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.n, r.d, r.d_out, r.macs, mean, std, r.params, r.peak_bytes
        )?;
    }
    Ok(())
}
