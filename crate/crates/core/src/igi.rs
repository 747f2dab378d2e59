//! Instance gradient interference: cosine similarity of per-instance
//! gradients within and across feature clusters.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cluster::{self, kmeans_restarts};
use crate::error::{Error, Result};
use crate::layers::{Dropout, TaskLayer};
use crate::mil::mean_pool_classify;
use crate::model::Model;
use crate::params::Ctx;
use crate::rng;
use crate::synth::Bag;
use crate::tensor::{Real, Tensor};

/// Which weights the per-instance gradients are taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// `W` of a linear task layer.
    Linear,
    /// Every `W_low` block of a MAMMOTH layer, as one vector.
    SingleExpert,
    /// The `W_low` block of the expert each instance is dispatched to.
    PerExpert,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Selector::Linear),
            "single_expert" => Ok(Selector::SingleExpert),
            "per_expert" => Ok(Selector::PerExpert),
            _ => Err(Error::config(format!(
                "unknown selector {s:?} (expected linear, single_expert or per_expert)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgiConfig {
    pub k: usize,
    pub per_cluster: usize,
    pub selector: Selector,
    pub seed: u64,
    /// Keep every pair similarity for CSV export.
    pub keep_pairs: bool,
}

impl IgiConfig {
    pub fn new(selector: Selector) -> Self {
        IgiConfig {
            k: 8,
            per_cluster: 100,
            selector,
            seed: 0,
            keep_pairs: false,
        }
    }
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    m2: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Sample variance; 0 below two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Summary::default();
        xs.iter().for_each(|&x| s.push(x));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    /// One-sided, for mean(a) > mean(b).
    pub p: f64,
}

pub fn welch_one_sided(a: &Summary, b: &Summary) -> Result<Welch> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::Param(format!(
            "welch test needs two samples per group, got {} and {}",
            a.n, b.n
        )));
    }
    let (va, vb) = (a.variance() / a.n as f64, b.variance() / b.n as f64);
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    if se2 == 0.0 {
        let df = (a.n + b.n - 2) as f64;
        return Ok(match diff.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => Welch { t: f64::INFINITY, df, p: 0.0 },
            Some(std::cmp::Ordering::Less) => Welch { t: f64::NEG_INFINITY, df, p: 1.0 },
            _ => Welch { t: 0.0, df, p: 0.5 },
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(Welch {
        t,
        df,
        p: dist.sf(t).clamp(0.0, 1.0),
    })
}

/// Cosine similarity clamped to [−1, 1]; `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub bag: usize,
    pub i: usize,
    pub j: usize,
    pub same_cluster: bool,
    pub cosine: f64,
}

#[derive(Clone, Debug, Default)]
struct Tally {
    intra: Summary,
    inter: Summary,
    all: Summary,
    pairs: Vec<PairRecord>,
}

impl Tally {
    fn add_bag(&mut self, bag: usize, grads: &[Vec<f64>], ids: &[usize], clusters: &[usize], keep: bool) {
        for a in 0..grads.len() {
            for b in a + 1..grads.len() {
                let Some(c) = cosine(&grads[a], &grads[b]) else { continue };
                let same = clusters[a] == clusters[b];
                if same {
                    self.intra.push(c);
                } else {
                    self.inter.push(c);
                }
                self.all.push(c);
                if keep {
                    self.pairs.push(PairRecord {
                        bag,
                        i: ids[a],
                        j: ids[b],
                        same_cluster: same,
                        cosine: c,
                    });
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WithinExpert {
    /// Mean same-expert similarity per expert; `None` without any pair.
    pub per_expert: Vec<Option<f64>>,
    /// Average over experts that have pairs.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgiReport {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// Mean over every sampled pair, regardless of cluster.
    pub all_mean: f64,
    pub within_expert: Option<WithinExpert>,
    pub t_statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub n_intra: usize,
    pub n_inter: usize,
    pub n_bags: usize,
    #[serde(skip)]
    pub pairs: Vec<PairRecord>,
}

impl IgiReport {
    fn from_tally(t: Tally, within: Option<WithinExpert>, n_bags: usize) -> Result<Self> {
        let w = welch_one_sided(&t.intra, &t.inter)?;
        Ok(IgiReport {
            intra_mean: t.intra.mean,
            inter_mean: t.inter.mean,
            all_mean: t.all.mean,
            within_expert: within,
            t_statistic: w.t,
            df: w.df,
            p_value: w.p,
            n_intra: t.intra.n,
            n_inter: t.inter.n,
            n_bags,
            pairs: t.pairs,
        })
    }

    /// `bag,i,j,same_cluster,cosine`; empty unless pairs were kept.
    pub fn write_pairs_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bag,i,j,same_cluster,cosine")?;
        for p in &self.pairs {
            writeln!(w, "{},{},{},{},{}", p.bag, p.i, p.j, p.same_cluster as u8, p.cosine)?;
        }
        Ok(())
    }
}

fn qualifying_clusters(clusters: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &c in clusters {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    counts.values().filter(|&&n| n >= 2).count()
}

/// Intra- and inter-cluster statistics for one group of gradients.
pub fn gradient_similarity_report(grads: &[Vec<f64>], clusters: &[usize]) -> Result<IgiReport> {
    if grads.len() != clusters.len() {
        return Err(Error::dim("gradient_similarity_report", &[grads.len()], &[clusters.len()]));
    }
    if qualifying_clusters(clusters) < 2 {
        return Err(Error::Param("IGI needs at least two clusters with two or more samples".into()));
    }
    let mut t = Tally::default();
    let ids: Vec<usize> = (0..grads.len()).collect();
    t.add_bag(0, grads, &ids, clusters, false);
    IgiReport::from_tally(t, None, 1)
}

/// Flattened gradients of the surrogate loss for one instance: the bag
/// label's cross-entropy against the head applied to the mean of the
/// instance's own embedding rows. Returns one block per selected tensor
/// part (for `W_low`, one per expert, each concatenated over heads).
fn instance_blocks<T: Real>(model: &Model<T>, x: &Tensor<T>, label: usize, sel: Selector) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::seeded(0);
    let mut ctx = Ctx::new(&model.store, false, true, &mut r);
    let xv = ctx.graph.constant(x.clone());
    let z = model.layer.forward(&mut ctx, xv, Dropout::none())?;
    let (head, bias) = (ctx.p(model.agg.head), ctx.p(model.agg.bias));
    let logits = mean_pool_classify(&mut ctx.graph, z, head, bias)?;
    let loss = ctx.graph.cross_entropy_with_logits(logits, label)?;
    let g = ctx.graph.backward(loss)?;
    let grad = |id| -> Vec<f64> {
        let v = ctx.p(id);
        g.get(v)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; ctx.graph.value(v).numel()])
    };
    match (sel, &model.layer) {
        (Selector::Linear, TaskLayer::Linear(l)) => Ok(vec![grad(l.w)]),
        (Selector::SingleExpert | Selector::PerExpert, TaskLayer::Mammoth(m)) => {
            let e = m.cfg.experts;
            let mut blocks = vec![Vec::new(); e];
            for &id in &m.w_low {
                let flat = grad(id);
                let per = flat.len() / e;
                for (j, b) in blocks.iter_mut().enumerate() {
                    b.extend_from_slice(&flat[j * per..(j + 1) * per]);
                }
            }
            Ok(blocks)
        }
        (s, _) => Err(Error::config(format!(
            "selector {s:?} does not match a {} layer",
            match &model.layer {
                TaskLayer::Linear(_) => "linear",
                TaskLayer::Mammoth(_) => "mammoth",
                _ => "baseline MoE",
            }
        ))),
    }
}

fn dispatch_experts<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let TaskLayer::Mammoth(m) = &model.layer else {
        return Err(Error::config("expert dispatch needs a mammoth layer"));
    };
    let mut r = rng::seeded(0);
    let mut ctx = Ctx::new(&model.store, false, false, &mut r);
    let xv = ctx.graph.constant(x.clone());
    let out = m.forward(&mut ctx, xv, Dropout::none())?;
    Ok(out.routing(&ctx.graph, &m.cfg, "").argmax_experts())
}

struct BagResult {
    tally: Tally,
    expert: Vec<Summary>,
}

fn run_bag<T: Real>(model: &Model<T>, bag_idx: usize, bag: &Bag, cfg: &IgiConfig) -> Result<Option<BagResult>> {
    let x: Tensor<T> = bag.features.cast();
    let mut r = rng::child(cfg.seed, &format!("{}/{bag_idx}", rng::stream::IGI));
    let km = kmeans_restarts(&cluster::rows_of(&x), cfg.k, cluster::DEFAULT_ITERS, cluster::DEFAULT_RESTARTS, &mut r)?;
    let mut members = vec![Vec::new(); cfg.k];
    for (i, &a) in km.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut ids = Vec::new();
    let mut clusters = Vec::new();
    for (c, m) in members.iter().enumerate() {
        let take = m.len().min(cfg.per_cluster);
        let mut picked: Vec<usize> = index::sample(&mut r, m.len(), take).into_iter().map(|j| m[j]).collect();
        picked.sort_unstable();
        clusters.extend(std::iter::repeat_n(c, picked.len()));
        ids.extend(picked);
    }
    if qualifying_clusters(&clusters) < 2 {
        return Ok(None);
    }
    let blocks = ids
        .par_iter()
        .map(|&i| instance_blocks(model, &x.slice_rows(i, i + 1)?, bag.label, cfg.selector))
        .collect::<Result<Vec<_>>>()?;
    let whole: Vec<Vec<f64>> = blocks.iter().map(|b| b.concat()).collect();
    let mut tally = Tally::default();
    tally.add_bag(bag_idx, &whole, &ids, &clusters, cfg.keep_pairs);

    let mut expert = Vec::new();
    if cfg.selector == Selector::PerExpert {
        let route = dispatch_experts(model, &x)?;
        let e = blocks[0].len();
        expert = vec![Summary::default(); e];
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                let ea = route[ids[a]];
                if ea != route[ids[b]] {
                    continue;
                }
                if let Some(c) = cosine(&blocks[a][ea], &blocks[b][ea]) {
                    expert[ea].push(c);
                }
            }
        }
    }
    Ok(Some(BagResult { tally, expert }))
}

fn merge(into: &mut Summary, from: &Summary) {
    if from.n == 0 {
        return;
    }
    let n = into.n + from.n;
    let d = from.mean - into.mean;
    let mean = into.mean + d * from.n as f64 / n as f64;
    into.m2 += from.m2 + d * d * into.n as f64 * from.n as f64 / n as f64;
    into.mean = mean;
    into.n = n;
}

/// Runs the protocol at fixed parameters. Bags whose sample lacks two
/// clusters of at least two instances are skipped; it is an error if no
/// bag qualifies.
pub fn igi_protocol<T: Real>(model: &Model<T>, bags: &[Bag], cfg: &IgiConfig) -> Result<IgiReport> {
    if cfg.k < 2 || cfg.per_cluster < 1 {
        return Err(Error::config("IGI needs k >= 2 and per_cluster >= 1"));
    }
    let results = bags
        .iter()
        .enumerate()
        .map(|(i, b)| run_bag(model, i, b, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut tally = Tally::default();
    let mut experts: Vec<Summary> = Vec::new();
    let mut used = 0;
    for r in results.into_iter().flatten() {
        used += 1;
        merge(&mut tally.intra, &r.tally.intra);
        merge(&mut tally.inter, &r.tally.inter);
        merge(&mut tally.all, &r.tally.all);
        tally.pairs.extend(r.tally.pairs);
        if experts.len() < r.expert.len() {
            experts.resize(r.expert.len(), Summary::default());
        }
        for (a, b) in experts.iter_mut().zip(&r.expert) {
            merge(a, b);
        }
    }
    if used == 0 {
        return Err(Error::Param("IGI needs at least two clusters with two or more samples".into()));
    }
    let within = (cfg.selector == Selector::PerExpert).then(|| {
        let per_expert: Vec<Option<f64>> = experts.iter().map(|s| (s.n > 0).then_some(s.mean)).collect();
        let present: Vec<f64> = per_expert.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        WithinExpert { per_expert, mean }
    });
    IgiReport::from_tally(tally, within, used)
}
