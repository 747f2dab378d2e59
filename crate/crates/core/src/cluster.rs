//! k-means, the adjusted Rand index, and cluster preservation under a
//! linear projection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_ITERS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center (lowest index on ties) and its distance.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sample_d2(d2: &[f64], total: f64, r: &mut Rng) -> usize {
    let u = r.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return i;
        }
    }
    d2.iter().rposition(|&w| w > 0.0).unwrap_or(d2.len() - 1)
}

/// Greedy k-means++: each round draws `2 + ln k` candidates by D² weight
/// and keeps the one that lowers the total potential most.
fn plus_plus(points: &[Vec<f64>], k: usize, r: &mut Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = vec![points[r.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            centers.push(points[r.random_range(0..m)].clone());
            continue;
        }
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let c = sample_d2(&d2, total, r);
            let next: Vec<f64> = d2.iter().zip(points).map(|(&d, p)| d.min(dist2(p, &points[c]))).collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, next, c));
            }
        }
        let (_, next, c) = best.expect("at least one trial");
        d2 = next;
        centers.push(points[c].clone());
    }
    centers
}

/// Lloyd's algorithm from greedy k-means++ seeds. Stops when no assignment
/// changes or after `max_iter` rounds. A cluster left empty is re-seeded
/// at the point farthest from its center, unless every point already sits
/// on its center.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, r: &mut Rng) -> Result<KMeans> {
    let m = points.len();
    if k == 0 || m < k {
        return Err(Error::Param(format!("kmeans needs 1 <= k <= M, got k = {k}, M = {m}")));
    }
    let mut centers = plus_plus(points, k, r);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let (far, d) = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist2(p, &centers[assignments[i]])))
                .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
            if d > 0.0 {
                counts[assignments[far]] -= 1;
                centers[j] = points[far].clone();
                assignments[far] = j;
                counts[j] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = points.iter().zip(&assignments).map(|(p, &a)| dist2(p, &centers[a])).sum();
    Ok(KMeans {
        assignments,
        centers,
        inertia,
        iterations,
    })
}

/// Best of `restarts` independent runs by inertia (earliest run on ties).
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, max_iter: usize, restarts: usize, r: &mut Rng) -> Result<KMeans> {
    let mut best = kmeans(points, k, max_iter, r)?;
    for _ in 1..restarts {
        let run = kmeans(points, k, max_iter, r)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

pub fn rows_of<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.f64()).collect()).collect()
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index from the pair-counting contingency table. Returns
/// 1 when the chance-corrected denominator vanishes (fewer than two
/// elements, or both partitions trivial in the same way).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let n = a.len() as u64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut ra = vec![0u64; ka];
    let mut rb = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        ra[x] += 1;
        rb[y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.iter().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionAri {
    pub mean: f64,
    pub per_bag: Vec<f64>,
}

/// Per bag, clusters raw features and `x·Wᵀ` with identically seeded
/// k-means runs and scores their agreement; returns the mean over bags.
pub fn projection_ari<T: Real>(
    bags: &[&Tensor<T>],
    w: &Tensor<T>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<ProjectionAri> {
    if bags.is_empty() {
        return Err(Error::Param("projection_ari needs at least one bag".into()));
    }
    let per_bag = bags
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let bag_seed = rng::child_seed(seed, &format!("{}/{i}", rng::stream::KMEANS));
            let raw = kmeans_restarts(&rows_of(*x), k, DEFAULT_ITERS, restarts, &mut rng::seeded(bag_seed))?;
            let projected = x.matmul_nt(w)?;
            let proj = kmeans_restarts(&rows_of(&projected), k, DEFAULT_ITERS, restarts, &mut rng::seeded(bag_seed))?;
            adjusted_rand_index(&raw.assignments, &proj.assignments)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ProjectionAri {
        mean: per_bag.iter().sum::<f64>() / per_bag.len() as f64,
        per_bag,
    })
}
