//! Synthetic multi-concept bags.
//!
//! Instances are drawn around `K` Gaussian concept means; each bag mixes
//! concepts with a Dirichlet composition and is labeled by a rule over its
//! realized concept fractions.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// Label 1 iff the fraction of concept `c` is at least `rho`.
    Presence { c: usize, rho: f64 },
    /// Label 1 iff both concept fractions are at least `rho`.
    CoOccurrence { a: usize, b: usize, rho: f64 },
    /// Label is the most frequent concept (lowest id on ties).
    Majority,
}

impl Rule {
    pub fn num_classes(&self, k: usize) -> usize {
        match self {
            Rule::Majority => k,
            _ => 2,
        }
    }

    pub fn label(&self, concepts: &[u16], k: usize) -> usize {
        let mut counts = vec![0usize; k];
        for &c in concepts {
            counts[c as usize] += 1;
        }
        let n = concepts.len().max(1) as f64;
        let frac = |c: usize| counts[c] as f64 / n;
        match *self {
            Rule::Presence { c, rho } => (frac(c) >= rho) as usize,
            Rule::CoOccurrence { a, b, rho } => (frac(a) >= rho && frac(b) >= rho) as usize,
            Rule::Majority => {
                let mut best = 0;
                for (c, &v) in counts.iter().enumerate() {
                    if v > counts[best] {
                        best = c;
                    }
                }
                best
            }
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        let check_rho = |rho: f64| {
            if rho > 0.0 && rho < 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("rho = {rho} must lie in (0, 1)")))
            }
        };
        let check_c = |c: usize| {
            if c < k {
                Ok(())
            } else {
                Err(Error::config(format!("concept {c} out of range for K = {k}")))
            }
        };
        match *self {
            Rule::Presence { c, rho } => {
                check_c(c)?;
                check_rho(rho)
            }
            Rule::CoOccurrence { a, b, rho } => {
                check_c(a)?;
                check_c(b)?;
                check_rho(rho)
            }
            Rule::Majority => Ok(()),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Presence { c, rho } => write!(f, "presence:{c}:{rho}"),
            Rule::CoOccurrence { a, b, rho } => write!(f, "co_occurrence:{a}:{b}:{rho}"),
            Rule::Majority => f.write_str("majority"),
        }
    }
}

/// `presence:C:RHO`, `co_occurrence:A:B:RHO` or `majority`.
impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("invalid rule `{s}` (expected presence:C:RHO, co_occurrence:A:B:RHO or majority)"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let real = |t: &str| t.parse::<f64>().map_err(|_| bad());
        match parts.as_slice() {
            ["presence", c, rho] => Ok(Rule::Presence {
                c: num(c)?,
                rho: real(rho)?,
            }),
            ["co_occurrence", a, b, rho] => Ok(Rule::CoOccurrence {
                a: num(a)?,
                b: num(b)?,
                rho: real(rho)?,
            }),
            ["majority"] => Ok(Rule::Majority),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub k: usize,
    pub d: usize,
    pub sigma: f64,
    /// Minimum distance between concept means, in units of `sigma`.
    pub sep: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Symmetric Dirichlet concentration of bag compositions.
    pub mix: f64,
    pub rule: Rule,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k: 8,
            d: 64,
            sigma: 1.0,
            sep: 6.0,
            n_min: 64,
            n_max: 256,
            mix: 1.0,
            rule: Rule::CoOccurrence { a: 0, b: 1, rho: 0.1 },
            train: 200,
            val: 50,
            test: 50,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Two concepts whose majority decides the label, so one concept's
    /// instances push toward class 0 and the other's toward class 1.
    pub fn conflicting(seed: u64) -> Self {
        SynthSpec {
            k: 2,
            d: 32,
            mix: 20.0,
            n_min: 200,
            n_max: 240,
            rule: Rule::Majority,
            train: 20,
            val: 0,
            test: 0,
            seed,
            ..SynthSpec::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rule.num_classes(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("K = {} must be at least 2", self.k)));
        }
        if self.k > u16::MAX as usize + 1 {
            return Err(Error::config("K exceeds the u16 concept id range"));
        }
        if self.d == 0 {
            return Err(Error::config("D must be positive"));
        }
        if !(self.sep > 0.0) || !(self.sigma >= 0.0) || !(self.mix > 0.0) {
            return Err(Error::config("sep and mix must be positive and sigma non-negative"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "instance range [{}, {}] must be non-empty and start at 1 or more",
                self.n_min, self.n_max
            )));
        }
        if self.d < 64 && self.k > 1usize << self.d {
            return Err(Error::config(format!("K = {} exceeds 2^D for D = {}", self.k, self.d)));
        }
        self.rule.validate(self.k)
    }
}

/// One sample: instances, label and the generating concept of each
/// instance (for evaluation only).
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub features: Tensor<f32>,
    pub label: usize,
    pub concepts: Vec<u16>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

const ATTEMPTS: usize = 1000;

/// `K` concept means, centered at the origin and rescaled so that the
/// closest pair is exactly `sep·sigma` apart (`sep` when `sigma = 0`).
pub fn make_concepts(k: usize, d: usize, sep: f64, sigma: f64, r: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if d < 64 && k > 1usize << d {
        return Err(Error::config(format!("K = {k} exceeds 2^D for D = {d}")));
    }
    let target = if sigma > 0.0 { sep * sigma } else { sep };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..ATTEMPTS {
        let mut means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| normal.sample(r)).collect()).collect();
        for j in 0..d {
            let mu = means.iter().map(|m| m[j]).sum::<f64>() / k as f64;
            means.iter_mut().for_each(|m| m[j] -= mu);
        }
        let min = min_pairwise_distance(&means);
        if !(min > 0.0) || !min.is_finite() {
            continue;
        }
        let scale = target / min;
        means.iter_mut().flatten().for_each(|v| *v *= scale);
        if min_pairwise_distance(&means) >= target * (1.0 - 1e-12) {
            return Ok(means);
        }
    }
    Err(Error::Numeric(format!(
        "could not place {k} concepts {target} apart within {ATTEMPTS} attempts"
    )))
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
            min = min.min(d2.sqrt());
        }
    }
    min
}

fn dirichlet(k: usize, alpha: f64, r: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(r)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

fn categorical(p: &[f64], r: &mut Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Draws instance concepts for a bag of `n` instances.
fn sample_concepts(spec: &SynthSpec, n: usize, r: &mut Rng) -> Vec<u16> {
    let comp = dirichlet(spec.k, spec.mix, r);
    (0..n).map(|_| categorical(&comp, r) as u16).collect()
}

fn sample_features(concepts: &[u16], means: &[Vec<f64>], sigma: f64, r: &mut Rng) -> Tensor<f32> {
    let d = means[0].len();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(concepts.len() * d);
    for &c in concepts {
        for &m in &means[c as usize] {
            let e = if sigma > 0.0 { sigma * noise.sample(r) } else { 0.0 };
            data.push((m + e) as f32);
        }
    }
    Tensor::matrix(concepts.len(), d, data).expect("consistent bag shape")
}

/// One bag with an unconstrained label.
pub fn sample_bag(spec: &SynthSpec, means: &[Vec<f64>], r: &mut Rng) -> Bag {
    let n = r.random_range(spec.n_min..=spec.n_max);
    let concepts = sample_concepts(spec, n, r);
    let label = spec.rule.label(&concepts, spec.k);
    Bag {
        features: sample_features(&concepts, means, spec.sigma, r),
        label,
        concepts,
    }
}

/// One bag whose label equals `target`, by rejection over compositions.
pub fn sample_bag_with_label(spec: &SynthSpec, means: &[Vec<f64>], target: usize, r: &mut Rng) -> Result<Bag> {
    const TRIES: usize = 100_000;
    for _ in 0..TRIES {
        let n = r.random_range(spec.n_min..=spec.n_max);
        let concepts = sample_concepts(spec, n, r);
        if spec.rule.label(&concepts, spec.k) == target {
            return Ok(Bag {
                features: sample_features(&concepts, means, spec.sigma, r),
                label: target,
                concepts,
            });
        }
    }
    Err(Error::config(format!(
        "rule {} produced no bag of class {target} in {TRIES} draws",
        spec.rule
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub concepts: Vec<Vec<f64>>,
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Bag] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates every split from the `data` stream of `spec.seed`. Target
/// labels cycle through the classes, so each split is balanced to within
/// one bag per class.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::child(spec.seed, rng::stream::DATA);
    let concepts = make_concepts(spec.k, spec.d, spec.sep, spec.sigma, &mut r)?;
    let c = spec.num_classes();
    let make = |count: usize, r: &mut Rng| -> Result<Vec<Bag>> {
        (0..count).map(|i| sample_bag_with_label(spec, &concepts, i % c, r)).collect()
    };
    let train = make(spec.train, &mut r)?;
    let val = make(spec.val, &mut r)?;
    let test = make(spec.test, &mut r)?;
    Ok(Dataset {
        spec: spec.clone(),
        concepts,
        train,
        val,
        test,
    })
}

pub const MAGIC: &[u8; 4] = b"MILB";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 4 + 4 + 4;

pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    let (n, d) = (bag.features.rows(), bag.features.cols());
    if n != bag.concepts.len() {
        return Err(Error::dim("encode_bag", bag.features.shape(), &[bag.concepts.len()]));
    }
    let label = i32::try_from(bag.label).map_err(|_| Error::Param("label exceeds i32".into()))?;
    let mut out = Vec::with_capacity(HEADER + n * d * 4 + n * 2);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    for v in bag.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &bag.concepts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.buf.len(),
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_bag(buf: &[u8]) -> Result<Bag> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic (expected MILB)"));
    }
    let version = c.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let n = c.u32("instance count")? as usize;
    let d = c.u32("feature dim")? as usize;
    let label = i32::from_le_bytes(c.take(4, "label")?.try_into().unwrap());
    if label < 0 {
        return Err(Error::parse(13, format!("negative label {label}")));
    }
    let nd = n.checked_mul(d).ok_or_else(|| Error::parse(5, "shape overflows"))?;
    let raw = c.take(nd.checked_mul(4).ok_or_else(|| Error::parse(5, "shape overflows"))?, "features")?;
    let features: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let raw = c.take(n * 2, "concept ids")?;
    let concepts: Vec<u16> = raw.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect();
    if c.pos != buf.len() {
        return Err(Error::parse(c.pos, "trailing bytes after bag"));
    }
    Ok(Bag {
        features: Tensor::new(vec![n, d], features)?,
        label: label as usize,
        concepts,
    })
}

pub fn write_bag<W: Write>(mut w: W, bag: &Bag) -> Result<()> {
    w.write_all(&encode_bag(bag)?)?;
    Ok(())
}

pub fn read_bag<R: Read>(mut r: R) -> Result<Bag> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_bag(&buf)
}

pub fn load_bag(path: &Path) -> Result<Bag> {
    decode_bag(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

pub const MANIFEST: &str = "manifest.csv";

pub fn write_manifest<W: Write>(mut w: W, entries: &[ManifestEntry]) -> Result<()> {
    writeln!(w, "path,label,split")?;
    for e in entries {
        let p = e.path.to_string_lossy();
        if p.contains(',') || p.contains('\n') {
            return Err(Error::Param(format!("manifest path `{p}` contains a separator")));
        }
        writeln!(w, "{p},{},{}", e.label, e.split.name())?;
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h.trim() == "path,label,split" => offset += h.len() + 1,
        _ => return Err(Error::parse(0, "manifest header must be `path,label,split`")),
    }
    let mut out = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [path, label, split] = cols.as_slice() else {
            return Err(Error::parse(here, format!("expected 3 columns, got {}", cols.len())));
        };
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            label: label
                .trim()
                .parse()
                .map_err(|_| Error::parse(here, format!("bad label `{label}`")))?,
            split: split.trim().parse().map_err(|e: Error| Error::parse(here, e.to_string()))?,
        });
    }
    Ok(out)
}

/// Writes every bag plus `manifest.csv` and `spec.json` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir.join("bags"))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for (i, bag) in ds.split(split).iter().enumerate() {
            let rel = PathBuf::from("bags").join(format!("{}_{i:04}.milb", split.name()));
            std::fs::write(dir.join(&rel), encode_bag(bag)?)?;
            entries.push(ManifestEntry {
                path: rel,
                label: bag.label,
                split,
            });
        }
    }
    let mut m = Vec::new();
    write_manifest(&mut m, &entries)?;
    std::fs::write(dir.join(MANIFEST), m)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&ds.spec)?)?;
    Ok(entries)
}

/// Bags of one split, in manifest order, with their manifest paths.
pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<(PathBuf, Bag)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&std::fs::read_to_string(manifest)?)?;
    entries
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let p = base.join(&e.path);
            let bag = load_bag(&p)?;
            if bag.label != e.label {
                return Err(Error::config(format!(
                    "{}: manifest label {} disagrees with file label {}",
                    p.display(),
                    e.label,
                    bag.label
                )));
            }
            Ok((e.path, bag))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_concepts_on_a_line() {
        let mut r = rng::seeded(3);
        let m = make_concepts(2, 1, 6.0, 1.0, &mut r).unwrap();
        assert!((m[0][0] + m[1][0]).abs() < 1e-12);
        assert!((m[0][0] - m[1][0]).abs() >= 6.0 * (1.0 - 1e-12));
        assert!(make_concepts(5, 2, 6.0, 1.0, &mut r).is_err());
    }

    #[test]
    fn concepts_are_separated_and_deterministic() {
        let a = make_concepts(8, 64, 6.0, 1.5, &mut rng::seeded(11)).unwrap();
        let b = make_concepts(8, 64, 6.0, 1.5, &mut rng::seeded(11)).unwrap();
        assert_eq!(a, b);
        assert!(min_pairwise_distance(&a) >= 9.0 * (1.0 - 1e-12));
    }

    #[test]
    fn noiseless_instances_sit_on_their_means() {
        let spec = SynthSpec {
            sigma: 0.0,
            n_min: 5,
            n_max: 9,
            ..SynthSpec::default()
        };
        let mut r = rng::seeded(1);
        let means = make_concepts(spec.k, spec.d, spec.sep, spec.sigma, &mut r).unwrap();
        let bag = sample_bag(&spec, &means, &mut r);
        for (i, &c) in bag.concepts.iter().enumerate() {
            for (j, &m) in means[c as usize].iter().enumerate() {
                assert_eq!(bag.features.at(i, j), m as f32);
            }
        }
    }

    #[test]
    fn rule_examples() {
        let presence = Rule::Presence { c: 0, rho: 0.5 };
        assert_eq!(presence.label(&[0, 0, 0, 1, 2], 3), 1);
        let co = Rule::CoOccurrence { a: 0, b: 1, rho: 0.1 };
        assert_eq!(co.label(&[0, 0, 2, 2], 3), 0);
        assert_eq!(co.label(&[0, 1, 2, 2], 3), 1);
        assert_eq!(Rule::Majority.label(&[2, 1, 1, 2], 3), 1);
        for r in [presence, co, Rule::Majority] {
            assert_eq!(r.to_string().parse::<Rule>().unwrap(), r);
        }
        assert!("sometimes:1".parse::<Rule>().is_err());
        assert!(Rule::Presence { c: 0, rho: 1.0 }.validate(3).is_err());
    }

    #[test]
    fn bag_round_trip_and_errors() {
        let bag = Bag {
            features: Tensor::matrix(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -7.25]).unwrap(),
            label: 1,
            concepts: vec![4, 65535],
        };
        let bytes = encode_bag(&bag).unwrap();
        let back = decode_bag(&bytes).unwrap();
        assert_eq!(back, bag);
        assert_eq!(back.features.data()[1].to_bits(), (-0.0f32).to_bits());

        let err = decode_bag(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bag(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(decode_bag(&bad), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                path: "bags/a.milb".into(),
                label: 0,
                split: Split::Train,
            },
            ManifestEntry {
                path: "bags/b.milb".into(),
                label: 1,
                split: Split::Test,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &entries).unwrap();
        assert_eq!(parse_manifest(std::str::from_utf8(&buf).unwrap()).unwrap(), entries);
        assert!(parse_manifest("path,label,split\nx,1\n").is_err());
        assert!(parse_manifest("a,b\n").is_err());
    }

    #[test]
    fn generated_splits_are_balanced() {
        let spec = SynthSpec {
            train: 20,
            val: 4,
            test: 4,
            n_min: 16,
            n_max: 32,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let ones = ds.train.iter().filter(|b| b.label == 1).count();
        assert_eq!(ones, 10);
        for b in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert_eq!(spec.rule.label(&b.concepts, spec.k), b.label);
            assert!((16..=32).contains(&b.len()));
        }
    }
}
