use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mammoth::bench::{self, BenchResult, LatencyConfig};
use mammoth::gradcheck;
use mammoth::igi::{self, IgiConfig, Selector};
use mammoth::layers::{Dropout, LayerKind, TaskLayer};
use mammoth::mil::AggKind;
use mammoth::model::{Model, ModelConfig};
use mammoth::params::Ctx;
use mammoth::synth::{self, Bag, Split, SynthSpec};
use mammoth::train;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::atomic;
use crate::checkpoint::Checkpoint;

/// Bad invocation, as opposed to a runtime failure.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Every flag as resolved, embedded in each report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub args: Value,
    pub resolved: Value,
}

impl RunConfig {
    fn new<A: Serialize>(command: &str, args: &A, resolved: Value) -> anyhow::Result<Self> {
        Ok(RunConfig {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: serde_json::to_value(args)?,
            resolved,
        })
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Route(a) => route(&a),
        Command::Igi(a) => igi_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn stdout_with(f: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>) -> anyhow::Result<()> {
    match f(&mut std::io::stdout().lock()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: Serialize>(v: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    stdout_with(|w| writeln!(w, "{text}"))
}

fn emit_json<T: Serialize>(out: Option<&Path>, v: &T) -> anyhow::Result<()> {
    match out {
        Some(p) => atomic::write_json(p, v),
        None => print_json(v),
    }
}

#[derive(Serialize)]
struct SplitSummary {
    bags: usize,
    class_counts: BTreeMap<usize, usize>,
    n_min: usize,
    n_mean: f64,
    n_max: usize,
}

fn summarize(bags: &[Bag]) -> SplitSummary {
    let mut class_counts = BTreeMap::new();
    for b in bags {
        *class_counts.entry(b.label).or_insert(0) += 1;
    }
    let ns: Vec<usize> = bags.iter().map(|b| b.len()).collect();
    SplitSummary {
        bags: bags.len(),
        class_counts,
        n_min: ns.iter().copied().min().unwrap_or(0),
        n_mean: if ns.is_empty() {
            0.0
        } else {
            ns.iter().sum::<usize>() as f64 / ns.len() as f64
        },
        n_max: ns.iter().copied().max().unwrap_or(0),
    }
}

fn gen(a: &GenArgs) -> anyhow::Result<()> {
    let spec = a.synth.spec(a.common.seed);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth::generate(&spec)?;
    atomic::write_dir(&a.out, |dir| {
        synth::write_dataset(dir, &ds)?;
        Ok(())
    })?;
    let run = RunConfig::new("gen", a, serde_json::to_value(&spec)?)?;
    let splits: BTreeMap<&str, SplitSummary> = Split::ALL
        .into_iter()
        .map(|s| (s.name(), summarize(ds.split(s))))
        .collect();
    print_json(&json!({ "run": run, "out": a.out, "splits": splits }))
}

struct Data {
    manifest: PathBuf,
    num_classes: usize,
}

impl Data {
    fn open(dir: &Path) -> anyhow::Result<Self> {
        let manifest = dir.join(synth::MANIFEST);
        let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
        let entries = synth::parse_manifest(&text).with_context(|| manifest.display().to_string())?;
        let spec_path = dir.join("spec.json");
        let num_classes = if spec_path.exists() {
            let spec: SynthSpec = serde_json::from_slice(&std::fs::read(&spec_path)?)?;
            spec.num_classes()
        } else {
            entries.iter().map(|e| e.label + 1).max().unwrap_or(0).max(2)
        };
        Ok(Data { manifest, num_classes })
    }

    fn split(&self, s: Split) -> anyhow::Result<Vec<(PathBuf, Bag)>> {
        Ok(synth::load_split(&self.manifest, s)?)
    }
}

fn bags_only(v: Vec<(PathBuf, Bag)>) -> Vec<Bag> {
    v.into_iter().map(|(_, b)| b).collect()
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse().map_err(|e: mammoth::Error| usage(e.to_string()))
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let data = Data::open(&a.data)?;
    let train_bags = bags_only(data.split(Split::Train)?);
    let val = bags_only(data.split(Split::Val)?);
    let test = bags_only(data.split(Split::Test)?);
    let Some(first) = train_bags.first() else {
        bail!("{} has no training bags", a.data.display());
    };
    let cfg = ModelConfig::new(a.hyper.layer(a.layer, first.features.cols()), a.agg, data.num_classes);
    cfg.layer.param_count().map_err(|e| usage(e.to_string()))?;
    let tc = a.train.config(a.common.seed);
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let run = RunConfig::new("train", a, json!({ "model": cfg, "train": tc }))?;

    let mut model = Model::<f32>::init(&cfg, a.common.seed)?;
    let history = train::train(&mut model, &train_bags, (!val.is_empty()).then_some(&val[..]), &tc)?;
    let test_report = if test.is_empty() {
        None
    } else {
        Some(train::evaluate(&model, &test)?.report)
    };
    let meta = json!({ "run": run, "test": test_report });
    let report = json!({
        "run": run,
        "params": model.store.numel(),
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "test": test_report,
    });
    Checkpoint::from_model(&model, Some(meta)).save(&a.out.join("model.ckpt"))?;
    atomic::write_with(&a.out.join("history.csv"), |w| Ok(history.write_csv(w)?))?;
    atomic::write_json(&a.out.join("report.json"), &report)?;
    if let Some(r) = &test_report {
        eprintln!(
            "test balanced_accuracy = {:.4}{}",
            r.balanced_accuracy,
            r.auroc.map(|v| format!(", auroc = {v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let split = parse_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let data = Data::open(&a.data)?;
    let bags = bags_only(data.split(split)?);
    if bags.is_empty() {
        bail!("split {} of {} is empty", a.split, a.data.display());
    }
    let ev = train::evaluate(&model, &bags)?;
    let stored = match (&ckpt.meta, split) {
        (Some(m), Split::Test) => m.get("test").cloned().filter(|v| !v.is_null()),
        _ => None,
    };
    let matches_stored = stored
        .as_ref()
        .map(|s| serde_json::to_value(&ev.report).map(|r| &r == s))
        .transpose()?;
    let run = RunConfig::new("eval", a, json!({ "model": ckpt.config }))?;
    emit_json(
        a.out.as_deref(),
        &json!({ "run": run, "split": a.split, "metrics": ev.report, "matches_stored": matches_stored }),
    )
}

fn variants(spec: &str) -> anyhow::Result<Vec<LayerKind>> {
    if spec == "all" {
        return Ok(LayerKind::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|e: mammoth::Error| usage(e.to_string())))
        .collect()
}

fn bench_cmd(a: &BenchArgs) -> anyhow::Result<()> {
    let kinds = variants(&a.variant)?;
    let lc = LatencyConfig {
        trials: a.trials,
        warmup: a.warmup,
        seed: a.common.seed,
        parallel: a.parallel,
    };
    if !a.no_latency && a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let cfgs: Vec<(String, _)> = kinds.iter().map(|&k| (k.name().to_string(), a.hyper.layer(k, a.d))).collect();
    for row in bench::compare_params(&cfgs).map_err(|e| usage(e.to_string()))? {
        if row.exceeds_linear {
            eprintln!("{}: {} parameters exceed the linear budget {}", row.variant, row.params, a.d * a.hyper.dout);
        }
    }
    let mut rows = Vec::new();
    for (name, cfg) in &cfgs {
        let mut r = BenchResult::analytic(name, cfg, a.n)?;
        if !a.no_latency {
            r.latency = Some(bench::measure_latency(cfg, a.n, &lc)?);
        }
        rows.push(r);
    }
    match &a.out {
        Some(p) => {
            atomic::write_with(p, |w| Ok(bench::write_csv(&rows, w)?))?;
            let run = RunConfig::new("bench", a, serde_json::to_value(&cfgs)?)?;
            atomic::write_json(&p.with_extension("json"), &json!({ "run": run, "results": rows }))
        }
        None => stdout_with(|w| bench::write_csv(&rows, w)),
    }
}

fn route(a: &RouteArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let TaskLayer::Mammoth(layer) = &model.layer else {
        return Err(usage(format!(
            "route needs a mammoth checkpoint, {} holds a {} layer",
            a.checkpoint.display(),
            model.cfg.layer.kind
        )));
    };
    let bag = synth::load_bag(&a.bag)?;
    let bag_id = a.bag.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = mammoth::rng::seeded(a.common.seed);
    let mut ctx = Ctx::new(&model.store, false, false, &mut r);
    let x = ctx.graph.constant(bag.features.clone());
    let out = layer.forward(&mut ctx, x, Dropout::none())?;
    let rec = out.routing(&ctx.graph, &layer.cfg, &bag_id);
    atomic::write_with(&a.out.join("routing.csv"), |w| Ok(rec.write_csv(w, true)?))?;
    atomic::write_with(&a.out.join("routing_mean.csv"), |w| Ok(rec.write_mean_csv(w, true)?))?;
    eprintln!("{} instances, {} dispatch rows per head", rec.n, layer.cfg.total_slots());
    Ok(())
}

fn igi_cmd(a: &IgiArgs) -> anyhow::Result<()> {
    let split = parse_split(&a.split)?;
    let (mut bags, num_classes) = match &a.data {
        Some(dir) => {
            let data = Data::open(dir)?;
            (bags_only(data.split(split)?), data.num_classes)
        }
        None => {
            let spec = SynthSpec::conflicting(a.common.seed);
            let c = spec.num_classes();
            (synth::generate(&spec)?.train, c)
        }
    };
    if let Some(n) = a.bags {
        bags.truncate(n);
    }
    let Some(first) = bags.first() else {
        bail!("no bags to analyse");
    };
    let model = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.model()?,
        None => {
            let cfg = ModelConfig::new(a.hyper.layer(a.layer, first.features.cols()), AggKind::Mean, num_classes);
            cfg.layer.param_count().map_err(|e| usage(e.to_string()))?;
            Model::init(&cfg, a.common.seed)?
        }
    };
    let selector = match (&a.selector, &model.layer) {
        (Some(s), _) => s.parse::<Selector>().map_err(|e| usage(e.to_string()))?,
        (None, TaskLayer::Linear(_)) => Selector::Linear,
        (None, TaskLayer::Mammoth(m)) if m.cfg.experts == 1 => Selector::SingleExpert,
        (None, TaskLayer::Mammoth(_)) => Selector::PerExpert,
        (None, _) => return Err(usage("igi supports linear and mammoth layers")),
    };
    let cfg = IgiConfig {
        k: a.k,
        per_cluster: a.per_cluster,
        selector,
        seed: a.common.seed,
        keep_pairs: a.pairs_csv.is_some(),
    };
    let report = igi::igi_protocol(&model.cast::<f64>(), &bags, &cfg)?;
    if let Some(p) = &a.pairs_csv {
        atomic::write_with(p, |w| Ok(report.write_pairs_csv(w)?))?;
    }
    let run = RunConfig::new("igi", a, json!({ "model": model.cfg, "igi": cfg }))?;
    emit_json(a.out.as_deref(), &json!({ "run": run, "report": report }))?;
    eprintln!(
        "intra = {:.4}, inter = {:.4}, one-sided p = {:.3e}",
        report.intra_mean, report.inter_mean, report.p_value
    );
    if !a.no_assert && !(report.p_value < a.alpha) {
        bail!("assertion failed: p = {} is not below {}", report.p_value, a.alpha);
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<()> {
    let checks = gradcheck::suite(a.common.seed, a.instances, a.coords)?;
    let mut by_name: BTreeMap<&str, (f64, usize, usize)> = BTreeMap::new();
    for c in &checks {
        let base = c.name.split('#').next().unwrap_or(&c.name);
        let e = by_name.entry(base).or_insert((0.0, 0, 0));
        e.0 = e.0.max(c.max_rel_err);
        e.1 += c.coords;
        e.2 += c.skipped;
    }
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    stdout_with(|w| {
        for (name, (err, coords, skipped)) in &by_name {
            writeln!(w, "{name:<24} max_rel_err = {err:.3e}  coords = {coords}  skipped = {skipped}")?;
        }
        writeln!(w, "max rel err = {worst:.3e} over {} checks", checks.len())
    })?;
    if let Some(p) = &a.out {
        let run = RunConfig::new("gradcheck", a, Value::Null)?;
        atomic::write_json(p, &json!({ "run": run, "checks": checks, "max_rel_err": worst }))?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
