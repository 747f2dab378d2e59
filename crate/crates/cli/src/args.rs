//! Flags, and expansion of `--config` files into flags.
//!
//! A config file holds one `key = value` per line (`#` starts a comment).
//! Each line becomes `--key value` ahead of the command-line flags, so
//! flags given explicitly take precedence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use mammoth::layers::mammoth::PhiSharing;
use mammoth::layers::{LayerConfig, LayerKind, MammothHyper, MoeConfig};
use mammoth::mil::AggKind;
use mammoth::synth::{Rule, SynthSpec};
use mammoth::train::TrainConfig;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mammoth", version, about = "Multi-head soft mixture-of-experts for multiple-instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bag dataset.
    #[command(args_override_self = true)]
    Gen(GenArgs),
    /// Train a model and evaluate it on the test split.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Parameter counts, MACs, working set and latency per layer variant.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Export MAMMOTH dispatch weights for one bag.
    #[command(args_override_self = true)]
    Route(RouteArgs),
    /// Instance gradient interference at fixed parameters.
    #[command(args_override_self = true)]
    Igi(IgiArgs),
    /// Finite-difference checks of every op and layer.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Route(_) => "route",
            Command::Igi(_) => "igi",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File of `key = value` lines applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Start from the two-concept conflicting-label preset.
    #[arg(long)]
    pub conflicting: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sep: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Dirichlet concentration of bag composition.
    #[arg(long)]
    pub mix: Option<f64>,
    /// presence:C:RHO | co_occurrence:A:B:RHO | majority
    #[arg(long)]
    #[serde(serialize_with = "display_opt")]
    pub rule: Option<Rule>,
    #[arg(long)]
    pub train_bags: Option<usize>,
    #[arg(long)]
    pub val_bags: Option<usize>,
    #[arg(long)]
    pub test_bags: Option<usize>,
}

fn display_opt<S: serde::Serializer, T: std::fmt::Display>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_str(v),
        None => s.serialize_none(),
    }
}

impl SynthArgs {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        let mut s = if self.conflicting {
            SynthSpec::conflicting(seed)
        } else {
            SynthSpec {
                seed,
                ..SynthSpec::default()
            }
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $(if let Some(v) = self.$f { s.$g = v; })* };
        }
        set!(k => k, d => d, sigma => sigma, sep => sep, n_min => n_min, n_max => n_max, mix => mix,
             rule => rule, train_bags => train, val_bags => val, test_bags => test);
        s
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: PathBuf,
}

/// Layer hyperparameters shared by every command that builds a layer.
#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    /// Output width D_out.
    #[arg(long, default_value_t = 512)]
    pub dout: usize,
    /// MAMMOTH heads H.
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    /// MAMMOTH partition width P (default 256/H).
    #[arg(long)]
    pub p: Option<usize>,
    /// MAMMOTH experts E.
    #[arg(long, default_value_t = 30)]
    pub experts: usize,
    /// MAMMOTH slots per expert S.
    #[arg(long, default_value_t = 9)]
    pub slots: usize,
    /// Fixed rank Q instead of the budget solver.
    #[arg(long)]
    pub q: Option<usize>,
    /// per_head | global
    #[arg(long, default_value = "per_head")]
    #[serde(serialize_with = "display_phi")]
    pub phi_sharing: PhiSharing,
    /// Experts of the soft and sparse baselines.
    #[arg(long, default_value_t = 5)]
    pub moe_experts: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.25)]
    pub capacity_train: f64,
    #[arg(long, default_value_t = 2.0)]
    pub capacity_eval: f64,
    #[arg(long, default_value_t = 3)]
    pub sinkhorn_iters: usize,
    /// Total slots of the soft MoE baseline.
    #[arg(long, default_value_t = 200)]
    pub soft_slots: usize,
    #[arg(long, default_value_t = 16)]
    pub mh_heads: usize,
}

fn display_phi<S: serde::Serializer>(v: &PhiSharing, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match v {
        PhiSharing::PerHead => "per_head",
        PhiSharing::Global => "global",
    })
}

impl HyperArgs {
    pub fn layer(&self, kind: LayerKind, d: usize) -> LayerConfig {
        LayerConfig {
            kind,
            d,
            d_out: self.dout,
            mammoth: MammothHyper {
                heads: self.heads,
                p: self.p,
                experts: self.experts,
                slots: self.slots,
                q: self.q,
                phi_sharing: self.phi_sharing,
            },
            moe: MoeConfig {
                experts: self.moe_experts,
                top_k: self.top_k,
                capacity_train: self.capacity_train,
                capacity_eval: self.capacity_eval,
                sinkhorn_iters: self.sinkhorn_iters,
                soft_slots: self.soft_slots,
                mh_heads: self.mh_heads,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub min_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Epochs when the dataset has no validation split.
    #[arg(long)]
    pub epochs_no_val: Option<usize>,
    #[arg(long)]
    pub dropout_features: Option<f64>,
    #[arg(long)]
    pub dropout_ff: Option<f64>,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(lr, weight_decay, max_epochs, min_epochs, patience, epochs_no_val, dropout_features, dropout_ff);
        c
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// linear | mammoth | soft | sparse_softmax | sparse_sinkhorn | sparse_mh
    #[arg(long, default_value = "mammoth")]
    #[serde(serialize_with = "display")]
    pub layer: LayerKind,
    /// mean | max | abmil
    #[arg(long, default_value = "mean")]
    #[serde(serialize_with = "display_agg")]
    pub agg: AggKind,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Output directory for model.ckpt, history.csv and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn display_agg<S: serde::Serializer>(v: &AggKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(v.name())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated layer variants, or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1024)]
    pub d: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Let the matmul kernels use every core.
    #[arg(long)]
    pub parallel: bool,
    /// Analytic columns only.
    #[arg(long)]
    pub no_latency: bool,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RouteArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.milb` bag file.
    #[arg(long)]
    pub bag: PathBuf,
    /// Directory for routing.csv and routing_mean.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IgiArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; the conflicting-label preset is generated when
    /// absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Use at most this many bags.
    #[arg(long)]
    pub bags: Option<usize>,
    /// Take parameters from a checkpoint instead of a fresh init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// linear | mammoth
    #[arg(long, default_value = "linear")]
    #[serde(serialize_with = "display")]
    pub layer: LayerKind,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// linear | single_expert | per_expert (default follows the layer)
    #[arg(long)]
    pub selector: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub per_cluster: usize,
    /// Fail unless the one-sided p-value is below this.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub no_assert: bool,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dump every pair similarity here.
    #[arg(long)]
    pub pairs_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Random tiny-shape draws of the whole suite.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 8)]
    pub coords: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), i + 1);
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            bail!("{}:{}: empty key", path.display(), i + 1);
        }
        out.push((key, value));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts the flags of a `--config` file right after the subcommand.
/// Boolean flags take `true` or `false`.
pub fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(sub) = args.get(1).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else {
        return Ok(args);
    };
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in parse_config(&path)? {
        if key == "config" {
            bail!("{}: config files cannot include other config files", path.display());
        }
        let Some(arg) = sc.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("{}: unknown key `{key}` for `{sub}`", path.display());
        };
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => bail!("{}: `{key}` takes true or false, got `{value}`", path.display()),
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
