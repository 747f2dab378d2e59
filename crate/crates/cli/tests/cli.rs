use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mammoth::layers::{LayerConfig, LayerKind};
use mammoth::mil::AggKind;
use mammoth::model::{Model, ModelConfig};
use mammoth::synth::Bag;
use mammoth::Tensor;
use mammoth_cli::checkpoint::Checkpoint;
use serde_json::Value;

fn mammoth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mammoth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mammoth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&[
        "gen", "--seed", seed, "--d", "8", "--k", "4", "--n-min", "6", "--n-max", "12",
        "--train-bags", "16", "--val-bags", "6", "--test-bags", "6", "--out", p(&out),
    ]);
    out
}

fn tiny_mammoth(data: &Path, out: &Path) {
    ok(&[
        "train", "--data", p(data), "--layer", "mammoth", "--dout", "8", "--heads", "2", "--p", "2",
        "--experts", "2", "--slots", "2", "--q", "2", "--max-epochs", "3", "--min-epochs", "1",
        "--patience", "1", "--lr", "1e-3", "--out", p(out),
    ]);
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut map = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                map.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    map
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_is_deterministic_and_summarises() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_data(tmp.path(), "3");
    let b = tmp.path().join("again");
    let out = ok(&[
        "gen", "--seed", "3", "--d", "8", "--k", "4", "--n-min", "6", "--n-max", "12",
        "--train-bags", "16", "--val-bags", "6", "--test-bags", "6", "--out", p(&b),
    ]);
    assert_eq!(files(&a), files(&b));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary.to_string().contains("class"), "{summary}");
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 16 + 6 + 6);
}

#[test]
fn default_gen_writes_300_bags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    ok(&["gen", "--out", p(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 300);
    for (split, n) in [("train", 200), ("val", 50), ("test", 50)] {
        assert_eq!(rows.iter().filter(|r| r.ends_with(&format!(",{split}"))).count(), n, "{split}");
    }
}

#[test]
fn usage_errors_exit_1_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let r = mammoth(&["gen", "--rule", "nonsense", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
    let r = mammoth(&["gen", "--no-such-flag", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("Usage"));
    assert_eq!(mammoth(&["frobnicate"]).status.code(), Some(1));
    // Invalid spec values are caught before anything is written.
    let r = mammoth(&["gen", "--n-min", "10", "--n-max", "2", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("run");
    let r = mammoth(&["train", "--data", p(&missing), "--layer", "linear", "--dout", "4", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn train_then_eval_reproduces_the_stored_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "5");
    for layer in ["linear", "mammoth"] {
        let run = tmp.path().join(layer);
        if layer == "mammoth" {
            tiny_mammoth(&data, &run);
        } else {
            ok(&[
                "train", "--data", p(&data), "--layer", "linear", "--dout", "8", "--max-epochs", "2",
                "--min-epochs", "1", "--out", p(&run),
            ]);
        }
        let report: Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
        assert!(report["test"]["balanced_accuracy"].is_number(), "{report}");
        assert_eq!(report["run"]["args"]["layer"], layer);
        let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
        assert!(history.lines().count() >= 2);

        let ckpt = run.join("model.ckpt");
        let out = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
        let eval: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(eval["matches_stored"], true, "{eval}");
        assert_eq!(eval["metrics"], report["test"]);
    }
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "6");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_mammoth(&data, &a);
    tiny_mammoth(&data, &b);
    // The checkpoints embed their own output path, so compare contents.
    let (ca, cb) = (Checkpoint::load(&a.join("model.ckpt")).unwrap(), Checkpoint::load(&b.join("model.ckpt")).unwrap());
    assert_eq!(ca.config, cb.config);
    for (x, y) in ca.store.tensors().iter().zip(cb.store.tensors()) {
        assert!(x.data().iter().map(|v| v.to_bits()).eq(y.data().iter().map(|v| v.to_bits())));
    }
    assert_eq!(ca.meta.unwrap()["test"], cb.meta.unwrap()["test"]);
    assert_eq!(
        std::fs::read(a.join("history.csv")).unwrap(),
        std::fs::read(b.join("history.csv")).unwrap()
    );
}

fn tiny_model() -> Model<f32> {
    let mut layer = LayerConfig::new(LayerKind::Mammoth, 6, 4);
    layer.mammoth.heads = 2;
    layer.mammoth.p = Some(2);
    layer.mammoth.experts = 3;
    layer.mammoth.slots = 2;
    layer.mammoth.q = Some(2);
    Model::init(&ModelConfig::new(layer, AggKind::Abmil, 3), 11).unwrap()
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model();
    let first = tmp.path().join("a.ckpt");
    let second = tmp.path().join("b.ckpt");
    let meta = serde_json::json!({ "note": 0.1 });
    Checkpoint::from_model(&model, Some(meta.clone())).save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    assert_eq!(loaded.meta, Some(meta));
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let back = loaded.model().unwrap();
    let x = Tensor::matrix(3, 6, (0..18).map(|i| i as f32 / 7.0).collect()).unwrap();
    assert_eq!(back.predict_proba(&x).unwrap(), model.predict_proba(&x).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = tiny_model();
    let bytes = Checkpoint::from_model(&model, None).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());

    let truncated = &bytes[..bytes.len() - 4];
    assert!(Checkpoint::from_bytes(truncated).is_err());

    let mut trailing = bytes.clone();
    trailing.extend([0, 0, 0, 0]);
    assert!(Checkpoint::from_bytes(&trailing).is_err());

    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
    let shifted = header.replacen("\"offset\":0", "\"offset\":4", 1);
    assert_ne!(shifted, header);
    let mut patched = bytes[..8].to_vec();
    patched[4..8].copy_from_slice(&(shifted.len() as u32).to_le_bytes());
    patched.extend(shifted.as_bytes());
    patched.extend(&bytes[8 + header_len..]);
    assert!(Checkpoint::from_bytes(&patched).is_err());
}

fn write_bag(path: &Path, rows: usize, d: usize) {
    let data = (0..rows * d).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
    let bag = Bag {
        features: Tensor::matrix(rows, d, data).unwrap(),
        label: 0,
        concepts: vec![0; rows],
    };
    mammoth::synth::write_bag(std::fs::File::create(path).unwrap(), &bag).unwrap();
}

#[test]
fn route_exports_normalised_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "8");
    let run = tmp.path().join("run");
    tiny_mammoth(&data, &run);
    let ckpt = run.join("model.ckpt");

    let bag = tmp.path().join("five.milb");
    write_bag(&bag, 5, 8);
    let out = tmp.path().join("route");
    ok(&["route", "--checkpoint", p(&ckpt), "--bag", p(&bag), "--out", p(&out)]);

    let mut sums: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    let mut per_head: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for row in csv_rows(&out.join("routing.csv")) {
        let alpha: f64 = row[5].parse().unwrap();
        *sums.entry((row[1].clone(), row[2].clone(), row[3].clone())).or_default() += alpha;
        per_head.entry((row[2].clone(), row[3].clone(), row[4].clone())).or_default().push(alpha);
    }
    assert_eq!(sums.len(), 2 * 2 * 2);
    for s in sums.values() {
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
    let mean_rows = csv_rows(&out.join("routing_mean.csv"));
    assert_eq!(mean_rows.len(), per_head.len());
    for row in mean_rows {
        let heads = &per_head[&(row[1].clone(), row[2].clone(), row[3].clone())];
        let expect = heads.iter().sum::<f64>() / heads.len() as f64;
        let got: f64 = row[4].parse().unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    let single = tmp.path().join("one.milb");
    write_bag(&single, 1, 8);
    let out1 = tmp.path().join("route1");
    ok(&["route", "--checkpoint", p(&ckpt), "--bag", p(&single), "--out", p(&out1)]);
    for row in csv_rows(&out1.join("routing.csv")) {
        assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn route_refuses_non_mammoth_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), "9");
    let run = tmp.path().join("lin");
    ok(&[
        "train", "--data", p(&data), "--layer", "linear", "--dout", "4", "--max-epochs", "1", "--min-epochs",
        "1", "--out", p(&run),
    ]);
    let bag = tmp.path().join("b.milb");
    write_bag(&bag, 3, 8);
    let out = tmp.path().join("route");
    let r = mammoth(&["route", "--checkpoint", p(&run.join("model.ckpt")), "--bag", p(&bag), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.join("routing.csv").exists());
}

#[test]
fn bench_counts_linear_macs() {
    let out = ok(&["bench", "--variant", "linear", "--n", "10000", "--d", "1024", "--dout", "512", "--no-latency"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("variant,N,D,D_out,macs,latency_ms_mean,latency_ms_std,params,peak_bytes")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "linear");
    assert_eq!(row[4], "5242880000");
    assert_eq!(row[7], "524288");
}

#[test]
fn bench_reports_latency_to_files() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    ok(&[
        "bench", "--variant", "all", "--n", "16", "--d", "32", "--dout", "16", "--heads", "4", "--p", "2",
        "--experts", "2", "--q", "2", "--mh-heads", "4", "--soft-slots", "4", "--trials", "3", "--warmup",
        "1", "--out", p(&csv),
    ]);
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(row[5].parse::<f64>().unwrap() >= 0.0, "{row:?}");
    }
}

#[test]
fn igi_on_the_conflicting_preset_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("igi.json");
    let pairs = tmp.path().join("pairs.csv");
    ok(&["igi", "--bags", "6", "--per-cluster", "20", "--out", p(&report), "--pairs-csv", p(&pairs)]);
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(v["report"]["p_value"].as_f64().unwrap() < 0.05);
    assert!(v["report"]["intra_mean"].as_f64().unwrap() > v["report"]["inter_mean"].as_f64().unwrap());
    assert_eq!(v["run"]["args"]["per_cluster"], 20);
    let header = std::fs::read_to_string(&pairs).unwrap();
    assert!(header.starts_with("bag,i,j,same_cluster,cosine\n"));
}

#[test]
fn igi_assertion_failure_exits_2() {
    let r = mammoth(&["igi", "--bags", "2", "--per-cluster", "5", "--alpha", "0"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let err: f64 = last
        .strip_prefix("max rel err = ")
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{last}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.conf");
    std::fs::write(&cfg, "# bench settings\nd = 64\ndout = 8\nno_latency = true\nvariant = linear\nn = 10\n").unwrap();
    let out = ok(&["bench", "--config", p(&cfg)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("linear,10,64,8,5120,"), "{text}");
    let out = ok(&["bench", "--config", p(&cfg), "--d", "32"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("linear,10,32,8,2560,"), "{text}");

    std::fs::write(&cfg, "no equals sign here\n").unwrap();
    assert_eq!(mammoth(&["bench", "--config", p(&cfg)]).status.code(), Some(1));
}
