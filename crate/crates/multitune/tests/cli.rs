use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multitune::checkpoint;
use multitune::core::adapters::{AdapterSpec, AdapterState, MoeVariant};
use multitune::core::model::ModelConfig;

const TINY: &str = r#"
[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32
vocab_size = 64
max_seq = 24

[data]
total = 1000
test_size = 20
general_size = 100
general_test_size = 20
pretrain_size = 300

[pretrain]
epochs = 1

[full]
epochs = 1

[peft]
epochs = 1

[adapter]
rank = 4
alpha = 8.0
experts = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multitune"));
    c.env_remove("MULTITUNE_RESULTS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let o = run(args);
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gen_data_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    let la = listing(&a);
    assert_eq!(la, listing(&b));
    let names: Vec<&str> = la.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["train", "test", "general", "general_test", "pretrain", "pretrain_test"] {
        assert!(names.contains(&format!("{f}.jsonl").as_str()), "{names:?}");
        assert!(names.contains(&format!("{f}.jsonl.prov.json").as_str()));
    }
    assert!(names.contains(&"vocab.json"));

    let c = t.path().join("c");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn stats_and_upsample() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen-data", "--config", s(&tiny(t.path())), "--out", s(&d)]);
    let train = d.join("train.jsonl");
    let table = ok(&["stats", "--corpus", s(&train)]);
    for disc in ["math", "chemistry", "medicine", "biology", "geography"] {
        assert!(table.contains(disc), "{table}");
    }

    let up = t.path().join("up.jsonl");
    for strategy in ["diverse", "unique"] {
        let o = run(&[
            "upsample", "--corpus", s(&train), "--discipline", "geography", "--target", "50",
            "--strategy", strategy, "--out", s(&up),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("diversity"));
        let n = fs::read_to_string(&up)
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"discipline\":\"geography\""))
            .count();
        assert_eq!(n, 50, "{strategy}");
    }
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&["stats", "--corpus", s(&empty)]).0, 2);

    let missing = t.path().join("nope.jsonl");
    assert_eq!(code(&["stats", "--corpus", s(&missing)]).0, 3);

    let broken = t.path().join("broken.jsonl");
    fs::write(&broken, "{\"id\":\"a\",\"discipline\":\"math\",\"prompt\":\"x\",\"answer\":\"y\"}\nnot json\n").unwrap();
    let (c, err) = code(&["stats", "--corpus", s(&broken)]);
    assert_eq!(c, 2);
    assert!(err.contains("broken.jsonl:2"), "{err}");

    let bad = t.path().join("bad.toml");
    fs::write(&bad, "[model]\nd_modle = 8\n").unwrap();
    let (c, err) = code(&["gen-data", "--config", s(&bad), "--out", s(t.path())]);
    assert_eq!(c, 2);
    assert!(err.contains("d_modle"), "{err}");

    let invalid = t.path().join("invalid.toml");
    fs::write(&invalid, "[model]\nd_model = 15\nn_heads = 4\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&invalid), "--out", s(t.path())]).0, 2);

    let (c, err) = code(&[
        "train", "--config", s(&tiny(t.path())), "--strategy", "lora_comp",
        "--experts-dir", s(&t.path().join("none")), "--out", s(t.path()),
    ]);
    assert_eq!(c, 3);
    assert!(err.contains("per-discipline"), "{err}");

    assert_eq!(code(&["frobnicate"]).0, 2);
    assert_eq!(code(&["sweep", "--axis", "depth", "--values", "1", "--count-only"]).0, 2);
    assert_eq!(code(&["train", "--strategy", "lora", "--variant", "shared_a"]).0, 2);
    assert_eq!(code(&["report", "--dir", s(t.path())]).0, 3);
}

#[test]
fn sweep_count_only() {
    let out = ok(&["sweep", "--axis", "rank", "--values", "4,8,16", "--count-only", "--jobs", "2"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[0].starts_with("axis,"));
    let counts: Vec<usize> = lines[1..]
        .iter()
        .map(|l| {
            let header: Vec<&str> = lines[0].split(',').collect();
            let i = header.iter().position(|h| *h == "trainable").unwrap();
            l.split(',').nth(i).unwrap().parse().unwrap()
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

fn probe_rows(ckpt: &Path, corpus: &Path, base: &Path) -> Vec<Vec<f64>> {
    csv_rows(&ok(&[
        "route-probe", "--checkpoint", s(ckpt), "--corpus", s(corpus), "--base", s(base),
    ]))
}

#[test]
fn train_probe_compose_and_report() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let cfg = tiny(root);
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let base = root.join("base.ckpt");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&base)]);
    assert!(base.exists());

    let runs = root.join("runs");
    let out = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--base", s(&base), "--strategy",
        "lora_moe:shared_a", "--out", s(&runs),
    ]);
    assert!(out.contains("trainable parameters"), "{out}");
    let run_dir = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    for f in ["model.ckpt", "record.json", "report.json", "provenance.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let test = data.join("test.jsonl");
    let trained = probe_rows(&run_dir.join("model.ckpt"), &test, &base);
    assert_eq!(trained.len(), 5);
    for r in &trained {
        assert_eq!(r.len(), 3);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-3, "{r:?}");
    }

    // gates start near zero, so an untrained mixture routes close to uniformly
    let model: ModelConfig = checkpoint::load_base(&base).unwrap().config().clone();
    let fresh = AdapterState::new(AdapterSpec::moe(MoeVariant::SharedA, 4, 3, 8.0), &model, 0).unwrap();
    let fresh_path = root.join("fresh.ckpt");
    checkpoint::save_adapters(&fresh_path, &fresh, None, None).unwrap();
    for r in probe_rows(&fresh_path, &test, &base) {
        assert!(r.iter().all(|p| (p - 1.0 / 3.0).abs() < 0.05), "{r:?}");
    }

    let lora_only = root.join("lora.ckpt");
    checkpoint::save_adapters(&lora_only, &AdapterState::new(AdapterSpec::lora(4, 8.0), &model, 0).unwrap(), None, None)
        .unwrap();
    let (c, _) = code(&["route-probe", "--checkpoint", s(&lora_only), "--corpus", s(&test)]);
    assert_eq!(c, 3);

    let experts = root.join("experts");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--base", s(&base), "--per-discipline",
        "--experts-dir", s(&experts), "--out", s(&runs),
    ]);
    assert_eq!(fs::read_dir(&experts).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ckpt").count(), 5);
    let out = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--base", s(&base), "--strategy", "lora_comp",
        "--experts-dir", s(&experts), "--out", s(&runs),
    ]);
    assert!(out.contains("average,"), "{out}");

    let reports = root.join("reports");
    fs::create_dir(&reports).unwrap();
    for (i, e) in fs::read_dir(&runs).unwrap().enumerate() {
        let p = e.unwrap().path().join("report.json");
        fs::copy(&p, reports.join(format!("{i}.report.json"))).unwrap();
    }
    let csv = ok(&["report", "--dir", s(&reports), "--csv"]);
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.starts_with("method,strategy,"));
}

#[test]
fn results_root_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny(t.path());
    let o = bin()
        .args(["pretrain", "--config", s(&cfg)])
        .env("MULTITUNE_RESULTS", t.path().join("env_root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.path().join("env_root/base.ckpt").exists());
}
