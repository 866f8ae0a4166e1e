use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctxqa(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxqa"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny synthetic dataset, embeddings file and a two-step trained run.
struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data.json");
        ok(&ctxqa(&["synth-squad", "--n", "8", "--seed", "3", "--out", s(&data)], &[]));
        let emb = root.join("emb.txt");
        ok(&ctxqa(&["make-embeddings", "--data", s(&data), "--dim", "8", "--out", s(&emb)], &[]));
        let cfg = root.join("run.toml");
        std::fs::write(
            &cfg,
            format!(
                "word_dim = 8\nhidden = 99\nlayers = 1\nchar_filters = 2\nd_f = 4\nmax_steps = 2\neval_every = 1\nbatch_size = 4\nembeddings = {:?}\ntrain_file = {:?}\n",
                s(&emb),
                s(&data)
            ),
        )
        .unwrap();
        let out = root.join("run");
        ok(&ctxqa(
            &["train", "--config", s(&cfg), "--out-dir", s(&out), "--set", "seed=5"],
            &[("CTXQA_HIDDEN", "4"), ("CTXQA_MLP_DIMS", "[6]")],
        ));
        Run { _dir: dir, root, data }
    }

    fn ckpt(&self) -> PathBuf {
        self.root.join("run/best")
    }
}

#[test]
fn commands_work_end_to_end() {
    let run = Run::new();
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.ckpt().join("run.json")).unwrap()).unwrap();
    let cfg = &meta["config"];
    // File, then environment, then flags.
    assert_eq!(cfg["hidden"], 4);
    assert_eq!(cfg["word_dim"], 8);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["mlp_dims"], serde_json::json!([6]));

    let log = std::fs::read_to_string(run.root.join("run/train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["config"]["hidden"], 4);
    assert_eq!(lines.len(), 3);
    for (k, line) in lines[1..].iter().enumerate() {
        assert_eq!(line["step"], k + 1);
        assert!(line["loss"].is_f64() && line["em"].is_f64() && line["f1"].is_f64());
    }

    let report = |tag: &str| {
        let preds = run.root.join(format!("preds-{tag}.json"));
        let rep = run.root.join(format!("report-{tag}.json"));
        ok(&ctxqa(
            &["eval", "--checkpoint", s(&run.ckpt()), "--data", s(&run.data), "--predictions", s(&preds), "--report", s(&rep)],
            &[],
        ));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
        let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
        (v, p)
    };
    let (a, pa) = report("a");
    let (b, _) = report("b");
    assert_eq!(a, b);
    assert!(a["em"].is_f64() && a["f1"].is_f64());
    assert_eq!(a["config"]["hidden"], 4);
    assert_eq!(pa.as_object().unwrap().len(), 8);

    let predicted = run.root.join("predict.json");
    ok(&ctxqa(&["predict", "--checkpoint", s(&run.ckpt()), "--data", s(&run.data), "--out", s(&predicted)], &[]));
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&predicted).unwrap()).unwrap();
    assert_eq!(p, pa);

    let gates = |name: &str| {
        let path = run.root.join(name);
        ok(&ctxqa(&["gates", "--checkpoint", s(&run.ckpt()), "--data", s(&run.data), "--out", s(&path)], &[]));
        std::fs::read_to_string(path).unwrap()
    };
    let g1 = gates("g1.csv");
    assert_eq!(g1, gates("g2.csv"));
    assert!(g1.starts_with("# split=data config={"));
}

#[test]
fn vocabulary_mismatch_is_a_version_error() {
    let run = Run::new();
    let vocab = run.ckpt().join("vocab.tsv");
    let mut text = std::fs::read_to_string(&vocab).unwrap();
    let next = text.lines().count();
    text.push_str(&format!("zzzextra\t{next}\t1\n"));
    std::fs::write(&vocab, text).unwrap();
    let out = ctxqa(&["eval", "--checkpoint", s(&run.ckpt()), "--data", s(&run.data)], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version mismatch"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn lm_variant_without_states_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxqa(
        &[
            "train",
            "--variant",
            "tr-lm-l1",
            "--train-file",
            "missing.json",
            "--synthetic-embeddings",
            "--out-dir",
            s(&dir.path().join("run")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let out = ctxqa(&["train", "--set", "hiddn=3"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown configuration key"));
}

#[test]
fn gradcheck_lists_every_case_once() {
    let out = ctxqa(&["gradcheck", "--seeds", "1"], &[]);
    let text = ok(&out);
    let names: Vec<&str> = text.lines().filter(|l| l.starts_with("ok ")).filter_map(|l| l.split_whitespace().nth(1)).collect();
    let expected = ctxqa_core::gradsuite::registry();
    assert_eq!(names.len(), expected.len());
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert!(text.contains("all passed"));
}
