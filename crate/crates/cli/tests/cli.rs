use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3
batch_size = 8
task_train = 50
task_eval = 20
probe_size = 10

[synth]
mono_size = 200
parallel_size = 200

[stage1]
steps = 20
warmup = 5

[stage2]
steps = 20
warmup = 5

[finetune]
steps = 10
warmup = 2
"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_xling"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fail(&self, args: &[&str], code: i32) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stderr).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn reruns_are_byte_identical() {
    let w = Work::new();
    for d in ["d1", "d2"] {
        w.ok(&["gen-data", "--config", "tiny.toml", "--out", d]);
    }
    for f in ["vocab.txt", "mono_a.jsonl", "mono_b.jsonl", "parallel.jsonl", "task_b_eval.jsonl"] {
        assert_eq!(read(&w.p(&format!("d1/{f}"))), read(&w.p(&format!("d2/{f}"))), "{f}");
    }
    let files = ["s1.ckpt", "s1.csv", "s2.ckpt", "s2.csv", "ft.ckpt", "ft.csv", "out.jsonl", "report.json"];
    let mut first = Vec::new();
    for pass in 0..2 {
        let force = if pass == 0 { "--seed=3" } else { "--force" };
        w.ok(&["pretrain", "--config", "tiny.toml", force, "--stage", "1", "--data", "d1", "--out", "r/s1.ckpt"]);
        w.ok(&[
            "pretrain", "--config", "tiny.toml", force, "--stage", "2", "--data", "d1", "--init", "r/s1.ckpt", "--out",
            "r/s2.ckpt",
        ]);
        w.ok(&[
            "finetune", "--config", "tiny.toml", force, "--strategy", "et", "--tasks", "d1/task_a_train.jsonl", "--init",
            "r/s2.ckpt", "--out", "r/ft.ckpt",
        ]);
        w.ok(&[
            "generate", "--config", "tiny.toml", force, "--checkpoint", "r/ft.ckpt", "--manifest",
            "d1/task_b_eval.manifest.jsonl", "--out", "r/out.jsonl",
        ]);
        w.ok(&[
            "evaluate", "--config", "tiny.toml", force, "--outputs", "r/out.jsonl", "--refs", "d1/task_b_eval.jsonl",
            "--lexicon", "d1/mono_b.jsonl", "--out", "r/report.json",
        ]);
        let now: Vec<Vec<u8>> = files.iter().map(|f| read(&w.p(&format!("r/{f}")))).collect();
        if pass == 0 {
            first = now;
        } else {
            for ((f, a), b) in files.iter().zip(&first).zip(&now) {
                assert_eq!(a, b, "{f}");
            }
        }
    }
    let trace = String::from_utf8(read(&w.p("r/s1.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 21, "header plus one row per step");
}

#[test]
fn stage_two_requires_a_stage_one_checkpoint() {
    let w = Work::new();
    w.ok(&["gen-data", "--config", "tiny.toml", "--out", "d"]);
    let err = w.fail(&["pretrain", "--config", "tiny.toml", "--stage", "2", "--data", "d", "--out", "s2.ckpt"], 2);
    assert!(err.contains("stage-1 checkpoint"), "{err}");
    let err = w.fail(
        &["pretrain", "--config", "tiny.toml", "--stage", "2", "--data", "d", "--init", "nope.ckpt", "--out", "s2.ckpt"],
        1,
    );
    assert!(err.contains("nope.ckpt"), "{err}");
    assert!(!w.p("s2.ckpt").exists());
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_key() {
    let w = Work::new();
    let err = w.fail(&["gen-data", "--config", "tiny.toml", "--set", "stage1.stepz=3", "--out", "d"], 2);
    assert!(err.contains("stepz"), "{err}");
    fs::write(w.p("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let err = w.fail(&["gen-data", "--config", "bad.toml", "--out", "d"], 2);
    assert!(err.contains("width"), "{err}");
    let err = w.fail(&["gen-data", "--config", "tiny.toml", "--set", "noise.mask_rate=2.0", "--out", "d"], 2);
    assert!(err.contains("mask"), "{err}");
    w.fail(&["finetune", "--strategy", "decoder", "--tasks", "t", "--init", "i", "--out", "o"], 2);
    assert!(!w.p("d").exists(), "nothing computed before validation");
}

#[test]
fn malformed_manifest_reports_the_line() {
    let w = Work::new();
    w.ok(&["gen-data", "--config", "tiny.toml", "--out", "d"]);
    w.ok(&["pretrain", "--config", "tiny.toml", "--stage", "1", "--data", "d", "--out", "s1.ckpt"]);
    let good = fs::read_to_string(w.p("d/task_a_eval.manifest.jsonl")).unwrap();
    let mut lines: Vec<&str> = good.lines().take(3).collect();
    lines.push("{\"input\": [7, 8");
    fs::write(w.p("bad.jsonl"), lines.join("\n")).unwrap();
    let err = w.fail(
        &["generate", "--config", "tiny.toml", "--checkpoint", "s1.ckpt", "--manifest", "bad.jsonl", "--out", "o.jsonl"],
        1,
    );
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let w = Work::new();
    w.ok(&["gen-data", "--config", "tiny.toml", "--out", "d"]);
    let before = read(&w.p("d/mono_a.jsonl"));
    let err = w.fail(&["gen-data", "--config", "tiny.toml", "--seed", "5", "--out", "d"], 2);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(read(&w.p("d/mono_a.jsonl")), before);
    w.ok(&["gen-data", "--config", "tiny.toml", "--seed", "5", "--out", "d", "--force"]);
    assert_ne!(read(&w.p("d/mono_a.jsonl")), before);
}

#[test]
fn perfect_outputs_score_one() {
    let w = Work::new();
    w.ok(&["gen-data", "--config", "tiny.toml", "--out", "d"]);
    let refs = fs::read_to_string(w.p("d/task_a_eval.jsonl")).unwrap();
    let outputs: String = refs
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            format!("{{\"output\":{},\"score\":0.0}}\n", v["target"])
        })
        .collect();
    fs::write(w.p("oracle.jsonl"), outputs).unwrap();
    w.ok(&[
        "evaluate", "--config", "tiny.toml", "--outputs", "oracle.jsonl", "--refs", "d/task_a_eval.jsonl", "--lexicon",
        "d/mono_a.jsonl", "--out", "r.json",
    ]);
    let r: Value = serde_json::from_slice(&read(&w.p("r.json"))).unwrap();
    for k in ["bleu4", "rouge1", "rouge2", "rougeL", "lang_membership"] {
        assert!((r["metrics"][k].as_f64().unwrap() - 1.0).abs() < 1e-12, "{k}");
    }
    assert_eq!(r["config"]["seed"], 3);
}

#[test]
fn strategy_ablation_reports_every_strategy_and_seed() {
    let w = Work::new();
    w.ok(&["ablate", "strategies", "--config", "tiny.toml", "--seeds", "1,2", "--out", "ab.json"]);
    let r: Value = serde_json::from_slice(&read(&w.p("ab.json"))).unwrap();
    assert_eq!(r["seeds"], serde_json::json!([1, 2]));
    let results = r["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for (res, seed) in results.iter().zip([1, 2]) {
        assert_eq!(res["seed"], seed);
        let names: Vec<&str> = res["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|row| row["strategy"].as_str().unwrap())
            .collect();
        assert_eq!(names, ["all", "enc", "dec", "et"]);
    }
}

/// Decodes language-A sentences with each target tag and returns the
/// language-B membership of the outputs.
fn membership_by_tag(w: &Work, ckpt: &str) -> (f64, f64) {
    let mono = fs::read_to_string(w.p("d/mono_a.jsonl")).unwrap();
    let mut scores = Vec::new();
    for tgt in ["la", "lb"] {
        let manifest: String = mono
            .lines()
            .take(40)
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                format!("{{\"input\":{},\"src_lang\":\"la\",\"tgt_lang\":\"{tgt}\"}}\n", v["ids"])
            })
            .collect();
        let m = format!("m_{tgt}.jsonl");
        let o = format!("o_{tgt}.jsonl");
        let r = format!("r_{tgt}.json");
        fs::write(w.p(&m), manifest).unwrap();
        w.ok(&["generate", "--config", "run.toml", "--checkpoint", ckpt, "--manifest", &m, "--out", &o]);
        // References are irrelevant to membership; any placeholder will do.
        let n = fs::read_to_string(w.p(&o)).unwrap().lines().count();
        let refs = "{\"target\":[6]}\n".repeat(n);
        fs::write(w.p("refs.jsonl"), refs).unwrap();
        w.ok(&[
            "evaluate", "--config", "run.toml", "--outputs", &o, "--refs", "refs.jsonl", "--lexicon", "d/mono_b.jsonl",
            "--out", &r,
        ]);
        let rep: Value = serde_json::from_slice(&read(&w.p(&r))).unwrap();
        scores.push(rep["metrics"]["lang_membership"].as_f64().unwrap());
    }
    (scores[0], scores[1])
}

#[test]
fn target_tag_controls_output_language_after_pretraining() {
    let w = Work::new();
    fs::write(
        w.p("run.toml"),
        r#"
seed = 1
task_train = 100
task_eval = 20

[synth]
mono_size = 1500
parallel_size = 1500

[stage1]
steps = 1500
lr = 0.002
warmup = 150

[stage2]
steps = 1500
lr = 0.002
warmup = 150
"#,
    )
    .unwrap();
    w.ok(&["gen-data", "--config", "run.toml", "--out", "d"]);
    w.ok(&["pretrain", "--config", "run.toml", "--stage", "1", "--data", "d", "--out", "s1.ckpt"]);
    w.ok(&["pretrain", "--config", "run.toml", "--stage", "2", "--data", "d", "--init", "s1.ckpt", "--out", "s2.ckpt"]);
    let (same, flipped) = membership_by_tag(&w, "s2.ckpt");
    assert!(same < 0.2, "language-A tag gave B membership {same}");
    assert!(flipped > 0.8, "language-B tag gave B membership {flipped}");
}
