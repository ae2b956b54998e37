use std::path::Path;
use std::process::{Command, Output};

fn graft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graft"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("graft runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = graft(dir, args);
    assert!(
        o.status.success(),
        "graft {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_docs(path: &Path, texts: &[&str], lang: &str) {
    let mut s = String::new();
    for t in texts {
        s.push_str(&serde_json::json!({"text": t, "lang": lang, "source": "test"}).to_string());
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

const MODEL_TOML: &str = "vocab_size = 264\nd_model = 16\nn_heads = 2\nd_ff = 32\nn_layers = 4\nmax_seq_len = 16\n";

#[test]
fn version_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(dir.path(), &["--version"]);
    assert!(v.trim().starts_with("graft 0."), "{v}");
    for sub in [
        vec!["plan", "validate"],
        vec!["plan", "apply"],
        vec!["extend"],
        vec!["tok", "train"],
        vec!["tok", "merge"],
        vec!["tok", "encode"],
        vec!["tok", "ratio"],
        vec!["clean"],
        vec!["mix"],
        vec!["train"],
        vec!["eval", "ppl"],
        vec!["exp", "retention"],
        vec!["exp", "placement"],
        vec!["diff"],
        vec!["init"],
    ] {
        let mut args = sub.clone();
        args.push("--help");
        let help = ok(dir.path(), &args);
        assert!(help.contains("--seed") && help.contains("--out"), "{sub:?}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(graft(dir.path(), &["--bogus"]).status.code(), Some(2));
    assert_eq!(graft(dir.path(), &["tok", "ratio"]).status.code(), Some(2));
    write_docs(&dir.path().join("c.jsonl"), &["some words here"], "en");
    // --out is needed to know where to write.
    let o = graft(dir.path(), &["tok", "train", "--corpus", "c.jsonl", "--size", "260"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn consecutive_plan_is_rejected_with_gap() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.toml"), "n_base_layers = 6\ninsert_after = [1, 2]\n").unwrap();
    let o = graft(dir.path(), &["plan", "validate", "--plan", "p.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("plan error") && stderr.contains("after base blocks 1 and 2"), "{stderr}");

    std::fs::write(dir.path().join("q.toml"), "n_base_layers = 6\ninsert_after = [1, 3, 5]\n").unwrap();
    let out = ok(dir.path(), &["plan", "validate", "--plan", "q.toml"]);
    assert!(out.contains("ok: 9 blocks"), "{out}");
}

#[test]
fn missing_input_is_an_operation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = graft(dir.path(), &["tok", "ratio", "--tok", "none.vocab", "--corpus", "none.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("i/o error"));
}

#[test]
fn clean_and_print_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ok(dir.path(), &["clean", "--print-config"]);
    assert!(cfg.contains("collapse_repeats_at = 3"), "{cfg}");
    std::fs::write(dir.path().join("clean.toml"), "min_length = 2\n").unwrap();
    let cfg = ok(dir.path(), &["--config", "clean.toml", "clean", "--print-config"]);
    assert!(cfg.contains("min_length = 2"));
    write_docs(&dir.path().join("in.jsonl"), &["hello   there world", "hi", "ok then friend"], "en");
    let stats = ok(dir.path(), &["clean", "--in", "in.jsonl", "--out", "out.jsonl"]);
    assert!(stats.contains("kept\t2") && stats.contains("rejected_short\t1"), "{stats}");
    let text = std::fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    assert!(text.contains("\"hello there world\""));
}

#[test]
fn tokenizer_pipeline_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_docs(&d.join("en.jsonl"), &["the cat sat on the mat", "the hat is on the cat"], "en");
    write_docs(&d.join("ar.jsonl"), &["باب بيت باب", "بيت باب بيت"], "ar");
    ok(d, &["tok", "train", "--corpus", "en.jsonl", "--size", "270", "--out", "en.vocab"]);
    ok(d, &["tok", "train", "--corpus", "en.jsonl", "--size", "270", "--out", "en2.vocab"]);
    assert_eq!(std::fs::read(d.join("en.vocab")).unwrap(), std::fs::read(d.join("en2.vocab")).unwrap());
    ok(d, &["tok", "train", "--corpus", "ar.jsonl", "--size", "270", "--out", "ar.vocab"]);
    ok(d, &["tok", "merge", "--base", "en.vocab", "--new", "ar.vocab", "--out", "m.vocab"]);

    let base_ratio: f64 = ok(d, &["tok", "ratio", "--tok", "en.vocab", "--corpus", "ar.jsonl"]).trim().parse().unwrap();
    let merged_ratio: f64 = ok(d, &["tok", "ratio", "--tok", "m.vocab", "--corpus", "ar.jsonl"]).trim().parse().unwrap();
    assert!(merged_ratio < base_ratio, "{merged_ratio} vs {base_ratio}");

    let ids = ok(d, &["tok", "encode", "--tok", "m.vocab", "--text", "باب"]);
    assert_eq!(ids.split_whitespace().count(), 1, "{ids}");
}

#[test]
fn model_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("model.toml"), MODEL_TOML).unwrap();
    write_docs(&d.join("en.jsonl"), &["the cat sat on the mat", "the hat is on the cat"], "en");
    write_docs(&d.join("ar.jsonl"), &["باب بيت باب", "بيت باب بيت"], "ar");
    ok(d, &["tok", "train", "--corpus", "en.jsonl", "--size", "264", "--out", "en.vocab"]);
    ok(d, &["tok", "train", "--corpus", "ar.jsonl", "--size", "262", "--out", "ar.vocab"]);
    ok(d, &["tok", "merge", "--base", "en.vocab", "--new", "ar.vocab", "--out", "m.vocab"]);

    ok(d, &["--config", "model.toml", "--seed", "3", "init", "--out", "base.ckpt"]);
    ok(d, &["--config", "model.toml", "--seed", "3", "init", "--out", "base2.ckpt"]);
    assert_eq!(std::fs::read(d.join("base.ckpt")).unwrap(), std::fs::read(d.join("base2.ckpt")).unwrap());

    std::fs::write(d.join("plan.toml"), "n_base_layers = 4\ninsert_after = [0, 3]\n").unwrap();
    ok(d, &["plan", "validate", "--plan", "plan.toml", "--model", "base.ckpt"]);
    ok(d, &["plan", "apply", "--plan", "plan.toml", "--model", "base.ckpt", "--out", "ext.ckpt"]);
    assert!(d.join("ext.ckpt.mask.toml").exists());
    ok(d, &[
        "extend", "--model", "base.ckpt", "--tok", "m.vocab", "--plan", "plan.toml", "--out", "x.ckpt",
        "--mask-out", "x.mask.toml",
    ]);

    std::fs::write(d.join("train.toml"), "steps = 5\nbatch_size = 2\nseq_len = 8\nwarmup_steps = 1\nlog_interval = 1\n").unwrap();
    let run = |out: &str| {
        ok(d, &[
            "--config", "train.toml", "--quiet", "train", "--model", "x.ckpt", "--tok", "m.vocab", "--data",
            "ar.jsonl", "--mask", "x.mask.toml", "--curve", &format!("{out}.tsv"), "--out", out,
        ])
    };
    run("t1.ckpt");
    run("t2.ckpt");
    assert_eq!(std::fs::read(d.join("t1.ckpt")).unwrap(), std::fs::read(d.join("t2.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("t1.ckpt.tsv")).unwrap(), std::fs::read(d.join("t2.ckpt.tsv")).unwrap());

    // Frozen tensors are unchanged; the new blocks moved.
    let frozen = ok(d, &["diff", "x.ckpt", "t1.ckpt", "--mask", "x.mask.toml"]);
    for line in frozen.lines().skip(1) {
        assert!(line.ends_with("\t0e0"), "{line}");
    }
    let all = ok(d, &["diff", "x.ckpt", "t1.ckpt"]);
    assert!(all.lines().skip(1).any(|l| !l.ends_with("\t0e0")), "{all}");

    let ppl: f64 = ok(d, &["eval", "ppl", "--model", "t1.ckpt", "--tok", "m.vocab", "--data", "ar.jsonl", "--window", "8"])
        .trim()
        .parse()
        .unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);

    // A corrupted checkpoint is an operation error.
    let mut bytes = std::fs::read(d.join("t1.ckpt")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(d.join("bad.ckpt"), bytes).unwrap();
    let o = graft(d, &["diff", "bad.ckpt", "t1.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
}

#[test]
fn mix_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_docs(&d.join("a.jsonl"), &["one", "two", "three"], "en");
    write_docs(&d.join("n.jsonl"), &["واحد", "اثنان"], "ar");
    let args = |out: &'static str, seed: &'static str| {
        vec!["mix", "--anchor", "a.jsonl", "--new", "n.jsonl", "--phi", "0.2", "--count", "100", "--seed", seed, "--out", out]
    };
    ok(d, &args("m1.jsonl", "5"));
    ok(d, &args("m2.jsonl", "5"));
    let m1 = std::fs::read_to_string(d.join("m1.jsonl")).unwrap();
    assert_eq!(m1, std::fs::read_to_string(d.join("m2.jsonl")).unwrap());
    assert_eq!(m1.lines().filter(|l| l.contains("\"en\"")).count(), 20);
}

#[test]
fn experiment_configs_print() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ok(dir.path(), &["exp", "retention", "--phi", "0.3", "--print-config"]);
    assert!(cfg.contains("phi = 0.3"), "{cfg}");
    let cfg = ok(dir.path(), &["--seed", "9", "exp", "placement", "--print-config"]);
    assert!(cfg.contains("seed = 9"), "{cfg}");
}
