use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emoagg::{SystemConfig, Variant};

fn tiny(variant: Variant) -> SystemConfig {
    let mut c = SystemConfig::for_variant(variant);
    c.corpus.n_per_emotion = 10;
    c.corpus.bands = 6;
    c.corpus.min_phonemes = 3;
    c.corpus.max_phonemes = 4;
    c.eval.cepstral_coeffs = 4;
    c.train.steps = 4;
    c.train.batch_size = 2;
    c.train.log_every = 2;
    c.train.checkpoint_every = 2;
    let m = &mut c.model;
    m.d_model = 8;
    m.enc_heads = 2;
    m.enc_blocks = 1;
    m.latent_dim = 3;
    m.ref_channels = vec![2, 2];
    m.ref_gru = 4;
    m.dec_prenet = 4;
    m.dec_gru = 6;
    c
}

fn write_config(dir: &Path, cfg: &SystemConfig) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml_string()).unwrap();
    p
}

fn emoagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoagg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains a tiny model into `dir` and returns the checkpoint path.
fn train(dir: &Path, variant: Variant) -> PathBuf {
    let cfg = write_config(dir, &tiny(variant));
    ok(emoagg(&["train", "--config", s(&cfg), "--seed", "5", "--out-dir", s(dir)]));
    dir.join("checkpoint.emockpt")
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &tiny(Variant::Base));
    let read = |seed: &str, sub: &str| {
        let out = d.path().join(sub);
        ok(emoagg(&["gen-corpus", "--config", s(&cfg), "--seed", seed, "--out-dir", s(&out)]));
        std::fs::read(out.join("corpus.emoc")).unwrap()
    };
    let a = read("3", "a");
    assert_eq!(&a[..5], b"EMOC1");
    assert_eq!(a, read("3", "b"));
    assert_ne!(a, read("4", "c"));
}

#[test]
fn training_is_reproducible_and_logs_gate_only_for_combined_queries() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let ca = train(&a, Variant::SaWac);
    let cfg = write_config(&b, &tiny(Variant::SaWac));
    let out = Command::new(env!("CARGO_BIN_EXE_emoagg"))
        .args(["train", "--config", s(&cfg), "--seed", "5", "--out-dir", s(&b)])
        .env("EMOAGG_THREADS", "3")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(b.join("checkpoint.emockpt")).unwrap());
    let log = std::fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["gate"].as_f64().is_some());
        assert!(v["loss"]["total"].as_f64().unwrap().is_finite());
    }

    let c = d.path().join("c");
    std::fs::create_dir_all(&c).unwrap();
    train(&c, Variant::SaWa);
    let log = std::fs::read_to_string(c.join("train_log.jsonl")).unwrap();
    for l in log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.get("gate").is_none());
    }
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let full = train(d.path(), Variant::BaseSus);
    let half_dir = d.path().join("half");
    let cfg = write_config(d.path(), &tiny(Variant::BaseSus));
    ok(emoagg(&["train", "--config", s(&cfg), "--seed", "5", "--steps", "2", "--out-dir", s(&half_dir)]));
    let half = half_dir.join("checkpoint.emockpt");
    ok(emoagg(&["train", "--resume", s(&half), "--steps", "4", "--out-dir", s(&half_dir)]));
    assert_eq!(std::fs::read(full).unwrap(), std::fs::read(half).unwrap());
}

#[test]
fn eval_embed_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let ck = train(d.path(), Variant::SaWa);
    for mode in ["parallel", "nonparallel"] {
        ok(emoagg(&["eval", "--checkpoint", s(&ck), "--mode", mode, "--out-dir", s(d.path())]));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.path().join(format!("eval_{mode}.json"))).unwrap()).unwrap();
        assert_eq!(json["test_utterances"], 7);
        let csv = std::fs::read_to_string(d.path().join(format!("eval_{mode}.csv"))).unwrap();
        assert!(csv.starts_with("system,emotion,metric,value\n"));
    }
    let self_dir = d.path().join("self");
    ok(emoagg(&["eval", "--checkpoint", s(&ck), "--self-check", "--out-dir", s(&self_dir)]));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(self_dir.join("eval_parallel.json")).unwrap()).unwrap();
    assert_eq!(json["overall"]["mcd"], 0.0);

    ok(emoagg(&["embed", "--checkpoint", s(&ck), "--out-dir", s(d.path())]));
    let emb = d.path().join("embeddings.csv");
    assert_eq!(std::fs::read_to_string(&emb).unwrap().lines().count(), 71);
    let metrics = d.path().join("eval_parallel.csv");
    ok(emoagg(&["plot", "--embeddings", s(&emb), "--metrics", s(&metrics), "--out-dir", s(d.path())]));
    let svg = std::fs::read_to_string(d.path().join("embeddings.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 70);
    assert!(std::fs::read_to_string(d.path().join("metrics.svg")).unwrap().contains("<svg"));
}

#[test]
fn malformed_plot_input_exits_4_without_output() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "id,emotion,pc1,pc2,mu0\nx,happy,0.1\n").unwrap();
    let out_dir = d.path().join("plots");
    let out = emoagg(&["plot", "--embeddings", s(&bad), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 4);
    assert!(!out_dir.join("embeddings.svg").exists());
}

#[test]
fn synth_respects_max_frames_and_validates_arguments() {
    let d = tempfile::tempdir().unwrap();
    let ck = train(d.path(), Variant::SaWac);
    let text = d.path().join("text.txt");
    std::fs::write(&text, "3/1/0 7/2/1 12/4/3").unwrap();
    ok(emoagg(&[
        "synth", "--checkpoint", s(&ck), "--text", s(&text), "--emotion", "happy", "--max-frames", "9", "--out-dir",
        s(d.path()),
    ]));
    let file = emoagg::corpus::read_corpus(&d.path().join("synth.emoc")).unwrap();
    let u = &file.utterances[0];
    assert!(u.frames() >= 3 && u.frames() <= 9, "{} frames", u.frames());
    assert_eq!(u.alignment.len(), 3);
    assert_eq!(u.emotion, emoagg::Emotion::Happy);

    ok(emoagg(&[
        "synth", "--checkpoint", s(&ck), "--text", s(&text), "--reference", "sad_0003", "--output", "ref.emoc",
        "--out-dir", s(d.path()),
    ]));
    assert!(d.path().join("ref.emoc").exists());

    let out = emoagg(&["synth", "--checkpoint", s(&ck), "--text", s(&text), "--emotion", "bored"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["neutral", "happy", "sad", "angry", "shy", "concerned", "surprised"] {
        assert!(err.contains(name), "{err}");
    }
    let out = emoagg(&["synth", "--checkpoint", s(&ck), "--text", s(&text), "--emotion", "sad", "--max-frames", "2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.emockpt");
    assert_eq!(code(&emoagg(&["eval", "--checkpoint", s(&missing)])), 4);
    assert_eq!(code(&emoagg(&["train", "--variant", "XL"])), 2);
    assert_eq!(code(&emoagg(&["frobnicate"])), 2);

    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nd_model = 30\nenc_heads = 4\n").unwrap();
    assert_eq!(code(&emoagg(&["gen-corpus", "--config", s(&bad), "--out-dir", s(d.path())])), 2);

    let mut cfg = tiny(Variant::Base);
    cfg.train.adam.lr = 1e300;
    cfg.train.checkpoint_every = 1;
    let path = write_config(d.path(), &cfg);
    let out_dir = d.path().join("blowup");
    let out = emoagg(&["train", "--config", s(&path), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
