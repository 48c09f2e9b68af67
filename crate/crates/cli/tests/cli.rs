use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
train_samples = 24
eval_samples = 4

[model]
d_model = 16
n_heads = 2
n_enc_blocks = 1
n_dec_blocks = 1
d_in = 4
vocab_size = 6
ffn_inner = 16

[train]
batch_size = 2
total_steps = 4
warmup_steps = 2
eval_interval = 2

[beam]
width = 3

[synthetic]
vocab_size = 6
d_in = 4
max_len = 4
"#;

fn synctf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synctf")).args(args).output().unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn latency_reports_both_figures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w10.toml", "[model]\nchunk_len = 10\noverlap = 2\n");
    let out = synctf(&["--config", &cfg, "latency"]);
    assert!(out.status.success());
    let v = &json_lines(&out)[0];
    assert_eq!((v["chunk_ms"].as_f64(), v["effective_ms"].as_f64()), (Some(400.0), Some(320.0)));
}

#[test]
fn oracle_check_passes() {
    let out = synctf(&["oracle-check"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() == 2, "{text}");
}

#[test]
fn failures_exit_nonzero_with_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[model]\nchunk_len = 3\noverlap = 3\n");
    let cases: [(&[&str], &str); 3] = [
        (&["--config", &bad, "latency"], "geometry"),
        (&["decode"], "usage"),
        (&["--checkpoint", "/nonexistent/model.ckpt", "decode"], "io"),
    ];
    for (args, category) in cases {
        let out = synctf(args);
        assert!(!out.status.success(), "{args:?}");
        assert_eq!(json_lines(&out).last().unwrap()["error"], category, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("error[{category}]")));
    }
    let garbage = write(dir.path(), "garbage.ckpt", "not a checkpoint at all");
    let out = synctf(&["--checkpoint", &garbage, "decode"]);
    assert_eq!(json_lines(&out).last().unwrap()["error"], "checkpoint-corrupt-header");
}

#[test]
fn train_then_decode_evaluate_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let ckpt = dir.path().join("tiny.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let out = synctf(&["--config", &cfg, "--out", ckpt, "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let progress = json_lines(&out);
    assert_eq!(progress.iter().map(|v| v["step"].as_u64().unwrap()).collect::<Vec<_>>(), vec![2, 4]);
    assert!(Path::new(ckpt).exists());

    let decoded = json_lines(&synctf(&["--config", &cfg, "--checkpoint", ckpt, "decode"]));
    assert_eq!(decoded.len(), 4);
    assert!(decoded.iter().all(|v| v["log_prob"].as_f64().unwrap() <= 0.0));

    let out = synctf(&["--config", &cfg, "--checkpoint", ckpt, "eval-cer"]);
    assert!(out.status.success());
    let cer = &json_lines(&out)[0];
    assert_eq!(cer["utterances"], 4);
    assert!(cer["greedy_cer"].as_f64().unwrap() >= 0.0);

    let out = synctf(&["--config", &cfg, "--checkpoint", ckpt, "stream-demo"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // The optimizer state is saved at step 4, so resuming runs no further steps.
    let more = dir.path().join("more.ckpt");
    let out = synctf(&["--config", &cfg, "--checkpoint", ckpt, "--out", more.to_str().unwrap(), "train"]);
    assert!(out.status.success());
    assert!(json_lines(&out).is_empty());
    assert_eq!(std::fs::read(&more).unwrap(), std::fs::read(ckpt).unwrap());
}
