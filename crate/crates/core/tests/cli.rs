use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lite3r::checkpoint::{load_model, Archive};
use lite3r::qlinear::QuantPolicy;
use lite3r::tensor::Tensor;

const SMALL: &str = r#"{
  "model": {"layers": 2, "d_model": 16, "d_in": 8, "d_out": 8, "seq_len": 16, "mlp_hidden": 32},
  "train": {"train_samples": 16, "eval_samples": 4},
  "bench": {"seq_len": 32, "repeats": 3, "flop_seq_len": 2048}
}"#;

fn lite3r(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lite3r"));
    cmd.args(args).env_remove("LT3R_OUT");
    if let Some(p) = out_env {
        cmd.env("LT3R_OUT", p);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn train_small(dir: &Path, name: &str) -> PathBuf {
    let cfg = write_config(dir, "small.json", SMALL);
    let out = dir.join(name);
    ok(&lite3r(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None));
    out
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a");
    let b = train_small(dir.path(), "b");
    for f in ["config.json", "student.lt3r", "train_log.json", "train_steps.csv", "train_evals.csv", "timings.json", "summary.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    for f in ["train_log.json", "train_steps.csv", "student.lt3r"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["trainable_params"], 2 * 16 * 16);
    assert!(summary["trainable_fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_errors_exit_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in ["{ not json", r#"{"train": {"gama": 0.1}}"#, r#"{"train": {"gamma": -1}}"#, r#"{"model": {"layers": 0}}"#]
        .iter()
        .enumerate()
    {
        let cfg = write_config(dir.path(), &format!("bad{i}.json"), text);
        let out = dir.path().join(format!("out{i}"));
        let o = lite3r(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(!out.exists(), "partial output for {text}");
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(lite3r(&["bench", "--config", missing.to_str().unwrap()], None).status.code(), Some(1));
    assert_eq!(lite3r(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(lite3r(&["--help"], None).status.code(), Some(0));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.lt3r");
    std::fs::write(&bad, b"LT3Rgarbage").unwrap();
    let out = dir.path().join("out");
    let o = lite3r(&["export", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn export_shrinks_is_idempotent_and_matches_weight_only_fake_quant() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("student.lt3r");
    let original = std::fs::read(&ckpt).unwrap();

    let e1 = dir.path().join("e1");
    ok(&lite3r(&["export", ckpt.to_str().unwrap(), "--out", e1.to_str().unwrap()], None));
    assert_eq!(std::fs::read(&ckpt).unwrap(), original, "input mutated");
    let exported = std::fs::read(e1.join("student_fp8.lt3r")).unwrap();
    assert!(exported.len() < original.len());

    let e2 = dir.path().join("e2");
    ok(&lite3r(&["export", e1.join("student_fp8.lt3r").to_str().unwrap(), "--out", e2.to_str().unwrap()], None));
    assert_eq!(std::fs::read(e2.join("student_fp8.lt3r")).unwrap(), exported);

    let archive = Archive::from_bytes(&original).unwrap();
    let mut fake = load_model(&archive).unwrap();
    fake.apply_policy(&QuantPolicy::default(), false);
    fake.disable_act_quant();
    let deployed = load_model(&Archive::from_bytes(&exported).unwrap()).unwrap();
    let x = Tensor::from_fn(&[2, 16, 8], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    assert!(deployed.predict(&x).unwrap().bit_eq(&fake.predict(&x).unwrap()));
}

#[test]
fn sensitivity_has_one_row_per_linear() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let out = dir.path().join("sens");
    ok(&lite3r(&["sensitivity", run.join("student.lt3r").to_str().unwrap(), "--out", out.to_str().unwrap()], None));
    let csv = std::fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    // embed + 2 blocks x (q, k, v, w_o, fc1, fc2) + head
    assert_eq!(csv.lines().count() - 1, 14);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sensitivity.json")).unwrap()).unwrap();
    assert_eq!(json["kurtosis_convention"], "pearson");
}

#[test]
fn bench_json_follows_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("bench");
    ok(&lite3r(&["bench", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["threads"], 1);
    let check = &v["attention_flop_check"];
    for k in ["seq_len", "d_model", "keep_ratio", "dense", "sla", "ratio"] {
        assert!(check.get(k).is_some(), "flop check lacks {k}");
    }
    let reports = v["reports"].as_array().unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["dense", "sla", "sla_fp8"]);
    for r in reports {
        for k in [
            "seq_len",
            "d_model",
            "layers",
            "keep_ratio",
            "attention_flops",
            "linear_flops",
            "total_flops",
            "param_bytes",
            "peak_bytes",
            "warmup",
            "latency_s",
            "mean_latency_s",
            "min_latency_s",
        ] {
            assert!(r.get(k).is_some(), "report lacks {k}");
        }
        for k in ["full", "deployed", "quantized_weights_full", "quantized_weights_fp8"] {
            assert!(r["param_bytes"][k].is_u64(), "param_bytes lacks {k}");
        }
        assert_eq!(r["latency_s"].as_array().unwrap().len(), 3);
        assert_eq!(r["total_flops"].as_u64().unwrap(), r["attention_flops"].as_u64().unwrap() + r["linear_flops"].as_u64().unwrap());
    }
    assert!(reports[2]["param_bytes"]["deployed"].as_u64() < reports[1]["param_bytes"]["deployed"].as_u64());
    assert_eq!(std::fs::read_to_string(out.join("bench.csv")).unwrap().lines().count(), 4);
}

#[test]
fn ablation_emits_four_variants_and_env_overrides_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let o = lite3r(
        &["ablate", "--config", cfg.to_str().unwrap(), "--out", flag_out.to_str().unwrap(), "--threads", "2"],
        Some(&env_out),
    );
    ok(&o);
    assert!(!flag_out.exists());
    let csv = std::fs::read_to_string(env_out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "sla_no_qat", "no_sla_qat", "original"]);
}

#[test]
fn gamma_sweep_produces_four_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut finals = Vec::new();
    for g in ["0", "0.1", "0.2", "0.5"] {
        let text = SMALL.replace(r#""train": {"#, &format!(r#""train": {{"gamma": {g}, "#));
        let cfg = write_config(dir.path(), &format!("g{g}.json"), &text);
        let out = dir.path().join(format!("g{g}"));
        ok(&lite3r(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"], None));
        let log: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("train_log.json")).unwrap()).unwrap();
        let steps = log["steps"].as_array().unwrap();
        let first = &steps[0];
        let expected = first["task_loss"].as_f64().unwrap() + g.parse::<f64>().unwrap() * first["kd_loss"].as_f64().unwrap();
        assert!((first["total_loss"].as_f64().unwrap() - expected).abs() < 1e-5);
        finals.push(log["evals"].as_array().unwrap().last().unwrap()["eval_mse"].as_f64().unwrap());
    }
    assert_eq!(finals.len(), 4);
}
