//! End-to-end tests that spawn the real binary: the full pipeline in a
//! temp directory, the error contract, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_earlyrec")
}

/// A config small enough that every stage trains in well under a second:
/// 3 classes, short sequences, tiny models, a couple of epochs.
fn tiny_config(out: &Path) -> String {
    format!(
        r#"{{
            "seed": 11,
            "out_dir": {out},
            "dataset": {{
                "generator": {{
                    "num_classes": 3,
                    "feature_dim": 6,
                    "phases_per_class": 2,
                    "shared_prefix_len_range": [2, 3],
                    "phase_len_range": [4, 8],
                    "class_centroid_scale": 10.0,
                    "noise_std": 0.8,
                    "irrelevant_frame_prob": 0.02,
                    "length_jitter": [
                        {{"mean": 18.0, "std": 2.0}},
                        {{"mean": 20.0, "std": 2.0}},
                        {{"mean": 22.0, "std": 2.0}}
                    ]
                }},
                "per_class": 5
            }},
            "encoder": {{"train": {{"epochs": 2, "embedding_dim": 6, "learning_rate": 0.001,
                                    "sample": {{"segment_len": 5, "per_segment": 2}}}}}},
            "teacher": {{"hidden_dim": 8, "train": {{"epochs": 3, "patience": 3}}}},
            "student": {{"train": {{"epochs": 3, "patience": 3}}}}
        }}"#,
        out = serde_json::to_string(out).unwrap()
    )
}

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = dir.path().join("config.json");
        std::fs::write(&config, tiny_config(&out)).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn earlyrec(&self, args: &[&str]) -> Output {
        Command::new(bin())
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .output()
            .expect("binary runs")
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let run = Run::new();
    let out = run.out();

    assert_ok(&run.earlyrec(&["generate"]));
    let dataset = out.join("dataset.ndjson");
    assert!(dataset.exists());
    assert!(out.join("generate.manifest.json").exists());

    // Downstream stages read the generated file via an override.
    let ds_override = format!("dataset.path={}", serde_json::to_string(&dataset).unwrap());
    assert_ok(&run.earlyrec(&["finetune-encoder", "--override", &ds_override]));
    assert!(out.join("encoder.json").exists());
    assert!(out.join("encoder_training_log.csv").exists());

    let enc_override = format!(
        "encoder.path={}",
        serde_json::to_string(&out.join("encoder.json")).unwrap()
    );
    assert_ok(&run.earlyrec(&["train-teacher", "--override", &ds_override, "--override", &enc_override]));
    assert!(out.join("teacher.json").exists());

    let teacher_override = format!(
        "student.teacher_path={}",
        serde_json::to_string(&out.join("teacher.json")).unwrap()
    );
    assert_ok(&run.earlyrec(&[
        "train-fsp",
        "--override",
        &ds_override,
        "--override",
        &enc_override,
        "--override",
        &teacher_override,
    ]));
    assert!(out.join("student.json").exists());
    assert!(out.join("truncation.json").exists());

    let model_override = format!(
        "evaluate.model_path={}",
        serde_json::to_string(&out.join("student.json")).unwrap()
    );
    assert_ok(&run.earlyrec(&[
        "evaluate",
        "--override",
        &ds_override,
        "--override",
        &enc_override,
        "--override",
        &model_override,
    ]));
    assert!(out.join("report.json").exists());
    let csv = std::fs::read_to_string(out.join("accuracy_curve.csv")).unwrap();
    assert!(csv.starts_with("checkpoint,accuracy\n"));
    assert!(csv.lines().count() >= 2);

    // The report parses and its manifest hashes the inputs it names.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].is_array());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("evaluate.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subcommand"], "evaluate");
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);
    assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);

    // plot renders the curve CSV.
    let curve_override = format!(
        "plot.curves=[{{\"path\": {}, \"label\": \"student\"}}]",
        serde_json::to_string(&out.join("accuracy_curve.csv")).unwrap()
    );
    assert_ok(&run.earlyrec(&["plot", "--override", &curve_override]));
    let svg = std::fs::read_to_string(out.join("accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg ") && svg.contains("student"));
}

#[test]
fn train_fsp_without_teacher_is_a_validation_error() {
    let run = Run::new();
    let out = run.earlyrec(&["train-fsp"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("teacher checkpoint required"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn missing_artifacts_name_the_file() {
    let run = Run::new();
    let ghost = run.dir.path().join("ghost.ndjson");
    let ds_override = format!("dataset.path={}", serde_json::to_string(&ghost).unwrap());
    let out = run.earlyrec(&["train-teacher", "--override", &ds_override]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ghost.ndjson"), "stderr: {}", stderr(&out));

    let out = run.earlyrec(&["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model checkpoint required"), "stderr: {}", stderr(&out));
}

#[test]
fn bad_config_keys_fail_with_exit_1_naming_the_key() {
    let run = Run::new();
    let out = run.earlyrec(&["generate", "--override", "teacher.hiden_dim=4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("hiden_dim"), "stderr: {}", stderr(&out));

    let out = run.earlyrec(&["generate", "--override", "teacher.train.epochs=soon"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("teacher.train.epochs"), "stderr: {}", stderr(&out));
}

#[test]
fn reruns_are_byte_identical_except_manifest_timestamps() {
    let run = Run::new();
    let out_a = run.out();
    let manifest = |dir: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join("generate.manifest.json")).unwrap())
            .unwrap()
    };

    // Re-running the same config into the same directory reproduces
    // every artifact; only the manifest timestamp may move.
    assert_ok(&run.earlyrec(&["generate"]));
    let bytes_first = std::fs::read(out_a.join("dataset.ndjson")).unwrap();
    let mut manifest_first = manifest(&out_a);
    assert_ok(&run.earlyrec(&["generate"]));
    let bytes_second = std::fs::read(out_a.join("dataset.ndjson")).unwrap();
    let mut manifest_second = manifest(&out_a);
    assert_eq!(bytes_first, bytes_second);
    manifest_first["unix_time"] = 0.into();
    manifest_second["unix_time"] = 0.into();
    assert_eq!(manifest_first, manifest_second);

    // The data does not depend on where it lands.
    let out_b = run.dir.path().join("run_b");
    assert_ok(&run.earlyrec(&["generate", "--out", out_b.to_str().unwrap()]));
    assert_eq!(bytes_first, std::fs::read(out_b.join("dataset.ndjson")).unwrap());

    // A different seed changes it.
    let out_c = run.dir.path().join("run_c");
    assert_ok(&run.earlyrec(&["generate", "--out", out_c.to_str().unwrap(), "--seed", "99"]));
    assert_ne!(bytes_first, std::fs::read(out_c.join("dataset.ndjson")).unwrap());
}

#[test]
fn evaluation_is_identical_across_thread_caps() {
    let run = Run::new();
    let out = run.out();
    assert_ok(&run.earlyrec(&["generate"]));
    let ds_override = format!(
        "dataset.path={}",
        serde_json::to_string(&out.join("dataset.ndjson")).unwrap()
    );
    assert_ok(&run.earlyrec(&["train-teacher", "--override", &ds_override]));
    let model_override = format!(
        "evaluate.model_path={}",
        serde_json::to_string(&out.join("teacher.json")).unwrap()
    );
    let enc_override = format!(
        "encoder.path={}",
        serde_json::to_string(&out.join("encoder.json")).unwrap()
    );

    let mut reports = Vec::new();
    for (threads, sub) in [("1", "eval_t1"), ("4", "eval_t4")] {
        let dir = run.dir.path().join(sub);
        let output = Command::new(bin())
            .args(["evaluate", "--out", dir.to_str().unwrap()])
            .args(["--override", &ds_override])
            .args(["--override", &enc_override])
            .args(["--override", &model_override])
            .arg("--config")
            .arg(&run.config)
            .env("EARLYREC_THREADS", threads)
            .output()
            .unwrap();
        assert_ok(&output);
        reports.push(std::fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    // An unparsable cap is rejected up front.
    let output = Command::new(bin())
        .args(["evaluate", "--override", &ds_override, "--override", &enc_override])
        .args(["--override", &model_override])
        .arg("--config")
        .arg(&run.config)
        .env("EARLYREC_THREADS", "several")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("EARLYREC_THREADS"));
}

#[test]
fn gradcheck_passes_and_writes_its_report() {
    let run = Run::new();
    let out = run.earlyrec(&["gradcheck", "--override", "gradcheck.instances=3"]);
    assert_ok(&out);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.out().join("gradcheck.json")).unwrap())
            .unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["pass"] == true));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(text.matches("[ok]").count(), 6);
}

#[test]
fn ablate_writes_cells_and_summary() {
    let run = Run::new();
    let out = run.out();
    assert_ok(&run.earlyrec(&["generate"]));
    let ds_override = format!(
        "dataset.path={}",
        serde_json::to_string(&out.join("dataset.ndjson")).unwrap()
    );
    assert_ok(&run.earlyrec(&["train-teacher", "--override", &ds_override]));
    let enc_override = format!(
        "encoder.path={}",
        serde_json::to_string(&out.join("encoder.json")).unwrap()
    );
    let teacher_override = format!(
        "student.teacher_path={}",
        serde_json::to_string(&out.join("teacher.json")).unwrap()
    );

    let output = run.earlyrec(&[
        "ablate",
        "--override",
        &ds_override,
        "--override",
        &enc_override,
        "--override",
        &teacher_override,
        "--override",
        r#"ablate.deltas=[{"fraction": 0.2}, {"fixed_steps": 4}]"#,
        "--override",
        "ablate.lambdas=[10, 100]",
        "--override",
        r#"ablate.future_losses=["smooth_l1"]"#,
    ]);
    assert_ok(&output);

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("delta,lambda,future_loss,checkpoint,accuracy\n"));
    for cell in ["frac0.2_lam10", "frac0.2_lam100", "fixed4_lam10", "fixed4_lam100"] {
        assert!(summary.contains(cell.split("_lam").next().unwrap()));
        let dir = out.join("cells").join(format!("{cell}_smooth_l1"));
        assert!(dir.join("report.json").exists(), "missing cell {cell}");
        assert!(dir.join("accuracy_curve.csv").exists());
    }
    // 4 cells x one row per checkpoint, plus the header.
    let rows = summary.lines().count() - 1;
    assert!(rows >= 4 && rows % 4 == 0, "summary rows: {rows}");

    // Without a teacher the sweep refuses to start.
    let refused = run.earlyrec(&["ablate", "--override", &ds_override]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(stderr(&refused).contains("teacher checkpoint required"));
}

#[test]
fn help_exits_zero_and_unknown_flags_exit_one() {
    let help = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout).into_owned();
    for sub in ["generate", "finetune-encoder", "train-teacher", "train-fsp", "evaluate", "gradcheck", "ablate", "plot"] {
        assert!(text.contains(sub), "help missing {sub}");
    }

    let bad = Command::new(bin()).args(["generate", "--confg", "x.json"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
