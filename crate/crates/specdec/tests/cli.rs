//! End-to-end CLI smoke tests against the built binary.

use std::process::Command;

fn corpus_path() -> String {
    format!("{}/../../data/tiny.txt", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn pipeline_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("experiment.toml");
    // Small splits and a coarse grid keep this a smoke test.
    std::fs::write(
        &config_path,
        format!(
            "corpus_path = {:?}\n\
             train_count = 60\n\
             valid_count = 20\n\
             test_count = 20\n\
             epochs = 20\n\
             max_new_tokens = 24\n\
             static_grid = [1, 2, 4]\n\
             tau_grid = [0.3, 0.6]\n\
             sl_max_candidates = [2, 4]\n\
             ppl_tau_grid = [2.0]\n",
            corpus_path()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("artifacts");

    let run = |sub: &str| {
        Command::new(env!("CARGO_BIN_EXE_specdec"))
            .args(["-c", config_path.to_str().unwrap(), sub])
            .env("SPECDEC_OUT_DIR", &out_dir)
            .output()
            .unwrap()
    };

    let pipeline = run("pipeline");
    assert!(
        pipeline.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&pipeline.stderr)
    );
    for file in ["target-model.json", "draft-model.json", "classifier.ffn", "tuned.json", "report.json", "report.csv", "f1.csv"] {
        assert!(out_dir.join(file).exists(), "missing artifact {file}");
    }

    let report = run("report");
    assert!(report.status.success());
    let stdout = String::from_utf8_lossy(&report.stdout);
    assert!(stdout.contains("disco/static-opt cost ratio"), "report output:\n{stdout}");

    let stats = run("oracle-stats");
    assert!(stats.status.success());
    assert!(out_dir.join("oracle-hist.csv").exists());
}

#[test]
fn missing_config_exits_nonzero() {
    let out = Command::new(env!("CARGO_BIN_EXE_specdec"))
        .args(["-c", "/nonexistent/config.toml", "report"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
