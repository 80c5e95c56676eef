use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_slidemap");

fn slidemap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn slidemap")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.conf");
    let text = format!(
        "# desk-scale run\n\
         seed = 9\n\
         width = 160\n\
         height = 160\n\
         n_hills = 5\n\
         base_head_rate = 25\n\
         chip_size = 16\n\
         batch_size = 6\n\
         lr = 0.01\n\
         max_epochs = 2\n\
         patience = 2\n\
         branch_width = 4\n\
         branch_depth = 1\n\
         fusion_hidden = 4\n\
         n_trees = 15\n\
         {extra}\n"
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "base_head_rate = -1");
    let out = slidemap(&["synth", "--config", &config, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "learning_rate = 0.1");
    let out = slidemap(&["synth", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_upstream_artifact_exits_3_and_names_stage() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let out = slidemap(&["chips", "--config", &config, "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth"));
}

#[test]
fn full_run_then_render_and_stage_skipping() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = slidemap(&["run-all", "--config", &config, "--out", run_s]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("out_of_split"), "stdout: {stdout}");
    assert!(run.join("reports/eval.txt").exists());

    // a completed stage reruns as a no-op
    let out = slidemap(&["chips", "--config", &config, "--out", run_s]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped"));

    // render writes the map pair
    let out = slidemap(&["render", "--config", &config, "--out", run_s]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("render/density_map.png").exists());
    assert!(run.join("render/density_map.geojson").exists());

    // deleting the forests breaks predict with exit 3 naming fit-rf
    fs::remove_file(run.join("models/forest1.txt")).unwrap();
    fs::remove_file(run.join("models/forest2.txt")).unwrap();
    let out = slidemap(&["predict", "--config", &config, "--out", run_s, "--force"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit-rf"));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "");
    let run = dir.path().join("run");
    // the config asks for chip_size 16; --chip-size 200 exceeds the scene
    let out = slidemap(&[
        "synth",
        "--config",
        &config,
        "--out",
        run.to_str().unwrap(),
        "--chip-size",
        "200",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_without_predictions_exits_3() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    for cmd in ["synth", "chips"] {
        let out = slidemap(&[cmd, "--config", &config, "--out", run_s]);
        assert_eq!(out.status.code(), Some(0));
    }
    let out = slidemap(&["evaluate", "--config", &config, "--out", run_s]);
    assert_eq!(out.status.code(), Some(3));
}
