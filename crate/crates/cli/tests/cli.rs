//! End-to-end tests of the command-line surface: stage ordering, exit
//! codes, protocol flags, and report emission.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqabench_core::runstore::RunConfig;
use vqabench_core::{Difficulty, UserInput};

fn vqabench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqabench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

/// A small mock config so CLI runs stay fast: 1 x 2 aspects, 2 descriptions,
/// easy+medium, one candidate.
fn small_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::default_mock(UserInput::standard("basic").unwrap(), seed);
    config.general_count = 1;
    config.fine_count = 2;
    config.descriptions_per_aspect = 2;
    config.difficulties = vec![Difficulty::Easy, Difficulty::Medium];
    config.candidates = vec!["cand-uniform".into(), "cand-first".into()];
    config
}

fn write_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("config-input.json");
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&small_config(seed)).unwrap(),
    )
    .unwrap();
    path
}

#[test]
fn stage_out_of_order_names_missing_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = write_config(dir.path(), 3);
    let init = vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&init), 0, "{}", stderr(&init));

    let out = vqabench(&["questions", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("imagine"), "stderr: {}", stderr(&out));
}

#[test]
fn init_on_nonempty_directory_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("stray"), "x").unwrap();
    let config = write_config(dir.path(), 3);
    // the config file itself sits in dir, so point init at dir
    let out = vqabench(&[
        "init",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn init_without_config_or_mock_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vqabench(&["init", "--run-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn full_small_run_emits_reports_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = write_config(dir.path(), 5);
    let init = vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&init), 0, "{}", stderr(&init));
    assert!(stdout(&init).contains("expecting 8 test cases"));

    let all = vqabench(&[
        "all",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--parallelism",
        "2",
    ]);
    assert_eq!(code(&all), 0, "{}", stderr(&all));
    let text = stdout(&all);
    assert!(text.contains("emitted 8 test cases"), "stdout: {text}");
    assert!(text.contains("wrote 7 report tables"), "stdout: {text}");

    let tables: Vec<_> = std::fs::read_dir(run_dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|name| name.ends_with(".json"))
        .collect();
    assert_eq!(tables.len(), 7, "tables: {tables:?}");
    assert!(run_dir.join("reports/summary.txt").is_file());

    // answer keys never appear in candidate-facing files or the console
    let facing = std::fs::read_to_string(run_dir.join("testcases/basic/easy.jsonl")).unwrap();
    assert!(!facing.contains("reference"));
    assert!(!text.contains("reference"));

    // every subcommand is safe to re-invoke
    let again = vqabench(&["all", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    assert!(
        stdout(&again).matches("skipped").count() >= 6,
        "stdout: {}",
        stdout(&again)
    );
}

#[test]
fn evaluate_no_image_runs_only_leakage_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = write_config(dir.path(), 9);
    vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    for sub in ["aspects", "describe", "imagine", "questions"] {
        let out = vqabench(&[sub, "--run-dir", run_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{sub}: {}", stderr(&out));
    }

    let out = vqabench(&[
        "evaluate",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--no-image",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let no_image = run_dir.join("responses/cand-uniform/no-image.jsonl");
    assert!(no_image.is_file());
    assert!(!run_dir
        .join("responses/cand-uniform/standard.jsonl")
        .exists());
    for line in std::fs::read_to_string(&no_image).unwrap().lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["image_withheld"], serde_json::Value::Bool(true));
    }
    // the stage is not complete until the remaining protocols run
    let report = vqabench(&["report", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&report), 3);

    let full = vqabench(&["evaluate", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&full), 0, "{}", stderr(&full));
    let report = vqabench(&["report", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&report), 0, "{}", stderr(&report));
}

#[test]
fn tampered_config_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = write_config(dir.path(), 4);
    vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    // flip the seed behind the manifest's back
    let config_path = run_dir.join("config.json");
    let mut stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    stored["master_seed"] = 999.into();
    std::fs::write(&config_path, serde_json::to_vec_pretty(&stored).unwrap()).unwrap();

    let out = vqabench(&["aspects", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("conflict"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn unreachable_live_backend_exits_with_backend_exhaustion() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut config = small_config(6);
    config.switches.mock = false;
    for backend in &mut config.backends {
        // nothing listens on this port; every attempt fails at transport
        backend.endpoint = "http://127.0.0.1:9".to_string();
        backend.max_retries = 1;
        backend.min_interval_ms = 0;
        backend.timeout_ms = 500;
    }
    let config_path = dir.path().join("live.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
    ]);
    let out = vqabench(&["aspects", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("retries exhausted"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn mock_init_uses_stock_config() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = vqabench(&[
        "init",
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--mock",
        "--seed",
        "21",
        "--user-input",
        "spatial",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("expecting 720 test cases"));
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(stored["master_seed"], serde_json::Value::from(21));
    assert_eq!(
        stored["user_input"]["name"],
        serde_json::Value::from("spatial")
    );
}
