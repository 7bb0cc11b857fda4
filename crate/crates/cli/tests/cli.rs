use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use collapse_core::io::{TrajectoryArchive, ARCHIVE_FILE, SUMMARY_FILE};

fn collapse(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_collapse"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("COLLAPSE_WORKERS", w),
        None => cmd.env_remove("COLLAPSE_WORKERS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, format!("{body}output_dir = {}\n", dir.join("out").display())).unwrap();
    path.display().to_string()
}

const GRW: &str = "model = grw\nseed = 11\nmu = 3\nalpha = 0.5\nn_points = 64\nx_min = -12\nx_max = 12\n\
                   t_max = 1\nsample_times = 0.5, 1\nn_substeps = 100\n";

#[test]
fn zero_trajectories_give_header_only_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{GRW}n_trajectories = 0\n"));
    let out = collapse(&["simulate", "--config", &conf], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = TrajectoryArchive::read_file(&tmp.path().join("out").join(ARCHIVE_FILE)).unwrap();
    assert_eq!(a.header.n_records, 0);
    assert!(a.records.is_empty());
    let summary = fs::read_to_string(tmp.path().join("out").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary, "time,mean_position,position_variance,mean_weight,mean_weight_se\r\n");
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut archives = Vec::new();
    for (k, workers) in [Some("1"), Some("3"), None].into_iter().enumerate() {
        let dir = tmp.path().join(format!("run{k}"));
        fs::create_dir(&dir).unwrap();
        let conf = write_config(&dir, &format!("{GRW}n_trajectories = 40\n"));
        let out = collapse(&["simulate", "--config", &conf], workers);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let files: Vec<Vec<u8>> = ["trajectories.cldn", "summary.csv", "density_t0.csv", "density_t1.csv"]
            .iter()
            .map(|f| fs::read(dir.join("out").join(f)).unwrap())
            .collect();
        archives.push(files);
    }
    assert_eq!(archives[0], archives[1]);
    assert_eq!(archives[0], archives[2]);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{GRW}n_trajectories = 3\n"));
    let out = collapse(&["simulate", "--config", &conf, "--n_trajectories", "2", "--seed", "5"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = TrajectoryArchive::read_file(&tmp.path().join("out").join(ARCHIVE_FILE)).unwrap();
    assert_eq!(a.records.len(), 2);
    assert_eq!(a.header.seed, 5);
}

#[test]
fn scaling_violation_is_one_json_line_and_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(
        tmp.path(),
        "model = hybrid\nseed = 1\nlambda = 1\nmu = 4\nalpha = 0.4\nn_trajectories = 2\n",
    );
    let out = collapse(&["simulate", "--config", &conf], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn runtime_failure_removes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    // A packet far wider than the window fails after the output directory exists.
    let conf = write_config(
        tmp.path(),
        "model = diosi\nseed = 1\nlambda = 1\nn_points = 32\nx_min = -2\nx_max = 2\npsi0_sigma = 3\n\
         n_trajectories = 2\nt_max = 0.5\nsample_times = 0.5\nn_substeps = 100\n",
    );
    let out = collapse(&["simulate", "--config", &conf], None);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "grid-too-small");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn export_matches_run_output_and_checks_schedule_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{GRW}n_trajectories = 10\n"));
    assert!(collapse(&["simulate", "--config", &conf], None).status.success());
    let archive = tmp.path().join("out").join(ARCHIVE_FILE).display().to_string();
    let csv = tmp.path().join("export.csv").display().to_string();
    let out = collapse(
        &["export", "--archive", &archive, "--time", "1", "--config", &conf, "--output", &csv],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(&csv).unwrap(),
        fs::read(tmp.path().join("out").join("density_t1.csv")).unwrap()
    );

    let out = collapse(&["export", "--archive", &archive, "--time", "0.75"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule-mismatch"));

    let other = tmp.path().join("other.conf");
    fs::write(&other, GRW.replace("seed = 11", "seed = 12")).unwrap();
    let out = collapse(
        &["export", "--archive", &archive, "--time", "1", "--config", &other.display().to_string()],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn mutated_archive_header_fails_closed() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), &format!("{GRW}n_trajectories = 2\n"));
    assert!(collapse(&["simulate", "--config", &conf], None).status.success());
    let path = tmp.path().join("out").join(ARCHIVE_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[45] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let out = collapse(&["export", "--archive", &path.display().to_string(), "--time", "1"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn verify_runs_selected_criteria_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v").display().to_string();
    let out = collapse(&["verify", "--criteria", "7", "--output_dir", &dir], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("criterion 7 [PASS]"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("v").join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["id"], 7);
}

#[test]
fn simulate_refuses_the_verify_model() {
    let out = collapse(&["simulate", "--model", "verify", "--seed", "1"], None);
    assert_eq!(out.status.code(), Some(2));
}
