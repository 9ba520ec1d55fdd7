use std::path::Path;
use std::process::{Command, Output};

fn air_hockey(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_air-hockey"))
        .args(args)
        .env("AIR_HOCKEY_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn match_writes_a_replay_that_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(&["match", "--a", "scripted:baseline", "--b", "scripted:passive_blocker", "--seed", "4"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("score"));
    let replay = dir.path().join("match_4").join("replay.log");
    assert!(dir.path().join("match_4/config/table.toml").exists());

    let o = air_hockey(&["replay-verify", replay.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("replay verified"));

    let text = std::fs::read_to_string(&replay).unwrap();
    let tampered = dir.path().join("tampered.log");
    std::fs::write(&tampered, text.replacen("seed 4", "seed 5", 1)).unwrap();
    let o = air_hockey(&["replay-verify", tampered.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn mirrored_match_gets_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(&["match", "--seed", "2", "--mirrored"], dir.path());
    assert!(o.status.success());
    let replay = dir.path().join("match_2_mirrored/replay.log");
    assert!(std::fs::read_to_string(replay).unwrap().contains("mirrored true"));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(&["match", "--a", "scripted:nobody"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = air_hockey(&["match", "--table", "/nonexistent/table.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = air_hockey(&["replay-verify", "/nonexistent/replay.log"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = air_hockey(&["tournament", "--policy", "scripted:idle"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = air_hockey(&["train", "--stage", "2", "--episodes", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("empty");
    let o = air_hockey(
        &["train", "--stage", "2", "--episodes", "0", "--stage1-dir", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tournament_prints_a_table_and_writes_match_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(
        &["tournament", "--policy", "scripted:baseline", "scripted:idle", "--seed", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("average score"));
    let csv = std::fs::read_to_string(dir.path().join("tournament_1/matches.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn stage_one_training_writes_a_history_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(&["train", "--episodes", "0", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["balanced", "aggressive", "defensive"] {
        assert!(dir.path().join("train_stage1_3/stage1").join(s).join("history.manifest").exists());
    }
}

#[test]
fn bench_reports_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let o = air_hockey(&["bench", "--steps", "500"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("steps/s"));
}
