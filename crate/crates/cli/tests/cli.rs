use std::process::Command;

fn rrtl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rrtl")).args(args).output().unwrap()
}

#[test]
fn enumerate_states_prints_the_row_count() {
    let out = rrtl(&["enumerate-states", "--game", "pong"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "78732");
}

#[test]
fn train_select_test_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = out.to_str().unwrap();
    let train = rrtl(&["train", "--game", "breakout", "--encoding", "logical", "--runs", "1", "--iterations", "40000", "--out", o]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let best = rrtl(&["select-best", o, "--episodes", "2"]);
    assert!(best.status.success());
    let ckpt = String::from_utf8(best.stdout).unwrap().trim().to_string();
    assert!(ckpt.ends_with(".json"));
    let test = rrtl(&["test", &ckpt, "--episodes", "3"]);
    assert!(test.status.success());
    let csv = String::from_utf8(test.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(String::from_utf8(test.stderr).unwrap().starts_with("mean "));
}

#[test]
fn missing_game_is_an_error() {
    let out = rrtl(&["train", "--encoding", "logical", "--out", "/nonexistent/x"]);
    assert!(!out.status.success());
}
