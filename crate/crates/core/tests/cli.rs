use std::process::Command;

fn crl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(args)
        .env_remove("CRL_TRAIN__LR")
        .output()
        .unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_replays_to_a_win() {
    let o = crl(&["solve", "--env", "messenger", "--stage", "s2", "--episode", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("replayed reward: 1"));
}

#[test]
fn oracle_eval_wins_everything() {
    let o = crl(&["eval", "--agent", "oracle", "--episodes", "10", "--variant", "dyna"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("wins=10 "), "{}", stdout(&o));
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    assert_eq!(crl(&["solve", "--split", "test"]).status.code(), Some(2));
    assert_eq!(crl(&["train", "--no-mi", "--alpha1", "0.1"]).status.code(), Some(2));
    assert_eq!(crl(&["train", "--set", "train.lr"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(["solve"])
        .env("CRL_TRAIN__LR", "-1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let small = [
        "--set", "train.num_envs=4",
        "--set", "train.n_steps=8",
        "--set", "train.eval_every=256",
        "--set", "train.eval_episodes=8",
        "--set", "run.checkpoint_every=256",
        "--set", "encoder.d_t=8",
        "--set", "encoder.d_e=8",
        "--set", "encoder.d_c=4",
        "--set", "encoder.d_k=8",
        "--set", "encoder.gru_hidden=8",
        "--set", "mi.predictor_hidden=8",
    ];
    let mut args = vec!["train", "--steps", "256", "--seed", "5", "--out", out_s];
    args.extend(small);
    let o = crl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"steps\": 256"));

    let ckpt = out.join("final.ckpt");
    assert!(ckpt.exists());
    let o = crl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "8"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("episodes=8 "));

    let csv = dir.path().join("c.csv");
    let o = crl(&[
        "dump-concepts", "--checkpoint", ckpt.to_str().unwrap(), "--count", "5", "--file", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let rows = crl_core::harness::read_concepts(&csv).unwrap();
    assert_eq!(rows.len(), 5 * 4);
    assert!(rows.iter().all(|r| r.concept.len() == 2 * 4));
}
