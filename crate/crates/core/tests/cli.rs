//! The `fpo` binary: headers, row counts, format selection and exit codes.

use std::process::{Command, Output};

fn fpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpo")).args(args).env_remove("FPO_THREADS").output().unwrap()
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn csv_headers_and_row_counts() {
    let cases: [(&[&str], &str, usize); 6] = [
        (&["generator-check"], "generator,f_at_one,convexity_violation,derivative_rel_error", 5),
        (&["theorem1", "--max-steps", "50"], "generator,final_tv_hat,final_tv,steps,seconds", 5),
        (&["theorem2", "--repeats", "5", "--ks", "2,4"], "generator,k,median_abs_err,iqr", 6),
        (&["equivalence", "--records", "50"], "check,max_gap", 9),
        (
            &["alpha-sweep", "--max-steps", "20", "--pairs", "50", "--alphas", "0.2,0.8"],
            "alpha,final_loss,final_tv_hat,win_proxy",
            2,
        ),
        (&["divergence-behavior", "--generators", "fkl,rkl"], "generator,mass_basin_1,mass_basin_2,mu,sigma", 2),
    ];
    for (args, header, rows) in cases {
        let out = fpo(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let lines = stdout_lines(&out);
        assert_eq!(lines[0], header, "{args:?}");
        assert_eq!(lines.len(), rows + 1, "{args:?}");
        assert!(!out.stderr.is_empty(), "summary line expected on stderr");
    }
}

#[test]
fn format_follows_flag_then_extension() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("rows.json");
    let out = fpo(&["generator-check", "--out", json.to_str().unwrap()]);
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
    assert_eq!(rows[0]["generator"], "fkl");
    // the summary goes to stdout when rows go to a file
    assert_eq!(stdout_lines(&out).len(), 1);

    let forced = dir.path().join("rows.json");
    assert!(fpo(&["generator-check", "--format", "csv", "--out", forced.to_str().unwrap()]).status.success());
    assert!(std::fs::read_to_string(&forced).unwrap().starts_with("generator,"));
}

#[test]
fn timing_is_opt_in() {
    let plain = fpo(&["theorem1", "--max-steps", "10", "--generators", "fkl"]);
    assert!(stdout_lines(&plain)[1].ends_with(','));
    let timed = fpo(&["theorem1", "--max-steps", "10", "--generators", "fkl", "--timing"]);
    assert!(!stdout_lines(&timed)[1].ends_with(','));
}

#[test]
fn bad_input_exits_with_one() {
    for args in [
        &["no-such-experiment"][..],
        &["theorem1", "--generators", "alpha:2"],
        &["theorem1", "--format", "xml"],
        &["theorem2", "--ks", "1,8"],
        &["theorem1", "--prompts", "1"],
        &["equivalence", "--records", "0"],
        &["divergence-behavior", "--mode-sigma", "0"],
    ] {
        assert_eq!(fpo(args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(fpo(&["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_runs_exit_with_two_and_keep_their_rows() {
    let out = fpo(&["theorem1", "--algorithm", "gd", "--lr", "1e9", "--max-steps", "50", "--generators", "fkl,rkl"]);
    assert_eq!(out.status.code(), Some(2));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("rkl,,,"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn thread_cap_must_be_a_number() {
    let out = Command::new(env!("CARGO_BIN_EXE_fpo"))
        .args(["theorem1", "--max-steps", "5"])
        .env("FPO_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
