use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7

[controller]
kind = "stocbf"

[field]
t_nodes = 21

[simulation]
t_end = 2.0
n_trajectories = 5
"#;

fn probsafe(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_probsafe"));
    cmd.args(args).env_remove("PROBSAFE_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("run");
    let out = probsafe(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "timeseries.csv",
        "summary.csv",
        "config.resolved.toml",
        "mean_state.svg",
        "expected_safe_prob.svg",
        "empirical_safe_prob.svg",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let first = fs::read(out_dir.join("timeseries.csv")).unwrap();
    // 2 s at dt = 0.1: 21 sampled times, one controller.
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 1 + 21);

    let out = probsafe(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(out_dir.join("timeseries.csv")).unwrap(), first);

    // The resolved config reproduces the run.
    let resolved = out_dir.join("config.resolved.toml");
    let again = dir.path().join("again");
    let out = probsafe(&["simulate", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(again.join("timeseries.csv")).unwrap(), first);
}

#[test]
fn seed_can_be_overridden_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("run");
    let out = probsafe(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[("PROBSAFE_SEED", "99")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 99"), "{resolved}");

    let out = probsafe(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[("PROBSAFE_SEED", "x")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn identical_controllers_give_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", &format!("name = \"a\"\n{SMALL}"));
    let b = write_config(dir.path(), "b.toml", &format!("name = \"b\"\n{SMALL}"));
    let out_dir = dir.path().join("cmp");
    let out = probsafe(&["compare", "--configs", &a, &b, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("timeseries.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 21);
    let (ra, rb) = rows.split_at(21);
    for (x, y) in ra.iter().zip(rb) {
        assert_eq!((x[1], y[1]), ("a", "b"));
        assert_eq!(x[0], y[0]);
        assert_eq!(x[2..], y[2..]);
    }
    assert!(out_dir.join("config.resolved.a.toml").exists() && out_dir.join("config.resolved.b.toml").exists());
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    let bad = write_config(dir.path(), "bad.toml", "[controller]\nkind = \"proposed\"\nspeed = 3\n");
    let out = probsafe(&["simulate", "--config", &bad, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("speed"), "{}", stderr(&out));

    let a = write_config(dir.path(), "a.toml", SMALL);
    let b = write_config(dir.path(), "b.toml", &SMALL.replace("t_end = 2.0", "t_end = 2.0\ndt = 0.05"));
    let out = probsafe(&["compare", "--configs", &a, &b, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dt"), "{}", stderr(&out));

    let missing = write_config(
        dir.path(),
        "missing.toml",
        &format!("{SMALL}\n")
            .replace("t_nodes = 21", "t_nodes = 21\nsource = \"file\"\npath = \"/nonexistent/field.txt\""),
    );
    let out = probsafe(&["simulate", "--config", &missing, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("probsafe field"), "{}", stderr(&out));
}

#[test]
fn saved_field_reproduces_the_solved_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &SMALL.replace("\"stocbf\"", "\"proposed\""));
    let field_dir = dir.path().join("field");
    let out = probsafe(&["field", "--config", &cfg, "--out", field_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let field_path = field_dir.join("field.txt");

    let from_file = write_config(
        dir.path(),
        "from_file.toml",
        &SMALL.replace("\"stocbf\"", "\"proposed\"").replace(
            "t_nodes = 21",
            &format!("t_nodes = 21\nsource = \"file\"\npath = {:?}", field_path.to_str().unwrap()),
        ),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&probsafe(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()], &[])), 0);
    let out = probsafe(&["simulate", "--config", &from_file, "--out", b.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(a.join("timeseries.csv")).unwrap(), fs::read(b.join("timeseries.csv")).unwrap());
}

#[test]
fn excessive_fallbacks_exit_with_three() {
    // The zero-input field is flat near 1 far inside the safe set, where the
    // probability condition cannot act.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fallback.toml",
        &SMALL
            .replace("\"stocbf\"", "\"proposed\"")
            .replace("t_nodes = 21", "t_nodes = 21\nreference_gain = [[0.0]]")
            .replace("n_trajectories = 5", "n_trajectories = 5\nmax_fallback_rate = 0.0"),
    );
    let out_dir = dir.path().join("run");
    let out = probsafe(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    // Outputs are still written for inspection.
    assert!(out_dir.join("timeseries.csv").exists());
}

#[test]
fn numerical_failures_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "cfl.toml", &SMALL.replace("t_nodes = 21", "t_nodes = 21\nscheme = \"explicit\""));
    let out = probsafe(&["field", "--config", &cfg, "--out", dir.path().join("f").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn oracle_suite_passes() {
    let out = probsafe(&["validate-oracles"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
