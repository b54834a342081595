use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str =
    "round,wall_time_s,objective,rmse_test,aug_lagrangian,consensus_gap,stationarity_sq,nnz_U,nnz_V,sampled_count";

fn fedmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn synth_then_run_then_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "spec.toml", "m = 60\nn = 20\nrank = 2\ndensity = 0.6\nnoise = 0.01\nseed = 5\n");
    let out = stdout(&fedmc(&["synth", "--spec", "spec.toml", "--out", "ratings.csv"], d));
    assert!(out.contains("60x20"), "{out}");
    let csv = std::fs::read_to_string(d.join("ratings.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("user,item,rating"));
    assert!(d.join("ratings.truth.json").is_file());

    write(
        d,
        "run.toml",
        r#"
clients = 4
rank = 2
rounds = 6
eval_every = 2
out = "out/metrics.csv"

[dataset]
path = "ratings.csv"
format = "triplet-csv"

[admm]
beta = 0.5
inner_iters = 3

[sampling]
mode = "fixed-size"
size = 2
"#,
    );
    stdout(&fedmc(&["run", "--config", "run.toml"], d));
    let metrics = std::fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 1 + 7);
    assert!(lines[1].starts_with("0,0.0000000000000000e0,"));
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields.len(), 10);
    assert_eq!(fields[9], "2");
    assert!(d.join("out/metrics.checkpoint.json").is_file());
    assert!(d.join("out/metrics.idmap.json").is_file());

    let report = stdout(&fedmc(&["check", "--config", "run.toml"], d));
    assert!(report.contains("beta_lower_bound"), "{report}");
    assert!(report.contains("warning"), "{report}");
    let report = stdout(&fedmc(&["check", "--config", "run.toml", "--beta", "1e9"], d));
    assert!(!report.contains("warning"), "{report}");
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "run.toml",
        "clients = 4\nrank = 2\nrounds = 20\n[synthetic]\nm = 40\nn = 12\nrank = 2\ndensity = 0.7\nseed = 1\n",
    );
    let args = [
        "run", "--config", "run.toml", "--algo", "fedmavg", "--rounds", "3", "--sample-size", "4", "--reg", "l1",
        "--lambda", "1e-3", "--out", "fm.csv",
    ];
    stdout(&fedmc(&args, d));
    let metrics = std::fs::read_to_string(d.join("fm.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    // FedMAvg has no dual variables.
    assert!(rows[1].split(',').nth(4).unwrap().eq_ignore_ascii_case("nan"));
    assert!(rows[1].ends_with(",4"));
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.toml", "clients = 0\n[synthetic]\nm = 10\nn = 5\nrank = 1\ndensity = 0.5\nseed = 1\n");
    let o = fedmc(&["run", "--config", "bad.toml"], d);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = fedmc(&["run", "--config", "missing.toml"], d);
    assert!(!o.status.success());
}
