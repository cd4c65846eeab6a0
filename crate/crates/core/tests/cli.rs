use std::path::Path;
use std::process::Command;

fn committee(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_committee"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(committee(&[], dir.path()).0, 2);
    assert_eq!(committee(&["ensemble", "--optimizer", "adam"], dir.path()).0, 2);
    assert_eq!(committee(&["table", "t9"], dir.path()).0, 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "K = 3\nunknown_key = 1\n").unwrap();
    let (code, err) = committee(&["--config", bad.to_str().unwrap(), "ensemble"], dir.path());
    assert_eq!(code, 2, "{err}");
}

#[test]
fn invalid_experiments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = committee(&["simulate", "--K", "0", "--M", "2"], dir.path());
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn config_file_drives_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "K = 3\nM = 3\nn_seeds = 5\nseed_base = 11\n\n[integration]\nmax_steps = 20000\n").unwrap();
    let out = dir.path().join("run");
    let (code, err) = committee(&["--config", cfg.to_str().unwrap(), "ensemble"], &out);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_slice(&read(&out, "report.json")).unwrap();
    assert_eq!(report["K"], 3);
    assert_eq!(report["n_seeds"], 5);
    assert_eq!(report["seed_base"], 11);
    let rows = String::from_utf8(read(&out, "per_seed.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
    assert!(out.join("histogram.csv").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["ensemble", "--K", "4", "--M", "3", "--n-seeds", "6", "--max-steps", "20000", "--seed", "3"];
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let mut a = args.to_vec();
        a.extend(["--threads", threads]);
        let (code, err) = committee(&a, &out);
        assert_eq!(code, 0, "{err}");
        outs.push((read(&out, "per_seed.csv"), read(&out, "report.json")));
    }
    assert!(outs[0] == outs[1], "outputs differ between thread counts");
}

#[test]
fn fixed_point_catalog_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = committee(&["fixed-point", "--K", "4", "--M", "4", "--k1-max", "2"], dir.path());
    assert_eq!(code, 0, "{err}");
    let csv = String::from_utf8(read(dir.path(), "catalog.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");
    assert!(dir.path().join("catalog.json").exists());
}

#[test]
fn small_integral_validation_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = committee(&["validate-integrals", "--samples", "20000", "--covariances", "3"], dir.path());
    assert_eq!(code, 0, "{err}");
    let csv = String::from_utf8(read(dir.path(), "integrals.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("true")));
}
