use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use blinddeconv::cli::RunConfig;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(command: &str, config: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_blinddeconv"))
        .args([command, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("binary runs")
        .code()
        .expect("exit code")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[test]
fn empty_seed_list_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config_path("circle_support.toml")).unwrap().replace("seeds = [1, 2, 3, 4, 5]", "seeds = []");
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run("estimate-support", &cfg, &out), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "validation");
    assert!(report["error"].as_str().unwrap().contains("seeds"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    let text = fs::read_to_string(config_path("genericity_square.toml")).unwrap().replace("trials = 200", "trails = 200");
    fs::write(&cfg, &text).unwrap();
    assert!(RunConfig::from_toml(&text).is_err());
    assert_eq!(run("genericity", &cfg, &dir.path().join("out")), 2);
    assert_eq!(run("genericity", &dir.path().join("missing.toml"), &dir.path().join("out2")), 2);
}

#[test]
fn repeated_runs_write_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_path("genericity_square.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("genericity", &cfg, &a), 0);
    assert_eq!(run("genericity", &cfg, &b), 0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let f = f.as_str().unwrap();
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn support_sweep_rows_plotdata_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(run("estimate-support", &config_path("circle_support.toml"), &out), 0);

    let (header, rows) = read_csv(&out.join("support_risk.csv"));
    assert_eq!(rows.len(), 10);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert!(rows.iter().all(|r| r[col("status")] == "ok"), "{rows:?}");
    let (_, plot) = read_csv(&out.join("plotdata/support_risk.csv"));
    assert_eq!(plot.len(), 2);
    for p in &plot {
        let risks: Vec<f64> =
            rows.iter().filter(|r| r[col("n")] == p[0]).map(|r| r[col("risk")].parse().unwrap()).collect();
        assert_eq!(risks.len(), 5);
        let y: f64 = p[1].parse().unwrap();
        assert!((y - median(risks)).abs() <= 1e-12 * y.abs().max(1.0), "n = {}", p[0]);
    }

    // keys are written in sorted order at every level
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&manifest).unwrap() + "\n", text);
    let seeds: Vec<u64> = manifest["replicates"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds.len(), 10);

    // the resolved config in the manifest reproduces the run
    let resolved: RunConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    let again = dir.path().join("again.toml");
    fs::write(&again, toml::to_string(&resolved).unwrap()).unwrap();
    let out2 = dir.path().join("rerun");
    assert_eq!(run("estimate-support", &again, &out2), 0);
    for f in ["support_risk.csv", "plotdata/support_risk.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }
}
