use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");

fn eoslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eoslab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eoslab(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(
                    p.strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .replace('\\', "/"),
                );
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_writes_a_complete_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let table = ok(&["run-all", "--config", SMOKE, "--out", a.to_str().unwrap()]);
    ok(&["run-all", "--config", SMOKE, "--out", b.to_str().unwrap()]);
    for model in ["MCD UNet", "MDAN", "DDPM"] {
        assert!(table.contains(model), "{table}");
    }

    let listed = files(&a);
    for required in [
        "config.toml",
        "cohort.eosc",
        "uncertainty.tsv",
        "partition.tsv",
        "graph.dot",
        "graph.tsv",
        "schedule.tsv",
        "combinations.tsv",
        "results.tsv",
        "results.md",
        "manifest.json",
    ] {
        assert!(listed.iter().any(|f| f == required), "missing {required}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let hashed: Vec<String> = manifest["files"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    let expected: Vec<String> = listed
        .iter()
        .filter(|f| *f != "manifest.json")
        .cloned()
        .collect();
    assert_eq!(hashed, expected);

    for f in &listed {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let first = ok(&["report", "--out", a.to_str().unwrap()]);
    assert_eq!(first, ok(&["report", "--out", a.to_str().unwrap()]));
    assert!(first.contains("Noise schedule"));
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearing_rate = 0.1\n").unwrap();
    let out = eoslab(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learing_rate"), "{}", stderr(&out));
}

#[test]
fn stages_name_what_is_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let d = dir.to_str().unwrap();
    let out = eoslab(&["partition", "--config", SMOKE, "--out", d]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("uncertainty"), "{}", stderr(&out));
    let out = eoslab(&["report", "--out", d]);
    assert!(!out.status.success());
}

#[test]
fn baseline_only_run_reports_na_fid() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("r");
    let d = d.to_str().unwrap();
    for stage in [
        "gen-data",
        "uncertainty",
        "partition",
        "train-baseline",
        "evaluate",
    ] {
        ok(&[
            stage,
            "--config",
            SMOKE,
            "--experiment",
            "baseline",
            "--out",
            d,
        ]);
    }
    let report = ok(&["report", "--out", d]);
    assert!(
        report.contains("MCD UNet") && report.contains("N/A"),
        "{report}"
    );
    assert!(!report.contains("MDAN"));
}

#[test]
fn a_different_config_cannot_reuse_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("r");
    let d = d.to_str().unwrap();
    ok(&["gen-data", "--config", SMOKE, "--out", d]);
    let out = eoslab(&["gen-data", "--config", SMOKE, "--seed", "99", "--out", d]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("different config"),
        "{}",
        stderr(&out)
    );
}
