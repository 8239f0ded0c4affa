//! Exit-code and artifact contract of the command-line interface.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tradeclust"))
}

#[test]
fn reversed_month_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let trades = dir.path().join("trades.csv");
    std::fs::write(&trades, "firm_id,security_id,date,side,units,price,capacity\n").unwrap();
    let out = bin()
        .args([
            "score",
            "--trades",
            trades.to_str().unwrap(),
            "--months",
            "2010-01:2009-01",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "score",
            "--trades",
            dir.path().join("nope.csv").to_str().unwrap(),
            "--months",
            "2009-01",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn schema_mismatch_fails_the_ingest_stage() {
    let dir = tempfile::tempdir().unwrap();
    let trades = dir.path().join("trades.csv");
    let mut csv = String::from("firm_id,security_id,date,side,units,price,capacity\n");
    for i in 0..50 {
        csv.push_str(&format!("f{i},s0,not-a-date,B,1,1.0,P\n"));
    }
    std::fs::write(&trades, csv).unwrap();
    let out = bin()
        .args([
            "score",
            "--trades",
            trades.to_str().unwrap(),
            "--months",
            "2009-01",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_run_produces_the_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("scenario.json");
    std::fs::write(
        &spec_path,
        serde_json::json!({
            "start_month": "2009-01",
            "n_months": 4,
            "seed": 5,
            "treated": {
                "n_blocks": 3, "firms_per_block": 3, "securities_per_block": 4,
                "diffuse_securities": 12, "diffuse_firms": 8, "diffuse_degree": 3
            },
            "clustered_returns": {"daily_sigma": 0.02, "distribution": {"kind": "student_t", "dof": 3.0}},
            "diffuse_returns": {"daily_sigma": 0.02, "distribution": {"kind": "normal"}}
        })
        .to_string(),
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = bin()
        .args(["synth", "--spec", spec_path.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let config_path = dir.path().join("run.json");
    let run_dir = dir.path().join("run");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "trades": data.join("trades.csv"),
            "prices": data.join("prices.csv"),
            "turnover": data.join("turnover.csv"),
            "months": {"start": "2009-01", "end": "2009-04"},
            "output_dir": run_dir,
            "seed": 3
        })
        .to_string(),
    )
    .unwrap();
    let out = bin()
        .args(["run", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    for file in ["scores.csv", "instability.csv", "verdicts.csv", "manifest.json", "coverage.csv"] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    // The manifest lists every output with a content hash.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    let outputs = manifest["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("scores.csv"));
    assert!(outputs.values().all(|v| v.as_str().unwrap().len() == 64));

    // Manifest completeness: the listed set equals the files on disk
    // (the manifest itself excluded).
    let mut on_disk = Vec::new();
    let mut stack = vec![run_dir.clone()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(&run_dir).unwrap().display().to_string();
                if rel != "manifest.json" {
                    on_disk.push(rel);
                }
            }
        }
    }
    on_disk.sort();
    let mut listed: Vec<String> = outputs.keys().cloned().collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    // Input hashes are recorded too.
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);

    // The lock file is released after the run.
    assert!(!run_dir.join("run.lock").exists());

    // Standalone stage subcommands work on the written outputs.
    let inst_dir = dir.path().join("inst");
    let out = bin()
        .args([
            "instability",
            "--prices",
            data.join("prices.csv").to_str().unwrap(),
            "--months",
            "2009-01:2009-04",
            "--window",
            "two-month",
            "--segment",
            "0:90",
            "--out",
            inst_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(inst_dir.join("instability.csv").exists());

    let cmp_dir = dir.path().join("cmp");
    let out = bin()
        .args([
            "compare",
            "--scores",
            run_dir.join("scores.csv").to_str().unwrap(),
            "--instability",
            run_dir.join("instability.csv").to_str().unwrap(),
            "--months",
            "2009-01:2009-04",
            "--trades",
            data.join("trades.csv").to_str().unwrap(),
            "--turnover",
            data.join("turnover.csv").to_str().unwrap(),
            "--out",
            cmp_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["verdicts.csv", "verdicts_covered.csv", "verdicts_control.csv"] {
        assert!(cmp_dir.join(file).exists(), "missing {file}");
    }
    // The recomputed verdicts agree with the pipeline's own.
    assert_eq!(
        std::fs::read(cmp_dir.join("verdicts.csv")).unwrap(),
        std::fs::read(run_dir.join("verdicts.csv")).unwrap()
    );

    let panel_path = dir.path().join("panel.csv");
    let out = bin()
        .args([
            "panel",
            "--scores",
            run_dir.join("scores.csv").to_str().unwrap(),
            "--prices",
            data.join("prices.csv").to_str().unwrap(),
            "--out",
            panel_path.to_str().unwrap(),
            "--describe",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(panel_path.exists());
    assert!(dir.path().join("panel.summary.csv").exists());
    let header = std::fs::read_to_string(&panel_path).unwrap();
    assert!(header.starts_with(
        "security_id,month,CLUST,VaR_chg,VaR_dev,VLuck_chg,MKTF,VIX,MOM12,MOM6,MCAP,ILLIQ,PB3,DY,LEV3"
    ));
}
