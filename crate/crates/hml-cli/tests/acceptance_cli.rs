//! CLI-level acceptance: byte-identical primary outputs for identical
//! seeds under any thread count (criterion 14), protocol row counts, exit
//! codes, and manifest integrity.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn hml() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hml"))
}

fn run_ok(args: &[String]) {
    let out = hml().args(args).output().expect("spawn hml");
    assert!(
        out.status.success(),
        "hml {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_ok_str(args: &[&str]) {
    run_ok(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>());
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

struct Workspace {
    root: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { root: tempfile::tempdir().expect("tempdir") }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

/// Shared fixture: postures + calibration bundle + params file.
fn setup(ws: &Workspace) {
    run_ok_str(&[
        "gen-postures",
        "--out",
        &ws.arg("postures.csv"),
        "--samples",
        "1200",
        "--joints",
        "19",
        "--seed",
        "9",
    ]);
    run_ok_str(&[
        "calibrate",
        "--postures",
        &ws.arg("postures.csv"),
        "--out",
        &ws.arg("calib"),
    ]);
    let params = r#"{"gamma":0.0664,"eta":3.1742,"mu":2.4581,"k_p":1.3098,"sigma_u":0.8764,"sigma_q":0.137,"a":10.0,"dt":0.01,"rho_x":0.25,"w0_scale":0.1}"#;
    fs::write(ws.path("params.json"), params).unwrap();
}

#[test]
fn criterion_14_cli_determinism() {
    let ws = Workspace::new();
    setup(&ws);

    // Reference metrics for the fit case.
    run_ok_str(&[
        "simulate",
        "--calib",
        &ws.arg("calib"),
        "--params",
        &ws.arg("params.json"),
        "--out",
        &ws.arg("fit-ref"),
        "--sessions",
        "1",
        "--trials",
        "10",
        "--seed",
        "77",
    ]);

    // (command name, args as a function of the output path, primary
    // output files relative to that path; empty = the path itself).
    type ArgsFor = Box<dyn Fn(&str) -> Vec<String>>;
    let svec = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<String>>();
    let calib = ws.arg("calib");
    let params = ws.arg("params.json");
    let postures = ws.arg("postures.csv");
    let fit_data = ws.arg("fit-ref/metrics.csv");

    let cases: Vec<(&str, ArgsFor, Vec<&str>)> = vec![
        (
            "gen-postures",
            Box::new(move |out| {
                svec(&["gen-postures", "--out", out, "--samples", "400", "--joints", "7", "--seed", "5"])
            }),
            vec![""],
        ),
        (
            "simulate",
            {
                let (calib, params) = (calib.clone(), params.clone());
                Box::new(move |out| {
                    svec(&[
                        "simulate",
                        "--calib",
                        &calib,
                        "--params",
                        &params,
                        "--out",
                        out,
                        "--sessions",
                        "1",
                        "--trials",
                        "12",
                        "--seed",
                        "5",
                        "--trajectories",
                        "--stride",
                        "10",
                    ])
                })
            },
            vec!["metrics.csv", "config.json", "params.json", "trajectories/trial_000_000.csv"],
        ),
        (
            "sweep",
            {
                let (calib, params) = (calib.clone(), params.clone());
                Box::new(move |out| {
                    svec(&[
                        "sweep", "--param", "eta", "--grid", "1.0,4.0", "--replicates", "4",
                        "--calib", &calib, "--params", &params, "--out", out, "--sessions", "1",
                        "--trials", "6", "--seed", "5",
                    ])
                })
            },
            vec![""],
        ),
        (
            "satisficing",
            {
                let (calib, params) = (calib.clone(), params.clone());
                Box::new(move |out| {
                    svec(&[
                        "satisficing",
                        "--calib",
                        &calib,
                        "--params",
                        &params,
                        "--out",
                        out,
                        "--thresholds",
                        "0.5,1.0",
                        "--rho",
                        "1.0,2.0",
                        "--times",
                        "0.5",
                        "--replicates",
                        "6",
                        "--seed",
                        "5",
                    ])
                })
            },
            vec![""],
        ),
        (
            "flexibility",
            {
                let params = params.clone();
                Box::new(move |out| {
                    svec(&[
                        "flexibility", "--params", &params, "--out", out, "--h-grid", "2,19",
                        "--sigma-u", "0.8764", "--joints", "19", "--replicates", "4", "--seed", "5",
                    ])
                })
            },
            vec![""],
        ),
        (
            "verify",
            Box::new(move |out| svec(&["verify", "--suite", "timescale", "--out", out, "--seed", "5"])),
            vec![""],
        ),
        (
            "fit",
            {
                let postures = postures.clone();
                Box::new(move |out| {
                    svec(&[
                        "fit", "--data", &fit_data, "--calib", &postures, "--out", out, "--runs",
                        "2", "--pop", "8", "--generations", "2", "--seed", "5",
                    ])
                })
            },
            vec![""],
        ),
    ];

    for (name, build_args, primary) in cases {
        let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
        for (run_idx, threads) in ["1", "2", "1"].iter().enumerate() {
            let out_name = format!("{name}-run{run_idx}");
            let out_path = ws.arg(&out_name);
            let mut args = build_args(&out_path);
            args.push("--threads".into());
            args.push((*threads).to_string());
            run_ok(&args);

            let files: Vec<Vec<u8>> = primary
                .iter()
                .map(|rel| {
                    if rel.is_empty() {
                        read(&ws.path(&out_name))
                    } else {
                        read(&ws.path(&out_name).join(rel))
                    }
                })
                .collect();
            outputs.push(files);
        }
        for run in 1..outputs.len() {
            assert_eq!(
                outputs[0], outputs[run],
                "{name}: primary outputs differ between runs/thread counts"
            );
        }
        println!("  {name}: byte-identical across reruns and thread counts");
    }
    println!("ACCEPTANCE 14 CLI determinism: PASS");
}

#[test]
fn default_simulate_emits_480_rows_and_verifiable_manifest() {
    let ws = Workspace::new();
    setup(&ws);
    run_ok_str(&[
        "simulate",
        "--calib",
        &ws.arg("calib"),
        "--params",
        &ws.arg("params.json"),
        "--out",
        &ws.arg("full"),
        "--seed",
        "3",
    ]);
    let metrics = fs::read_to_string(ws.path("full/metrics.csv")).unwrap();
    let rows = metrics.lines().count() - 1;
    assert_eq!(rows, 480, "default experiment must emit 480 metric rows");

    // The manifest's recorded digests match the files on disk.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("full/manifest.json")).unwrap()).unwrap();
    for entry in manifest["outputs"].as_array().unwrap() {
        let path = PathBuf::from(entry["path"].as_str().unwrap());
        let bytes = read(&path);
        let digest = {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(&bytes);
            h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        assert_eq!(digest, entry["sha256"].as_str().unwrap(), "digest mismatch for {path:?}");
    }
    println!("CLI protocol fidelity: PASS (480 rows, manifest digests verified)");
}

#[test]
fn calibrate_is_idempotent() {
    let ws = Workspace::new();
    setup(&ws);
    run_ok_str(&["calibrate", "--postures", &ws.arg("postures.csv"), "--out", &ws.arg("calib2")]);
    for file in ["pca.json", "mapping.json", "synergies.json"] {
        assert_eq!(
            read(&ws.path("calib").join(file)),
            read(&ws.path("calib2").join(file)),
            "{file} differs between identical calibrations"
        );
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let ws = Workspace::new();
    setup(&ws);

    // Unknown sweep parameter: usage error, exit 2.
    let out = hml()
        .args([
            "sweep",
            "--param",
            "rho_x",
            "--calib",
            &ws.arg("calib"),
            "--params",
            &ws.arg("params.json"),
            "--out",
            &ws.arg("nope.csv"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown parameter must exit 2");
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown sweep parameter"));

    // Unknown flag: clap usage error, exit 2.
    let out = hml().args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Domain error (missing input file): exit 1.
    let out = hml()
        .args([
            "simulate",
            "--calib",
            &ws.arg("missing-dir"),
            "--params",
            &ws.arg("params.json"),
            "--out",
            &ws.arg("x"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "missing inputs are a domain error");
}

#[test]
fn malformed_posture_cell_is_located() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.csv"), "time,q1,q2\n0.0,1.0,2.0\n0.02,1.0,oops\n").unwrap();
    let out = hml()
        .args(["calibrate", "--postures", &ws.arg("bad.csv"), "--out", &ws.arg("calib")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":3:3:"), "error must carry line and column, got: {stderr}");
}

#[test]
fn emit_plotdata_melts_any_output() {
    let ws = Workspace::new();
    setup(&ws);
    run_ok_str(&[
        "simulate",
        "--calib",
        &ws.arg("calib"),
        "--params",
        &ws.arg("params.json"),
        "--out",
        &ws.arg("exp"),
        "--sessions",
        "1",
        "--trials",
        "3",
        "--seed",
        "2",
    ]);
    run_ok_str(&[
        "emit-plotdata",
        "--input",
        &ws.arg("exp/metrics.csv"),
        "--out",
        &ws.arg("long.csv"),
    ]);
    let long = fs::read_to_string(ws.path("long.csv")).unwrap();
    assert!(long.starts_with("row,column,value\n"));
    // 3 rows x 10 columns + header.
    assert_eq!(long.lines().count(), 1 + 3 * 10);
}
