use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hptpc(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hptpc"));
    cmd.args(args).env_remove("HPTPC_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("run hptpc")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_operator(path: &Path, diag: &[f64]) {
    let d = diag.len();
    let rows: Vec<Vec<[f64; 2]>> = (0..d)
        .map(|r| (0..d).map(|c| [if r == c { diag[r] } else { 0.0 }, 0.0]).collect())
        .collect();
    fs::write(path, serde_json::json!({ "dim": d, "matrix": rows }).to_string()).unwrap();
}

#[test]
fn invert_compile_simulate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let s = |f: &str| p(f).to_str().unwrap().to_owned();

    ok(&hptpc(
        &[
            "invert",
            "--kind",
            "photon_loss",
            "--dim",
            "4",
            "--delta",
            "0.2",
            "--out",
            &s("inv.json"),
        ],
        &[],
    ));
    let inv = read(&p("inv.json"));
    assert_eq!(inv["representation"], "kraus");
    assert_eq!(inv["kraus"].as_array().unwrap().len(), 4);

    let out = hptpc(
        &["compile", "--in", &s("inv.json"), "--out", &s("c.json"), "--tree"],
        &[],
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("tree depth 3"));
    let c = read(&p("c.json"));
    assert_eq!(c["weights"].as_array().unwrap().len(), 5);
    assert!(c["gamma"].as_f64().unwrap() > 1.0);
    assert!(c["tree"]["root"]["node"].is_object());

    // |3><3| is a photon-loss eigen-population; O = Z_4 = diag(1,1,1,-1)
    write_operator(&p("rho.json"), &[0.0, 0.0, 0.0, 1.0]);
    write_operator(&p("obs.json"), &[1.0, 1.0, 1.0, -1.0]);
    let args = [
        "simulate",
        "--compiled",
        &s("c.json"),
        "--state",
        &s("rho.json"),
        "--obs",
        &s("obs.json"),
        "--shots",
        "200000",
        "--seed",
        "7",
        "--out",
        &s("r.json"),
    ];
    ok(&hptpc(&args, &[]));
    let r = read(&p("r.json"));
    // the inverse acting on the raw state |3><3|: exact mean from the table
    let exact = r["exact_mean"].as_f64().unwrap();
    let mean = r["mean"].as_f64().unwrap();
    let pred = r["predicted_variance_of_mean"].as_f64().unwrap();
    assert!((mean - exact).abs() < 5.0 * pred.sqrt());
    let emp = r["empirical_variance_of_mean"].as_f64().unwrap();
    assert!((emp / pred - 1.0).abs() < 0.05);
    assert_eq!(r["shots"], 200000);
    assert_eq!(r["seed"], 7);

    // same seed, different worker count: identical output
    let args2 = [
        "simulate",
        "--compiled",
        &s("c.json"),
        "--state",
        &s("rho.json"),
        "--obs",
        &s("obs.json"),
        "--shots",
        "200000",
        "--seed",
        "7",
        "--out",
        &s("r2.json"),
    ];
    ok(&hptpc(&args2, &[("HPTPC_THREADS", "3")]));
    assert_eq!(fs::read(p("r.json")).unwrap(), fs::read(p("r2.json")).unwrap());
}

#[test]
fn successive_maps_on_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let s = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    ok(&hptpc(
        &[
            "invert",
            "--kind",
            "dephasing",
            "--dim",
            "2",
            "--delta",
            "0.1",
            "--out",
            &s("inv.json"),
        ],
        &[],
    ));
    ok(&hptpc(&["compile", "--in", &s("inv.json"), "--out", &s("c.json")], &[]));
    let plus = serde_json::json!({"dim": 2, "matrix": [[[0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, 0.0]]]});
    fs::write(dir.path().join("rho.json"), plus.to_string()).unwrap();
    let x = serde_json::json!({"dim": 2, "matrix": [[[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]]});
    fs::write(dir.path().join("x.json"), x.to_string()).unwrap();
    let out = hptpc(
        &[
            "simulate",
            "--compiled",
            &s("c.json"),
            &s("c.json"),
            "--state",
            &s("rho.json"),
            "--obs",
            &s("x.json"),
            "--shots",
            "100000",
            "--seed",
            "3",
        ],
        &[],
    );
    ok(&out);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    // undoing dephasing twice on |+>: <X> = 1/(1-2δ)^2
    let exact = 1.0 / (0.8f64 * 0.8);
    assert!((r["exact_mean"].as_f64().unwrap() - exact).abs() < 1e-9);
    // every branch sends |+> to ±|±> with the matching weight sign: each shot returns exactly γ²
    assert!(r["predicted_variance_of_mean"].as_f64().unwrap() < 1e-20);
    assert!((r["mean"].as_f64().unwrap() - exact).abs() < 1e-9);
}

#[test]
fn invalid_map_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"dim":2,"representation":"kraus","kraus":[{"sign":1,"matrix":[[[0.5,0],[0,0]],[[0,0],[0.5,0]]]}]}"#,
    )
    .unwrap();
    let out = hptpc(
        &[
            "compile",
            "--in",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("c.json").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not trace preserving"));
}

#[test]
fn verify_passes_and_poison_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("v");
    let out = hptpc(&["verify", "--quick", "--out", out_dir.to_str().unwrap()], &[]);
    ok(&out);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
    for f in ["results.csv", "results.json", "run_manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let out = hptpc(
        &["verify", "--quick", "--poison", "--out", out_dir.to_str().unwrap()],
        &[],
    );
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[FAIL] compiler: TP precondition"), "{stdout}");
    assert_eq!(read(&out_dir.join("run_manifest.json"))["passed"], false);
}

#[test]
fn fig3_quick_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path, threads: &str| {
        ok(&hptpc(
            &["fig3", "--quick", "--seed", "42", "--out", out.to_str().unwrap()],
            &[("HPTPC_THREADS", threads)],
        ))
    };
    run(&a, "1");
    run(&b, "8");
    let csv_a = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(read(&a.join("run_manifest.json"))["workers"], 1);
    assert_eq!(read(&b.join("run_manifest.json"))["workers"], 8);
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("schema_version,"));
    assert_eq!(text.lines().count(), 1 + 11);
}

#[test]
fn config_file_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let cfg = serde_json::json!({
        "experiment": "fig2",
        "kinds": ["dephasing"],
        "deltas": [0.0, 0.2],
        "dims": [2],
        "n_states": 2,
        "n_observables": 2,
        "shots": 100,
        "repetitions": 50,
        "haar_samples": 0,
        "corpus_size": 0,
        "paired": true,
        "seed": 5
    });
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out_dir = dir.path().join("o");
    ok(&hptpc(
        &[
            "fig2",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    ));
    let table = read(&out_dir.join("results.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["pairs"], 2);
    assert_eq!(read(&out_dir.join("run_manifest.json"))["config"]["seed"], 5);

    // a fig2 config cannot drive fig3
    let out = hptpc(&["fig3", "--config", cfg_path.to_str().unwrap()], &[]);
    assert!(!out.status.success());
}
