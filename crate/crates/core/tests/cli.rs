use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fed3cr");

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.toml")
        .to_string_lossy()
        .into_owned()
}

fn fed3cr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FED3CR_SEED").output().unwrap()
}

fn short_run(out: &Path, workers: &str, extra: &[&str]) -> Output {
    let out = format!("output_dir={}", out.display());
    let cfg = toy_config();
    let mut args = vec!["--workers", workers, "run", "--config", &cfg];
    args.extend_from_slice(extra);
    args.extend(["--training.rounds=4", &out]);
    fed3cr(&args)
}

#[test]
fn run_is_reproducible_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let a = short_run(&dir.path().join("a"), "1", &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = short_run(&dir.path().join("b"), "4", &[]);
    assert!(b.status.success());
    let read = |p: &str| std::fs::read(dir.path().join(p).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let summary: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(summary["best_hr_round"].as_u64().unwrap() >= 1);
    for f in ["manifest.json", "record.json", "server.ckpt"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    // the manifest reproduces the run
    let manifest = dir.path().join("a/manifest.json");
    let c = fed3cr(&[
        "run",
        "--config",
        manifest.to_str().unwrap(),
        &format!("output_dir={}", dir.path().join("c").display()),
    ]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert_eq!(read("a"), read("c"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert!(short_run(&out, "2", &[]).status.success());
    assert_eq!(short_run(&out, "2", &[]).status.code(), Some(2));
    assert!(short_run(&out, "2", &["--force"]).status.success());

    let bad = fed3cr(&["run", "--config", &toy_config(), "--training.beta_x=1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("training.beta_x"));

    let missing = fed3cr(&["dataset", "stats", "/nonexistent/ratings.dat"]);
    assert_eq!(missing.status.code(), Some(3));

    let bad_file = dir.path().join("bad.dat");
    std::fs::write(&bad_file, "1::2::5::100\nnot a record\n").unwrap();
    let parse = fed3cr(&["dataset", "stats", bad_file.to_str().unwrap()]);
    assert_eq!(parse.status.code(), Some(3));

    let diverge = fed3cr(&[
        "run",
        "--config",
        &toy_config(),
        "--training.rounds=2",
        "--training.grad_clip=0",
        "--training.lr=1e300",
        "--training.init_std=1e100",
        &format!("output_dir={}", dir.path().join("nan").display()),
    ]);
    assert_eq!(diverge.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverge.stderr));
    assert!(dir.path().join("nan/error.json").exists());
}

#[test]
fn seed_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.args([
            "run",
            "--config",
            &toy_config(),
            "--training.rounds=2",
            &format!("output_dir={}", dir.path().join(name).display()),
        ]);
        match seed {
            Some(s) => cmd.env("FED3CR_SEED", s),
            None => cmd.env_remove("FED3CR_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(name).join("manifest.json")).unwrap()).unwrap();
        (m["training"]["seed"].as_u64().unwrap(), std::fs::read(dir.path().join(name).join("metrics.csv")).unwrap())
    };
    let (s0, m0) = run("default", None);
    let (s7, m7) = run("seven", Some("7"));
    assert_eq!((s0, s7), (0, 7));
    assert_ne!(m0, m7);
    let mut cmd = Command::new(BIN);
    cmd.args(["run", "--config", &toy_config()]).env("FED3CR_SEED", "minus one");
    assert_eq!(cmd.output().unwrap().status.code(), Some(2));
}

#[test]
fn ablate_and_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = fed3cr(&[
        "ablate",
        "--variants",
        "C0,C1",
        "--config",
        &toy_config(),
        "--training.rounds=3",
        &format!("output_dir={}", dir.path().join("abl").display()),
    ]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,hr10,ndcg10");
    assert!(lines[1].starts_with("C0,") && lines[2].starts_with("C1,") && lines.len() == 3);

    let s = fed3cr(&[
        "sweep",
        "--param",
        "layers",
        "--values",
        "2,3,4",
        "--config",
        &toy_config(),
        "--training.rounds=2",
        &format!("output_dir={}", dir.path().join("sw").display()),
    ]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("value,hr10,ndcg10\n2,"));

    let bad = fed3cr(&["sweep", "--param", "gamma", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dataset_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    assert!(fed3cr(&["dataset", "toy", "--out", csv.to_str().unwrap()]).status.success());
    let out = fed3cr(&["dataset", "stats", csv.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 5);
    for k in ["clients", "items", "interactions", "avg", "sparsity"] {
        assert!(keys.contains(&k), "{k}");
    }
    let (n, m, k) = (v["clients"].as_f64().unwrap(), v["items"].as_f64().unwrap(), v["interactions"].as_f64().unwrap());
    assert_eq!(n, 20.0);
    assert!((v["avg"].as_f64().unwrap() - k / n).abs() < 1e-12);
    assert!((v["sparsity"].as_f64().unwrap() - (1.0 - k / (n * m))).abs() < 1e-12);

    let dat = dir.path().join("three.dat");
    std::fs::write(&dat, "1::10::5::1\n1::11::3::2\n2::10::4::3\n").unwrap();
    let out = fed3cr(&["dataset", "stats", dat.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((v["clients"].as_u64(), v["items"].as_u64()), (Some(2), Some(2)));
}

#[test]
fn degradation_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let delta = dir.path().join("delta.csv");
    let out = fed3cr(&["degradation", "--delta-csv", delta.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["distances"][0].as_f64().unwrap() - 1.0541).abs() < 1e-3);
    assert!(v["satisfied"].as_array().unwrap().iter().all(|s| s.as_bool() == Some(true)));
    let csv = std::fs::read_to_string(&delta).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("0,1.41421,2\n"));

    let optima = dir.path().join("optima.json");
    std::fs::write(&optima, "[[2.0, -1.0], [-2.0, 1.0]]").unwrap();
    let out = fed3cr(&["degradation", "--optima", optima.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["distances"][0].as_f64().unwrap() - v["bounds"][0].as_f64().unwrap()).abs() < 1e-12);

    let out = fed3cr(&["degradation", "--random", "50"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["violations"].as_u64(), Some(0));

    let out = fed3cr(&["degradation", "--mode", "toy"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["degraded"].as_bool(), Some(true));

    let out = fed3cr(&[
        "degradation",
        "--mode",
        "probe",
        "--config",
        &toy_config(),
        "--delta-csv",
        delta.to_str().unwrap(),
        "--training.rounds=3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["across_block_mean"].as_f64().unwrap() > v["within_block_mean"].as_f64().unwrap());
    assert_eq!(std::fs::read_to_string(&delta).unwrap().lines().count(), 20);
}
