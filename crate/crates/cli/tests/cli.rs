use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quadmech_cli::audit_cmd::{audit, AUDIT_FILE};
use quadmech_cli::config::RunConfig;
use quadmech_cli::data::Metric;
use quadmech_cli::results::{read_results, ResultRow, ResultWriter, METHOD_MECHANISM, METHOD_ZERO_SHOT};
use quadmech_cli::run::{self, RESULTS_FILE};
use quadmech_cli::{report, CliError};
use serde_json::{json, Value};

fn tiny() -> Value {
    json!({
        "task": { "kind": "sinusoidal", "pretrain_n": 200, "finetune_n": 100, "test_n": 100 },
        "model": { "input_dim": 5, "output_dim": 1, "hidden": [4], "activation": "relu" },
        "pretrain": { "epochs": 2, "lr": 0.01, "batch_size": 32, "seed": 0 },
        "mechanism": { "lambda": 0.1, "radii": [0.1, 0.5], "epsilons": [1, 10], "p_tildes": [5] },
        "eval": { "n_candidate_samples": 20 },
        "output_dir": "run",
        "seed": 3
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn load(dir: &Path, v: &Value) -> RunConfig {
    RunConfig::load(&write_config(dir, v)).unwrap()
}

fn bin(args: &[&str], threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_quadmech"));
    c.args(args);
    match threads {
        Some(t) => c.env(run::THREADS_ENV, t),
        None => c.env_remove(run::THREADS_ENV),
    };
    c.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pretrain_then_finetune_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let r = bin(&["pretrain", "--config", c, "--out", o], None);
    assert!(r.status.success(), "{}", stderr(&r));
    for f in [
        run::CHECKPOINT_FILE,
        run::TRACE_FILE,
        run::PRETRAIN_SUMMARY_FILE,
        "config.json",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let r = bin(&["finetune", "--config", c, "--out", o], None);
    assert!(r.status.success(), "{}", stderr(&r));
    let rows = read_results(&out.join(RESULTS_FILE)).unwrap();
    let mech: Vec<&ResultRow> = rows.iter().filter(|r| r.method == METHOD_MECHANISM).collect();
    assert_eq!(mech.len(), 4);
    assert!(mech
        .iter()
        .all(|r| r.p_tilde == 5 && r.n_models == 20 && r.metric_name == Metric::Mse && r.seed == 3));
    // p̃ → R → ε order.
    let keys: Vec<(f64, f64)> = mech.iter().map(|r| (r.radius, r.epsilon)).collect();
    assert_eq!(keys, [(0.1, 1.0), (0.1, 10.0), (0.5, 1.0), (0.5, 10.0)]);
    let zs = rows.iter().find(|r| r.method == METHOD_ZERO_SHOT).unwrap();
    assert!(zs.epsilon.is_infinite() && zs.std == 0.0 && zs.n_models == 1);

    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema"], 1);
    let cmds = manifest["commands"].as_object().unwrap();
    assert!(cmds.contains_key("pretrain") && cmds.contains_key("finetune"));
    let art = &cmds["finetune"]["artifacts"][0];
    assert_eq!(art["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert!(bin(&["pretrain", "--config", c, "--out", o, "--seed", "11"], None)
        .status
        .success());
    let r = bin(&["finetune", "--config", c, "--out", o, "--seed", "11"], None);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(read_results(&out.join(RESULTS_FILE))
        .unwrap()
        .iter()
        .all(|r| r.seed == 11));
}

#[test]
fn single_candidate_gives_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["eval"]["n_candidate_samples"] = json!(1);
    let cfg = load(dir.path(), &v);
    let out = dir.path().join("out");
    run::pretrain(&cfg, &out).unwrap();
    let res = run::finetune(&cfg, &out, &run::default_checkpoint(&out)).unwrap();
    for r in res.rows.iter().filter(|r| r.method == METHOD_MECHANISM) {
        assert_eq!(r.std, 0.0);
        assert_eq!(r.n_models, 1);
    }
}

#[test]
fn finetune_output_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    assert!(bin(&["pretrain", "--config", c, "--out", a.to_str().unwrap()], None)
        .status
        .success());
    let ckpt = run::default_checkpoint(&a);
    let mut outputs = Vec::new();
    for (name, threads) in [("b", Some("1")), ("c", Some("1")), ("d", Some("3"))] {
        let o = dir.path().join(name);
        let r = bin(
            &[
                "finetune",
                "--config",
                c,
                "--out",
                o.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
            ],
            threads,
        );
        assert!(r.status.success(), "{}", stderr(&r));
        outputs.push(std::fs::read(o.join(RESULTS_FILE)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("out");
    let r = bin(
        &[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        Some("zero"),
    );
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains(run::THREADS_ENV), "{}", stderr(&r));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Box<dyn Fn(&mut Value)>> = vec![
        Box::new(|v| v["mechanism"]["epsilons"] = json!([])),
        Box::new(|v| v["mechanism"]["epsilons"] = json!([0.0])),
        Box::new(|v| v["mechanism"]["radii"] = json!([-0.1])),
        Box::new(|v| v["mechanism"]["p_tildes"] = json!([0])),
        Box::new(|v| v["mechanism"]["inflation"] = json!(0.5)),
        Box::new(|v| v["eval"]["n_candidate_samples"] = json!(0)),
        Box::new(|v| v["model"]["input_dim"] = json!(3)),
        Box::new(|v| v["unknown_field"] = json!(1)),
        Box::new(|v| v["pretrain"]["batch_size"] = json!(0)),
    ];
    for (k, f) in cases.iter().enumerate() {
        let mut v = tiny();
        f(&mut v);
        let p = write_config(dir.path(), &v);
        assert!(
            matches!(RunConfig::load(&p), Err(CliError::ConfigInvalid(_))),
            "case {k}"
        );
    }
    let r = bin(
        &["pretrain", "--config", dir.path().join("absent.json").to_str().unwrap()],
        None,
    );
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_mnist_files_are_reported_as_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["task"] = json!({
        "kind": "mnist", "images": "nope/images", "labels": "nope/labels",
        "pretrain_n": 10, "finetune_n": 10, "test_n": 10
    });
    v["model"] = json!({ "input_dim": 784, "output_dim": 10, "hidden": [4], "activation": "relu" });
    let cfg = load(dir.path(), &v);
    match run::pretrain(&cfg, &dir.path().join("out")) {
        Err(CliError::DataMissing { path }) => assert!(path.ends_with("nope/images"), "{path:?}"),
        other => panic!("expected DataMissing, got {:?}", other.err()),
    }
}

#[test]
fn checkpoint_for_another_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), &tiny());
    let out = dir.path().join("out");
    run::pretrain(&cfg, &out).unwrap();
    let mut v = tiny();
    v["model"]["hidden"] = json!([6]);
    let other = load(dir.path(), &v);
    let e = run::finetune(&other, &dir.path().join("o2"), &run::default_checkpoint(&out)).unwrap_err();
    assert!(matches!(e, CliError::ConfigInvalid(_)), "{e}");
    let e = run::finetune(&cfg, &dir.path().join("o3"), &dir.path().join("none.bin")).unwrap_err();
    assert!(matches!(e, CliError::DataMissing { .. }), "{e}");
}

#[test]
fn tabular_task_uses_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,label\n");
    for i in 0..90 {
        let c = i % 3;
        let x = c as f64 + 0.1 * ((i * 7) % 5) as f64;
        text.push_str(&format!("{x},{},{c}\n", -x));
    }
    std::fs::write(dir.path().join("pre.csv"), &text).unwrap();
    std::fs::write(dir.path().join("ft.csv"), &text).unwrap();
    let mut v = tiny();
    v["task"] = json!({ "kind": "tabular", "pretrain": "pre.csv", "finetune": "ft.csv", "test_n": 30 });
    v["model"] = json!({ "input_dim": 2, "output_dim": 3, "hidden": [4], "activation": "tanh" });
    let cfg = load(dir.path(), &v);
    let out = dir.path().join("out");
    run::pretrain(&cfg, &out).unwrap();
    let res = run::finetune(&cfg, &out, &run::default_checkpoint(&out)).unwrap();
    for r in &res.rows {
        assert_eq!(r.metric_name, Metric::Accuracy);
        assert!((0.0..=1.0).contains(&r.mean));
    }
}

#[test]
fn empty_audit_list_succeeds_with_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["audit"] = json!({ "checks": [], "scale": "quick" });
    let cfg = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    let r = bin(
        &[
            "audit",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert_eq!(std::fs::read(out.join(AUDIT_FILE)).unwrap(), b"");
}

#[test]
fn broken_sensitivity_makes_the_audit_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny();
    v["audit"] = json!({ "checks": ["epsilon"], "scale": "quick" });
    let cfg = load(dir.path(), &v);
    let ok = audit(&cfg, &dir.path().join("ok"), false).unwrap();
    assert_eq!(ok.exit_code(), 0);
    let bad = audit(&cfg, &dir.path().join("bad"), true).unwrap();
    assert!(bad.failures > 0);
    assert_eq!(bad.exit_code(), 1);

    let p = write_config(dir.path(), &v);
    let out = dir.path().join("bin");
    let r = bin(
        &[
            "audit",
            "--config",
            p.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--broken-delta-u",
        ],
        None,
    );
    assert_eq!(r.status.code(), Some(1));
    let lines = std::fs::read_to_string(out.join(AUDIT_FILE)).unwrap();
    assert_eq!(lines.lines().count(), bad.reports.len());
}

fn row(method: &str, eps: f64, metric: Metric) -> ResultRow {
    ResultRow {
        method: method.into(),
        epsilon: eps,
        radius: 0.1,
        p_tilde: 20,
        metric_name: metric,
        mean: 0.2,
        std: 0.01,
        n_models: 500,
        seed: 0,
    }
}

fn write_rows(path: &Path, rows: &[ResultRow]) {
    let mut w = ResultWriter::new(std::fs::File::create(path).unwrap()).unwrap();
    w.write_rows(rows).unwrap();
}

#[test]
fn report_rejects_mixed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mixed.csv");
    write_rows(
        &p,
        &[
            row(METHOD_MECHANISM, 1.0, Metric::Mse),
            row(METHOD_MECHANISM, 2.0, Metric::Accuracy),
        ],
    );
    let e = report::report(&[p.clone()], &dir.path().join("rep")).unwrap_err();
    assert!(matches!(e, CliError::SchemaMismatch { .. }), "{e}");
    let r = bin(
        &[
            "report",
            p.to_str().unwrap(),
            "--out",
            dir.path().join("rep2").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn report_on_a_single_row_writes_an_svg() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.csv");
    write_rows(&p, &[row(METHOD_MECHANISM, 1.0, Metric::Mse)]);
    let out = dir.path().join("rep");
    let r = bin(&["report", p.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(r.status.success(), "{}", stderr(&r));
    let svg = std::fs::read_to_string(out.join("one.svg")).unwrap();
    assert!(svg.starts_with("<?xml") || svg.starts_with("<svg"));
    assert!(svg.contains("version=\"1.1\""));
    assert!(out.join(report::SUMMARY_FILE).exists());
}

#[test]
fn partial_rows_are_kept_when_a_cell_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny();
    // At huge ε the draws sit at the mean inside the ball; at tiny ε almost
    // every proposal lands outside it.
    v["mechanism"] = json!({
        "lambda": 0.1, "radii": [10.0], "epsilons": [1e9, 1e-9], "p_tildes": [5],
        "sampler": "rejection", "max_rejection_proposals": 100000
    });
    let cfg = load(dir.path(), &v);
    let out = dir.path().join("out");
    run::pretrain(&cfg, &out).unwrap();
    let e = run::finetune(&cfg, &out, &run::default_checkpoint(&out)).unwrap_err();
    assert!(
        matches!(e, CliError::Core(quadmech::Error::ProposalBudgetExceeded { .. })),
        "{e}"
    );
    let text = std::fs::read_to_string(out.join(RESULTS_FILE)).unwrap();
    assert!(text.starts_with("#schema=1\n"));
    let rows = read_results(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].method == METHOD_MECHANISM && rows[0].epsilon == 1e9);
}
