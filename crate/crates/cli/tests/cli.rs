use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str =
    "epochs = 2\n\n[task]\nkind = \"framewise\"\ntrain_batches = 3\nholdout_batches = 1\n";

const BAC: &str = r#"epochs = 2

[model.options]
bottleneck = 512
dropout = 0.2

[policy]
weight_scheme = "sawb"
weight_bits = 4
act_scheme = "bac"
act_bits = 4

[task]
kind = "framewise"
train_batches = 3
holdout_batches = 1
"#;

fn qlstm4(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlstm4"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qlstm4(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(configs: &[(&str, &str)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in configs {
        fs::write(dir.path().join(name), text).unwrap();
    }
    dir
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let t = setup(&[("c.toml", SMALL)]);
    ok(
        t.path(),
        &["train", "--config", "c.toml", "--epochs", "0", "--out", "r"],
    );
    assert!(t.path().join("r/checkpoint.ql4").exists());
    assert!(!t.path().join("r/metrics.csv").exists());

    ok(
        t.path(),
        &[
            "finetune",
            "--config",
            "c.toml",
            "--from",
            "r/checkpoint.ql4",
            "--epochs",
            "0",
            "--out",
            "f",
        ],
    );
    // same config and seed, so fine-tuning for zero epochs is a copy
    assert_eq!(
        fs::read(t.path().join("f/checkpoint.ql4")).unwrap(),
        fs::read(t.path().join("r/checkpoint.ql4")).unwrap()
    );
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let t = setup(&[("c.toml", SMALL)]);
    for out in ["a", "b"] {
        ok(t.path(), &["train", "--config", "c.toml", "--out", out]);
    }
    ok(
        t.path(),
        &["train", "--config", "c.toml", "--out", "c", "--seed", "9"],
    );
    let read = |p: &str| fs::read_to_string(t.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_ne!(read("a/metrics.csv"), read("c/metrics.csv"));
    let csv = read("a/metrics.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# qlstm4 metrics v1"));
    assert!(lines
        .next()
        .unwrap()
        .starts_with("epoch,lr,train_loss,holdout_loss,accuracy"));
    assert_eq!(lines.count(), 2);
    // the resolved config reproduces the run
    assert!(read("a/run.toml").contains("train_batches = 3"));
}

#[test]
fn bac_logs_fixed_input_bounds_beyond_the_first_layer() {
    let t = setup(&[("c.toml", BAC)]);
    let out = qlstm4(
        t.path(),
        &["train", "--config", "c.toml", "--out", "r", "--epochs", "1"],
    );
    assert!(out.status.success());
    let log = String::from_utf8(out.stderr).unwrap();
    for layer in 1..4 {
        assert!(
            log.contains(&format!("lstm.{layer}.input: BacFixed fixed bound 1.25")),
            "{log}"
        );
        assert!(
            log.contains(&format!("lstm.{layer}.hidden: BacFixed fixed bound 1\n")),
            "{log}"
        );
    }
    assert!(log.contains("lstm.0.input: Pact learned"), "{log}");
    let csv = fs::read_to_string(t.path().join("r/metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    let col = header
        .iter()
        .position(|&h| h == "bound:lstm.2.input")
        .unwrap();
    assert_eq!(row[col], "1.25");
}

#[test]
fn config_errors_exit_1_with_line_numbers() {
    let t = setup(&[
        (
            "typo.toml",
            "epochs = 1\n\n[policy]\nweight_schem = \"sawb\"\n",
        ),
        (
            "bad_value.toml",
            "[policy]\nweight_bits = 4\nweight_scheme = \"sawb\"\nweight_levels = \"even\"\n",
        ),
        ("bad_policy.toml", "[policy]\nweight_scheme = \"pact\"\n"),
    ]);
    let out = qlstm4(t.path(), &["train", "--config", "typo.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("typo.toml") && err.contains("line 4") && err.contains("weight_schem"),
        "{err}"
    );

    let out = qlstm4(t.path(), &["train", "--config", "bad_value.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 4"));

    let out = qlstm4(t.path(), &["train", "--config", "bad_policy.toml"]);
    assert_eq!(out.status.code(), Some(1));

    for args in [
        &["train"][..],
        &["frobnicate"],
        &["train", "--config", "missing.toml"],
        &["perf", "--beams", "0"],
    ] {
        assert_eq!(qlstm4(t.path(), args).status.code(), Some(1), "{args:?}");
    }
    // nothing was written by the failed runs
    assert!(!t.path().join("runs").exists());
}

#[test]
fn divergence_exits_2_and_keeps_the_last_good_state() {
    let div = "epochs = 3\n[optimizer]\nkind = \"sgd_momentum\"\n[schedule]\nkind = \"constant\"\nlr0 = 1e30\n[task]\nkind = \"framewise\"\ntrain_batches = 2\nholdout_batches = 1\n";
    let t = setup(&[("div.toml", div)]);
    let out = qlstm4(t.path(), &["train", "--config", "div.toml", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("diverged"));
    assert!(t.path().join("r/checkpoint.ql4").exists());
}

#[test]
fn finetune_refuses_a_different_architecture() {
    let other = format!("{SMALL}\n[model.options]\nlayers = 2\n");
    let t = setup(&[("c.toml", SMALL), ("other.toml", &other), ("bac.toml", BAC)]);
    ok(
        t.path(),
        &["train", "--config", "c.toml", "--epochs", "1", "--out", "r"],
    );
    let out = qlstm4(
        t.path(),
        &[
            "finetune",
            "--config",
            "other.toml",
            "--from",
            "r/checkpoint.ql4",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("hash"));
    // a float checkpoint initializes a quantized run of the same model
    ok(
        t.path(),
        &[
            "finetune",
            "--config",
            "bac.toml",
            "--from",
            "r/checkpoint.ql4",
            "--epochs",
            "1",
            "--out",
            "q",
        ],
    );
    assert!(t.path().join("q/metrics.csv").exists());
}

fn deviation(stdout: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max abs deviation"))
        .unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn pack_and_infer_match_the_float_path() {
    let t = setup(&[("fp.toml", SMALL), ("bac.toml", BAC)]);
    for (cfg, out) in [("fp.toml", "fp"), ("bac.toml", "bac")] {
        ok(
            t.path(),
            &["train", "--config", cfg, "--epochs", "1", "--out", out],
        );
        let ck = format!("{out}/checkpoint.ql4");
        let packed = format!("{out}/model.qpk");
        ok(
            t.path(),
            &["pack", "--config", cfg, "--from", &ck, "--out", &packed],
        );
        let report = ok(
            t.path(),
            &[
                "infer",
                "--config",
                cfg,
                "--from",
                &packed,
                "--compare",
                &ck,
                "--out",
                &format!("{out}/infer.csv"),
            ],
        );
        let dev = deviation(&report);
        if cfg == "fp.toml" {
            assert_eq!(dev, 0.0, "{report}");
        } else {
            assert!(dev < 1e-4, "{report}");
        }
        let csv = fs::read_to_string(t.path().join(format!("{out}/infer.csv"))).unwrap();
        assert!(csv.starts_with("batch,correct,total,max_abs_dev\n"));
    }
}

#[test]
fn pack_rejects_full_level_weights() {
    let cfg = SMALL.replace(
        "[task]",
        "[policy]\nweight_scheme = \"max\"\nweight_bits = 4\nweight_levels = \"full\"\n\n[task]",
    );
    let t = setup(&[("c.toml", &cfg)]);
    ok(
        t.path(),
        &["train", "--config", "c.toml", "--epochs", "0", "--out", "r"],
    );
    let out = qlstm4(
        t.path(),
        &["pack", "--config", "c.toml", "--from", "r/checkpoint.ql4"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("odd-level"));
}

#[test]
fn params_reports_the_transducer_budget() {
    let t = tempfile::tempdir().unwrap();
    let text = ok(t.path(), &["params"]);
    assert!(text.contains("first layer share: 8.8%"), "{text}");
    assert!(text.contains("int4 share: 90.2%"), "{text}");
    assert!(text.contains("prediction share: 4.2%"), "{text}");

    let json: serde_json::Value =
        serde_json::from_str(&ok(t.path(), &["params", "--json", "--out", "p.json"])).unwrap();
    let shares: f64 = json["fractions"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((shares - 1.0).abs() < 1e-12);
    let layers: u64 = json["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["params"].as_u64().unwrap())
        .sum();
    assert_eq!(layers, json["total"].as_u64().unwrap());
    assert!(t.path().join("p.json").exists());

    let hmm = ok(
        t.path(),
        &[
            "params", "--preset", "hmm300", "--policy", "int4-bac", "--beam", "1",
        ],
    );
    let q: f64 = hmm
        .lines()
        .find_map(|l| l.strip_prefix("quantized share: "))
        .unwrap()
        .trim_end_matches('%')
        .parse()
        .unwrap();
    assert!(q >= 99.5, "{hmm}");
}

#[test]
fn perf_reproduces_the_speedup_table() {
    let t = tempfile::tempdir().unwrap();
    let text = ok(
        t.path(),
        &["perf", "--beams", "4,8,16", "--out", "sweep.csv"],
    );
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(2)
        .map(|l| {
            l.split_whitespace()
                .map(|x| x.trim_end_matches('x').parse().unwrap())
                .collect()
        })
        .collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(
            (r[1] / 2.6 - 1.0).abs() <= 0.1
                && (r[2] / 3.3 - 1.0).abs() <= 0.1
                && (r[4] / 2.6 - 1.0).abs() <= 0.1,
            "{r:?}"
        );
        assert_eq!(r[3], 1.0);
    }
    let csv = fs::read_to_string(t.path().join("sweep.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("label,beam,frames,encoder_ms,prediction_ms,joint_ms,total_ms")
    );
    assert_eq!(csv.lines().count(), 7);

    // a written profile round-trips through --profile, and calibration is
    // a fixed point on the shipped one
    let cal = ok(t.path(), &["perf", "--calibrate", "--beams", "8"]);
    let toml_start = cal.find("name = ").unwrap();
    fs::write(t.path().join("p.toml"), &cal[toml_start..]).unwrap();
    let again = ok(
        t.path(),
        &["perf", "--profile", "p.toml", "--beams", "4,8,16"],
    );
    assert_eq!(
        again.lines().skip(1).collect::<Vec<_>>(),
        text.lines().skip(1).collect::<Vec<_>>()
    );
}

#[test]
fn fit_sawb_writes_a_table() {
    let t = tempfile::tempdir().unwrap();
    ok(
        t.path(),
        &["fit-sawb", "--samples", "5000", "--out", "sawb.txt"],
    );
    let text = fs::read_to_string(t.path().join("sawb.txt")).unwrap();
    assert!(
        text.lines().filter(|l| !l.starts_with('#')).count() >= 14,
        "{text}"
    );
}
