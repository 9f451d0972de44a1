mod common;

use std::path::Path;

use actdiff::cli::dispatch;
use actdiff::metrics::MetricsReport;
use common::tiny;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("actdiff").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_and_evaluate_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let eval_dir = dir.path().join("eval");
    assert_eq!(
        run(&[
            "gen-data",
            "--train",
            "4",
            "--test",
            "2",
            "--seed",
            "3",
            "--out-dir",
            s(&data)
        ]),
        0
    );
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let (_, cfg) = tiny(0);
    let cfg_path = dir.path().join("config.json");
    cfg.save(&cfg_path).unwrap();
    let code = run(&[
        "train",
        "--config",
        s(&cfg_path),
        "--dataset",
        s(&manifest),
        "--precision",
        "f64",
        "--out-dir",
        s(&run_dir),
    ]);
    assert_eq!(code, 0);
    for f in [
        "checkpoint.afck",
        "config.json",
        "report.json",
        "metrics.json",
        "metrics.csv",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let ckpt = run_dir.join("checkpoint.afck");
    let code = run(&[
        "eval-lta",
        "--checkpoint",
        s(&ckpt),
        "--no-gt-length",
        "--r",
        "4",
        "--alphas",
        "0.3",
        "--betas",
        "0.2,0.5",
        "--precision",
        "f64",
        "--out-dir",
        s(&eval_dir),
    ]);
    assert_eq!(code, 0);
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics_lta.json")).unwrap())
            .unwrap();
    assert_eq!(report.lta.len(), 2);
    assert!(report.lta.iter().all(|c| (0.0..=100.0).contains(&c.moc)));

    assert_eq!(
        run(&[
            "eval-tas",
            "--checkpoint",
            s(&ckpt),
            "--precision",
            "f64",
            "--out-dir",
            s(&eval_dir)
        ]),
        0
    );
    assert!(eval_dir.join("metrics_tas.json").exists());

    assert_eq!(
        run(&[
            "eval-tas",
            "--checkpoint",
            s(&dir.path().join("missing.afck"))
        ]),
        1
    );
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--seeds", "1"]), 0);
}
