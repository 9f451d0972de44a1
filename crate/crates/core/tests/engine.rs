mod common;

use actdiff::engine::{run_ablation, run_experiment, AblationArm, RunReport};
use common::{report_pair, resume_matches, small_protocol, tiny};

#[test]
fn equal_seeds_give_identical_reports() {
    let (ds, cfg) = tiny(7);
    let (ja, jb) = report_pair(7);
    assert_eq!(ja, jb);
    let a = run_experiment::<f64>(&cfg, &ds, &small_protocol())
        .unwrap()
        .0;
    assert_eq!(a.to_json().unwrap(), ja);
    let back: RunReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);

    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_experiment::<f64>(&other, &ds, &small_protocol())
        .unwrap()
        .0;
    assert_ne!(c.epochs, a.epochs);
}

#[test]
fn single_precision_runs_are_deterministic_too() {
    let (ds, cfg) = tiny(8);
    let a = run_experiment::<f32>(&cfg, &ds, &small_protocol())
        .unwrap()
        .0;
    let b = run_experiment::<f32>(&cfg, &ds, &small_protocol())
        .unwrap()
        .0;
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn resume_from_file_reproduces_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(resume_matches(9, dir.path()));
}

#[test]
fn baseline_arm_equals_a_plain_run() {
    let (ds, cfg) = tiny(10);
    let plain = run_experiment::<f64>(&cfg, &ds, &small_protocol())
        .unwrap()
        .0;
    let arms = [AblationArm::baseline(), AblationArm::drop_encoder_loss()];
    let report = run_ablation::<f64>(&cfg, &ds, &small_protocol(), &arms, &[cfg.seed]).unwrap();
    assert_eq!(report.runs[0][0], plain);
    assert_eq!(
        report.runs[0][0].to_json().unwrap(),
        plain.to_json().unwrap()
    );
    assert_ne!(report.runs[1][0].epochs, plain.epochs);
    let base = report.arm("baseline").unwrap();
    assert_eq!(base.delta_accuracy, 0.0);
    assert!(base.delta_moc.iter().all(|&(_, _, d)| d == 0.0));
    assert_eq!(report.arm("drop_enc_loss").unwrap().mean_moc.len(), 2);
}
