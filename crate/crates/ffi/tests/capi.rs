use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use actdiff::data::{generate_dataset, GrammarSpec};
use actdiff::engine::{infer_lta, infer_tas, prepare_videos, TrainConfig, Trainer};
use actdiff::numerics::Tensor;
use actdiff_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trains a few epochs and saves a single-precision checkpoint.
fn checkpoint(dir: &Path) -> (PathBuf, Trainer<f32>, Tensor<f32>) {
    let spec = GrammarSpec::default();
    let ds = generate_dataset(&spec, 3, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut cfg = TrainConfig::desk(spec.feature_dim(), spec.num_classes);
    cfg.epochs = 2;
    cfg.sample_rate = 8;
    cfg.inference_steps = 3;
    let prepared = prepare_videos::<f32>(&ds.train_videos(), &cfg).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.fit(&prepared).unwrap();
    let path = dir.join("model.afck");
    trainer.checkpoint().save(&path).unwrap();
    let features = ds.test_videos()[0].features.clone();
    (path, trainer, features)
}

fn load(path: &Path) -> *mut ActdiffModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { actdiff_model_load(c.as_ptr(), &mut model) },
        ActdiffStatus::Ok
    );
    assert!(!model.is_null());
    model
}

#[test]
fn inference_through_the_c_interface_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, trainer, x) = checkpoint(dir.path());
    let cfg = trainer.config().clone();
    let model = trainer.model().unwrap();
    let sched = cfg.schedule().unwrap();
    let handle = load(&path);
    let (t, d) = (x.rows(), x.cols());
    unsafe {
        assert_eq!(actdiff_model_feature_dim(handle) as usize, d);
        assert_eq!(
            actdiff_model_num_classes(handle) as usize,
            cfg.model.num_classes
        );

        let mut out = vec![u32::MAX; t];
        assert_eq!(
            actdiff_segment(handle, x.data().as_ptr(), t, d, 11, out.as_mut_ptr()),
            ActdiffStatus::Ok
        );
        let want = infer_tas(&model, &x, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(out.iter().map(|&l| l as usize).collect::<Vec<_>>(), want);

        let (n_o, horizon) = (t / 3, t / 4);
        let prefix = x.slice_rows(0, n_o);
        let mut out = vec![u32::MAX; n_o + horizon];
        let status = actdiff_anticipate(
            handle,
            prefix.data().as_ptr(),
            n_o,
            d,
            horizon,
            5,
            out.as_mut_ptr(),
        );
        assert_eq!(status, ActdiffStatus::Ok);
        let want = infer_lta(
            &model,
            &prefix,
            horizon,
            &sched,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(out.iter().map(|&l| l as usize).collect::<Vec<_>>(), want);

        let status = actdiff_segment(handle, x.data().as_ptr(), t, d - 1, 11, out.as_mut_ptr());
        assert_eq!(status, ActdiffStatus::Shape);
        let status = actdiff_anticipate(
            handle,
            prefix.data().as_ptr(),
            n_o,
            d,
            0,
            5,
            out.as_mut_ptr(),
        );
        assert_eq!(status, ActdiffStatus::InvalidArgument);
        let msg = CStr::from_ptr(actdiff_last_error()).to_str().unwrap();
        assert!(msg.contains("horizon"), "{msg}");
        assert_eq!(
            actdiff_segment(ptr::null(), x.data().as_ptr(), t, d, 11, out.as_mut_ptr()),
            ActdiffStatus::NullPointer
        );
        actdiff_model_free(handle);
    }
}

#[test]
fn corrupted_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, _) = checkpoint(dir.path());
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { actdiff_model_load(c.as_ptr(), &mut model) },
        ActdiffStatus::Checksum
    );
    assert!(model.is_null());
}

/// Builds the C smoke program against the generated header and the static
/// library, then checks its output against the Rust entry point.
#[test]
fn c_program_links_and_agrees() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib = exe
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("libactdiff_ffi.a");
    assert!(
        lib.exists(),
        "static library not found at {}",
        lib.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("running cc");
    assert!(status.success());

    let (path, _, _) = checkpoint(dir.path());
    let frames = 40;
    let out = Command::new(&bin)
        .arg(&path)
        .arg(frames.to_string())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let labels: Vec<u32> = lines
        .next()
        .unwrap()
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(lines.next(), Some("100.0"));

    let handle = load(&path);
    let dim = unsafe { actdiff_model_feature_dim(handle) } as usize;
    let x: Vec<f32> = (0..frames * dim)
        .map(|i| ((i * 37) % 11) as f32 / 5.0 - 1.0)
        .collect();
    let mut want = vec![0u32; frames];
    unsafe {
        assert_eq!(
            actdiff_segment(handle, x.as_ptr(), frames, dim, 7, want.as_mut_ptr()),
            ActdiffStatus::Ok
        );
        actdiff_model_free(handle);
    }
    assert_eq!(labels, want);
}
