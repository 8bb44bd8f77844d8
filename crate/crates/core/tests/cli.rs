use std::path::Path;
use std::process::{Command, Output};

use nalsuper::checkpoint::save_checkpoint;
use nalsuper::data::{load_paired_dataset, read_image};
use nalsuper::network::{ModelConfig, NaLSuper};
use nalsuper::objectives::SsimConstants;
use nalsuper::text::{embed_prompts, DEFAULT_PROMPTS};
use nalsuper::train::baseline_report;

fn nalsuper(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nalsuper"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fresh_checkpoint(path: &Path) {
    let cfg = ModelConfig::default();
    let emb = embed_prompts(&DEFAULT_PROMPTS, cfg.d_tau, 0).unwrap();
    save_checkpoint(&NaLSuper::<f32>::init(cfg, &emb).unwrap(), path).unwrap();
}

const TINY: &[&str] = &["--channels", "4", "--blocks", "1", "--attention-dim", "4", "--d-tau", "8"];

#[test]
fn make_synthetic_writes_deterministic_darkened_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["make-synthetic", "--count", "4", "--size", "20", "--seed", "3"];
    for sub in ["a", "b"] {
        let out = nalsuper(&[&args[..], &["--out-dir", sub]].concat(), dir.path());
        assert_eq!(code(&out), 0, "{out:?}");
    }
    let mut files = 0;
    for side in ["low", "gt"] {
        for entry in std::fs::read_dir(dir.path().join("a").join(side)).unwrap() {
            let a = entry.unwrap().path();
            let b = dir.path().join("b").join(side).join(a.file_name().unwrap());
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
            files += 1;
        }
    }
    assert_eq!(files, 8);
    let pairs = load_paired_dataset(dir.path().join("a/low"), dir.path().join("a/gt")).unwrap();
    for p in &pairs {
        let mean = |t: &nalsuper::tensor::Tensor<f32>| t.data().iter().sum::<f32>() / t.numel() as f32;
        assert!(mean(&p.low) < mean(&p.gt), "{}", p.id);
    }
}

#[test]
fn train_writes_checkpoint_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let run = |ck: &str| {
        let args = [
            &["train", "--synthetic", "2", "--size", "16", "--steps", "5", "--seed", "1", "--out", ck][..],
            TINY,
        ]
        .concat();
        nalsuper(&args, dir.path())
    };
    let out = run("ck.nlsc");
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(dir.path().join("ck.nlsc").exists());
    let trace = std::fs::read_to_string(dir.path().join("ck.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert_eq!(trace.lines().next(), Some("step,total,l1,ssim"));
    let text = stdout(&out);
    assert!(text.contains("initial loss") && text.contains("final loss"), "{text}");

    assert_eq!(code(&run("ck2.nlsc")), 0);
    assert_eq!(
        std::fs::read(dir.path().join("ck.nlsc")).unwrap(),
        std::fs::read(dir.path().join("ck2.nlsc")).unwrap()
    );
}

#[test]
fn train_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&nalsuper(&["train", "--synthetic", "1", "--blocks", "0"], dir.path())), 2);
    assert_eq!(code(&nalsuper(&["train", "--bogus"], dir.path())), 2);
    assert_eq!(code(&nalsuper(&["train"], dir.path())), 2);
    let missing = nalsuper(&["train", "--low-dir", "nope/low", "--gt-dir", "nope/gt"], dir.path());
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        &["train", "--synthetic", "1", "--size", "16", "--steps", "50", "--lr", "1e30"][..],
        TINY,
    ]
    .concat();
    let out = nalsuper(&args, dir.path());
    assert_eq!(code(&out), 3, "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss at step"));
}

#[test]
fn embeddings_file_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("prompts.txt"), "bright photo\nnormal light image\nlow light image\n").unwrap();
    let out = nalsuper(
        &["make-embeddings", "--prompts", "prompts.txt", "--d-tau", "8", "--out", "p.nlse"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let train = |extra: &[&str]| {
        let args = [&["train", "--synthetic", "1", "--size", "16", "--steps", "2"][..], TINY, extra].concat();
        nalsuper(&args, dir.path())
    };
    assert_eq!(code(&train(&["--embeddings", "p.nlse"])), 0);
    assert_eq!(code(&train(&["--prompts", "prompts.txt", "--test-embedder"])), 0);
    // width of the stored embeddings disagrees with --d-tau
    assert_eq!(code(&train(&["--embeddings", "p.nlse", "--d-tau", "16"])), 2);
    assert_eq!(code(&train(&["--embeddings", "p.nlse", "--test-embedder"])), 2);
}

#[test]
fn enhance_handles_formats_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fresh_checkpoint(&d.join("fresh.nlsc"));
    assert_eq!(code(&nalsuper(&["make-synthetic", "--count", "1", "--size", "16", "--out-dir", "ppm", "--format", "ppm"], d)), 0);
    let out = nalsuper(&["enhance", "--ckpt", "fresh.nlsc", "--input", "ppm/low/000.ppm", "--output", "out.ppm"], d);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(out.stdout.is_empty());
    assert!(std::fs::read(d.join("out.ppm")).unwrap().starts_with(b"P6"));
    assert_eq!(read_image(d.join("out.ppm")).unwrap(), read_image(d.join("ppm/low/000.ppm")).unwrap());

    let missing = nalsuper(&["enhance", "--ckpt", "none.nlsc", "--input", "ppm/low/000.ppm", "--output", "o.png"], d);
    assert_eq!(code(&missing), 1);

    std::fs::write(d.join("tiny.ppm"), b"P6\n2 2\n255\n012345678901").unwrap();
    let small = nalsuper(&["enhance", "--ckpt", "fresh.nlsc", "--input", "tiny.ppm", "--output", "o.png"], d);
    assert_eq!(code(&small), 1);
    assert!(!String::from_utf8_lossy(&small.stderr).is_empty());
}

#[test]
fn eval_of_fresh_checkpoint_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fresh_checkpoint(&d.join("fresh.nlsc"));
    assert_eq!(code(&nalsuper(&["make-synthetic", "--count", "3", "--size", "16", "--seed", "4", "--out-dir", "set"], d)), 0);
    let out = nalsuper(
        &["eval", "--ckpt", "fresh.nlsc", "--low-dir", "set/low", "--gt-dir", "set/gt", "--csv", "r.csv"],
        d,
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(stdout(&out).contains("mean"));

    let pairs = load_paired_dataset(d.join("set/low"), d.join("set/gt")).unwrap();
    let base = baseline_report(&pairs, &SsimConstants::default()).unwrap();
    let mean = csv.lines().last().unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(mean[0], "mean");
    let psnr: f64 = mean[1].parse().unwrap();
    assert!((psnr - base.mean_psnr_db).abs() < 1e-9, "{psnr} vs {}", base.mean_psnr_db);
}

#[test]
fn gradcheck_reports_every_op_and_honours_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = nalsuper(&["gradcheck", "--op-seeds", "2"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    for case in nalsuper::diagnostics::primitive_cases() {
        assert!(text.contains(case.name), "{} missing", case.name);
    }
    assert!(text.contains("full_model"));
    let strict = nalsuper(&["gradcheck", "--op-seeds", "1", "--threshold", "1e-12"], dir.path());
    assert_eq!(code(&strict), 1);
    assert!(stdout(&strict).contains("FAIL"));
}

#[test]
fn help_is_available_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [&["--help"][..], &["train", "--help"], &["enhance", "--help"], &["eval", "--help"], &["gradcheck", "--help"], &["make-synthetic", "--help"]] {
        let out = nalsuper(sub, dir.path());
        assert_eq!(code(&out), 0, "{sub:?}");
        assert!(stdout(&out).contains("Usage"));
    }
}
