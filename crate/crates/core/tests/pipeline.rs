//! Runner behaviour on a small configuration: reruns, resume, baselines,
//! missing inputs and manifest verification.

use std::fs;
use std::path::Path;

use docvit::align::ToyDecoderConfig;
use docvit::error::Error;
use docvit::harness::pipeline::MANIFEST_FILE;
use docvit::harness::{load_checkpoint, run_pipeline, verify_manifest, ExperimentConfig, Stage};
use docvit::heads::FinetuneConfig;
use docvit::mae::{MAEDecoderConfig, MAETrainConfig};
use docvit::merge::{MergeMethod, MergeTrainConfig};
use docvit::vit::ViTConfig;
use tempfile::TempDir;

fn small(dir: &Path) -> ExperimentConfig {
    let encoder = ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut c = ExperimentConfig {
        seed: 3,
        output_dir: dir.to_path_buf(),
        generalist: Some(ViTConfig {
            patch_size: 8,
            dim: 8,
            ..encoder.clone()
        }),
        encoder,
        ..Default::default()
    };
    c.mae.images = 8;
    c.mae.decoder = MAEDecoderConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    c.mae.train = MAETrainConfig {
        epochs: 2,
        warmup_epochs: 0,
        batch_size: 4,
        ..Default::default()
    };
    c.align.decoders = vec![
        ToyDecoderConfig {
            dim: 16,
            max_sequence: 32,
            ..Default::default()
        };
        2
    ];
    c.align.samples = 16;
    c.merge.probe_images = 8;
    c.merge.train = MergeTrainConfig {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    c.head.train = FinetuneConfig {
        steps: 6,
        batch_size: 4,
        warmup_steps: 0,
        hidden: 16,
        ..Default::default()
    };
    c.head.train_samples = 8;
    c.head.eval_samples = 4;
    c
}

fn ckpt(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join("checkpoints").join(format!("{name}.ckpt"))).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ra = run_pipeline(&small(a.path())).unwrap();
    let rb = run_pipeline(&small(b.path())).unwrap();
    assert_eq!(ra.manifest, rb.manifest);
    assert_eq!(ra.checkpoints.len(), 5);
    for name in ["mae", "align_0", "align_1", "merged", "head"] {
        assert_eq!(ckpt(a.path(), name), ckpt(b.path(), name), "{name}");
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    assert_eq!(ra.manifest.merge_path.as_deref(), Some("learned"));
}

#[test]
fn resuming_aligned_encoders_reproduces_the_merge() {
    let full = TempDir::new().unwrap();
    run_pipeline(&small(full.path())).unwrap();

    let part = TempDir::new().unwrap();
    let mut c = small(part.path());
    c.stages = vec![Stage::Merge, Stage::Head];
    for i in 0..2 {
        let name = format!("align_{i}");
        c.resume.insert(
            name.clone(),
            full.path().join("checkpoints").join(format!("{name}.ckpt")),
        );
    }
    let report = run_pipeline(&c).unwrap();
    assert_eq!(ckpt(full.path(), "merged"), ckpt(part.path(), "merged"));
    assert_eq!(ckpt(full.path(), "head"), ckpt(part.path(), "head"));
    let statuses: Vec<_> = report
        .manifest
        .stages
        .iter()
        .map(|s| (s.name.as_str(), s.status.as_str()))
        .collect();
    assert_eq!(
        statuses,
        [("align", "resumed"), ("merge", "ran"), ("head", "ran")]
    );
    assert!(!part.path().join("checkpoints/mae.ckpt").exists());
    verify_manifest(part.path()).unwrap();
}

#[test]
fn method_none_is_recorded_as_single_decoder_baseline() {
    let dir = TempDir::new().unwrap();
    let mut c = small(dir.path());
    c.merge.method = MergeMethod::None;
    c.generalist = None;
    let report = run_pipeline(&c).unwrap();
    assert_eq!(
        report.manifest.merge_path.as_deref(),
        Some("single_decoder_baseline")
    );
    let load = |name: &str| {
        load_checkpoint(&dir.path().join("checkpoints").join(format!("{name}.ckpt"))).unwrap()
    };
    let (merged, first) = (load("merged"), load("align_0"));
    assert_eq!(merged.signature(), first.signature());
    for (k, v) in first.iter() {
        assert_eq!(merged.get(k).unwrap().data(), v.data(), "{k}");
    }
    assert!(!dir.path().join("merge_coefficients.json").exists());
    assert!(report.evaluation.is_some());
}

#[test]
fn stage_without_its_input_fails_with_the_stage_name() {
    let dir = TempDir::new().unwrap();
    let mut c = small(dir.path());
    c.stages = vec![Stage::Merge];
    match run_pipeline(&c) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "merge");
            assert!(matches!(*source, Error::Usage(_)), "{source}");
        }
        other => panic!(
            "expected a merge stage error, got {:?}",
            other.map(|r| r.manifest)
        ),
    }
}

#[test]
fn missing_resume_file_is_rejected_up_front() {
    let dir = TempDir::new().unwrap();
    let mut c = small(dir.path());
    c.resume
        .insert("mae".into(), dir.path().join("absent.ckpt"));
    assert!(matches!(run_pipeline(&c), Err(Error::Usage(_))));
}

#[test]
fn verify_manifest_detects_tampering() {
    let dir = TempDir::new().unwrap();
    run_pipeline(&small(dir.path())).unwrap();
    let manifest = verify_manifest(dir.path()).unwrap();
    assert_eq!(manifest.stage_order, ["mae", "align", "merge", "head"]);

    let path = dir.path().join("checkpoints/merged.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(verify_manifest(dir.path()).is_err());
}
