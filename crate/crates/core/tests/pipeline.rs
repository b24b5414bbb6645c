mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use unmask_core::gender::{build_classifier, GenderClassifierConfig};
use unmask_core::imaging::psnr;
use unmask_core::landmarks::{LandmarkPredictor, LandmarkPredictorConfig};
use unmask_core::pipeline::*;
use unmask_core::segmentation::{Segmenter, SegmenterConfig};
use unmask_core::synthdata::{default_templates, generate_dataset, write_procedural_corpus};
use unmask_core::training::*;
use unmask_core::{BinarySegmentationMap, Error, Gender, Manifest};

const S: usize = 32;

fn landmark_config() -> LandmarkPredictorConfig {
    LandmarkPredictorConfig { input_size: S, num_stacks: 1, base_channels: 4, heatmap_size: S, hourglass_depth: 2 }
}

fn segmenter_config() -> SegmenterConfig {
    SegmenterConfig { input_size: S, base_channels: 4, depth: 2 }
}

fn gender_config() -> GenderClassifierConfig {
    GenderClassifierConfig { input_size: S, base_channels: 4, head_layers: vec![8, 1], ..Default::default() }
}

/// Untrained models at `S` pixels; the segmenter threshold is low enough
/// that random weights still produce a mask.
fn random_bundle(male: Box<dyn Inpainter>, female: Box<dyn Inpainter>, p: f64) -> PipelineBundle {
    PipelineBundle {
        gender: Box::new(ConstantScorer { p, size: S }),
        landmarks: Box::new(LandmarkPredictor::new(landmark_config(), 1).unwrap()),
        segmenter: Box::new(ThresholdedSegmenter { model: Segmenter::new(segmenter_config(), 2).unwrap(), threshold: 0.01 }),
        male,
        female,
        image_size: S,
        dilation_radius: 1,
        gender_threshold: 0.5,
        landmark_sigma: 1.0,
    }
}

fn generator(seed: u64) -> Box<dyn Inpainter> {
    Box::new(unmask_core::inpaint::Generator::new(&desk_inpaint_setup(S).generator, seed).unwrap())
}

#[test]
fn identity_inpainter_scores_the_masked_input() {
    let b = random_bundle(Box::new(IdentityInpainter(S)), Box::new(IdentityInpainter(S)), 0.9);
    for p in synthetic_pairs(3, S, 1) {
        let r = infer(&b, &p.masked, Some(&p.clean)).unwrap();
        assert_eq!(r.output, p.masked);
        assert_eq!(r.diagnostics.psnr.unwrap(), psnr(&p.masked, &p.clean, 1.0).unwrap());
    }
}

#[test]
fn gender_gate_picks_the_generator() {
    let pair = &synthetic_pairs(1, S, 2)[0];
    let run = |p| infer(&random_bundle(generator(10), generator(20), p), &pair.masked, None).unwrap();
    let (as_male, as_female) = (run(0.9), run(0.1));
    assert_eq!(as_male.diagnostics.gender, Gender::Male);
    assert_eq!(as_female.diagnostics.gender, Gender::Female);
    assert_ne!(as_male.output, as_female.output);

    let swapped = infer(&random_bundle(generator(20), generator(10), 0.1), &pair.masked, None).unwrap();
    let direct = infer(&random_bundle(generator(20), generator(10), 0.9), &pair.masked, None).unwrap();
    assert_eq!(swapped.output, as_male.output);
    assert_eq!(direct.output, as_female.output);
}

#[test]
fn inference_is_deterministic() {
    let pair = &synthetic_pairs(1, S, 3)[0];
    let b = random_bundle(generator(1), generator(2), 0.7);
    let a = infer(&b, &pair.masked, Some(&pair.clean)).unwrap();
    let c = infer(&b, &pair.masked, Some(&pair.clean)).unwrap();
    assert_eq!(a, c);
    let fresh = random_bundle(generator(1), generator(2), 0.7);
    assert_eq!(infer(&fresh, &pair.masked, Some(&pair.clean)).unwrap(), a);
}

fn write_bundle(dir: &Path) -> BundleSpec {
    let spec = BundleSpec { image_size: S, dilation_radius: 1, landmark_sigma: 1.0, ..Default::default() };
    spec.save(dir).unwrap();
    save_gender(&build_classifier(&gender_config(), 0).unwrap(), dir.join(&spec.gender)).unwrap();
    save_landmarks(&LandmarkPredictor::new(landmark_config(), 0).unwrap(), dir.join(&spec.landmarks)).unwrap();
    save_segmenter(&Segmenter::new(segmenter_config(), 0).unwrap(), dir.join(&spec.segmenter)).unwrap();
    let setup = desk_inpaint_setup(S);
    for g in [Gender::Male, Gender::Female] {
        InpaintTrainer::new(&setup, Some(g), 0).unwrap().save_checkpoint(dir.join(spec.inpaint_path(g))).unwrap();
    }
    spec
}

#[test]
fn bundle_loads_and_rejects_swapped_generators() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_bundle(dir.path());
    let b = PipelineBundle::load(dir.path()).unwrap();
    assert_eq!(b.image_size, S);

    let mut swapped = spec.clone();
    std::mem::swap(&mut swapped.inpaint_male, &mut swapped.inpaint_female);
    swapped.save(dir.path()).unwrap();
    match PipelineBundle::load(dir.path()) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "inpaint-male");
            assert!(matches!(*source, Error::Checkpoint(_)));
        }
        other => panic!("expected a stage error, got {:?}", other.err()),
    }

    let mut wrong_kind = spec;
    wrong_kind.segmenter = wrong_kind.gender.clone();
    wrong_kind.save(dir.path()).unwrap();
    assert!(matches!(PipelineBundle::load(dir.path()), Err(Error::Stage { stage: "segmenter", .. })));
}

#[test]
fn mismatched_stage_sizes_are_rejected() {
    let mut b = random_bundle(Box::new(IdentityInpainter(S)), Box::new(IdentityInpainter(2 * S)), 0.5);
    assert!(matches!(b.validate(), Err(Error::Config(_))));
    b.female = Box::new(IdentityInpainter(S));
    b.validate().unwrap();
    let wrong = synthetic_pairs(1, 2 * S, 4).remove(0);
    assert!(matches!(infer(&b, &wrong.masked, None), Err(Error::Dimension(_))));
}

#[test]
fn clean_faces_pass_through_after_training_with_negatives() {
    let pairs = synthetic_pairs(4, S, 5);
    let empty = BinarySegmentationMap::zeros(S, S).unwrap();
    let mut samples: Vec<_> = pairs.iter().map(|p| (p.masked.clone(), p.segmap.clone())).collect();
    samples.extend(pairs.iter().map(|p| (p.clean.clone(), empty.clone())));
    let options = SupervisedOptions { lr: 2e-3, batch_size: 8, iterations: 150 };
    let run = train_segmenter_on(&samples, SegmenterConfig { input_size: S, base_channels: 8, depth: 2 }, options, 5).unwrap();
    let mut b = random_bundle(generator(1), generator(2), 0.5);
    b.segmenter = Box::new(ThresholdedSegmenter { model: run.model, threshold: 0.5 });
    for p in &pairs {
        let r = infer(&b, &p.clean, Some(&p.clean)).unwrap();
        assert!(r.diagnostics.no_mask_detected);
        assert_eq!(r.output, p.clean);
        assert_eq!(r.diagnostics.psnr, Some(f64::INFINITY));
    }
}

#[test]
fn evaluating_an_empty_manifest_fails() {
    let b = random_bundle(Box::new(IdentityInpainter(S)), Box::new(IdentityInpainter(S)), 0.5);
    let m = Manifest { root: "nowhere".into(), seed: 0, entries: vec![], warnings: vec![] };
    assert!(matches!(evaluate(&b, &m), Err(Error::Evaluation(_))));
}

#[test]
fn report_groups_by_label_and_round_trips_infinity() {
    let dir = tempfile::tempdir().unwrap();
    let (images, lms) = write_procedural_corpus(dir.path().join("src"), 4, S, 0).unwrap();
    let m = generate_dataset(images, lms, &default_templates(), 0, dir.path().join("data"), S).unwrap();
    let pairs = m.load_all(S).unwrap();
    let oracle = |pairs: &[unmask_core::synthdata::SyntheticPair]| {
        Box::new(OracleInpainter::new(S, pairs.iter().map(|p| (p.masked.clone(), p.clean.clone()))))
    };
    let mut b = random_bundle(oracle(&pairs), oracle(&pairs), 0.5);
    b.dilation_radius = S;
    let report = evaluate(&b, &m).unwrap();
    assert_eq!(report.groups[&Gender::Male].count, 2);
    assert_eq!(report.groups[&Gender::Female].count, 2);
    for g in report.groups.values() {
        assert_eq!(g.psnr, f64::INFINITY);
        assert_eq!(g.ssim, 1.0);
    }
    let table = report.table();
    assert!(table.contains("| PSNR | inf | inf"), "{table}");
    let path = dir.path().join("report.txt");
    report.write(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["groups"]["male"]["psnr"], "inf");
}

fn unmask(args: &[&str], config: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_unmask"))
        .args(["--seed", "3", "--config"])
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn command_line_builds_a_bundle_and_evaluates_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let mut c = TrainingConfig::desk();
    c.image_size = S;
    c.inpaint = desk_inpaint_setup(S);
    c.inpaint.optimizer.iterations = 2;
    c.segmenter = segmenter_config();
    c.segmenter_training.iterations = 2;
    c.landmarks = landmark_config();
    c.landmark_training.optim.iterations = 2;
    c.gender = gender_config();
    c.gender_training.epochs = 1;
    let config = dir.path().join("tiny.toml");
    fs::write(&config, toml::to_string(&c).unwrap()).unwrap();

    unmask(&["synth", "--procedural", "4", "--out", &d("data")], &config);
    let manifest = d("data/manifest.jsonl");
    unmask(&["train-gender", "--data", &manifest, "--bundle", &d("bundle")], &config);
    unmask(&["train-seg", "--data", &manifest, "--bundle", &d("bundle")], &config);
    unmask(&["train-landmarks", "--data", &manifest, "--bundle", &d("bundle")], &config);
    for g in ["male", "female"] {
        unmask(&["train-inpaint", "--data", &manifest, "--gender", g, "--bundle", &d("bundle")], &config);
    }
    let m = Manifest::load(&manifest).unwrap();
    let input = m.resolve(&m.entries[0].masked);
    unmask(&["infer", "--input", input.to_str().unwrap(), "--bundle", &d("bundle"), "--out", &d("out.png")], &config);
    assert!(dir.path().join("out.png").exists() && dir.path().join("out.json").exists());
    let table = unmask(&["eval", "--manifest", &manifest, "--bundle", &d("bundle"), "--report", &d("report.txt")], &config);
    assert!(table.starts_with("Dataset | Metric | Male | Female"), "{table}");
    assert!(dir.path().join("report.json").exists());
}
