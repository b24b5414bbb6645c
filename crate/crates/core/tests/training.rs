mod common;

use std::path::Path;

use common::*;
use unmask_core::gender::{train_classifier_on, GenderClassifierConfig, GenderTrainOptions};
use unmask_core::nn::ParamKind;
use unmask_core::segmentation::SegmenterConfig;
use unmask_core::synthdata::{default_templates, generate_dataset, write_procedural_corpus, SyntheticPair};
use unmask_core::training::*;
use unmask_core::{BinarySegmentationMap, Error, Gender, ImageTensor};

fn tiny_setup() -> InpaintSetup {
    let mut s = desk_inpaint_setup(32);
    s.discriminator = unmask_core::inpaint::DiscriminatorConfig::with_base(8);
    s.extractor_widths = vec![4, 8, 8];
    s.optimizer.batch_size = 2;
    s
}

fn fingerprints(t: &InpaintTrainer) -> (u64, u64) {
    (
        t.generator.store().fingerprint(ParamKind::Trainable).unwrap(),
        t.discriminator.store().fingerprint(ParamKind::Trainable).unwrap(),
    )
}

fn refs(pairs: &[SyntheticPair]) -> Vec<&SyntheticPair> {
    pairs.iter().collect()
}

#[test]
fn checkpoint_resume_continues_bit_for_bit() {
    let pairs = synthetic_pairs(4, 32, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("male.ck");
    let mut a = InpaintTrainer::new(&tiny_setup(), Some(Gender::Male), 3).unwrap();
    a.train_step(&refs(&pairs[..2])).unwrap();
    a.train_step(&refs(&pairs[2..])).unwrap();
    a.save_checkpoint(&path).unwrap();

    let mut b = InpaintTrainer::load_checkpoint(&path, Some(Gender::Male)).unwrap();
    assert_eq!(b.state, a.state);
    assert_eq!(fingerprints(&a), fingerprints(&b));
    let la = a.train_step(&refs(&pairs[..2])).unwrap();
    let lb = b.train_step(&refs(&pairs[..2])).unwrap();
    assert_eq!(la, lb);
    assert_eq!(fingerprints(&a), fingerprints(&b));
}

#[test]
fn each_update_touches_only_its_own_network() {
    let pairs = synthetic_pairs(2, 32, 2);
    let step = |lr_g: f64, lr_d: f64| {
        let mut s = tiny_setup();
        s.optimizer.lr_generator = lr_g;
        s.optimizer.lr_discriminator = lr_d;
        let mut t = InpaintTrainer::new(&s, None, 5).unwrap();
        let before = fingerprints(&t);
        t.train_step(&refs(&pairs)).unwrap();
        t.train_step(&refs(&pairs)).unwrap();
        (before, fingerprints(&t))
    };
    let (b, a) = step(0.0, 1e-3);
    assert_eq!(a.0, b.0, "generator moved with zero generator lr");
    assert_ne!(a.1, b.1);
    let (b, a) = step(1e-3, 0.0);
    assert_eq!(a.1, b.1, "discriminator moved with zero discriminator lr");
    assert_ne!(a.0, b.0);
    let (b, a) = step(0.0, 0.0);
    assert_eq!(a, b);
}

#[test]
fn same_seed_same_run() {
    let pairs = synthetic_pairs(4, 32, 3);
    let run = || {
        let mut s = tiny_setup();
        s.optimizer.iterations = 3;
        let mut t = InpaintTrainer::new(&s, None, 9).unwrap();
        run_inpainting(&mut t, &pairs, None).unwrap();
        (t.state.history.iter().copied().collect::<Vec<_>>(), fingerprints(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn pixel_loss_falls_when_fitting_one_pair() {
    let pairs = synthetic_pairs(1, 32, 4);
    let mut s = tiny_setup();
    s.optimizer.batch_size = 1;
    s.optimizer.iterations = 200;
    let mut t = InpaintTrainer::new(&s, None, 4).unwrap();
    run_inpainting(&mut t, &pairs, None).unwrap();
    let pixel: Vec<f64> = t.state.history.iter().map(|l| l.generator.parts.pixel).collect();
    let tail = pixel[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * pixel[0], "pixel loss {} -> {tail}", pixel[0]);
}

#[test]
fn segmenter_loss_falls_steadily_on_a_full_batch() {
    let samples: Vec<(ImageTensor, BinarySegmentationMap)> =
        synthetic_pairs(4, 32, 5).into_iter().map(|p| (p.masked, p.segmap)).collect();
    let config = SegmenterConfig { input_size: 32, base_channels: 8, depth: 2 };
    let options = SupervisedOptions { lr: 1e-3, batch_size: 4, iterations: 50 };
    let run = train_segmenter_on(&samples, config, options, 5).unwrap();
    let early = &run.losses[..20];
    assert!(early.windows(2).all(|w| w[1] < w[0]), "{early:?}");
    assert!(run.losses[49] < 0.1 * run.losses[0]);
}

#[test]
fn gender_loss_falls_over_the_first_epochs() {
    let pairs = synthetic_pairs(16, 32, 6);
    let images: Vec<ImageTensor> = pairs.iter().map(|p| p.masked.clone()).collect();
    let labels: Vec<Gender> = pairs.iter().map(|p| p.gender.unwrap()).collect();
    let config = GenderClassifierConfig { input_size: 32, base_channels: 4, head_layers: vec![16, 1], ..Default::default() };
    let options = GenderTrainOptions { epochs: 5, batch_size: 8, lr: 1e-3, seed: 6 };
    let run = train_classifier_on((&images, &labels), (&[], &[]), &config, options).unwrap();
    assert_eq!(run.epoch_losses.len(), 5);
    assert!(run.epoch_losses[4] < run.epoch_losses[0], "{:?}", run.epoch_losses);
}

#[test]
fn single_class_gender_data_is_rejected() {
    let pairs = synthetic_pairs(4, 32, 7);
    let images: Vec<ImageTensor> = pairs.iter().map(|p| p.masked.clone()).collect();
    let labels = vec![Gender::Female; 4];
    let config = GenderClassifierConfig { input_size: 32, base_channels: 4, head_layers: vec![1], ..Default::default() };
    let r = train_classifier_on((&images, &labels), (&[], &[]), &config, GenderTrainOptions::default());
    assert!(matches!(r, Err(Error::Training(_))));
}

#[test]
fn manifest_without_the_requested_gender_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, lms) = write_procedural_corpus(dir.path().join("src"), 4, 32, 0).unwrap();
    let m = generate_dataset(images, lms, &default_templates(), 0, dir.path().join("data"), 32).unwrap();
    let males = m.with_entries(m.entries.iter().filter(|e| e.gender == Some(Gender::Male)).cloned().collect());
    assert_eq!(gender_pairs(&males, Gender::Male, 32).unwrap().len(), 2);
    assert!(matches!(gender_pairs(&males, Gender::Female, 32), Err(Error::Training(_))));
}

#[test]
fn checkpoints_refuse_the_wrong_tag_or_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("male.ck");
    InpaintTrainer::new(&tiny_setup(), Some(Gender::Male), 0).unwrap().save_checkpoint(&path).unwrap();
    assert!(matches!(InpaintTrainer::load_checkpoint(&path, Some(Gender::Female)), Err(Error::Checkpoint(_))));
    assert!(matches!(load_generator(&path, None), Err(Error::Checkpoint(_))));
    assert!(matches!(load_segmenter(&path), Err(Error::Checkpoint(_))));
    assert!(load_generator(&path, Some(Gender::Male)).is_ok());
}

#[test]
fn shipped_desk_config_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    assert_eq!(TrainingConfig::load(path).unwrap(), TrainingConfig::desk());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(matches!(TrainingConfig::parse("image_sise = 64"), Err(Error::Config(_))));
    assert!(matches!(
        TrainingConfig::parse("[inpaint.optimizer]\nbatch_size = 0"),
        Err(Error::Config(_))
    ));
}
