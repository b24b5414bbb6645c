use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unmask_core::gender::train_classifier;
use unmask_core::pipeline::{evaluate, infer_path, write_inference, BundleSpec, PipelineBundle};
use unmask_core::synthdata::{default_templates, generate_dataset, write_procedural_corpus, Gender, Manifest};
use unmask_core::training::{
    gender_pairs, run_inpainting, save_gender, save_landmarks, save_segmenter, train_landmarks, train_segmenter,
    InpaintTrainer, TrainingConfig,
};
use unmask_core::{Error, Result};

#[derive(Parser)]
#[command(name = "unmask", version, about = "Reconstruct faces hidden behind masks")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML settings file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build masked/clean pairs from face images and their landmark files.
    Synth {
        #[arg(long, required_unless_present = "procedural")]
        images: Option<PathBuf>,
        #[arg(long, required_unless_present = "procedural")]
        landmarks: Option<PathBuf>,
        /// Generate this many procedural faces instead of reading images.
        #[arg(long, conflicts_with_all = ["images", "landmarks"])]
        procedural: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gender classifier on the labelled masked faces of a manifest.
    TrainGender {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train the mask segmenter.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train the landmark predictor on masked faces.
    TrainLandmarks {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Train the inpainting GAN for one gender.
    TrainInpaint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gender: Gender,
        #[arg(long)]
        bundle: PathBuf,
        /// Continue from the checkpoint already in the bundle.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct one image, or every image of a directory.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-gender PSNR and SSIM over a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn update_spec(bundle: &Path, config: &TrainingConfig) -> Result<BundleSpec> {
    let mut spec = BundleSpec::load(bundle).unwrap_or_default();
    spec.image_size = config.image_size;
    spec.dilation_radius = config.dilation_radius;
    spec.mask_threshold = config.mask_threshold;
    spec.gender_threshold = config.gender.threshold;
    spec.landmark_sigma = config.inpaint.generator.landmark_sigma;
    spec.save(bundle)?;
    Ok(spec)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Synth { images, landmarks, procedural, out } => {
            let (images, landmarks) = match procedural {
                Some(n) => write_procedural_corpus(out.join("source"), n, config.image_size, seed)?,
                None => (images.expect("clap enforces"), landmarks.expect("clap enforces")),
            };
            let m = generate_dataset(images, landmarks, &default_templates(), seed, &out, config.image_size)?;
            println!("{} pairs written to {} ({} skipped)", m.len(), out.display(), m.warnings.len());
        }
        Command::TrainGender { data, bundle } => {
            let spec = update_spec(&bundle, &config)?;
            let manifest = Manifest::load(&data)?;
            let mut entries = manifest.entries.clone();
            entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_val = (entries.len() as f64 * config.gender_training.val_fraction).round() as usize;
            let val = manifest.with_entries(entries.split_off(entries.len() - n_val));
            let train = manifest.with_entries(entries);
            let run = train_classifier(&train, &val, &config.gender, config.gender_training.options(seed))?;
            save_gender(&run.model, bundle.join(&spec.gender))?;
            println!("gender: accuracy {:.4} (epoch {})", run.accuracy, run.best_epoch);
        }
        Command::TrainSeg { data, bundle } => {
            let spec = update_spec(&bundle, &config)?;
            let run = train_segmenter(
                &Manifest::load(&data)?,
                config.segmenter,
                config.segmenter_training,
                config.segmenter_clean_negatives,
                seed,
            )?;
            save_segmenter(&run.model, bundle.join(&spec.segmenter))?;
            println!("segmenter: final bce {:.5}", run.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainLandmarks { data, bundle } => {
            let spec = update_spec(&bundle, &config)?;
            let run = train_landmarks(&Manifest::load(&data)?, config.landmarks, config.landmark_training, seed)?;
            save_landmarks(&run.model, bundle.join(&spec.landmarks))?;
            println!("landmarks: final loss {:.5}", run.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainInpaint { data, gender, bundle, resume } => {
            let spec = update_spec(&bundle, &config)?;
            let path = bundle.join(spec.inpaint_path(gender));
            let manifest = Manifest::load(&data)?;
            let mut trainer = if resume {
                InpaintTrainer::load_checkpoint(&path, Some(gender))?
            } else {
                InpaintTrainer::new(&config.inpaint, Some(gender), seed)?
            };
            let pairs = gender_pairs(&manifest, gender, config.inpaint.generator.input_size)?;
            run_inpainting(&mut trainer, &pairs, Some(&path))?;
            if let Some(l) = trainer.state.history.last() {
                println!("inpaint {gender}: iteration {} total {:.5}", l.iteration, l.generator.total);
            }
        }
        Command::Infer { input, bundle, out } => {
            let bundle = PipelineBundle::load(&bundle)?;
            if input.is_dir() {
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
                    .map_err(|e| Error::io(&input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| is_image(p))
                    .collect();
                files.sort();
                for f in files {
                    let r = infer_path(&bundle, &f)?;
                    let name = f.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
                    write_inference(&r, out.join(name).with_extension("png"))?;
                }
            } else {
                let r = infer_path(&bundle, &input)?;
                write_inference(&r, &out)?;
                println!(
                    "{}: {} (p_male {:.3}), mask {:.1}%{}",
                    out.display(),
                    r.diagnostics.gender,
                    r.diagnostics.male_probability,
                    100.0 * r.diagnostics.mask_area_fraction,
                    if r.diagnostics.no_mask_detected { ", no mask detected" } else { "" }
                );
            }
        }
        Command::Eval { manifest, bundle, report } => {
            let bundle = PipelineBundle::load(&bundle)?;
            let r = evaluate(&bundle, &Manifest::load(&manifest)?)?;
            r.write(&report)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
