//! Alternating adversarial optimisation, the supervised trainers for the
//! other stages, seeded batch schedules and checkpoint persistence.
//!
//! Checkpoint layout: the 8-byte magic `UNMASKCK`, a little-endian `u32`
//! format version, a little-endian `u64` header length, the JSON header,
//! then every tensor as little-endian `f32` at the offset the header gives.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gender::{build_classifier, GenderClassifier, GenderClassifierConfig, GenderTrainOptions};
use crate::imaging::{BinarySegmentationMap, ImageTensor};
use crate::inpaint::{
    landmark_channel, lsgan_discriminator_loss, lsgan_generator_loss, perceptual_loss, pixel_loss, style_loss, tv_loss,
    Discriminator, DiscriminatorConfig, FeatureExtractor, Generator, GeneratorConfig, LossBreakdown, LossTensors,
    LossWeights, StridedFeatureNet,
};
use crate::landmarks::{
    adaptive_wing_loss_tensor, render_heatmaps, weighted_loss_map, AdaptiveWingParams, LandmarkPredictor,
    LandmarkPredictorConfig, DEFAULT_BOOST,
};
use crate::nn::{bce_with_logits, scalar, shuffled_indices, Adam, AdamConfig, ParamStore};
use crate::segmentation::{Segmenter, SegmenterConfig};
use crate::synthdata::{Gender, Manifest, SyntheticPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.9,
            lr_generator: 1e-4,
            lr_discriminator: 1e-5,
            batch_size: 4,
            iterations: 500_000,
            checkpoint_every: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator >= 0.0 && self.lr_discriminator >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

/// Batch `iteration` of an endless sequence of seeded epoch permutations.
/// Depends only on its arguments, so a restored run resumes the same order.
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    batch: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::Training("empty dataset or zero batch size".into()));
        }
        Ok(Self { seed, n, batch, cached: None })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            self.cached = Some((epoch, shuffled_indices(self.n, &mut rng)));
        }
        &self.cached.as_ref().expect("cached permutation").1
    }

    pub fn batch(&mut self, iteration: u64) -> Vec<usize> {
        let start = iteration * self.batch as u64;
        (0..self.batch as u64)
            .map(|k| {
                let p = start + k;
                let (epoch, pos) = (p / self.n as u64, (p % self.n as u64) as usize);
                self.permutation(epoch)[pos]
            })
            .collect()
    }
}

/// All six terms of one alternating step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub iteration: u64,
    pub generator: LossBreakdown,
    pub adv_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    capacity: usize,
    entries: VecDeque<StepLosses>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::new() }
    }

    pub fn push(&mut self, s: StepLosses) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &StepLosses> {
        self.entries.iter()
    }

    pub fn last(&self) -> Option<&StepLosses> {
        self.entries.back()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub seed: u64,
    pub history: LossHistory,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNMASKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    tag: Option<Gender>,
    config: serde_json::Value,
    iteration: u64,
    seed: u64,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub tag: Option<Gender>,
    pub config: serde_json::Value,
    pub iteration: u64,
    pub seed: u64,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut data: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.dims().to_vec(), offset: data.len() as u64 });
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            tag: self.tag,
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.seed,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(20 + header.len() + data.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &body[hlen..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, e.offset as usize + 4 * n);
            if e.offset != expected || end > data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` is truncated or misplaced", e.name)));
            }
            let values: Vec<f32> =
                data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?));
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            kind: header.kind,
            tag: header.tag,
            config: header.config,
            iteration: header.iteration,
            seed: header.seed,
            extra: header.extra,
            tensors,
        })
    }

    /// Errors unless the file holds `kind` with the given gender tag.
    pub fn expect(&self, kind: &str, tag: Option<Gender>) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        if self.tag != tag {
            let show = |t: Option<Gender>| t.map_or("untagged".to_string(), |g| g.to_string());
            return Err(Error::Checkpoint(format!("tag mismatch: expected {}, found {}", show(tag), show(self.tag))));
        }
        Ok(())
    }

    fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))
    }
}

fn model_checkpoint(kind: &str, tag: Option<Gender>, config: &impl Serialize, store: &ParamStore, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: kind.into(),
        tag,
        config: serde_json::to_value(config)?,
        iteration: 0,
        seed,
        extra: serde_json::Value::Null,
        tensors: store.export(),
    })
}

/// Everything the inpainting trainer needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub extractor_widths: Vec<usize>,
    pub history_capacity: usize,
}

impl Default for InpaintSetup {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            extractor_widths: StridedFeatureNet::DEFAULT_WIDTHS.to_vec(),
            history_capacity: 1024,
        }
    }
}

const EXTRACTOR_SEED: u64 = 0x5ee_d0f_f1;
pub const INPAINT_KIND: &str = "inpaint";

/// Generator, discriminator, their optimisers and the run state.
pub struct InpaintTrainer {
    pub setup: InpaintSetup,
    pub gender: Option<Gender>,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub state: TrainState,
    extractor: StridedFeatureNet,
    opt_g: Adam,
    opt_d: Adam,
}

/// Batch tensors `(ground, clean, mask, landmark)`.
pub fn inpaint_batch(pairs: &[&SyntheticPair], sigma: f64, dtype: DType) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let masked: Vec<&ImageTensor> = pairs.iter().map(|p| &p.masked).collect();
    let clean: Vec<&ImageTensor> = pairs.iter().map(|p| &p.clean).collect();
    let size = pairs.first().map_or(0, |p| p.clean.height());
    let lms = pairs.iter().map(|p| landmark_channel(&p.landmarks, size, sigma)).collect::<Result<Vec<_>>>()?;
    let lm_refs: Vec<&ImageTensor> = lms.iter().collect();
    let masks = pairs.iter().map(|p| p.segmap.to_tensor(dtype, &Device::Cpu)).collect::<Result<Vec<_>>>()?;
    Ok((
        ImageTensor::batch_to_tensor(&masked, dtype, &Device::Cpu)?,
        ImageTensor::batch_to_tensor(&clean, dtype, &Device::Cpu)?,
        Tensor::cat(&masks, 0)?,
        ImageTensor::batch_to_tensor(&lm_refs, dtype, &Device::Cpu)?,
    ))
}

impl InpaintTrainer {
    pub fn new(setup: &InpaintSetup, gender: Option<Gender>, seed: u64) -> Result<Self> {
        setup.optimizer.validate()?;
        setup.weights.validate()?;
        let generator = Generator::new(&setup.generator, seed)?;
        let discriminator = Discriminator::new(&setup.discriminator, seed ^ 0xd15c)?;
        let extractor = StridedFeatureNet::new(&setup.extractor_widths, EXTRACTOR_SEED)?;
        let opt_g = Adam::new(generator.store().trainable(), setup.optimizer.adam(setup.optimizer.lr_generator))?;
        let opt_d = Adam::new(discriminator.store().trainable(), setup.optimizer.adam(setup.optimizer.lr_discriminator))?;
        Ok(Self {
            setup: setup.clone(),
            gender,
            generator,
            discriminator,
            state: TrainState { iteration: 0, seed, history: LossHistory::new(setup.history_capacity) },
            extractor,
            opt_g,
            opt_d,
        })
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        &self.extractor
    }

    /// One discriminator update on `L_advD`, then one generator update on
    /// the weighted generator loss. Pairs with an empty mask are skipped.
    pub fn train_step(&mut self, batch: &[&SyntheticPair]) -> Result<StepLosses> {
        let usable: Vec<&SyntheticPair> = batch
            .iter()
            .copied()
            .filter(|p| {
                let keep = !p.segmap.is_empty();
                if !keep {
                    log::warn!("iteration {}: skipping a pair with an empty mask", self.state.iteration);
                }
                keep
            })
            .collect();
        if usable.is_empty() {
            return Err(Error::Training("batch has no pair with a non-empty mask".into()));
        }
        let n = usable.len();
        let (ground, clean, mask, lm) = inpaint_batch(&usable, self.setup.generator.landmark_sigma, DType::F32)?;
        let pred = self.generator.forward(&ground, &lm, &mask)?;

        let both = Tensor::cat(&[&pred.detach(), &clean], 0)?;
        let lm2 = Tensor::cat(&[&lm, &lm], 0)?;
        let scores = self.discriminator.forward(&both, &lm2, true)?;
        let adv_d = lsgan_discriminator_loss(&scores.narrow(0, 0, n)?, &scores.narrow(0, n, n)?)?;
        let adv_d_value = scalar(&adv_d)?;
        if !adv_d_value.is_finite() {
            return Err(Error::NonFinite { term: "adv_d".into() });
        }
        self.opt_d.step(&adv_d.backward()?)?;

        let terms = LossTensors {
            pixel: pixel_loss(&pred, &clean, &mask)?,
            perceptual: perceptual_loss(&pred, &clean, &self.extractor)?,
            style: style_loss(&pred, &clean, &mask, &self.extractor)?,
            tv: tv_loss(&pred)?,
            adv_g: lsgan_generator_loss(&self.discriminator.forward(&pred, &lm, false)?)?,
        };
        let (total, breakdown) = terms.combine(&self.setup.weights)?;
        self.opt_g.step(&total.backward()?)?;

        let losses = StepLosses { iteration: self.state.iteration, generator: breakdown, adv_d: adv_d_value };
        self.state.iteration += 1;
        self.state.history.push(losses);
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.generator.store().export();
        tensors.extend(self.discriminator.store().export());
        tensors.extend(self.opt_g.export("opt_g"));
        tensors.extend(self.opt_d.export("opt_d"));
        Ok(Checkpoint {
            kind: INPAINT_KIND.into(),
            tag: self.gender,
            config: serde_json::to_value(&self.setup)?,
            iteration: self.state.iteration,
            seed: self.state.seed,
            extra: serde_json::to_value(&self.state.history)?,
            tensors,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a checkpoint carrying the given gender tag.
    /// Nothing is constructed unless every tensor matches.
    pub fn load_checkpoint(path: impl AsRef<Path>, gender: Option<Gender>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect(INPAINT_KIND, gender)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let setup: InpaintSetup = ck.config_as()?;
        let mut t = Self::new(&setup, ck.tag, ck.seed)?;
        let map = ck.tensor_map();
        t.generator.store().import(&map)?;
        t.discriminator.store().import(&map)?;
        t.opt_g.import("opt_g", &map)?;
        t.opt_d.import("opt_d", &map)?;
        t.state.iteration = ck.iteration;
        if !ck.extra.is_null() {
            t.state.history = serde_json::from_value(ck.extra.clone())
                .map_err(|e| Error::Checkpoint(format!("bad loss history: {e}")))?;
        }
        Ok(t)
    }
}

/// Generator alone from an inpainting checkpoint with the given tag.
pub fn load_generator(path: impl AsRef<Path>, gender: Option<Gender>) -> Result<Generator> {
    let ck = Checkpoint::load(path)?;
    ck.expect(INPAINT_KIND, gender)?;
    let setup: InpaintSetup = ck.config_as()?;
    let g = Generator::new(&setup.generator, ck.seed)?;
    g.store().import(&ck.tensor_map())?;
    Ok(g)
}

/// Loads the pairs labeled `gender`.
pub fn gender_pairs(manifest: &Manifest, gender: Gender, size: usize) -> Result<Vec<SyntheticPair>> {
    pairs_for_gender(manifest, Some(gender), size)
}

fn pairs_for_gender(manifest: &Manifest, gender: Option<Gender>, size: usize) -> Result<Vec<SyntheticPair>> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| gender.is_none() || e.gender == gender)
        .cloned()
        .collect();
    if entries.is_empty() {
        let which = gender.map_or("any".to_string(), |g| g.to_string());
        return Err(Error::Training(format!("manifest has no {which} entries")));
    }
    manifest.with_entries(entries).load_all(size)
}

/// Runs `iterations` alternating steps from the current state, saving to
/// `checkpoint_path` every `checkpoint_every` iterations and at the end.
pub fn run_inpainting(
    trainer: &mut InpaintTrainer,
    pairs: &[SyntheticPair],
    checkpoint_path: Option<&Path>,
) -> Result<()> {
    let opt = trainer.setup.optimizer;
    let mut schedule = BatchSchedule::new(trainer.state.seed, pairs.len(), opt.batch_size)?;
    while trainer.state.iteration < opt.iterations {
        let it = trainer.state.iteration;
        let batch: Vec<&SyntheticPair> = schedule.batch(it).into_iter().map(|i| &pairs[i]).collect();
        let l = trainer.train_step(&batch)?;
        if it % 100 == 0 {
            log::info!(
                "inpaint {it}: total {:.4} pixel {:.4} adv_d {:.4}",
                l.generator.total,
                l.generator.parts.pixel,
                l.adv_d
            );
        }
        if let Some(p) = checkpoint_path {
            if opt.checkpoint_every > 0 && (it + 1) % opt.checkpoint_every == 0 {
                trainer.save_checkpoint(p)?;
            }
        }
    }
    if let Some(p) = checkpoint_path {
        trainer.save_checkpoint(p)?;
    }
    Ok(())
}

/// Trains one gender's generator on the matching manifest entries.
pub fn train_inpainting(
    manifest: &Manifest,
    gender: Gender,
    setup: &InpaintSetup,
    seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<InpaintTrainer> {
    let pairs = pairs_for_gender(manifest, Some(gender), setup.generator.input_size)?;
    let mut trainer = InpaintTrainer::new(setup, Some(gender), seed)?;
    run_inpainting(&mut trainer, &pairs, checkpoint_path)?;
    Ok(trainer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
}

impl SupervisedOptions {
    pub fn segmenter() -> Self {
        Self { lr: 2.5e-4, batch_size: 2, iterations: 10_000 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr must be >= 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SupervisedOptions {
    fn default() -> Self {
        Self::segmenter()
    }
}

fn adam_default(lr: f64) -> AdamConfig {
    AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
}

pub struct SegmenterRun {
    pub model: Segmenter,
    pub losses: Vec<f64>,
}

/// Minimises pixelwise BCE of the segmenter on `(image, mask)` samples.
pub fn train_segmenter_on(
    samples: &[(ImageTensor, BinarySegmentationMap)],
    config: SegmenterConfig,
    options: SupervisedOptions,
    seed: u64,
) -> Result<SegmenterRun> {
    options.validate()?;
    let model = Segmenter::new(config, seed)?;
    let mut adam = Adam::new(model.store().trainable(), adam_default(options.lr))?;
    let mut schedule = BatchSchedule::new(seed, samples.len(), options.batch_size)?;
    let mut losses = Vec::with_capacity(options.iterations as usize);
    for it in 0..options.iterations {
        let idx = schedule.batch(it);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &samples[i].0).collect();
        let x = ImageTensor::batch_to_tensor(&imgs, DType::F32, &Device::Cpu)?;
        let y = Tensor::cat(
            &idx.iter().map(|&i| samples[i].1.to_tensor(DType::F32, &Device::Cpu)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let loss = bce_with_logits(&model.logits(&x)?, &y)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { term: "segmentation_bce".into() });
        }
        losses.push(v);
        adam.step(&loss.backward()?)?;
        if it % 100 == 0 {
            log::info!("segmenter {it}: bce {v:.5}");
        }
    }
    Ok(SegmenterRun { model, losses })
}

/// Masked images against their segmaps; with `clean_negatives` each clean
/// image is added with an empty target.
pub fn train_segmenter(
    manifest: &Manifest,
    config: SegmenterConfig,
    options: SupervisedOptions,
    clean_negatives: bool,
    seed: u64,
) -> Result<SegmenterRun> {
    let pairs = pairs_for_gender(manifest, None, config.input_size)?;
    let s = config.input_size;
    let mut samples = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        if clean_negatives {
            samples.push((p.clean.clone(), BinarySegmentationMap::zeros(s, s)?));
        }
        samples.push((p.masked, p.segmap));
    }
    train_segmenter_on(&samples, config, options, seed)
}

pub const SEGMENTER_KIND: &str = "segmenter";
pub const LANDMARKS_KIND: &str = "landmarks";
pub const GENDER_KIND: &str = "gender";

pub fn save_segmenter(model: &Segmenter, path: impl AsRef<Path>) -> Result<()> {
    model_checkpoint(SEGMENTER_KIND, None, model.config(), model.store(), 0)?.save(path)
}

pub fn load_segmenter(path: impl AsRef<Path>) -> Result<Segmenter> {
    let ck = Checkpoint::load(path)?;
    ck.expect(SEGMENTER_KIND, None)?;
    let m = Segmenter::new(ck.config_as()?, 0)?;
    m.store().import(&ck.tensor_map())?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkTrainOptions {
    pub optim: SupervisedOptions,
    /// Gaussian width of target heatmaps, in heatmap pixels.
    pub sigma: f64,
    pub awing: AdaptiveWingParams,
    pub dilation_radius: usize,
    pub boost: f64,
}

impl Default for LandmarkTrainOptions {
    fn default() -> Self {
        Self {
            optim: SupervisedOptions { lr: 2.5e-4, batch_size: 4, iterations: 10_000 },
            sigma: 1.5,
            awing: AdaptiveWingParams::default(),
            dilation_radius: 1,
            boost: DEFAULT_BOOST,
        }
    }
}

pub struct LandmarkRun {
    pub model: LandmarkPredictor,
    pub losses: Vec<f64>,
}

/// Adaptive wing loss with the weighted loss map, summed over stacks.
pub fn train_landmarks_on(
    samples: &[(ImageTensor, crate::landmarks::LandmarkSet)],
    config: LandmarkPredictorConfig,
    options: LandmarkTrainOptions,
    seed: u64,
) -> Result<LandmarkRun> {
    options.optim.validate()?;
    options.awing.validate()?;
    let model = LandmarkPredictor::new(config, seed)?;
    let hm = config.heatmap_size;
    let mut targets = Vec::with_capacity(samples.len());
    for (_, lm) in samples {
        let gt = render_heatmaps(lm, hm, options.sigma)?;
        let w = weighted_loss_map(&gt, options.dilation_radius, options.boost)?;
        let w = Tensor::from_vec(w, (1, crate::NUM_LANDMARKS, hm, hm), &Device::Cpu)?.to_dtype(DType::F32)?;
        targets.push((gt.to_tensor(DType::F32, &Device::Cpu)?, w));
    }
    let mut adam = Adam::new(model.store().trainable(), adam_default(options.optim.lr))?;
    let mut schedule = BatchSchedule::new(seed, samples.len(), options.optim.batch_size)?;
    let mut losses = Vec::with_capacity(options.optim.iterations as usize);
    for it in 0..options.optim.iterations {
        let idx = schedule.batch(it);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &samples[i].0).collect();
        let x = ImageTensor::batch_to_tensor(&imgs, DType::F32, &Device::Cpu)?;
        let gt = Tensor::cat(&idx.iter().map(|&i| &targets[i].0).collect::<Vec<_>>(), 0)?;
        let w = Tensor::cat(&idx.iter().map(|&i| &targets[i].1).collect::<Vec<_>>(), 0)?;
        let mut loss: Option<Tensor> = None;
        for pred in model.forward_all(&x)? {
            let l = adaptive_wing_loss_tensor(&pred, &gt, &options.awing, Some(&w))?;
            loss = Some(match loss {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let loss = loss.expect("at least one stack");
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { term: "adaptive_wing".into() });
        }
        losses.push(v);
        adam.step(&loss.backward()?)?;
        if it % 100 == 0 {
            log::info!("landmarks {it}: awing {v:.5}");
        }
    }
    Ok(LandmarkRun { model, losses })
}

/// Trains on the masked images of every manifest entry.
pub fn train_landmarks(
    manifest: &Manifest,
    config: LandmarkPredictorConfig,
    options: LandmarkTrainOptions,
    seed: u64,
) -> Result<LandmarkRun> {
    let pairs = pairs_for_gender(manifest, None, config.input_size)?;
    let samples: Vec<_> = pairs.into_iter().map(|p| (p.masked, p.landmarks)).collect();
    train_landmarks_on(&samples, config, options, seed)
}

pub fn save_landmarks(model: &LandmarkPredictor, path: impl AsRef<Path>) -> Result<()> {
    model_checkpoint(LANDMARKS_KIND, None, model.config(), model.store(), 0)?.save(path)
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkPredictor> {
    let ck = Checkpoint::load(path)?;
    ck.expect(LANDMARKS_KIND, None)?;
    let m = LandmarkPredictor::new(ck.config_as()?, 0)?;
    m.store().import(&ck.tensor_map())?;
    Ok(m)
}

pub fn save_gender(model: &GenderClassifier, path: impl AsRef<Path>) -> Result<()> {
    model_checkpoint(GENDER_KIND, None, model.config(), model.store(), 0)?.save(path)
}

pub fn load_gender(path: impl AsRef<Path>) -> Result<GenderClassifier> {
    let ck = Checkpoint::load(path)?;
    ck.expect(GENDER_KIND, None)?;
    let config: GenderClassifierConfig = ck.config_as()?;
    let m = build_classifier(&config, 0)?;
    m.store().import(&ck.tensor_map())?;
    Ok(m)
}

/// Settings file for the command line. Every section and field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub image_size: usize,
    pub inpaint: InpaintSetup,
    pub segmenter: SegmenterConfig,
    pub segmenter_training: SupervisedOptions,
    pub segmenter_clean_negatives: bool,
    pub landmarks: LandmarkPredictorConfig,
    pub landmark_training: LandmarkTrainOptions,
    pub gender: GenderClassifierConfig,
    pub gender_training: GenderTraining,
    pub dilation_radius: usize,
    pub mask_threshold: f64,
}

/// Serialisable mirror of [`GenderTrainOptions`] without the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
}

impl Default for GenderTraining {
    fn default() -> Self {
        let d = GenderTrainOptions::default();
        Self { epochs: d.epochs, batch_size: d.batch_size, lr: d.lr, val_fraction: 0.1 }
    }
}

impl GenderTraining {
    pub fn options(&self, seed: u64) -> GenderTrainOptions {
        GenderTrainOptions { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, seed }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            inpaint: InpaintSetup::default(),
            segmenter: SegmenterConfig::default(),
            segmenter_training: SupervisedOptions::segmenter(),
            segmenter_clean_negatives: true,
            landmarks: LandmarkPredictorConfig::default(),
            landmark_training: LandmarkTrainOptions::default(),
            gender: GenderClassifierConfig::default(),
            gender_training: GenderTraining::default(),
            dilation_radius: 4,
            mask_threshold: 0.5,
        }
    }
}

impl TrainingConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.inpaint.optimizer.validate()?;
        c.inpaint.weights.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Laptop-sized defaults: 64x64 images and narrow networks.
    pub fn desk() -> Self {
        let size = 64;
        Self {
            image_size: size,
            inpaint: desk_inpaint_setup(size),
            segmenter: SegmenterConfig { input_size: size, base_channels: 8, depth: 3 },
            segmenter_training: SupervisedOptions { lr: 2e-3, batch_size: 4, iterations: 400 },
            segmenter_clean_negatives: true,
            landmarks: LandmarkPredictorConfig {
                input_size: size,
                num_stacks: 2,
                base_channels: 16,
                heatmap_size: 64,
                hourglass_depth: 2,
            },
            landmark_training: LandmarkTrainOptions {
                optim: SupervisedOptions { lr: 2e-3, batch_size: 4, iterations: 400 },
                sigma: 1.5,
                ..Default::default()
            },
            gender: GenderClassifierConfig {
                input_size: size,
                base_channels: 8,
                head_layers: vec![32, 16, 1],
                ..Default::default()
            },
            gender_training: GenderTraining { epochs: 40, batch_size: 16, lr: 1e-3, val_fraction: 0.0 },
            dilation_radius: 1,
            mask_threshold: 0.5,
        }
    }
}

/// Inpainting setup at `size x size` with narrow networks.
pub fn desk_inpaint_setup(size: usize) -> InpaintSetup {
    InpaintSetup {
        generator: GeneratorConfig { input_size: size, base_channels: 8, landmark_sigma: 1.0, ..Default::default() },
        discriminator: DiscriminatorConfig::with_base(16),
        optimizer: OptimizerConfig { iterations: 2000, lr_generator: 1e-3, lr_discriminator: 1e-4, ..Default::default() },
        weights: LossWeights::default(),
        extractor_widths: vec![8, 16, 32, 32, 32],
        history_capacity: 1024,
    }
}
