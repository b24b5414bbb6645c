//! Binary gender gate over masked faces. The output is p(male).

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
pub use crate::nn::bce_with_logits;
use crate::nn::{scalar, shuffled_indices, sigmoid, Adam, AdamConfig, BatchNorm1d, Conv2d, ConvSpec, Linear, ParamStore};
use crate::synthdata::{Gender, Manifest};

/// Anything that yields p(male) for an image; lets stubs stand in for the
/// trained classifier.
pub trait GenderScorer {
    fn male_probability(&self, image: &ImageTensor) -> Result<f64>;
    fn input_size(&self) -> usize;
    fn threshold(&self) -> f64 {
        0.5
    }
}

/// Label rule: male iff `p >= threshold`.
pub fn label_for(p: f64, threshold: f64) -> Gender {
    if p >= threshold {
        Gender::Male
    } else {
        Gender::Female
    }
}

pub const STRIDED_CNN: &str = "strided-cnn";

pub fn backbone_ids() -> &'static [&'static str] {
    &[STRIDED_CNN]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenderClassifierConfig {
    pub input_size: usize,
    pub backbone: String,
    /// Width of the first backbone block; each later block doubles it.
    pub base_channels: usize,
    /// Dense widths after the backbone, ending in the single output unit.
    pub head_layers: Vec<usize>,
    pub threshold: f64,
}

impl Default for GenderClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            backbone: STRIDED_CNN.into(),
            base_channels: 32,
            head_layers: vec![256, 64, 1],
            threshold: 0.5,
        }
    }
}

impl GenderClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !backbone_ids().contains(&self.backbone.as_str()) {
            return Err(Error::Config(format!(
                "unknown backbone `{}` (known: {})",
                self.backbone,
                backbone_ids().join(", ")
            )));
        }
        if self.head_layers.last() != Some(&1) {
            return Err(Error::Config("head must end in a single unit".into()));
        }
        if self.head_layers.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if self.base_channels == 0 || self.input_size < 16 {
            return Err(Error::Config("input_size must be >= 16 and base_channels > 0".into()));
        }
        Ok(())
    }
}

pub struct GenderClassifier {
    config: GenderClassifierConfig,
    store: ParamStore,
    blocks: Vec<Conv2d>,
    hidden: Vec<(Linear, BatchNorm1d)>,
    out: Linear,
}

impl GenderClassifier {
    pub fn config(&self) -> &GenderClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Zeroes every head weight and bias so the logit is 0 for any input.
    pub fn zero_head(&self) -> Result<()> {
        for (name, var, _) in self.store.iter() {
            if name.starts_with("head.") && (name.ends_with(".weight") || name.ends_with(".bias")) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// Logits of shape `(N,)` for images `(N,3,H,W)` in [0,1].
    pub fn logits(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = ((images * 2.0)? - 1.0)?;
        for conv in &self.blocks {
            x = conv.forward(&x)?.relu()?;
        }
        let mut f = x.mean((2, 3))?;
        for (lin, bn) in &self.hidden {
            f = bn.forward(&lin.forward(&f)?.relu()?, train)?;
        }
        Ok(self.out.forward(&f)?.squeeze(1)?)
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(images, false)?)
    }
}

impl GenderScorer for GenderClassifier {
    fn male_probability(&self, image: &ImageTensor) -> Result<f64> {
        check_size(image, self.config.input_size)?;
        let x = image.to_tensor(DType::F32, &Device::Cpu)?;
        scalar(&self.probabilities(&x)?)
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }
}

fn check_size(image: &ImageTensor, size: usize) -> Result<()> {
    if image.height() != size || image.width() != size || image.channels() != 3 {
        return Err(Error::Dimension(format!(
            "classifier expects {size}x{size}x3, got {}x{}x{}",
            image.width(),
            image.height(),
            image.channels()
        )));
    }
    Ok(())
}

pub fn build_classifier(config: &GenderClassifierConfig, seed: u64) -> Result<GenderClassifier> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut blocks = Vec::new();
    let mut c_in = 3;
    for i in 0..4 {
        let c_out = config.base_channels << i;
        blocks.push(Conv2d::new(&mut store, &format!("backbone.{i}"), ConvSpec::new(c_in, c_out, 3).stride(2), &mut rng)?);
        c_in = c_out;
    }
    let mut hidden = Vec::new();
    let (widths, _) = config.head_layers.split_at(config.head_layers.len() - 1);
    let mut f_in = c_in;
    for (i, &w) in widths.iter().enumerate() {
        let lin = Linear::new(&mut store, &format!("head.{i}"), f_in, w, &mut rng)?;
        let bn = BatchNorm1d::new(&mut store, &format!("head.{i}.bn"), w)?;
        hidden.push((lin, bn));
        f_in = w;
    }
    let out = Linear::new(&mut store, "head.out", f_in, 1, &mut rng)?;
    Ok(GenderClassifier { config: config.clone(), store, blocks, hidden, out })
}

/// Probability and label for one image.
pub fn classify(model: &dyn GenderScorer, image: &ImageTensor, threshold: f64) -> Result<(f64, Gender)> {
    check_size(image, model.input_size())?;
    let p = model.male_probability(image)?;
    Ok((p, label_for(p, threshold)))
}

fn target(g: Gender) -> f32 {
    match g {
        Gender::Male => 1.0,
        Gender::Female => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenderTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GenderTrainOptions {
    fn default() -> Self {
        Self { epochs: 150, batch_size: 256, lr: 1e-4, seed: 0 }
    }
}

pub struct GenderTraining {
    pub model: GenderClassifier,
    /// Accuracy of the returned weights on the validation set (training set
    /// when no validation data is given).
    pub accuracy: f64,
    pub best_epoch: usize,
    /// Mean training loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

pub fn accuracy(model: &GenderClassifier, images: &[ImageTensor], labels: &[Gender]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(32) {
        let refs: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
        let x = ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)?;
        let p: Vec<f32> = model.probabilities(&x)?.to_vec1()?;
        for (&i, &p) in chunk.iter().zip(&p) {
            if label_for(p as f64, model.config.threshold) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Adam on BCE from in-memory samples; keeps the weights of the epoch with
/// the best validation accuracy.
pub fn train_classifier_on(
    train: (&[ImageTensor], &[Gender]),
    val: (&[ImageTensor], &[Gender]),
    config: &GenderClassifierConfig,
    options: GenderTrainOptions,
) -> Result<GenderTraining> {
    let (images, labels) = train;
    if images.len() != labels.len() || val.0.len() != val.1.len() {
        return Err(Error::Dataset("images and labels differ in length".into()));
    }
    let males = labels.iter().filter(|&&g| g == Gender::Male).count();
    if males == 0 || males == labels.len() {
        return Err(Error::Training("training set contains a single class".into()));
    }
    if options.batch_size == 0 || !(options.lr >= 0.0) {
        return Err(Error::Config("batch size must be >= 1 and lr >= 0".into()));
    }
    for img in images.iter().chain(val.0) {
        check_size(img, config.input_size)?;
    }
    let model = build_classifier(config, options.seed)?;
    let mut adam = Adam::new(
        model.store.trainable(),
        AdamConfig { lr: options.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x6e6465);
    let (eval_images, eval_labels) = if val.0.is_empty() { (images, labels) } else { val };
    let mut best = (f64::NEG_INFINITY, 0, model.store.export());
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let order = shuffled_indices(images.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(options.batch_size) {
            let refs: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x = ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)?;
            let y: Vec<f32> = chunk.iter().map(|&i| target(labels[i])).collect();
            let y = Tensor::from_vec(y, chunk.len(), &Device::Cpu)?;
            // batch norm needs two samples for a batch statistic
            let train_mode = chunk.len() > 1;
            let loss = bce_with_logits(&model.logits(&x, train_mode)?, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { term: "gender_bce".into() });
            }
            total += value * chunk.len() as f64;
            adam.step(&loss.backward()?)?;
        }
        epoch_losses.push(total / images.len() as f64);
        let acc = accuracy(&model, eval_images, eval_labels)?;
        log::debug!("gender epoch {epoch}: loss {:.5} acc {acc:.3}", epoch_losses[epoch]);
        if acc > best.0 {
            best = (acc, epoch, model.store.export());
        }
    }
    if options.epochs > 0 {
        model.store.import(&best.2.into_iter().collect())?;
    }
    let accuracy = if options.epochs > 0 { best.0 } else { accuracy(&model, eval_images, eval_labels)? };
    Ok(GenderTraining { model, accuracy, best_epoch: best.1, epoch_losses })
}

fn labeled_images(manifest: &Manifest, size: usize) -> Result<(Vec<ImageTensor>, Vec<Gender>)> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let g = e
            .gender
            .ok_or_else(|| Error::Dataset(format!("entry {} has no gender label", e.masked.display())))?;
        images.push(crate::imaging::load_image(manifest.resolve(&e.masked), size)?);
        labels.push(g);
    }
    Ok((images, labels))
}

/// Trains on the masked images of `train`, selecting weights on `val`.
pub fn train_classifier(
    train: &Manifest,
    val: &Manifest,
    config: &GenderClassifierConfig,
    options: GenderTrainOptions,
) -> Result<GenderTraining> {
    let (ti, tl) = labeled_images(train, config.input_size)?;
    let (vi, vl) = labeled_images(val, config.input_size)?;
    train_classifier_on((&ti, &tl), (&vi, &vl), config, options)
}
