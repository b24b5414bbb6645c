//! Landmark-guided inpainting generator, patch discriminator and the loss
//! terms used to train them.
//!
//! Both networks take the 98 landmarks as one rendered channel (max over
//! the per-point Gaussians) instead of 98 heatmap planes.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinarySegmentationMap, ImageTensor};
use crate::landmarks::{landmark_guidance, HeatmapStack, LandmarkSet};
use crate::nn::{leaky_relu, scalar, sigmoid, upsample2, Conv2d, ConvSpec, ParamKind, ParamStore, SpectralConv2d};

/// One-channel landmark image in [0,1] at `size x size`.
pub fn landmark_channel(landmarks: &LandmarkSet, size: usize, sigma: f64) -> Result<ImageTensor> {
    ImageTensor::new(size, size, 1, landmark_guidance(landmarks, size, sigma)?)
}

/// Max projection of a heatmap stack as a one-channel image.
pub fn landmark_channel_from_heatmaps(heatmaps: &HeatmapStack) -> Result<ImageTensor> {
    let data = heatmaps.max_projection().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    ImageTensor::new(heatmaps.height(), heatmaps.width(), 1, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub down_blocks: usize,
    pub dilated_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub base_channels: usize,
    pub attention: bool,
    /// Gaussian width of the rendered landmark channel, in pixels.
    pub landmark_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            down_blocks: 3,
            dilated_blocks: 7,
            dilation_rates: vec![2, 4, 8, 2, 4, 8, 2],
            base_channels: 32,
            attention: true,
            landmark_sigma: 2.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_blocks == 0 || self.dilated_blocks == 0 {
            return Err(Error::Config("down_blocks and dilated_blocks must be >= 1".into()));
        }
        if self.dilation_rates.len() != self.dilated_blocks {
            return Err(Error::Config(format!(
                "{} dilation rates for {} dilated blocks",
                self.dilation_rates.len(),
                self.dilated_blocks
            )));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        let step = 1usize << self.down_blocks;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.down_blocks
            )));
        }
        if !(self.landmark_sigma > 0.0) {
            return Err(Error::Config("landmark_sigma must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    /// Receptive field in input pixels of one bottleneck unit after the
    /// dilated blocks.
    pub fn receptive_field(&self) -> usize {
        let mut layers = vec![(3, 1, 1)];
        layers.extend((0..self.down_blocks).map(|_| (3, 2, 1)));
        for &r in &self.dilation_rates {
            layers.push((3, 1, r));
            layers.push((3, 1, 1));
        }
        receptive_field(&layers)
    }
}

/// Standard recurrence over `(kernel, stride, dilation)` layers.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for &(k, s, d) in layers {
        rf += d * (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Spatial self-attention over the post-dilation features fused with the
/// pre-dilation features through a learned gate:
/// `out = F + gamma * (sigmoid(g) * Attn(F) + (1 - sigmoid(g)) * S)`.
struct LongShortAttention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gate: Var,
    gamma: Var,
    key_dim: usize,
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(candle_core::D::Minus1)?)?)
}

impl LongShortAttention {
    fn new(store: &mut ParamStore, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let key_dim = (c / 8).max(1);
        Ok(Self {
            query: Conv2d::new(store, "g.attn.query", ConvSpec::new(c, key_dim, 1), rng)?,
            key: Conv2d::new(store, "g.attn.key", ConvSpec::new(c, key_dim, 1), rng)?,
            value: Conv2d::new(store, "g.attn.value", ConvSpec::new(c, c, 1), rng)?,
            gate: store.constant("g.attn.gate", &[1], 0.0, ParamKind::Trainable)?,
            gamma: store.constant("g.attn.gamma", &[1], 0.0, ParamKind::Trainable)?,
            key_dim,
        })
    }

    /// `(N, HW, HW)`; row `i` holds the weights position `i` gives every position.
    fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = f.dims4()?;
        let q = self.query.forward(f)?.reshape((n, self.key_dim, h * w))?.transpose(1, 2)?.contiguous()?;
        let k = self.key.forward(f)?.reshape((n, self.key_dim, h * w))?;
        softmax_last(&(q.matmul(&k)? / (self.key_dim as f64).sqrt())?)
    }

    fn forward(&self, f: &Tensor, short: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = f.dims4()?;
        let a = self.weights(f)?;
        let v = self.value.forward(f)?.reshape((n, c, h * w))?;
        let long = v.matmul(&a.transpose(1, 2)?.contiguous()?)?.reshape((n, c, h, w))?;
        let dt = f.dtype();
        let g = sigmoid(&self.gate.as_tensor().to_dtype(dt)?)?;
        let mix = (long.broadcast_mul(&g)? + short.broadcast_mul(&(g.neg()? + 1.0)?)?)?;
        Ok((f + mix.broadcast_mul(&self.gamma.as_tensor().to_dtype(dt)?)?)?)
    }
}

struct DilatedBlock {
    dilated: Conv2d,
    pointwise: Conv2d,
}

impl DilatedBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.pointwise.forward(&self.dilated.forward(x)?.relu()?)?;
        Ok((x + r)?)
    }
}

/// U-Net style generator: strided encoder, dilated residual bottleneck,
/// long-short attention, decoder with 1x1 fusion of every shortcut.
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<DilatedBlock>,
    attention: Option<LongShortAttention>,
    fuse: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head_fuse: Conv2d,
    head: Conv2d,
}

/// Input channels: three image, one landmark, one mask.
pub const GENERATOR_IN_CHANNELS: usize = 5;

pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<Generator> {
    Generator::new(config, seed)
}

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.down_blocks;
        let stem = Conv2d::new(&mut store, "g.stem", ConvSpec::new(GENERATOR_IN_CHANNELS, config.width(0), 3), &mut rng)?;
        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let spec = ConvSpec::new(config.width(i), config.width(i + 1), 3).stride(2);
            down.push(Conv2d::new(&mut store, &format!("g.down.{i}"), spec, &mut rng)?);
        }
        let c = config.width(d);
        let mut blocks = Vec::with_capacity(config.dilated_blocks);
        for (i, &r) in config.dilation_rates.iter().enumerate() {
            let dilated = Conv2d::new(&mut store, &format!("g.res.{i}.dilated"), ConvSpec::new(c, c, 3).dilation(r), &mut rng)?;
            // small residual branches keep the initial bottleneck close to identity
            let pointwise = Conv2d::with_std(&mut store, &format!("g.res.{i}.conv"), ConvSpec::new(c, c, 3), 0.01, &mut rng)?;
            blocks.push(DilatedBlock { dilated, pointwise });
        }
        let attention = if config.attention { Some(LongShortAttention::new(&mut store, c, &mut rng)?) } else { None };
        let mut fuse = Vec::with_capacity(d);
        let mut up = Vec::with_capacity(d);
        for level in (1..=d).rev() {
            let w = config.width(level);
            fuse.push(Conv2d::new(&mut store, &format!("g.fuse.{level}"), ConvSpec::new(2 * w, w, 1), &mut rng)?);
            up.push(Conv2d::new(&mut store, &format!("g.up.{level}"), ConvSpec::new(w, config.width(level - 1), 3), &mut rng)?);
        }
        let w0 = config.width(0);
        let head_fuse = Conv2d::new(&mut store, "g.fuse.0", ConvSpec::new(2 * w0, w0, 1), &mut rng)?;
        let head = Conv2d::with_std(&mut store, "g.head", ConvSpec::new(w0, 3, 3), 0.02, &mut rng)?;
        Ok(Self { config: config.clone(), store, stem, down, blocks, attention, fuse, up, head_fuse, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Zeroes the last convolution of every residual branch, making each
    /// dilated block an identity map.
    pub fn zero_residual_branches(&self) -> Result<()> {
        for b in &self.blocks {
            b.pointwise.weight.set(&b.pointwise.weight.zeros_like()?)?;
            if let Some(bias) = &b.pointwise.bias {
                bias.set(&bias.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// `[ground * (1 - mask) in [-1,1], landmark, mask]` from `(N,3,H,W)`,
    /// `(N,1,H,W)`, `(N,1,H,W)` tensors.
    pub fn assemble_input(ground: &Tensor, landmark: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = ground.dims4()?;
        if c != 3 || landmark.dims4()? != (n, 1, h, w) || mask.dims4()? != (n, 1, h, w) {
            return Err(Error::Dimension(format!(
                "generator inputs: image {:?}, landmark {:?}, mask {:?}",
                ground.dims(),
                landmark.dims(),
                mask.dims()
            )));
        }
        let keep = (mask.neg()? + 1.0)?;
        let visible = ((ground.broadcast_mul(&keep)? * 2.0)? - 1.0)?;
        Ok(Tensor::cat(&[&visible, landmark, mask], 1)?)
    }

    fn encode(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = vec![self.stem.forward(x)?.relu()?];
        for conv in &self.down {
            let next = conv.forward(skips.last().expect("stem output"))?.relu()?;
            skips.push(next);
        }
        let short = skips.last().expect("encoder output").clone();
        let mut f = short.clone();
        for b in &self.blocks {
            f = b.forward(&f)?;
        }
        Ok((skips, f))
    }

    fn check_size(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != GENERATOR_IN_CHANNELS || h != s || w != s {
            return Err(Error::Dimension(format!("generator expects {s}x{s}, got {w}x{h} with {c} channels")));
        }
        Ok(())
    }

    /// Full-frame prediction in [0,1], shape `(N,3,H,W)`.
    pub fn forward(&self, ground: &Tensor, landmark: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = Self::assemble_input(ground, landmark, mask)?;
        self.check_size(&x)?;
        let (skips, f) = self.encode(&x)?;
        let short = &skips[self.config.down_blocks];
        let mut y = match &self.attention {
            Some(a) => a.forward(&f, short)?,
            None => f,
        };
        for (i, level) in (1..=self.config.down_blocks).rev().enumerate() {
            y = self.fuse[i].forward(&Tensor::cat(&[&y, &skips[level]], 1)?)?.relu()?;
            y = self.up[i].forward(&upsample2(&y)?)?.relu()?;
        }
        y = self.head_fuse.forward(&Tensor::cat(&[&y, &skips[0]], 1)?)?.relu()?;
        Ok(((self.head.forward(&y)?.tanh()? + 1.0)? * 0.5)?)
    }

    /// Row-stochastic attention weights `(N, HW, HW)` at the bottleneck.
    pub fn attention_weights(&self, ground: &Tensor, landmark: &Tensor, mask: &Tensor) -> Result<Option<Tensor>> {
        let Some(a) = &self.attention else { return Ok(None) };
        let x = Self::assemble_input(ground, landmark, mask)?;
        self.check_size(&x)?;
        let (_, f) = self.encode(&x)?;
        Ok(Some(a.weights(&f)?))
    }

    /// `I_p = G(ground, landmark, mask)` for one image.
    pub fn generate(&self, ground: &ImageTensor, landmark: &ImageTensor, mask: &BinarySegmentationMap) -> Result<ImageTensor> {
        let (ground_t, lm_t, mask_t) = single_inputs(ground, landmark, mask, DType::F32)?;
        ImageTensor::from_tensor(&self.forward(&ground_t, &lm_t, &mask_t)?)
    }
}

fn single_inputs(
    image: &ImageTensor,
    landmark: &ImageTensor,
    mask: &BinarySegmentationMap,
    dtype: DType,
) -> Result<(Tensor, Tensor, Tensor)> {
    if image.channels() != 3
        || landmark.channels() != 1
        || (image.height(), image.width()) != (landmark.height(), landmark.width())
    {
        return Err(Error::Dimension(format!(
            "image {}x{}x{} with landmark channel {}x{}x{}",
            image.width(),
            image.height(),
            image.channels(),
            landmark.width(),
            landmark.height(),
            landmark.channels()
        )));
    }
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Dimension("mask and image sizes differ".into()));
    }
    Ok((
        image.to_tensor(dtype, &Device::Cpu)?,
        landmark.to_tensor(dtype, &Device::Cpu)?,
        mask.to_tensor(dtype, &Device::Cpu)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Image channels plus the landmark channel.
    pub input_channels: usize,
    /// Convolutions in order; the last one emits the score map.
    pub layers: Vec<PatchLayer>,
    pub spectral_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::with_base(64)
    }
}

impl DiscriminatorConfig {
    /// The 70x70 patch layout with widths `base, 2b, 4b, 8b, 1`.
    pub fn with_base(base: usize) -> Self {
        let l = |out_channels, stride| PatchLayer { out_channels, kernel: 4, stride };
        Self {
            input_channels: 4,
            layers: vec![l(base, 2), l(2 * base, 2), l(4 * base, 2), l(8 * base, 1), l(1, 1)],
            spectral_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.input_channels == 0 {
            return Err(Error::Config("discriminator needs layers and input channels".into()));
        }
        if self.layers.iter().any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::Config("discriminator layer with zero width, kernel or stride".into()));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::Config("last discriminator layer must have one channel".into()));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        let layers: Vec<_> = self.layers.iter().map(|l| (l.kernel, l.stride, 1)).collect();
        receptive_field(&layers)
    }

    /// Score-map side for a square input of side `size` (padding 1 per layer).
    pub fn output_size(&self, size: usize) -> Option<usize> {
        let mut s = size;
        for l in &self.layers {
            if s + 2 < l.kernel {
                return None;
            }
            s = (s + 2 - l.kernel) / l.stride + 1;
        }
        Some(s)
    }
}

enum PatchConv {
    Plain(Conv2d),
    Spectral(SpectralConv2d),
}

/// LSGAN patch discriminator over `[image, landmark]`; no output sigmoid.
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<PatchConv>,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(config.layers.len());
        let mut c_in = config.input_channels;
        for (i, l) in config.layers.iter().enumerate() {
            let spec = ConvSpec::new(c_in, l.out_channels, l.kernel).stride(l.stride).padding(1);
            let name = format!("d.{i}");
            convs.push(if config.spectral_norm {
                let c = SpectralConv2d::new(&mut store, &name, spec, &mut rng)?;
                c.power_iterate(5)?;
                PatchConv::Spectral(c)
            } else {
                PatchConv::Plain(Conv2d::with_std(&mut store, &name, spec, 0.05, &mut rng)?)
            });
            c_in = l.out_channels;
        }
        Ok(Self { config: config.clone(), store, convs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn spectral_layers(&self) -> Vec<&SpectralConv2d> {
        self.convs
            .iter()
            .filter_map(|c| match c {
                PatchConv::Spectral(s) => Some(s),
                PatchConv::Plain(_) => None,
            })
            .collect()
    }

    /// Score map `(N,1,h,w)` for images `(N,3,H,W)` in [0,1] and landmark
    /// channels `(N,1,H,W)`. `train` advances spectral power iteration.
    pub fn forward(&self, image: &Tensor, landmark: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        if landmark.dims4()? != (n, 1, h, w) || c + 1 != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "discriminator got image {:?} and landmark {:?}",
                image.dims(),
                landmark.dims()
            )));
        }
        let mut x = Tensor::cat(&[&((image * 2.0)? - 1.0)?, landmark], 1)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = match conv {
                PatchConv::Plain(c) => c.forward(&x)?,
                PatchConv::Spectral(c) => c.forward(&x, train)?,
            };
            if i < last {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }

    /// Score map `(h, w)` for one image.
    pub fn discriminate(&self, image: &ImageTensor, landmark: &ImageTensor) -> Result<Tensor> {
        if image.channels() != 3
        || landmark.channels() != 1
        || (image.height(), image.width()) != (landmark.height(), landmark.width())
    {
            return Err(Error::Dimension("discriminator inputs differ in size".into()));
        }
        let x = image.to_tensor(DType::F32, &Device::Cpu)?;
        let l = landmark.to_tensor(DType::F32, &Device::Cpu)?;
        Ok(self.forward(&x, &l, false)?.squeeze(0)?.squeeze(0)?)
    }
}

/// Fixed feature taps `phi_i` used by the style and perceptual losses.
pub trait FeatureExtractor {
    /// Tap activations of `(N,C,H,W)` images in [0,1], each `(N,N_i,H_i,W_i)`.
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Frozen fixed-seed strided CNN with one ReLU tap per stage; stands in
/// for the relu1_1..relu5_1 taps of a pretrained VGG-19.
pub struct StridedFeatureNet {
    convs: Vec<Conv2d>,
    _store: ParamStore,
}

impl StridedFeatureNet {
    pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 64, 64];

    /// First stage keeps resolution, every later stage halves it.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("feature extractor needs at least 2 taps".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(widths.len());
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let spec = ConvSpec::new(c_in, w, 3).stride(if i == 0 { 1 } else { 2 });
            convs.push(Conv2d::new(&mut store, &format!("phi.{i}"), spec, &mut rng)?);
            c_in = w;
        }
        Ok(Self { convs, _store: store })
    }

    pub fn standard() -> Result<Self> {
        Self::new(&Self::DEFAULT_WIDTHS, 0x5ee_d0f_f1)
    }
}

impl FeatureExtractor for StridedFeatureNet {
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((images * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            x = c.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// One tap: the raw image.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }
}

/// One tap: a fixed channel-mixing matrix `(out, in)` applied per pixel.
pub struct LinearExtractor {
    pub matrix: Vec<Vec<f64>>,
}

impl FeatureExtractor for LinearExtractor {
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (o, i) = (self.matrix.len(), self.matrix.first().map_or(0, Vec::len));
        let flat: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        let w = Tensor::from_vec(flat, (o, i, 1, 1), images.device())?.to_dtype(images.dtype())?;
        Ok(vec![crate::nn::conv2d(images, &w, 1, 0, 1)?])
    }
}

/// `G[i,j] = sum_hw phi_i phi_j / (N H W)` per batch item, `(B,N,N)`.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (b, n, h, w) = features.dims4()?;
    let f = features.reshape((b, n, h * w))?;
    let ft = f.transpose(1, 2)?.contiguous()?;
    Ok((f.matmul(&ft)? / (n * h * w) as f64)?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// `sum_i 1/N_i^2 * |gram(phi_i(pred*M)) - gram(phi_i(gt*M))|_1`, averaged over the batch.
pub fn style_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    check_pair(pred, gt)?;
    let batch = pred.dims4()?.0;
    let fp = extractor.taps(&pred.broadcast_mul(mask)?)?;
    let fg = extractor.taps(&gt.broadcast_mul(mask)?)?;
    let mut total: Option<Tensor> = None;
    for (p, g) in fp.iter().zip(&fg) {
        let n = p.dims4()?.1 as f64;
        let term = ((gram(p)? - gram(&g.detach())?)?.abs()?.sum_all()? / (n * n))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Config("feature extractor produced no taps".into()))?;
    Ok((total / batch as f64)?)
}

/// `|pred - gt|_1` over the full frame divided by mask pixels times
/// channels, averaged over the batch. Masks are `(N,1,H,W)`.
pub fn pixel_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_pair(pred, gt)?;
    let (b, c, _, _) = pred.dims4()?;
    let counts: Vec<f64> = mask.detach().to_dtype(DType::F64)?.sum((1, 2, 3))?.to_vec1()?;
    if let Some(i) = counts.iter().position(|&n| n <= 0.0) {
        return Err(Error::DegenerateMask(format!("batch item {i} has an empty mask")));
    }
    let per_item = (pred - gt)?.abs()?.sum((1, 2, 3))?;
    let norm: Vec<f64> = counts.iter().map(|n| 1.0 / (n * c as f64 * b as f64)).collect();
    let norm = Tensor::from_vec(norm, b, pred.device())?.to_dtype(pred.dtype())?;
    Ok((per_item * norm)?.sum_all()?)
}

/// `sum_i |phi_i(pred) - phi_i(gt)|_1 / (N_i H_i W_i)`, averaged over the batch.
pub fn perceptual_loss(pred: &Tensor, gt: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    check_pair(pred, gt)?;
    let fp = extractor.taps(pred)?;
    let fg = extractor.taps(gt)?;
    let mut total: Option<Tensor> = None;
    for (p, g) in fp.iter().zip(&fg) {
        // mean over batch and N_i H_i W_i at once
        let term = (p - g.detach())?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("feature extractor produced no taps".into()))
}

/// `(sum |dh| + sum |dv|) / (C H W)` with forward differences, averaged over the batch.
pub fn tv_loss(pred: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = pred.dims4()?;
    let dh = if w > 1 { (pred.narrow(3, 1, w - 1)? - pred.narrow(3, 0, w - 1)?)?.abs()?.sum_all()? } else { pred.zeros_like()?.sum_all()? };
    let dv = if h > 1 { (pred.narrow(2, 1, h - 1)? - pred.narrow(2, 0, h - 1)?)?.abs()?.sum_all()? } else { pred.zeros_like()?.sum_all()? };
    Ok(((dh + dv)? / (b * c * h * w) as f64)?)
}

/// `mean((D(fake) - 1)^2)`.
pub fn lsgan_generator_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores - 1.0)?.sqr()?.mean_all()?)
}

/// `mean(D(fake)^2) + mean((D(real) - 1)^2)`.
pub fn lsgan_discriminator_loss(fake_scores: &Tensor, real_scores: &Tensor) -> Result<Tensor> {
    let fake = fake_scores.sqr()?.mean_all()?;
    let real = (real_scores - 1.0)?.sqr()?.mean_all()?;
    Ok((fake + real)?)
}

/// `(L_advG, L_advD)`. Only `L_advG` carries gradient into `pred`.
pub fn adversarial_losses(
    d: &Discriminator,
    pred: &Tensor,
    gt: &Tensor,
    landmark: &Tensor,
    train: bool,
) -> Result<(Tensor, Tensor)> {
    check_pair(pred, gt)?;
    let fake_for_d = d.forward(&pred.detach(), landmark, train)?;
    let real = d.forward(gt, landmark, false)?;
    let adv_d = lsgan_discriminator_loss(&fake_for_d, &real)?;
    let adv_g = lsgan_generator_loss(&d.forward(pred, landmark, false)?)?;
    Ok((adv_g, adv_d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_perc: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_perc: 0.1, lambda_style: 250.0, lambda_tv: 0.1, lambda_adv: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_perc, self.lambda_style, self.lambda_tv, self.lambda_adv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self { lambda_perc: 0.0, lambda_style: 0.0, lambda_tv: 0.0, lambda_adv: 0.0 }
    }
}

/// The five generator terms as plain values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
    pub adv_g: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("pixel", self.pixel),
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("tv", self.tv),
            ("adv_g", self.adv_g),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: LossParts,
    /// Each part times its weight, in `LossParts` order.
    pub weighted: [f64; 5],
    pub total: f64,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `pixel + l_perc*perc + l_style*style + l_tv*tv + l_adv*adv_g`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let factors = [1.0, weights.lambda_perc, weights.lambda_style, weights.lambda_tv, weights.lambda_adv];
    let mut weighted = [0.0; 5];
    for (i, (_, v)) in parts.named().iter().enumerate() {
        weighted[i] = v * factors[i];
    }
    Ok(LossBreakdown { parts: *parts, weighted, total: compensated_sum(&weighted) })
}

/// Generator loss terms as tensors, kept for backpropagation.
pub struct LossTensors {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub style: Tensor,
    pub tv: Tensor,
    pub adv_g: Tensor,
}

impl LossTensors {
    pub fn values(&self) -> Result<LossParts> {
        Ok(LossParts {
            pixel: scalar(&self.pixel)?,
            perceptual: scalar(&self.perceptual)?,
            style: scalar(&self.style)?,
            tv: scalar(&self.tv)?,
            adv_g: scalar(&self.adv_g)?,
        })
    }

    /// Weighted sum as a differentiable scalar plus the checked breakdown.
    pub fn combine(&self, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
        let breakdown = total_loss(&self.values()?, weights)?;
        let t = (((&self.pixel + (&self.perceptual * weights.lambda_perc)?)? + (&self.style * weights.lambda_style)?)?
            + ((&self.tv * weights.lambda_tv)? + (&self.adv_g * weights.lambda_adv)?)?)?;
        Ok((t, breakdown))
    }
}
