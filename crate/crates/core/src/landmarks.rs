//! 98-point landmarks, Gaussian heatmaps, adaptive wing loss and a
//! stacked-hourglass heatmap regressor.

use std::path::Path;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{self, Conv2d, ConvSpec, ParamStore};
use crate::segmentation::disc_offsets;

pub const NUM_LANDMARKS: usize = 98;

/// Exactly 98 points in normalised `[0,1] x [0,1]` image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Parameter(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        for &(x, y) in &points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Parameter(format!("landmark ({x}, {y}) outside [0,1]")));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Largest per-point distance in units of a `size`-pixel grid.
    pub fn max_pixel_error(&self, other: &LandmarkSet, size: usize) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a.0 - b.0).hypot(a.1 - b.1)) * size as f64)
            .fold(0.0, f64::max)
    }

    pub fn mean_pixel_error(&self, other: &LandmarkSet, size: usize) -> f64 {
        let total: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1) * size as f64)
            .sum();
        total / NUM_LANDMARKS as f64
    }

    /// Parses 98 lines of `x y`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<f64> {
                parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("line {}: expected `x y`", i + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
            };
            let x = next()?;
            let y = next()?;
            points.push((x, y));
        }
        Self::new(points)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Parameter(m) => Error::Parameter(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(NUM_LANDMARKS * 24);
        for (x, y) in &self.points {
            s.push_str(&format!("{x:.8} {y:.8}\n"));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `channels x height x width` heatmaps, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "heatmap buffer holds {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("heatmap values must lie in [0,1]".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// `(1, K, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// From a `(K, H, W)` or `(1, K, H, W)` tensor; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (k, h, w) = t.dims3()?;
        let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Self::new(k, h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Per-pixel maximum over channels, a single structural guidance plane.
    pub fn max_projection(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0f64; n];
        for k in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(k)) {
                *o = o.max(*v);
            }
        }
        out
    }
}

/// Renders one unnormalised Gaussian per point. Each point is snapped to
/// the centre of its nearest heatmap pixel so the peak is exactly 1.
pub fn render_points(points: &[(f64, f64)], size: usize, sigma: f64) -> Result<HeatmapStack> {
    if sigma <= 0.0 {
        return Err(Error::Parameter("sigma must be positive".into()));
    }
    if size == 0 {
        return Err(Error::Dimension("heatmap size must be positive".into()));
    }
    let n = size * size;
    let mut data = vec![0.0; points.len() * n];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (k, &(x, y)) in points.iter().enumerate() {
        let (cx, cy) = (nearest_pixel(x, size) as f64, nearest_pixel(y, size) as f64);
        let plane = &mut data[k * n..(k + 1) * n];
        for row in 0..size {
            let dy = row as f64 - cy;
            for col in 0..size {
                let dx = col as f64 - cx;
                plane[row * size + col] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    HeatmapStack::new(points.len(), size, size, data)
}

fn nearest_pixel(coord: f64, size: usize) -> usize {
    ((coord * size as f64 - 0.5).round().max(0.0) as usize).min(size - 1)
}

pub fn render_heatmaps(landmarks: &LandmarkSet, size: usize, sigma: f64) -> Result<HeatmapStack> {
    render_points(landmarks.points(), size, sigma)
}

/// Single-channel landmark image (max over the 98 Gaussians) at `size x size`.
pub fn landmark_guidance(landmarks: &LandmarkSet, size: usize, sigma: f64) -> Result<Vec<f32>> {
    if sigma <= 0.0 {
        return Err(Error::Parameter("sigma must be positive".into()));
    }
    let mut out = vec![0.0f32; size * size];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach = (3.0 * sigma).ceil() as isize;
    for &(x, y) in landmarks.points() {
        let (cx, cy) = (nearest_pixel(x, size) as isize, nearest_pixel(y, size) as isize);
        for row in (cy - reach).max(0)..=(cy + reach).min(size as isize - 1) {
            for col in (cx - reach).max(0)..=(cx + reach).min(size as isize - 1) {
                let d2 = ((row - cy).pow(2) + (col - cx).pow(2)) as f64;
                let v = (-d2 * inv).exp() as f32;
                let o = &mut out[row as usize * size + col as usize];
                *o = o.max(v);
            }
        }
    }
    Ok(out)
}

/// Per-channel argmax; ties go to the smallest row, then smallest column.
pub fn peak_decode(heatmaps: &HeatmapStack) -> Vec<(f64, f64)> {
    let (h, w) = (heatmaps.height, heatmaps.width);
    (0..heatmaps.channels)
        .map(|k| {
            let plane = heatmaps.channel(k);
            let mut best = 0usize;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let (row, col) = (best / w, best % w);
            ((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64)
        })
        .collect()
}

/// Decodes a 98-channel stack into a [`LandmarkSet`].
pub fn decode_landmarks(heatmaps: &HeatmapStack) -> Result<LandmarkSet> {
    LandmarkSet::new(peak_decode(heatmaps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveWingParams {
    pub omega: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for AdaptiveWingParams {
    fn default() -> Self {
        Self {
            omega: 14.0,
            theta: 0.5,
            epsilon: 1.0,
            alpha: 2.1,
        }
    }
}

impl AdaptiveWingParams {
    pub fn validate(&self) -> Result<()> {
        let Self { omega, theta, epsilon, alpha } = *self;
        if omega <= 0.0 || theta <= 0.0 || epsilon <= 0.0 || alpha <= 0.0 {
            return Err(Error::Parameter("adaptive wing parameters must be positive".into()));
        }
        if theta >= 1.0 {
            return Err(Error::Parameter("adaptive wing theta must be below 1".into()));
        }
        Ok(())
    }

    /// Slope `A` and offset `C` of the linear branch for ground-truth value `y`,
    /// chosen so value and first derivative agree with the log branch at theta.
    pub fn linear_branch(&self, y: f64) -> (f64, f64) {
        let p = self.alpha - y;
        let r = self.theta / self.epsilon;
        let rp = r.powf(p);
        let a = self.omega * p * r.powf(p - 1.0) / (self.epsilon * (1.0 + rp));
        let c = self.theta * a - self.omega * (1.0 + rp).ln();
        (a, c)
    }

    /// Loss for absolute error `delta` at ground-truth value `y`.
    pub fn value(&self, delta: f64, y: f64) -> f64 {
        if delta < self.theta {
            self.omega * (1.0 + (delta / self.epsilon).powf(self.alpha - y)).ln()
        } else {
            let (a, c) = self.linear_branch(y);
            a * delta - c
        }
    }

    /// Derivative of [`Self::value`] with respect to `delta`.
    pub fn slope(&self, delta: f64, y: f64) -> f64 {
        if delta < self.theta {
            let p = self.alpha - y;
            let r = delta / self.epsilon;
            if r == 0.0 {
                return if p > 1.0 { 0.0 } else { f64::INFINITY };
            }
            self.omega * p * r.powf(p - 1.0) / (self.epsilon * (1.0 + r.powf(p)))
        } else {
            self.linear_branch(y).0
        }
    }
}

/// Mean adaptive wing loss over all heatmap pixels, each scaled by its weight when given.
pub fn adaptive_wing_loss(
    pred: &HeatmapStack,
    gt: &HeatmapStack,
    params: &AdaptiveWingParams,
    weight_map: Option<&[f64]>,
) -> Result<f64> {
    params.validate()?;
    if !pred.same_shape(gt) {
        return Err(Error::Dimension("prediction and ground-truth heatmaps differ in shape".into()));
    }
    if let Some(w) = weight_map {
        if w.len() != gt.data.len() {
            return Err(Error::Dimension("weight map size mismatch".into()));
        }
    }
    let total: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .enumerate()
        .map(|(i, (&p, &y))| {
            let l = params.value((y - p).abs(), y);
            weight_map.map_or(l, |w| l * w[i])
        })
        .sum();
    Ok(total / pred.data.len() as f64)
}

/// Elementwise adaptive wing loss as a differentiable op: `(pred, gt) -> loss`,
/// with an analytic gradient for `pred` only.
struct AdaptiveWingOp(AdaptiveWingParams);

impl AdaptiveWingOp {
    fn map<T: WithDType>(&self, pred: &[T], gt: &[T], f: impl Fn(f64, f64) -> f64) -> Vec<T> {
        pred.iter()
            .zip(gt)
            .map(|(&p, &y)| T::from_f64(f(p.to_f64(), y.to_f64())))
            .collect()
    }
}

impl CustomOp2 for AdaptiveWingOp {
    fn name(&self) -> &'static str {
        "adaptive-wing"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a0, a1) = l1.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("non-contiguous".into()))?;
        let (b0, b1) = l2.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("non-contiguous".into()))?;
        let p = self.0;
        let f = |pv: f64, y: f64| p.value((y - pv).abs(), y);
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(self.map(&a[a0..a1], &b[b0..b1], f)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(self.map(&a[a0..a1], &b[b0..b1], f)),
            _ => candle_core::bail!("adaptive wing: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        pred: &Tensor,
        gt: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let p = self.0;
        let local = pred.contiguous()?.apply_op2_no_bwd(&gt.contiguous()?, &AdaptiveWingSlope(p))?;
        Ok((Some(grad.mul(&local)?), None))
    }
}

struct AdaptiveWingSlope(AdaptiveWingParams);

impl CustomOp2 for AdaptiveWingSlope {
    fn name(&self) -> &'static str {
        "adaptive-wing-slope"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a0, a1) = l1.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("non-contiguous".into()))?;
        let (b0, b1) = l2.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("non-contiguous".into()))?;
        let p = self.0;
        // d|y - pred| / dpred = sign(pred - y)
        let f = |pv: f64, y: f64| {
            let d = pv - y;
            if d == 0.0 {
                0.0
            } else {
                d.signum() * p.slope(d.abs(), y)
            }
        };
        let op = AdaptiveWingOp(p);
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(op.map(&a[a0..a1], &b[b0..b1], f)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(op.map(&a[a0..a1], &b[b0..b1], f)),
            _ => candle_core::bail!("adaptive wing: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Differentiable adaptive wing loss on tensors; `weights` broadcasts against `pred`.
pub fn adaptive_wing_loss_tensor(
    pred: &Tensor,
    gt: &Tensor,
    params: &AdaptiveWingParams,
    weights: Option<&Tensor>,
) -> Result<Tensor> {
    params.validate()?;
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let gt = gt.to_dtype(pred.dtype())?.contiguous()?;
    let per_pixel = pred.contiguous()?.apply_op2(&gt, AdaptiveWingOp(*params))?;
    let per_pixel = match weights {
        Some(w) => per_pixel.broadcast_mul(&w.to_dtype(pred.dtype())?)?,
        None => per_pixel,
    };
    Ok(per_pixel.mean_all()?)
}

pub const FOREGROUND_THRESHOLD: f64 = 0.2;
pub const DEFAULT_BOOST: f64 = 10.0;

/// `1 + boost * H_d`, where `H_d` marks pixels within `dilation_radius`
/// (Euclidean) of a ground-truth value of at least 0.2 in the same channel.
pub fn weighted_loss_map(gt: &HeatmapStack, dilation_radius: usize, boost: f64) -> Result<Vec<f64>> {
    if boost < 0.0 {
        return Err(Error::Parameter("boost must be non-negative".into()));
    }
    let (h, w) = (gt.height, gt.width);
    let offsets = disc_offsets(dilation_radius);
    let mut out = vec![1.0; gt.data.len()];
    if boost == 0.0 {
        return Ok(out);
    }
    for k in 0..gt.channels {
        let plane = gt.channel(k);
        let dst = &mut out[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if plane[y * w + x] < FOREGROUND_THRESHOLD {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        dst[ny as usize * w + nx as usize] = 1.0 + boost;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkPredictorConfig {
    pub input_size: usize,
    pub num_stacks: usize,
    pub base_channels: usize,
    pub heatmap_size: usize,
    /// Down/up levels inside each hourglass.
    pub hourglass_depth: usize,
}

impl Default for LandmarkPredictorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            num_stacks: 2,
            base_channels: 32,
            heatmap_size: 64,
            hourglass_depth: 3,
        }
    }
}

impl LandmarkPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stacks == 0 {
            return Err(Error::Config("num_stacks must be at least 1".into()));
        }
        if self.heatmap_size == 0 || self.input_size % self.heatmap_size != 0 {
            return Err(Error::Config("heatmap_size must divide input_size".into()));
        }
        if !(self.input_size / self.heatmap_size).is_power_of_two() {
            return Err(Error::Config("input_size / heatmap_size must be a power of two".into()));
        }
        if self.heatmap_size % (1 << self.hourglass_depth) != 0 {
            return Err(Error::Config("heatmap_size must be divisible by 2^hourglass_depth".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Residual {
    a: Conv2d,
    b: Conv2d,
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), ConvSpec::new(c, c, 3), rng)?,
            b: Conv2d::with_std(store, &format!("{name}.b"), ConvSpec::new(c, c, 3), 0.01, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(&x.relu()?)?;
        let h = self.b.forward(&h.relu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Hourglass {
    skip: Residual,
    down: Residual,
    inner: Option<Box<Hourglass>>,
    bottom: Option<Residual>,
    up: Residual,
}

impl Hourglass {
    fn new(store: &mut ParamStore, name: &str, c: usize, depth: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let skip = Residual::new(store, &format!("{name}.skip"), c, rng)?;
        let down = Residual::new(store, &format!("{name}.down"), c, rng)?;
        let (inner, bottom) = if depth > 1 {
            (Some(Box::new(Hourglass::new(store, &format!("{name}.inner"), c, depth - 1, rng)?)), None)
        } else {
            (None, Some(Residual::new(store, &format!("{name}.bottom"), c, rng)?))
        };
        let up = Residual::new(store, &format!("{name}.up"), c, rng)?;
        Ok(Self { skip, down, inner, bottom, up })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let skip = self.skip.forward(x)?;
        let low = self.down.forward(&nn::max_pool2(x)?)?;
        let low = match (&self.inner, &self.bottom) {
            (Some(inner), _) => inner.forward(&low)?,
            (None, Some(b)) => b.forward(&low)?,
            _ => unreachable!("hourglass has either an inner level or a bottom block"),
        };
        let up = nn::upsample2(&self.up.forward(&low)?)?;
        Ok((skip + up)?)
    }
}

#[derive(Debug, Clone)]
struct Stack {
    hourglass: Hourglass,
    features: Conv2d,
    head: Conv2d,
    remap_features: Option<Conv2d>,
    remap_heatmaps: Option<Conv2d>,
}

/// Stacked hourglass regressor producing 98 sigmoid heatmaps per stack.
pub struct LandmarkPredictor {
    config: LandmarkPredictorConfig,
    store: ParamStore,
    stem: Vec<Conv2d>,
    stacks: Vec<Stack>,
}

impl std::fmt::Debug for LandmarkPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LandmarkPredictor")
            .field("config", &self.config)
            .field("params", &self.store.num_trainable())
            .finish()
    }
}

impl LandmarkPredictor {
    pub fn new(config: LandmarkPredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let mut stem = vec![Conv2d::new(&mut store, "stem.0", ConvSpec::new(3, c, 3), &mut rng)?];
        let downs = (config.input_size / config.heatmap_size).trailing_zeros() as usize;
        for i in 0..downs {
            stem.push(Conv2d::new(
                &mut store,
                &format!("stem.{}", i + 1),
                ConvSpec::new(c, c, 4).stride(2).padding(1),
                &mut rng,
            )?);
        }
        let mut stacks = Vec::with_capacity(config.num_stacks);
        for s in 0..config.num_stacks {
            let name = format!("stack{s}");
            let last = s + 1 == config.num_stacks;
            let hourglass = Hourglass::new(&mut store, &format!("{name}.hg"), c, config.hourglass_depth, &mut rng)?;
            let features = Conv2d::new(&mut store, &format!("{name}.features"), ConvSpec::new(c, c, 1), &mut rng)?;
            let head = Conv2d::with_std(&mut store, &format!("{name}.head"), ConvSpec::new(c, NUM_LANDMARKS, 1), 0.01, &mut rng)?;
            let (remap_features, remap_heatmaps) = if last {
                (None, None)
            } else {
                (
                    Some(Conv2d::new(&mut store, &format!("{name}.remap_f"), ConvSpec::new(c, c, 1), &mut rng)?),
                    Some(Conv2d::new(&mut store, &format!("{name}.remap_h"), ConvSpec::new(NUM_LANDMARKS, c, 1), &mut rng)?),
                )
            };
            stacks.push(Stack { hourglass, features, head, remap_features, remap_heatmaps });
        }
        // initial bias pushes the sigmoid towards the mostly-zero background
        for st in &stacks {
            if let Some(b) = &st.head.bias {
                b.set(&(b.as_tensor().ones_like()? * -4.0)?)?;
            }
        }
        Ok(Self { config, store, stem, stacks })
    }

    pub fn config(&self) -> &LandmarkPredictorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Heatmaps of every stack, each `(B, 98, hm, hm)` after the sigmoid.
    pub fn forward_all(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::Dimension(format!(
                "landmark predictor expects 3x{0}x{0}, got {c}x{h}x{w}",
                self.config.input_size
            )));
        }
        let mut x = ((images * 2.0)? - 1.0)?;
        for conv in &self.stem {
            x = conv.forward(&x)?.relu()?;
        }
        let mut outputs = Vec::with_capacity(self.stacks.len());
        for st in &self.stacks {
            let y = st.hourglass.forward(&x)?;
            let feat = st.features.forward(&y)?.relu()?;
            let heat = nn::sigmoid(&st.head.forward(&feat)?)?;
            if let (Some(rf), Some(rh)) = (&st.remap_features, &st.remap_heatmaps) {
                x = ((&x + rf.forward(&feat)?)? + rh.forward(&heat)?)?;
            }
            outputs.push(heat);
        }
        Ok(outputs)
    }

    /// Final-stack heatmaps and their decoded landmarks.
    pub fn predict(&self, image: &ImageTensor) -> Result<(HeatmapStack, LandmarkSet)> {
        if image.height() != self.config.input_size || image.width() != self.config.input_size {
            return Err(Error::Dimension(format!(
                "landmark predictor expects {0}x{0} input, got {1}x{2}",
                self.config.input_size,
                image.height(),
                image.width()
            )));
        }
        let x = image.to_tensor(DType::F32, self.store.device())?;
        let out = self.forward_all(&x)?.pop().expect("at least one stack");
        let heat = HeatmapStack::from_tensor(&out)?;
        let lm = decode_landmarks(&heat)?;
        Ok((heat, lm))
    }
}

pub fn predict_landmarks(model: &LandmarkPredictor, image: &ImageTensor) -> Result<(HeatmapStack, LandmarkSet)> {
    model.predict(image)
}
