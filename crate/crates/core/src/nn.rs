//! Minimal layer toolkit over candle tensors.
//!
//! Convolutions go through an im2col + GEMM custom op whose backward pass is
//! a col2im scatter plus two matrix products; candle's native CPU conv
//! backward is several times slower. Parameters live in a [`ParamStore`]
//! so every model serialises the same way and initialises from a seeded
//! RNG.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl ConvGeometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Valid output columns `[lo, hi)` for kernel offset `k` along an axis of length `n`.
    #[inline]
    fn span(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let shift = (k * self.dilation) as isize - self.padding as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(self.stride) };
        let last = n as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { (last as usize / self.stride + 1).min(out) };
        (lo, hi.max(lo))
    }

    /// Calls `f(row, input_start, column_start, count)` for every run of valid
    /// taps; consecutive taps step the input by `stride` and the column by one.
    #[inline]
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane = oh * ow;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                let (y0, y1) = self.span(ki, self.height, oh);
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let (x0, x1) = self.span(kj, self.width, ow);
                    if x0 == x1 {
                        continue;
                    }
                    let ix0 = x0 * self.stride + kj * self.dilation - self.padding;
                    for b in 0..batch {
                        let in_base = (b * self.channels + c) * self.height * self.width;
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ki * self.dilation - self.padding;
                            f(row, in_base + iy * self.width + ix0, b * plane + oy * ow + x0, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(x: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let cols = batch * g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.rows() * cols];
    let s = g.stride;
    g.for_each_run(batch, |row, src, col, n| {
        let dst = &mut out[row * cols + col..row * cols + col + n];
        if s == 1 {
            dst.copy_from_slice(&x[src..src + n]);
        } else {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = x[src + i * s];
            }
        }
    });
    out
}

fn col2im<T: WithDType>(cols: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let n_cols = batch * g.out_h() * g.out_w();
    let mut out = vec![T::zero(); batch * g.channels * g.height * g.width];
    let s = g.stride;
    g.for_each_run(batch, |row, dst, col, n| {
        let src = &cols[row * n_cols + col..row * n_cols + col + n];
        if s == 1 {
            for (o, &v) in out[dst..dst + n].iter_mut().zip(src) {
                *o += v;
            }
        } else {
            for (i, &v) in src.iter().enumerate() {
                out[dst + i * s] += v;
            }
        }
    });
    out
}

// (B, C, H, W) -> (C*k*k, B*Ho*Wo)
struct Im2Col(ConvGeometry);
// inverse scatter of Im2Col, used for the input gradient
struct Col2Im(ConvGeometry, usize);

macro_rules! dispatch_float {
    ($storage:expr, $layout:expr, $f:expr) => {{
        let (start, end) = $layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("conv op expects a contiguous input".into()))?;
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(&v[start..end])),
            CpuStorage::F64(v) => CpuStorage::F64($f(&v[start..end])),
            _ => candle_core::bail!("conv op: only f32 and f64 are supported"),
        }
    }};
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((g.rows(), batch * g.out_h() * g.out_w()));
        let out = dispatch_float!(storage, layout, |x| im2col(x, batch, g));
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let batch = arg.dims()[0];
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0, batch))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, batch) = (self.0, self.1);
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = dispatch_float!(storage, layout, |x| col2im(x, batch, g));
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution of `(B, C, H, W)` input with a `(O, C, k, k)` kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kh, kw) = weight.dims4()?;
    if in_c != channels || kh != kw {
        candle_core::bail!("conv2d: input has {channels} channels, kernel is {out_c}x{in_c}x{kh}x{kw}");
    }
    let g = ConvGeometry {
        channels,
        height,
        width,
        kernel: kh,
        stride,
        padding,
        dilation,
    };
    if height + 2 * padding < dilation * (kh - 1) + 1 || width + 2 * padding < dilation * (kw - 1) + 1 {
        candle_core::bail!("conv2d: {height}x{width} input too small for kernel {kh} dilation {dilation}");
    }
    if kh == 1 && stride == 1 && padding == 0 {
        // (O, C) x (C, B*H*W) without the gather
        let flat = x.transpose(0, 1)?.reshape((channels, batch * height * width))?;
        let y = weight.reshape((out_c, channels))?.matmul(&flat)?;
        return y.reshape((out_c, batch, height, width))?.transpose(0, 1)?.contiguous();
    }
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((out_c, g.rows()))?.matmul(&cols)?;
    y.reshape((out_c, batch, g.out_h(), g.out_w()))?
        .transpose(0, 1)?
        .contiguous()
}

/// Whether a parameter is optimised or only carried along (running stats, power-iteration vectors).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Named parameter registry shared by every model in the crate.
pub struct ParamStore {
    entries: Vec<(String, Var, ParamKind)>,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.entries.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<Var> {
        let name = name.into();
        if self.entries.iter().any(|(n, ..)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(DType::F32)?)?;
        self.entries.push((name, var.clone(), kind));
        Ok(var)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.add(name, t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value as f64)?;
        self.add(name, t, kind)
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(.., k)| *k == ParamKind::Trainable)
            .map(|(n, v, _)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamKind)> {
        self.entries.iter().map(|(n, v, k)| (n.as_str(), v, *k))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v, _)| v.elem_count()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(.., k)| *k == ParamKind::Trainable)
            .map(|(_, v, _)| v.elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, ..)| n == name).map(|(_, v, _)| v)
    }

    /// Deep copies; later updates to the parameters do not show through.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v, _)| (n.clone(), v.as_tensor().copy().expect("cpu tensor copy")))
            .collect()
    }

    /// Replaces every parameter; nothing is written unless all names and shapes match.
    pub fn import(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var, _) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
        }
        for (name, var, _) in &self.entries {
            var.set(&tensors[name].to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over all values of the given kind.
    pub fn fingerprint(&self, kind: ParamKind) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, var, k) in &self.entries {
            if *k != kind {
                continue;
            }
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        Ok(h)
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.kernel / 2);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_std(store, name, spec, he_std(spec.in_c * spec.kernel * spec.kernel), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(
            &format!("{name}.weight"),
            &[spec.out_c, spec.in_c, spec.kernel, spec.kernel],
            std,
            rng,
        )?;
        let bias = if spec.bias {
            Some(store.constant(&format!("{name}.bias"), &[spec.out_c], 0.0, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().to_dtype(x.dtype())?;
        self.forward_with_weight(x, &w)
    }

    fn forward_with_weight(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, w, self.stride, self.padding, self.dilation)?;
        match &self.bias {
            Some(b) => {
                let b = b.as_tensor().to_dtype(x.dtype())?.reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }
}

/// Convolution whose kernel is divided by an estimate of its largest
/// singular value, refined by one power-iteration step per training forward.
#[derive(Debug, Clone)]
pub struct SpectralConv2d {
    pub conv: Conv2d,
    u: Var,
}

fn l2_normalize(v: &Tensor) -> candle_core::Result<Tensor> {
    let n = (v.sqr()?.sum_all()?.sqrt()? + 1e-12)?;
    v.broadcast_div(&n)
}

impl SpectralConv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv2d::with_std(store, name, spec, 0.02f64.max(he_std(spec.in_c * spec.kernel * spec.kernel) * 0.5), rng)?;
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let u0: Vec<f32> = (0..spec.out_c).map(|_| dist.sample(rng) as f32).collect();
        let u0 = l2_normalize(&Tensor::from_vec(u0, spec.out_c, store.device())?)?;
        let u = store.add(format!("{name}.sn_u"), u0, ParamKind::Buffer)?;
        Ok(Self { conv, u })
    }

    fn weight_matrix(&self) -> Result<Tensor> {
        let out_c = self.conv.out_channels();
        Ok(self.conv.weight.as_tensor().reshape((out_c, ()))?)
    }

    /// Runs `iterations` power-iteration steps, updating the stored left vector.
    pub fn power_iterate(&self, iterations: usize) -> Result<()> {
        let w = self.weight_matrix()?.detach();
        let mut u = self.u.as_tensor().detach();
        for _ in 0..iterations {
            let v = l2_normalize(&w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
            u = l2_normalize(&w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        }
        self.u.set(&u)?;
        Ok(())
    }

    /// Current estimate `u^T W v` of the top singular value.
    pub fn sigma(&self) -> Result<f64> {
        let w = self.weight_matrix()?.detach();
        Ok(self.sigma_tensor(&w)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    fn sigma_tensor(&self, w: &Tensor) -> Result<Tensor> {
        let u = self.u.as_tensor().detach().to_dtype(w.dtype())?;
        let v = l2_normalize(&w.detach().t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
        Ok(u.unsqueeze(0)?.matmul(&w.matmul(&v.unsqueeze(1)?)?)?.squeeze(0)?.squeeze(0)?)
    }

    /// Kernel divided by the current singular-value estimate.
    pub fn normalized_weight(&self, dtype: DType) -> Result<Tensor> {
        let w = self.conv.weight.as_tensor().to_dtype(dtype)?;
        let dims = w.dims().to_vec();
        let mat = w.reshape((dims[0], ()))?;
        let sigma = self.sigma_tensor(&mat)?;
        Ok(w.broadcast_div(&sigma)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            self.power_iterate(1)?;
        }
        let w = self.normalized_weight(x.dtype())?;
        self.conv.forward_with_weight(x, &w)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_f, in_f], he_std(in_f), rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_f], 0.0, ParamKind::Trainable)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().to_dtype(x.dtype())?;
        let b = self.bias.as_tensor().to_dtype(x.dtype())?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Batch normalisation over the feature axis of `(N, F)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[features], 1.0, ParamKind::Trainable)?,
            beta: store.constant(&format!("{name}.beta"), &[features], 0.0, ParamKind::Trainable)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[features], 0.0, ParamKind::Buffer)?,
            running_var: store.constant(&format!("{name}.running_var"), &[features], 1.0, ParamKind::Buffer)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dt = x.dtype();
        let (mean, var) = if train {
            let n = x.dims()[0];
            let mean = x.mean_keepdim(0)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let unbiased = if n > 1 { (var.detach() * (n as f64 / (n - 1) as f64))? } else { var.detach() };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)?.to_dtype(DType::F32)? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.squeeze(0)?.to_dtype(DType::F32)? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().to_dtype(dt)?.unsqueeze(0)?,
                self.running_var.as_tensor().to_dtype(dt)?.unsqueeze(0)?,
            )
        };
        let norm = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.as_tensor().to_dtype(dt)?.unsqueeze(0)?;
        let b = self.beta.as_tensor().to_dtype(dt)?.unsqueeze(0)?;
        Ok(norm.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
/// Gradient goes to the maximum of each window.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 { x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)? } else { x.clone() };
    Ok(x.contiguous()?.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Per-channel instance normalisation without affine terms.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim((2, 3))?;
    Ok(centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction; moments are exposed for checkpointing.
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            let g = g.detach().to_dtype(DType::F32)?;
            self.m[i] = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            self.v[i] = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            p.set(&(p.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len() + 1);
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("{prefix}.m.{name}"), self.m[i].clone()));
            out.push((format!("{prefix}.v.{name}"), self.v[i].clone()));
        }
        let step = Tensor::new(&[self.step as f32], &Device::Cpu).expect("scalar tensor");
        out.push((format!("{prefix}.step"), step));
        out
    }

    pub fn validate_import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (i, (name, _)) in self.params.iter().enumerate() {
            for (kind, t) in [("m", &self.m[i]), ("v", &self.v[i])] {
                let key = format!("{prefix}.{kind}.{name}");
                let found = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if found.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has wrong shape")));
                }
            }
        }
        if !tensors.contains_key(&format!("{prefix}.step")) {
            return Err(Error::Checkpoint(format!("missing `{prefix}.step`")));
        }
        Ok(())
    }

    pub fn import(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.validate_import(prefix, tensors)?;
        for (i, (name, _)) in self.params.iter().enumerate() {
            self.m[i] = tensors[&format!("{prefix}.m.{name}")].clone();
            self.v[i] = tensors[&format!("{prefix}.v.{name}")].clone();
        }
        let step: Vec<f32> = tensors[&format!("{prefix}.step")].flatten_all()?.to_vec1()?;
        self.step = step.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

/// Random permutation drawn with Fisher-Yates from the given RNG.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Numerically stable mean BCE on logits with targets in {0,1}.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (targets * logits)?)?.mean_all()?)
}

/// Scalar value of a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
