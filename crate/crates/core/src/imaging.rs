//! Image data model, mask composition and full-reference quality metrics.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Height x width x channels image with values stored in `[0, 1]`.
///
/// Pixels are interleaved (HWC), matching the layout of decoded PNG/JPEG
/// buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer holds {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-sample function; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    fn check_same(&self, other: &ImageTensor) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// `(1, C, H, W)` tensor with values kept in `[0, 1]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (self.height, self.width, self.channels),
            device,
        )?
        .permute((2, 0, 1))?
        .unsqueeze(0)?
        .to_dtype(dtype)?
        .contiguous()?;
        Ok(t)
    }

    /// Stacks same-sized images into an `(N, C, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            first.check_same(img)?;
            parts.push(img.to_tensor(dtype, device)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Converts a `(C, H, W)` or `(1, C, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Dimension(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        Self::new(h, w, c, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("target size must be positive".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |o: usize, scale: f64, n: usize| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        let mut data = Vec::with_capacity(height * width * self.channels);
        for oy in 0..height {
            let (y0, y1, fy) = axis(oy, sy, self.height);
            for ox in 0..width {
                let (x0, x1, fx) = axis(ox, sx, self.width);
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) as f64 * (1.0 - fx) + self.get(y0, x1, c) as f64 * fx;
                    let bot = self.get(y1, x0, c) as f64 * (1.0 - fx) + self.get(y1, x1, c) as f64 * fx;
                    data.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, self.channels, data)
    }

    /// Writes an 8-bit PNG, rounding `v * 255`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Format(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
    }
}

/// Loads a PNG or JPEG as a square RGB image of side `target_size`.
pub fn load_image(path: impl AsRef<Path>, target_size: usize) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)?.resize(target_size, target_size)
}

/// H x W map whose entries are exactly 0 or 1; 1 marks the mask object.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinarySegmentationMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
    count: usize,
}

impl BinarySegmentationMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("mask dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask buffer holds {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask entries must be 0 or 1".into()));
        }
        let count = data.iter().filter(|&&v| v == 1).count();
        Ok(Self {
            height,
            width,
            data,
            count,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self::new(height, width, data)
    }

    /// Thresholds per-pixel probabilities: `p >= threshold` becomes 1.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Dimension("probability map size mismatch".into()));
        }
        Self::new(height, width, probs.iter().map(|&p| (p >= threshold) as u8).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// Number of 1-entries (`N_m`).
    pub fn mask_pixel_count(&self) -> usize {
        self.count
    }

    pub fn area_fraction(&self) -> f64 {
        self.count as f64 / (self.height * self.width) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn inverted(&self) -> Self {
        let data: Vec<u8> = self.data.iter().map(|v| 1 - v).collect();
        Self {
            height: self.height,
            width: self.width,
            count: self.height * self.width - self.count,
            data,
        }
    }

    pub fn same_size(&self, other: &BinarySegmentationMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn to_image(&self) -> ImageTensor {
        let data = self.data.iter().map(|&b| b as f32).collect();
        ImageTensor::new(self.height, self.width, 1, data).expect("mask dimensions are valid")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save_png(path)
    }

    /// Reads a grey PNG; any value above mid-grey is mask.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect())
    }
}

fn check_mask(image: &ImageTensor, mask: &BinarySegmentationMap) -> Result<()> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// Elementwise product with the mask broadcast over channels.
pub fn compose(image: &ImageTensor, mask: &BinarySegmentationMap) -> Result<ImageTensor> {
    check_mask(image, mask)?;
    let c = image.channels;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data[i / c] == 1 { v } else { 0.0 })
        .collect();
    ImageTensor::new(image.height, image.width, c, data)
}

/// Generated content inside the mask, ground pixels (bit-identical) outside.
pub fn merge_inpainted(
    ground: &ImageTensor,
    generated: &ImageTensor,
    mask: &BinarySegmentationMap,
) -> Result<ImageTensor> {
    ground.check_same(generated)?;
    check_mask(ground, mask)?;
    let c = ground.channels;
    let data = ground
        .data
        .iter()
        .zip(&generated.data)
        .enumerate()
        .map(|(i, (&g, &p))| if mask.data[i / c] == 1 { p } else { g })
        .collect();
    ImageTensor::new(ground.height, ground.width, c, data)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::Parameter("data_range must be positive".into()));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

// "valid" separable filtering of a single plane
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over the valid window positions, averaged
/// across channels. Data range is 1.0.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same(b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * ch + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * ch + c] as f64).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, ..) = filter_valid(&pa, h, w, &k);
        let (mu_b, ..) = filter_valid(&pb, h, w, &k);
        let (e_aa, ..) = filter_valid(&paa, h, w, &k);
        let (e_bb, ..) = filter_valid(&pbb, h, w, &k);
        let (e_ab, ..) = filter_valid(&pab, h, w, &k);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / ch as f64)
}
