//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmask_core::imaging::ImageTensor;
use unmask_core::synthdata::{apply_mask_template, default_templates, procedural_face, Gender, SyntheticPair};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// f64 tensor of uniform values in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_vec0::<f64>().unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let shape = x.dims().to_vec();
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let at = |v: &[f64]| Tensor::from_vec(v.to_vec(), shape.as_slice(), &Device::Cpu).unwrap();
    let mut out = Vec::with_capacity(base.len());
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + h;
        let up = f(&at(&v));
        v[i] = base[i] - h;
        let down = f(&at(&v));
        v[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Backprop gradient of `f` with respect to `x`.
pub fn analytic_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Vec<f64> {
    let var = Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap(),
        None => vec![0.0; x.elem_count()],
    }
}

/// `max |a - n| / max |n|`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let worst = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

/// Relative error between backprop and central differences of a scalar loss.
pub fn grad_check(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> f64 {
    let numeric = numeric_grad(&|t| scalar(&f(t)), x, 1e-6);
    relative_error(&analytic_grad(f, x), &numeric)
}

/// PSNR straight from the definition.
pub fn brute_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// SSIM with an explicit 11x11 Gaussian window, evaluated window by window.
pub fn brute_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut per_channel = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i * k + j];
                        ma += wt * a.get(y + i, x + j, c) as f64;
                        mb += wt * b.get(y + i, x + j, c) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i * k + j];
                        let da = a.get(y + i, x + j, c) as f64 - ma;
                        let db = b.get(y + i, x + j, c) as f64 - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / ch as f64
}

/// Procedural faces with alternating genders, each with a default template.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<SyntheticPair> {
    let templates = default_templates();
    (0..n)
        .map(|i| {
            let g = if i % 2 == 0 { Gender::Male } else { Gender::Female };
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            let (img, lm) = procedural_face(size, g, s).unwrap();
            let mut p = apply_mask_template(&img, &lm, &templates[i % templates.len()], s).unwrap();
            p.gender = Some(g);
            p
        })
        .collect()
}
