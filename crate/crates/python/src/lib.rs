//! Python bindings: images, masks, metrics, synthetic pairs, the loss total
//! and the trained pipeline.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use unmask_core::imaging::{self, BinarySegmentationMap as CoreMask, ImageTensor};
use unmask_core::inpaint::{total_loss as core_total_loss, LossParts, LossWeights};
use unmask_core::landmarks::LandmarkSet;
use unmask_core::pipeline::{self, PipelineBundle};
use unmask_core::segmentation;
use unmask_core::synthdata::{self, default_templates, Gender};
use unmask_core::Manifest;

create_exception!(unmask, UnmaskError, PyException);

fn err(e: unmask_core::Error) -> PyErr {
    UnmaskError::new_err(e.to_string())
}

fn gender(s: &str) -> PyResult<Gender> {
    s.parse().map_err(err)
}

/// Float image, row-major `height x width x channels`, values in [0, 1].
#[pyclass(name = "Image", module = "unmask", skip_from_py_object)]
#[derive(Clone)]
pub struct Image(ImageTensor);

#[pymethods]
impl Image {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        ImageTensor::new(height, width, channels, data).map(Image).map_err(err)
    }

    /// Reads a PNG or JPEG and resamples it to `size x size`.
    #[staticmethod]
    fn load(path: &str, size: usize) -> PyResult<Self> {
        imaging::load_image(path, size).map(Image).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save_png(path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __eq__(&self, other: &Image) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.0.height(), self.0.width(), self.0.channels())
    }
}

/// Binary mask, row-major, 1 marks the mask object.
#[pyclass(name = "Mask", module = "unmask", skip_from_py_object)]
#[derive(Clone)]
pub struct Mask(CoreMask);

#[pymethods]
impl Mask {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        CoreMask::new(height, width, data).map(Mask).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn data(&self) -> Vec<u8> {
        self.0.data().to_vec()
    }

    #[getter]
    fn area_fraction(&self) -> f64 {
        self.0.area_fraction()
    }

    fn dilate(&self, radius: usize) -> Mask {
        Mask(segmentation::dilate_mask(&self.0, radius))
    }

    fn __eq__(&self, other: &Mask) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, {:.3} covered)", self.0.height(), self.0.width(), self.0.area_fraction())
    }
}

/// Peak signal-to-noise ratio in dB; `inf` for identical images.
#[pyfunction]
#[pyo3(signature = (a, b, data_range = 1.0))]
fn psnr(a: &Image, b: &Image, data_range: f64) -> PyResult<f64> {
    imaging::psnr(&a.0, &b.0, data_range).map_err(err)
}

#[pyfunction]
fn ssim(a: &Image, b: &Image) -> PyResult<f64> {
    imaging::ssim(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn iou(a: &Mask, b: &Mask) -> PyResult<f64> {
    segmentation::iou(&a.0, &b.0).map_err(err)
}

/// `generated` inside the mask, `masked` everywhere else.
#[pyfunction]
fn merge_inpainted(masked: &Image, generated: &Image, mask: &Mask) -> PyResult<Image> {
    imaging::merge_inpainted(&masked.0, &generated.0, &mask.0).map(Image).map_err(err)
}

/// Weighted generator loss from its five parts. Returns `(total, weighted)`.
#[pyfunction]
#[pyo3(signature = (pixel, perceptual, style, tv, adv_g, lambda_perc = 0.1, lambda_style = 250.0, lambda_tv = 0.1, lambda_adv = 0.01))]
#[allow(clippy::too_many_arguments)]
fn total_loss(
    pixel: f64,
    perceptual: f64,
    style: f64,
    tv: f64,
    adv_g: f64,
    lambda_perc: f64,
    lambda_style: f64,
    lambda_tv: f64,
    lambda_adv: f64,
) -> PyResult<(f64, [f64; 5])> {
    let parts = LossParts { pixel, perceptual, style, tv, adv_g };
    let weights = LossWeights { lambda_perc, lambda_style, lambda_tv, lambda_adv };
    let b = core_total_loss(&parts, &weights).map_err(err)?;
    Ok((b.total, b.weighted))
}

/// Procedural face with its 98 landmarks in normalised coordinates.
#[pyfunction]
#[pyo3(signature = (size, gender = "female", seed = 0))]
fn procedural_face(size: usize, gender: &str, seed: u64) -> PyResult<(Image, Vec<(f64, f64)>)> {
    let (img, lm) = synthdata::procedural_face(size, self::gender(gender)?, seed).map_err(err)?;
    Ok((Image(img), lm.points().to_vec()))
}

/// Draws a mask on `clean` from one of the default templates.
/// Returns `(masked, segmap)`.
#[pyfunction]
#[pyo3(signature = (clean, landmarks, template = 0, seed = 0))]
fn apply_mask(clean: &Image, landmarks: Vec<(f64, f64)>, template: usize, seed: u64) -> PyResult<(Image, Mask)> {
    let templates = default_templates();
    let t = templates
        .get(template)
        .ok_or_else(|| UnmaskError::new_err(format!("template {template} of {}", templates.len())))?;
    let lm = LandmarkSet::new(landmarks).map_err(err)?;
    let p = synthdata::apply_mask_template(&clean.0, &lm, t, seed).map_err(err)?;
    Ok((Image(p.masked), Mask(p.segmap)))
}

/// Builds masked pairs for every image in `images` and returns the entry count.
#[pyfunction]
#[pyo3(signature = (images, landmarks, out, size = 256, seed = 0))]
fn generate_dataset(images: &str, landmarks: &str, out: &str, size: usize, seed: u64) -> PyResult<usize> {
    synthdata::generate_dataset(images, landmarks, &default_templates(), seed, out, size)
        .map(|m| m.len())
        .map_err(err)
}

/// Writes `count` procedural faces with landmark files; returns the two directories.
#[pyfunction]
#[pyo3(signature = (dir, count, size = 64, seed = 0))]
fn procedural_corpus(dir: &str, count: usize, size: usize, seed: u64) -> PyResult<(String, String)> {
    let (i, l) = synthdata::write_procedural_corpus(dir, count, size, seed).map_err(err)?;
    Ok((i.display().to_string(), l.display().to_string()))
}

/// A trained bundle directory.
#[pyclass(name = "Pipeline", module = "unmask", unsendable)]
pub struct Pipeline(PipelineBundle);

#[pymethods]
impl Pipeline {
    #[staticmethod]
    fn load(bundle: &str) -> PyResult<Self> {
        PipelineBundle::load(bundle).map(Pipeline).map_err(err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size
    }

    /// Reconstructs `image`. Returns `(output, mask, diagnostics)`.
    #[pyo3(signature = (image, reference = None))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        image: &Image,
        reference: Option<&Image>,
    ) -> PyResult<(Image, Mask, Bound<'py, PyDict>)> {
        let r = pipeline::infer(&self.0, &image.0, reference.map(|i| &i.0)).map_err(err)?;
        let d = &r.diagnostics;
        let out = PyDict::new(py);
        out.set_item("gender", d.gender.as_str())?;
        out.set_item("male_probability", d.male_probability)?;
        out.set_item("landmarks", d.landmarks.clone())?;
        out.set_item("mask_area_fraction", d.mask_area_fraction)?;
        out.set_item("dilated_area_fraction", d.dilated_area_fraction)?;
        out.set_item("no_mask_detected", d.no_mask_detected)?;
        out.set_item("psnr", d.psnr)?;
        out.set_item("ssim", d.ssim)?;
        Ok((Image(r.output), Mask(r.mask), out))
    }

    /// Per-gender mean PSNR and SSIM over a manifest: `{"male": (psnr, ssim, n), ...}`.
    fn evaluate<'py>(&self, py: Python<'py>, manifest: &str) -> PyResult<Bound<'py, PyDict>> {
        let m = Manifest::load(manifest).map_err(err)?;
        let report = pipeline::evaluate(&self.0, &m).map_err(err)?;
        let out = PyDict::new(py);
        for (g, v) in &report.groups {
            out.set_item(g.as_str(), (v.psnr, v.ssim, v.count))?;
        }
        Ok(out)
    }
}

#[pymodule]
fn unmask(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("UnmaskError", m.py().get_type::<UnmaskError>())?;
    m.add("NUM_LANDMARKS", unmask_core::NUM_LANDMARKS)?;
    m.add_class::<Image>()?;
    m.add_class::<Mask>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(merge_inpainted, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_face, m)?)?;
    m.add_function(wrap_pyfunction!(apply_mask, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_corpus, m)?)?;
    Ok(())
}
