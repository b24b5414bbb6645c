//! End-to-end reconstruction: gender gate, landmarks, mask segmentation and
//! dilation, gender-matched inpainting, merge, metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gender::{label_for, GenderScorer};
use crate::imaging::{load_image, merge_inpainted, psnr, ssim, BinarySegmentationMap, ImageTensor};
use crate::inpaint::{landmark_channel, Generator};
use crate::landmarks::{LandmarkPredictor, LandmarkSet};
use crate::segmentation::{dilate_mask, Segmenter};
use crate::synthdata::{Gender, Manifest};
use crate::training::{load_gender, load_generator, load_landmarks, load_segmenter};

pub trait LandmarkStage {
    fn landmarks(&self, image: &ImageTensor) -> Result<LandmarkSet>;
    fn input_size(&self) -> usize;
}

pub trait MaskStage {
    fn mask(&self, image: &ImageTensor) -> Result<BinarySegmentationMap>;
    fn input_size(&self) -> usize;
}

pub trait Inpainter {
    /// Full-frame prediction for `ground` with the mask region unknown.
    fn inpaint(&self, ground: &ImageTensor, landmark: &ImageTensor, mask: &BinarySegmentationMap) -> Result<ImageTensor>;
    fn input_size(&self) -> usize;
}

impl LandmarkStage for LandmarkPredictor {
    fn landmarks(&self, image: &ImageTensor) -> Result<LandmarkSet> {
        Ok(self.predict(image)?.1)
    }

    fn input_size(&self) -> usize {
        self.config().input_size
    }
}

/// Segmenter with its probability threshold.
pub struct ThresholdedSegmenter {
    pub model: Segmenter,
    pub threshold: f64,
}

impl MaskStage for ThresholdedSegmenter {
    fn mask(&self, image: &ImageTensor) -> Result<BinarySegmentationMap> {
        self.model.predict(image, self.threshold)
    }

    fn input_size(&self) -> usize {
        self.model.config().input_size
    }
}

impl Inpainter for Generator {
    fn inpaint(&self, ground: &ImageTensor, landmark: &ImageTensor, mask: &BinarySegmentationMap) -> Result<ImageTensor> {
        self.generate(ground, landmark, mask)
    }

    fn input_size(&self) -> usize {
        self.config().input_size
    }
}

/// Returns its ground input unchanged.
pub struct IdentityInpainter(pub usize);

impl Inpainter for IdentityInpainter {
    fn inpaint(&self, ground: &ImageTensor, _: &ImageTensor, _: &BinarySegmentationMap) -> Result<ImageTensor> {
        Ok(ground.clone())
    }

    fn input_size(&self) -> usize {
        self.0
    }
}

/// Looks the answer up by exact input image; for tests with known ground truth.
pub struct OracleInpainter {
    size: usize,
    table: HashMap<Vec<u32>, ImageTensor>,
}

fn image_key(img: &ImageTensor) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

impl OracleInpainter {
    pub fn new(size: usize, pairs: impl IntoIterator<Item = (ImageTensor, ImageTensor)>) -> Self {
        let table = pairs.into_iter().map(|(input, answer)| (image_key(&input), answer)).collect();
        Self { size, table }
    }
}

impl Inpainter for OracleInpainter {
    fn inpaint(&self, ground: &ImageTensor, _: &ImageTensor, _: &BinarySegmentationMap) -> Result<ImageTensor> {
        self.table
            .get(&image_key(ground))
            .cloned()
            .ok_or_else(|| Error::Evaluation("oracle has no answer for this image".into()))
    }

    fn input_size(&self) -> usize {
        self.size
    }
}

/// Scorer returning a fixed p(male).
pub struct ConstantScorer {
    pub p: f64,
    pub size: usize,
}

impl GenderScorer for ConstantScorer {
    fn male_probability(&self, _: &ImageTensor) -> Result<f64> {
        Ok(self.p)
    }

    fn input_size(&self) -> usize {
        self.size
    }
}

/// Serialised bundle description, `bundle.json` in the bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleSpec {
    pub image_size: usize,
    pub dilation_radius: usize,
    pub mask_threshold: f64,
    pub gender_threshold: f64,
    pub landmark_sigma: f64,
    pub gender: PathBuf,
    pub landmarks: PathBuf,
    pub segmenter: PathBuf,
    pub inpaint_male: PathBuf,
    pub inpaint_female: PathBuf,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            dilation_radius: 4,
            mask_threshold: 0.5,
            gender_threshold: 0.5,
            landmark_sigma: 2.0,
            gender: "gender.ck".into(),
            landmarks: "landmarks.ck".into(),
            segmenter: "segmenter.ck".into(),
            inpaint_male: "inpaint-male.ck".into(),
            inpaint_female: "inpaint-female.ck".into(),
        }
    }
}

pub const BUNDLE_FILE: &str = "bundle.json";

impl BundleSpec {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let p = dir.as_ref().join(BUNDLE_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(BUNDLE_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn inpaint_path(&self, g: Gender) -> &Path {
        match g {
            Gender::Male => &self.inpaint_male,
            Gender::Female => &self.inpaint_female,
        }
    }
}

/// All stages plus the settings that tie them together. Immutable after construction.
pub struct PipelineBundle {
    pub gender: Box<dyn GenderScorer>,
    pub landmarks: Box<dyn LandmarkStage>,
    pub segmenter: Box<dyn MaskStage>,
    pub male: Box<dyn Inpainter>,
    pub female: Box<dyn Inpainter>,
    pub image_size: usize,
    pub dilation_radius: usize,
    pub gender_threshold: f64,
    pub landmark_sigma: f64,
}

impl PipelineBundle {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("gender", self.gender.input_size()),
            ("landmarks", self.landmarks.input_size()),
            ("segmenter", self.segmenter.input_size()),
            ("inpaint-male", self.male.input_size()),
            ("inpaint-female", self.female.input_size()),
        ];
        for (stage, s) in sizes {
            if s != self.image_size {
                return Err(Error::Config(format!("{stage} expects {s}px input, bundle is {}px", self.image_size)));
            }
        }
        if !(self.gender_threshold > 0.0 && self.gender_threshold < 1.0) || !(self.landmark_sigma > 0.0) {
            return Err(Error::Config("bad gender threshold or landmark sigma".into()));
        }
        Ok(())
    }

    /// Loads `bundle.json` and every checkpoint it names, checking kinds and gender tags.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec = BundleSpec::load(dir)?;
        let bundle = Self {
            gender: Box::new(load_gender(dir.join(&spec.gender)).map_err(|e| e.in_stage("gender"))?),
            landmarks: Box::new(load_landmarks(dir.join(&spec.landmarks)).map_err(|e| e.in_stage("landmarks"))?),
            segmenter: Box::new(ThresholdedSegmenter {
                model: load_segmenter(dir.join(&spec.segmenter)).map_err(|e| e.in_stage("segmenter"))?,
                threshold: spec.mask_threshold,
            }),
            male: Box::new(
                load_generator(dir.join(spec.inpaint_path(Gender::Male)), Some(Gender::Male))
                    .map_err(|e| e.in_stage("inpaint-male"))?,
            ),
            female: Box::new(
                load_generator(dir.join(spec.inpaint_path(Gender::Female)), Some(Gender::Female))
                    .map_err(|e| e.in_stage("inpaint-female"))?,
            ),
            image_size: spec.image_size,
            dilation_radius: spec.dilation_radius,
            gender_threshold: spec.gender_threshold,
            landmark_sigma: spec.landmark_sigma,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn generator(&self, g: Gender) -> &dyn Inpainter {
        match g {
            Gender::Male => self.male.as_ref(),
            Gender::Female => self.female.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub gender: Gender,
    pub male_probability: f64,
    pub landmarks: Vec<(f64, f64)>,
    pub mask_area_fraction: f64,
    pub dilated_area_fraction: f64,
    /// Set when the segmenter found nothing; the output is then the input.
    pub no_mask_detected: bool,
    /// Against a known clean image, when one was supplied.
    #[serde(serialize_with = "finite_or_string", deserialize_with = "float_or_string")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

fn finite_or_string<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn float_or_string<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        F(f64),
        S(String),
    }
    Ok(match Option::<Raw>::deserialize(d)? {
        None => None,
        Some(Raw::F(x)) => Some(x),
        Some(Raw::S(s)) if s == "inf" => Some(f64::INFINITY),
        Some(Raw::S(s)) if s == "-inf" => Some(f64::NEG_INFINITY),
        Some(Raw::S(s)) => return Err(serde::de::Error::custom(format!("bad metric `{s}`"))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub output: ImageTensor,
    pub mask: BinarySegmentationMap,
    pub diagnostics: Diagnostics,
}

/// Runs every stage on `image` (already at the bundle size). Pixels outside
/// the dilated mask are copied from `image` unchanged.
pub fn infer(bundle: &PipelineBundle, image: &ImageTensor, reference: Option<&ImageTensor>) -> Result<Inference> {
    let s = bundle.image_size;
    if image.height() != s || image.width() != s || image.channels() != 3 {
        return Err(Error::Dimension(format!(
            "pipeline expects {s}x{s}x3, got {}x{}x{}",
            image.width(),
            image.height(),
            image.channels()
        )));
    }
    let p = bundle.gender.male_probability(image).map_err(|e| e.in_stage("gender"))?;
    let gender = label_for(p, bundle.gender_threshold);
    let landmarks = bundle.landmarks.landmarks(image).map_err(|e| e.in_stage("landmarks"))?;
    let raw = bundle.segmenter.mask(image).map_err(|e| e.in_stage("segmenter"))?;
    let mask = dilate_mask(&raw, bundle.dilation_radius);
    let mut diagnostics = Diagnostics {
        gender,
        male_probability: p,
        landmarks: landmarks.points().to_vec(),
        mask_area_fraction: raw.area_fraction(),
        dilated_area_fraction: mask.area_fraction(),
        no_mask_detected: raw.is_empty(),
        psnr: None,
        ssim: None,
    };
    let output = if raw.is_empty() {
        image.clone()
    } else {
        let lm = landmark_channel(&landmarks, s, bundle.landmark_sigma).map_err(|e| e.in_stage("inpaint"))?;
        let generated = bundle
            .generator(gender)
            .inpaint(image, &lm, &mask)
            .map_err(|e| e.in_stage("inpaint"))?;
        merge_inpainted(image, &generated, &mask).map_err(|e| e.in_stage("merge"))?
    };
    if let Some(r) = reference {
        diagnostics.psnr = Some(psnr(&output, r, 1.0)?);
        diagnostics.ssim = Some(ssim(&output, r)?);
    }
    Ok(Inference { output, mask, diagnostics })
}

/// Loads `path` at the bundle size and runs [`infer`].
pub fn infer_path(bundle: &PipelineBundle, path: impl AsRef<Path>) -> Result<Inference> {
    let image = load_image(path, bundle.image_size)?;
    infer(bundle, &image, None)
}

/// Writes `<out>` as PNG and `<out>.json` with the diagnostics.
pub fn write_inference(result: &Inference, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    result.output.save_png(out)?;
    let side = out.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(&result.diagnostics)?).map_err(|e| Error::io(&side, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub masked: PathBuf,
    pub gender: Gender,
    #[serde(serialize_with = "finite_or_string", deserialize_with = "float_or_string")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub no_mask_detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMetrics {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dataset: String,
    pub groups: HashMap<Gender, GroupMetrics>,
    pub records: Vec<ImageRecord>,
}

fn fmt_metric(v: f64, digits: usize) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.digits$}")
    }
}

fn metric_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(if v > 0.0 { "inf" } else { "-inf" })
    }
}

impl Report {
    /// `Dataset | Metric | Male | Female` table.
    pub fn table(&self) -> String {
        let cell = |g: Gender, f: &dyn Fn(&GroupMetrics) -> String| self.groups.get(&g).map_or("n/a".into(), f);
        let mut out = String::from("Dataset | Metric | Male | Female\n");
        let psnr = |m: &GroupMetrics| fmt_metric(m.psnr, 2);
        let ssim = |m: &GroupMetrics| fmt_metric(m.ssim, 4);
        let _ = writeln!(out, "{} | PSNR | {} | {}", self.dataset, cell(Gender::Male, &psnr), cell(Gender::Female, &psnr));
        let _ = writeln!(out, "{} | SSIM | {} | {}", self.dataset, cell(Gender::Male, &ssim), cell(Gender::Female, &ssim));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut groups = serde_json::Map::new();
        for g in Gender::ALL {
            if let Some(m) = self.groups.get(&g) {
                groups.insert(
                    g.to_string(),
                    serde_json::json!({"count": m.count, "psnr": metric_json(m.psnr), "ssim": metric_json(m.ssim)}),
                );
            }
        }
        serde_json::json!({
            "dataset": self.dataset,
            "groups": groups,
            "records": serde_json::to_value(&self.records).unwrap_or(serde_json::Value::Null),
        })
    }

    /// Writes the table to `path` and the records to `path` with a `.json` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.table()).map_err(|e| Error::io(path, e))?;
        let side = path.with_extension("json");
        fs::write(&side, serde_json::to_string_pretty(&self.to_json())?).map_err(|e| Error::io(&side, e))
    }
}

/// Mean PSNR and SSIM of merged reconstructions against the clean images,
/// grouped by the manifest label (or the predicted gender when unlabeled).
pub fn evaluate(bundle: &PipelineBundle, manifest: &Manifest) -> Result<Report> {
    if manifest.is_empty() {
        return Err(Error::Evaluation("manifest has no entries".into()));
    }
    let s = bundle.image_size;
    let mut records = Vec::with_capacity(manifest.len());
    let mut sums: HashMap<Gender, (usize, f64, f64)> = HashMap::new();
    for e in &manifest.entries {
        let masked = load_image(manifest.resolve(&e.masked), s)?;
        let clean = load_image(manifest.resolve(&e.clean), s)?;
        let r = infer(bundle, &masked, Some(&clean))?;
        let g = e.gender.unwrap_or(r.diagnostics.gender);
        let (p, q) = (r.diagnostics.psnr.unwrap_or(f64::NAN), r.diagnostics.ssim.unwrap_or(f64::NAN));
        let acc = sums.entry(g).or_insert((0, 0.0, 0.0));
        acc.0 += 1;
        acc.1 += p;
        acc.2 += q;
        records.push(ImageRecord {
            masked: e.masked.clone(),
            gender: g,
            psnr: Some(p),
            ssim: Some(q),
            no_mask_detected: r.diagnostics.no_mask_detected,
        });
    }
    let groups = sums
        .into_iter()
        .map(|(g, (n, p, q))| (g, GroupMetrics { count: n, psnr: p / n as f64, ssim: q / n as f64 }))
        .collect();
    let dataset = manifest
        .root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(Report { dataset, groups, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedLandmarks(usize);

    impl LandmarkStage for FixedLandmarks {
        fn landmarks(&self, _: &ImageTensor) -> Result<LandmarkSet> {
            LandmarkSet::new(vec![(0.5, 0.5); crate::NUM_LANDMARKS])
        }
        fn input_size(&self) -> usize {
            self.0
        }
    }

    struct FixedMask(BinarySegmentationMap);

    impl MaskStage for FixedMask {
        fn mask(&self, _: &ImageTensor) -> Result<BinarySegmentationMap> {
            Ok(self.0.clone())
        }
        fn input_size(&self) -> usize {
            self.0.height()
        }
    }

    struct Constant(f32, usize);

    impl Inpainter for Constant {
        fn inpaint(&self, g: &ImageTensor, _: &ImageTensor, _: &BinarySegmentationMap) -> Result<ImageTensor> {
            ImageTensor::filled(g.height(), g.width(), 3, self.0)
        }
        fn input_size(&self) -> usize {
            self.1
        }
    }

    fn bundle(p: f64, mask: BinarySegmentationMap) -> PipelineBundle {
        let s = mask.height();
        PipelineBundle {
            gender: Box::new(ConstantScorer { p, size: s }),
            landmarks: Box::new(FixedLandmarks(s)),
            segmenter: Box::new(FixedMask(mask)),
            male: Box::new(Constant(1.0, s)),
            female: Box::new(Constant(0.0, s)),
            image_size: s,
            dilation_radius: 1,
            gender_threshold: 0.5,
            landmark_sigma: 1.0,
        }
    }

    #[test]
    fn gate_routes_to_one_generator_and_merge_keeps_outside() {
        let mask = BinarySegmentationMap::from_fn(16, 16, |y, x| (6..9).contains(&y) && (6..9).contains(&x)).unwrap();
        let img = ImageTensor::filled(16, 16, 3, 0.5).unwrap();
        let m = infer(&bundle(0.9, mask.clone()), &img, None).unwrap();
        let f = infer(&bundle(0.1, mask.clone()), &img, None).unwrap();
        assert_eq!(m.diagnostics.gender, Gender::Male);
        assert_eq!(f.diagnostics.gender, Gender::Female);
        let dilated = dilate_mask(&mask, 1);
        for y in 0..16 {
            for x in 0..16 {
                let inside = dilated.get(y, x);
                assert_eq!(m.output.get(y, x, 0), if inside { 1.0 } else { 0.5 });
                assert_eq!(f.output.get(y, x, 0), if inside { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn empty_mask_returns_input_with_flag() {
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 5) as f32 / 4.0).unwrap();
        let r = infer(&bundle(0.9, BinarySegmentationMap::zeros(16, 16).unwrap()), &img, Some(&img)).unwrap();
        assert!(r.diagnostics.no_mask_detected);
        assert_eq!(r.output, img);
        assert_eq!(r.diagnostics.psnr, Some(f64::INFINITY));
        let json = serde_json::to_string(&r.diagnostics).unwrap();
        assert!(json.contains("\"inf\""));
        let back: Diagnostics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r.diagnostics);
    }

    #[test]
    fn size_mismatch_is_reported() {
        let mut b = bundle(0.9, BinarySegmentationMap::zeros(16, 16).unwrap());
        assert!(b.validate().is_ok());
        b.male = Box::new(Constant(1.0, 32));
        assert!(matches!(b.validate(), Err(Error::Config(_))));
        let img = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        assert!(matches!(infer(&b, &img, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn report_table_layout() {
        let mut groups = HashMap::new();
        groups.insert(Gender::Male, GroupMetrics { count: 2, psnr: 28.8234, ssim: 0.93 });
        groups.insert(Gender::Female, GroupMetrics { count: 1, psnr: f64::INFINITY, ssim: 1.0 });
        let r = Report { dataset: "synth".into(), groups, records: vec![] };
        assert_eq!(r.table(), "Dataset | Metric | Male | Female\nsynth | PSNR | 28.82 | inf\nsynth | SSIM | 0.9300 | 1.0000\n");
        assert_eq!(r.to_json()["groups"]["female"]["psnr"], "inf");
    }
}
