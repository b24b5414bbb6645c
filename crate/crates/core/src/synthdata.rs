//! Paired training data: clean face, landmark-anchored synthetic mask and the
//! exact segmentation map of the painted region, plus gender-split manifests.

mod face;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use face::procedural_face;

use crate::error::{Error, Result};
use crate::gender::GenderScorer;
use crate::imaging::{load_image, BinarySegmentationMap, ImageTensor};
use crate::landmarks::{LandmarkSet, NUM_LANDMARKS};
use crate::segmentation::{rasterize_polygon, shoelace_area};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(Error::Parameter(format!("unknown gender `{other}`"))),
        }
    }
}

/// Paint applied inside the mask polygon. Periods are in pixels at 256x256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskFill {
    Solid { color: [f32; 3] },
    /// Left and right halves split at the polygon's horizontal centre.
    TwoTone { left: [f32; 3], right: [f32; 3] },
    Stripes { a: [f32; 3], b: [f32; 3], period: f64 },
}

impl MaskFill {
    fn colors(&self) -> Vec<[f32; 3]> {
        match self {
            MaskFill::Solid { color } => vec![*color],
            MaskFill::TwoTone { left, right } => vec![*left, *right],
            MaskFill::Stripes { a, b, .. } => vec![*a, *b],
        }
    }

    fn color_at(&self, x: usize, y: usize, centre_x: f64, size: usize) -> [f32; 3] {
        match self {
            MaskFill::Solid { color } => *color,
            MaskFill::TwoTone { left, right } => {
                if (x as f64 + 0.5) < centre_x {
                    *left
                } else {
                    *right
                }
            }
            MaskFill::Stripes { a, b, period } => {
                let p = (period * size as f64 / 256.0).max(2.0);
                if ((y as f64 / p * 2.0).floor() as i64) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTemplate {
    pub name: String,
    /// Landmark indices tracing the polygon outline in order.
    pub anchor_indices: Vec<usize>,
    pub fill: MaskFill,
    /// Maximum vertex displacement in pixels at 256x256.
    pub jitter: f64,
}

impl MaskTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_indices.len() < 4 {
            return Err(Error::Template(format!(
                "template `{}` needs at least 4 anchors, got {}",
                self.name,
                self.anchor_indices.len()
            )));
        }
        if let Some(&i) = self.anchor_indices.iter().find(|&&i| i >= NUM_LANDMARKS) {
            return Err(Error::Template(format!("anchor index {i} out of range")));
        }
        if self.fill.colors().iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Template(format!("fill of `{}` outside [0,1]", self.name)));
        }
        if let MaskFill::Stripes { period, .. } = self.fill {
            if !(period > 0.0) {
                return Err(Error::Template("stripe period must be positive".into()));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Template("jitter must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn contour_anchors(from: usize, to: usize, bridge: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (from..=to).step_by(2).collect();
    v.push(bridge);
    v
}

pub fn default_templates() -> Vec<MaskTemplate> {
    vec![
        MaskTemplate {
            name: "surgical".into(),
            anchor_indices: contour_anchors(4, 28, 52),
            fill: MaskFill::Solid { color: [0.55, 0.75, 0.9] },
            jitter: 3.0,
        },
        MaskTemplate {
            name: "cloth".into(),
            anchor_indices: contour_anchors(2, 30, 52),
            fill: MaskFill::Solid { color: [0.18, 0.2, 0.28] },
            jitter: 4.0,
        },
        MaskTemplate {
            name: "n95".into(),
            anchor_indices: contour_anchors(5, 27, 53),
            fill: MaskFill::TwoTone { left: [0.96, 0.96, 0.94], right: [0.84, 0.85, 0.83] },
            jitter: 2.0,
        },
        MaskTemplate {
            name: "stripes".into(),
            anchor_indices: contour_anchors(4, 28, 51),
            fill: MaskFill::Stripes { a: [0.85, 0.3, 0.3], b: [0.95, 0.95, 0.95], period: 16.0 },
            jitter: 4.0,
        },
        MaskTemplate {
            name: "black".into(),
            anchor_indices: contour_anchors(3, 29, 52),
            fill: MaskFill::Solid { color: [0.05, 0.05, 0.05] },
            jitter: 3.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub clean: ImageTensor,
    pub masked: ImageTensor,
    pub segmap: BinarySegmentationMap,
    pub landmarks: LandmarkSet,
    pub gender: Option<Gender>,
}

/// Upper bound on the masked share of the frame.
pub const MAX_MASK_FRACTION: f64 = 0.6;

/// Paints `template` over `clean` along its anchor landmarks. Vertex jitter
/// is drawn from `seed`, so equal inputs give bit-identical pairs.
pub fn apply_mask_template(
    clean: &ImageTensor,
    landmarks: &LandmarkSet,
    template: &MaskTemplate,
    seed: u64,
) -> Result<SyntheticPair> {
    template.validate()?;
    let (h, w) = (clean.height(), clean.width());
    if h != w {
        return Err(Error::Dimension(format!("expected a square image, got {w}x{h}")));
    }
    let size = h;
    let max_shift = template.jitter * size as f64 / 256.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = landmarks.points();
    let vertices: Vec<(f64, f64)> = template
        .anchor_indices
        .iter()
        .map(|&i| {
            let (x, y) = (pts[i].0 * size as f64, pts[i].1 * size as f64);
            let r = max_shift * rng.random::<f64>();
            let t = std::f64::consts::TAU * rng.random::<f64>();
            ((x + r * t.cos()).clamp(0.0, size as f64), (y + r * t.sin()).clamp(0.0, size as f64))
        })
        .collect();
    if shoelace_area(&vertices) < 1.0 {
        return Err(Error::Template(format!("anchors of `{}` are degenerate", template.name)));
    }
    let segmap = BinarySegmentationMap::new(size, size, rasterize_polygon(&vertices, size, size))?;
    if segmap.is_empty() {
        return Err(Error::Template(format!("template `{}` covers no pixel", template.name)));
    }
    if segmap.area_fraction() >= MAX_MASK_FRACTION {
        return Err(Error::Template(format!(
            "template `{}` covers {:.1}% of the frame",
            template.name,
            100.0 * segmap.area_fraction()
        )));
    }
    let centre_x = vertices.iter().map(|v| v.0).sum::<f64>() / vertices.len() as f64;
    let c = clean.channels();
    let mut data = clean.data().to_vec();
    for y in 0..size {
        for x in 0..size {
            if segmap.get(y, x) {
                let color = template.fill.color_at(x, y, centre_x, size);
                for ch in 0..c {
                    data[(y * size + x) * c + ch] = color[ch.min(2)];
                }
            }
        }
    }
    Ok(SyntheticPair {
        clean: clean.clone(),
        masked: ImageTensor::new(size, size, c, data)?,
        segmap,
        landmarks: landmarks.clone(),
        gender: None,
    })
}

/// Generator for entry `index`; independent of every other entry.
pub fn entry_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Template index for entry `index` drawn uniformly from `count` templates,
/// together with the seed for that entry's vertex jitter.
pub fn draw_template(seed: u64, index: usize, count: usize) -> (usize, u64) {
    let mut rng = entry_rng(seed, index);
    (rng.random_range(0..count), rng.random())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub masked: PathBuf,
    pub segmap: PathBuf,
    pub landmarks: PathBuf,
    #[serde(default)]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Manifest {
        seed: u64,
        #[serde(default)]
        warnings: Vec<String>,
    },
    Entry(ManifestEntry),
}

/// Paired-sample index. Entry paths are relative to `root` unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Same root and seed, different entries.
    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        Self { root: self.root.clone(), seed: self.seed, entries, warnings: Vec::new() }
    }

    /// Loads `path`, or `path/manifest.jsonl` when `path` is a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seed = None;
        let mut warnings = Vec::new();
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match record {
                Record::Manifest { seed: s, warnings: w } => {
                    seed = Some(s);
                    warnings = w;
                }
                Record::Entry(e) => entries.push(e),
            }
        }
        let seed = seed.ok_or_else(|| Error::Dataset(format!("{} has no header record", path.display())))?;
        Ok(Self { root, seed, entries, warnings })
    }

    /// Writes line-delimited JSON. Paths stay relative when `path` sits in
    /// the manifest root and are made absolute otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(""));
        let same_root = fs::canonicalize(dir).ok() == fs::canonicalize(&self.root).ok();
        let root_abs = if same_root {
            None
        } else {
            Some(fs::canonicalize(&self.root).map_err(|e| Error::io(&self.root, e))?)
        };
        let fix = |p: &PathBuf| match &root_abs {
            Some(r) => r.join(p),
            None => p.clone(),
        };
        let mut out = String::new();
        let header = Record::Manifest { seed: self.seed, warnings: self.warnings.clone() };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for e in &self.entries {
            let e = ManifestEntry {
                clean: fix(&e.clean),
                masked: fix(&e.masked),
                segmap: fix(&e.segmap),
                landmarks: fix(&e.landmarks),
                gender: e.gender,
                template: e.template.clone(),
            };
            out.push_str(&serde_json::to_string(&Record::Entry(e))?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads entry `i` with images resampled to `size`.
    pub fn load_pair(&self, i: usize, size: usize) -> Result<SyntheticPair> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("entry {i} out of range ({} entries)", self.len())))?;
        let segmap = BinarySegmentationMap::load_png(self.resolve(&e.segmap))?;
        Ok(SyntheticPair {
            clean: load_image(self.resolve(&e.clean), size)?,
            masked: load_image(self.resolve(&e.masked), size)?,
            segmap: segmap.resize(size, size)?,
            landmarks: LandmarkSet::load(self.resolve(&e.landmarks))?,
            gender: e.gender,
        })
    }

    pub fn load_all(&self, size: usize) -> Result<Vec<SyntheticPair>> {
        (0..self.len()).map(|i| self.load_pair(i, size)).collect()
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Optional `<stem> <male|female>` lines next to the input images.
pub const GENDER_LABELS_FILE: &str = "genders.txt";

fn read_gender_labels(image_dir: &Path) -> Result<HashMap<String, Gender>> {
    let path = image_dir.join(GENDER_LABELS_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut labels = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some(stem), Some(g)) => {
                labels.insert(stem.to_string(), g.parse()?);
            }
            _ => return Err(Error::Dataset(format!("bad label line `{line}` in {}", path.display()))),
        }
    }
    Ok(labels)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Builds one masked pair per input image and writes
/// `out_dir/{clean,masked,segmap,landmarks}/NNNN.{png,txt}` plus
/// `out_dir/manifest.jsonl`. Images are resampled to `size`.
pub fn generate_dataset(
    image_dir: impl AsRef<Path>,
    landmark_dir: impl AsRef<Path>,
    templates: &[MaskTemplate],
    seed: u64,
    out_dir: impl AsRef<Path>,
    size: usize,
) -> Result<Manifest> {
    let (image_dir, landmark_dir, out_dir) = (image_dir.as_ref(), landmark_dir.as_ref(), out_dir.as_ref());
    if templates.is_empty() {
        return Err(Error::Template("no templates given".into()));
    }
    for t in templates {
        t.validate()?;
    }
    let labels = read_gender_labels(image_dir)?;
    let images = list_images(image_dir)?;
    for sub in ["clean", "masked", "segmap", "landmarks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for (index, img_path) in images.iter().enumerate() {
        let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let lm_path = landmark_dir.join(format!("{stem}.txt"));
        if !lm_path.exists() {
            let w = format!("skipped {}: no landmark file {}", img_path.display(), lm_path.display());
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        let landmarks = LandmarkSet::load(&lm_path)?;
        let clean = load_image(img_path, size)?;
        let (t, jitter_seed) = draw_template(seed, index, templates.len());
        let mut pair = apply_mask_template(&clean, &landmarks, &templates[t], jitter_seed)?;
        pair.gender = labels.get(&stem).copied();

        let n = format!("{:04}", entries.len());
        let entry = ManifestEntry {
            clean: PathBuf::from("clean").join(format!("{n}.png")),
            masked: PathBuf::from("masked").join(format!("{n}.png")),
            segmap: PathBuf::from("segmap").join(format!("{n}.png")),
            landmarks: PathBuf::from("landmarks").join(format!("{n}.txt")),
            gender: pair.gender,
            template: Some(templates[t].name.clone()),
        };
        pair.clean.save_png(out_dir.join(&entry.clean))?;
        pair.masked.save_png(out_dir.join(&entry.masked))?;
        pair.segmap.save_png(out_dir.join(&entry.segmap))?;
        pair.landmarks.save(out_dir.join(&entry.landmarks))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no usable images in {}", image_dir.display())));
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), seed, entries, warnings };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes `count` procedural faces as `dir/images/NNNN.png` with
/// `dir/landmarks/NNNN.txt` and a gender label file. Genders alternate.
pub fn write_procedural_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (images, lms) = (dir.join("images"), dir.join("landmarks"));
    for d in [&images, &lms] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut labels = String::new();
    for i in 0..count {
        let gender = if (i as u64 + seed) % 2 == 0 { Gender::Male } else { Gender::Female };
        let (img, lm) = procedural_face(size, gender, seed.wrapping_add(i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))?;
        let stem = format!("{i:04}");
        img.save_png(images.join(format!("{stem}.png")))?;
        lm.save(lms.join(format!("{stem}.txt")))?;
        labels.push_str(&format!("{stem} {gender}\n"));
    }
    let lp = images.join(GENDER_LABELS_FILE);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    Ok((images, lms))
}

/// Partitions into (male, female). Stored labels win; unlabeled entries are
/// scored on their masked image and routed male when `p >= threshold`.
pub fn split_by_gender(manifest: &Manifest, classifier: Option<&dyn GenderScorer>) -> Result<(Manifest, Manifest)> {
    let mut male = Vec::new();
    let mut female = Vec::new();
    for e in &manifest.entries {
        let g = match (e.gender, classifier) {
            (Some(g), _) => g,
            (None, Some(c)) => {
                let img = load_image(manifest.resolve(&e.masked), c.input_size())?;
                if c.male_probability(&img)? >= c.threshold() {
                    Gender::Male
                } else {
                    Gender::Female
                }
            }
            (None, None) => {
                return Err(Error::Dataset(format!(
                    "entry {} is unlabeled and no classifier was given",
                    e.masked.display()
                )))
            }
        };
        let mut e = e.clone();
        e.gender = Some(g);
        match g {
            Gender::Male => male.push(e),
            Gender::Female => female.push(e),
        }
    }
    Ok((manifest.with_entries(male), manifest.with_entries(female)))
}
