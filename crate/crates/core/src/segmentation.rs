//! Mask segmentation: IoU utilities, polygon annotations, morphological
//! post-processing and a small U-shaped segmenter.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinarySegmentationMap, ImageTensor};
use crate::nn::{self, Conv2d, ConvSpec, ParamStore};

fn check_pair(a: &BinarySegmentationMap, b: &BinarySegmentationMap) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )))
    }
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &BinarySegmentationMap, b: &BinarySegmentationMap) -> Result<f64> {
    check_pair(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Marks each proposal positive when its IoU with `ground` is at least `threshold`.
pub fn classify_proposals(
    proposals: &[BinarySegmentationMap],
    ground: &BinarySegmentationMap,
    threshold: f64,
) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Parameter(format!("IoU threshold {threshold} outside (0,1]")));
    }
    proposals
        .iter()
        .map(|p| Ok(iou(p, ground)? >= threshold))
        .collect()
}

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= radius^2`.
pub(crate) fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Morphological dilation with a Euclidean disc; radius 0 is the identity.
pub fn dilate_mask(mask: &BinarySegmentationMap, radius: usize) -> BinarySegmentationMap {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let offsets = disc_offsets(radius);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[ny as usize * w + nx as usize] = 1;
                }
            }
        }
    }
    BinarySegmentationMap::new(h, w, out).expect("dilation preserves shape")
}

/// One polygon in pixel coordinates of an image of `image_size = (height, width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub vertices: Vec<(f64, f64)>,
    pub image_size: (usize, usize),
}

impl PolygonAnnotation {
    pub fn new(vertices: Vec<(f64, f64)>, image_size: (usize, usize)) -> Result<Self> {
        let a = Self { vertices, image_size };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::Annotation(format!(
                "polygon needs at least 3 vertices, got {}",
                self.vertices.len()
            )));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Annotation("image size must be positive".into()));
        }
        for &(x, y) in &self.vertices {
            if !(0.0..=w as f64).contains(&x) || !(0.0..=h as f64).contains(&y) {
                return Err(Error::Annotation(format!("vertex ({x}, {y}) outside {w}x{h} image")));
            }
        }
        Ok(())
    }

    /// Shoelace area in pixels^2.
    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }
}

pub fn shoelace_area(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = vertices[i];
        let (x1, y1) = vertices[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Even-odd scanline fill of a polygon given in the pixel coordinates of an
/// `height x width` grid; a pixel is inside when its centre is.
pub(crate) fn rasterize_polygon(vertices: &[(f64, f64)], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; height * width];
    let n = vertices.len();
    let mut xs = Vec::with_capacity(n);
    for row in 0..height {
        let yc = row as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % n];
            if (y0 > yc) != (y1 > yc) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // centres xc = col + 0.5 with pair[0] <= xc < pair[1]
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for col in start..end {
                out[row * width + col] ^= 1;
            }
        }
    }
    out
}

/// Rasterises the annotation into a `size x size` map, rescaling vertices
/// when the annotated image has a different size.
pub fn polygon_to_mask(annotation: &PolygonAnnotation, size: usize) -> Result<BinarySegmentationMap> {
    annotation.validate()?;
    if annotation.area() <= 1e-12 {
        return Err(Error::Annotation("polygon has zero area".into()));
    }
    let (h, w) = annotation.image_size;
    let sx = size as f64 / w as f64;
    let sy = size as f64 / h as f64;
    let scaled: Vec<(f64, f64)> = annotation.vertices.iter().map(|&(x, y)| (x * sx, y * sy)).collect();
    BinarySegmentationMap::new(size, size, rasterize_polygon(&scaled, size, size))
}

#[derive(Debug, Deserialize)]
struct LabelmeShape {
    points: Vec<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LabelmeFile {
    #[allow(dead_code)]
    image_path: Option<String>,
    image_height: usize,
    image_width: usize,
    shapes: Vec<LabelmeShape>,
}

/// Polygons of a Labelme-style annotation document. Unknown fields are ignored.
pub fn parse_labelme(json: &str) -> Result<Vec<PolygonAnnotation>> {
    let doc: LabelmeFile = serde_json::from_str(json).map_err(|e| Error::Annotation(e.to_string()))?;
    doc.shapes
        .into_iter()
        .map(|s| {
            PolygonAnnotation::new(
                s.points.into_iter().map(|[x, y]| (x, y)).collect(),
                (doc.image_height, doc.image_width),
            )
        })
        .collect()
}

/// Union of all polygons of a Labelme file at `size x size`.
pub fn load_labelme_mask(path: impl AsRef<Path>, size: usize) -> Result<BinarySegmentationMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let polys = parse_labelme(&text)?;
    let mut acc = vec![0u8; size * size];
    for p in &polys {
        let m = polygon_to_mask(p, size)?;
        for (a, b) in acc.iter_mut().zip(m.data()) {
            *a |= b;
        }
    }
    BinarySegmentationMap::new(size, size, acc)
}

pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn segmentation_loss(prob_map: &[f64], ground: &BinarySegmentationMap) -> Result<f64> {
    if prob_map.len() != ground.data().len() {
        return Err(Error::Dimension("probability map size mismatch".into()));
    }
    let total: f64 = prob_map
        .iter()
        .zip(ground.data())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if g == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / prob_map.len() as f64)
}

/// Differentiable mean BCE on tensors of equal shape; `target` holds 0/1 values.
pub fn bce_tensor(prob: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prob.dims() != target.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", prob.dims(), target.dims())));
    }
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let t = target.to_dtype(prob.dtype())?;
    let pos = (&t * p.log()?)?;
    let neg = (t.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 32,
            depth: 4,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("segmenter depth and base_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }
}

#[derive(Debug, Clone)]
struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self(
            Conv2d::new(store, &format!("{name}.0"), ConvSpec::new(in_c, out_c, 3), rng)?,
            Conv2d::new(store, &format!("{name}.1"), ConvSpec::new(out_c, out_c, 3), rng)?,
        ))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.0.forward(x)?.relu()?;
        Ok(self.1.forward(&h)?.relu()?)
    }
}

/// U-shaped encoder-decoder emitting one mask logit per pixel.
pub struct Segmenter {
    config: SegmenterConfig,
    store: ParamStore,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl std::fmt::Debug for Segmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segmenter")
            .field("config", &self.config)
            .field("params", &self.store.num_trainable())
            .finish()
    }
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut down = Vec::with_capacity(config.depth);
        let mut in_c = 3;
        for l in 0..config.depth {
            down.push(DoubleConv::new(&mut store, &format!("down{l}"), in_c, config.width(l), &mut rng)?);
            in_c = config.width(l);
        }
        let bottom = DoubleConv::new(&mut store, "bottom", in_c, config.width(config.depth), &mut rng)?;
        let mut up = Vec::with_capacity(config.depth);
        let mut below = config.width(config.depth);
        for l in (0..config.depth).rev() {
            up.push(DoubleConv::new(
                &mut store,
                &format!("up{l}"),
                below + config.width(l),
                config.width(l),
                &mut rng,
            )?);
            below = config.width(l);
        }
        let head = Conv2d::new(&mut store, "head", ConvSpec::new(below, 1, 1), &mut rng)?;
        Ok(Self {
            config,
            store,
            down,
            bottom,
            up,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, 1, H, W)` mask logits for `(B, 3, H, W)` images in `[0, 1]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Dimension(format!("segmenter expects 3x{s}x{s}, got {c}x{h}x{w}")));
        }
        let mut x = ((images * 2.0)? - 1.0)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for block in &self.down {
            let y = block.forward(&x)?;
            x = nn::max_pool2(&y)?;
            skips.push(y);
        }
        x = self.bottom.forward(&x)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = block.forward(&Tensor::cat(&[&nn::upsample2(&x)?, &skip], 1)?)?;
        }
        self.head.forward(&x)
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.logits(images)?)
    }

    pub fn predict(&self, image: &ImageTensor, threshold: f64) -> Result<BinarySegmentationMap> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {threshold} outside (0,1)")));
        }
        let s = self.config.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Dimension(format!(
                "segmenter expects {s}x{s} input, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let x = image.to_tensor(DType::F32, self.store.device())?;
        let probs: Vec<f32> = self.probabilities(&x)?.flatten_all()?.to_vec1()?;
        BinarySegmentationMap::from_probabilities(s, s, &probs, threshold as f32)
    }
}

pub fn predict_mask(model: &Segmenter, image: &ImageTensor, threshold: f64) -> Result<BinarySegmentationMap> {
    model.predict(image, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> BinarySegmentationMap {
        BinarySegmentationMap::from_fn(h, w, |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = rect(6, 8, 0, 0, 2, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = rect(6, 8, 4, 4, 2, 4);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        // 2x4 rectangles sharing a 2x2 block: 4 / 12
        let shifted = rect(6, 8, 0, 2, 2, 4);
        assert!((iou(&a, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = BinarySegmentationMap::zeros(6, 8).unwrap();
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&a, &BinarySegmentationMap::zeros(2, 2).unwrap()).is_err());
    }

    #[test]
    fn proposals_use_greater_or_equal() {
        let ground = rect(4, 4, 0, 0, 2, 4);
        let half = rect(4, 4, 0, 0, 1, 4);
        let third = {
            let g = rect(6, 8, 0, 0, 2, 4);
            (g, rect(6, 8, 0, 2, 2, 4))
        };
        assert_eq!(iou(&half, &ground).unwrap(), 0.5);
        assert_eq!(classify_proposals(&[ground.clone(), half], &ground, 0.5).unwrap(), vec![true, true]);
        assert_eq!(classify_proposals(&[third.1], &third.0, 0.5).unwrap(), vec![false]);
        assert!(classify_proposals(&[], &ground, 0.0).is_err());
    }

    #[test]
    fn square_and_full_frame_rasterisation() {
        let sq = PolygonAnnotation::new(vec![(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)], (10, 10)).unwrap();
        let m = polygon_to_mask(&sq, 10).unwrap();
        assert_eq!(m.mask_pixel_count(), 16);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(m.get(y, x), (2..6).contains(&y) && (2..6).contains(&x));
            }
        }
        let full = PolygonAnnotation::new(vec![(0.0, 0.0), (8.0, 0.0), (8.0, 8.0), (0.0, 8.0)], (8, 8)).unwrap();
        assert_eq!(polygon_to_mask(&full, 8).unwrap().mask_pixel_count(), 64);
        // annotation at 10x10 rasterised at 20x20 doubles the square extent
        assert_eq!(polygon_to_mask(&sq, 20).unwrap().mask_pixel_count(), 64);
    }

    #[test]
    fn triangle_area_within_perimeter() {
        let tri = PolygonAnnotation::new(vec![(3.2, 4.1), (28.7, 9.9), (11.3, 27.4)], (32, 32)).unwrap();
        let m = polygon_to_mask(&tri, 32).unwrap();
        let v = &tri.vertices;
        let perimeter: f64 = (0..3)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % 3]);
                (a.0 - b.0).hypot(a.1 - b.1)
            })
            .sum();
        assert!((m.mask_pixel_count() as f64 - tri.area()).abs() <= perimeter);
    }

    #[test]
    fn degenerate_and_invalid_polygons() {
        let line = PolygonAnnotation::new(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], (8, 8)).unwrap();
        assert!(matches!(polygon_to_mask(&line, 8), Err(Error::Annotation(_))));
        assert!(PolygonAnnotation::new(vec![(1.0, 1.0), (2.0, 2.0)], (8, 8)).is_err());
        assert!(PolygonAnnotation::new(vec![(1.0, 1.0), (2.0, 9.0), (3.0, 1.0)], (8, 8)).is_err());
    }

    #[test]
    fn labelme_document_parses_and_ignores_extra_fields() {
        let json = r#"{
            "version": "5.0.1", "flags": {}, "imagePath": "face.png", "imageData": null,
            "imageHeight": 10, "imageWidth": 10,
            "shapes": [{"label": "mask", "shape_type": "polygon", "group_id": null,
                        "points": [[2, 2], [6, 2], [6, 6], [2, 6]]}]
        }"#;
        let polys = parse_labelme(json).unwrap();
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].image_size, (10, 10));
        assert_eq!(polygon_to_mask(&polys[0], 10).unwrap().mask_pixel_count(), 16);
        assert!(parse_labelme("{\"shapes\": []}").is_err());
    }

    #[test]
    fn dilation_examples() {
        let mut single = vec![0u8; 49];
        single[3 * 7 + 3] = 1;
        let m = BinarySegmentationMap::new(7, 7, single).unwrap();
        assert_eq!(dilate_mask(&m, 0), m);
        let d1 = dilate_mask(&m, 1);
        assert_eq!(d1.mask_pixel_count(), 5);
        for (y, x) in [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)] {
            assert!(d1.get(y, x));
        }
        let d2 = dilate_mask(&d1, 1);
        assert!(d1.data().iter().zip(d2.data()).all(|(a, b)| a <= b));
    }

    #[test]
    fn bce_examples() {
        let g = BinarySegmentationMap::from_fn(3, 3, |y, x| (y + x) % 2 == 0).unwrap();
        let half = vec![0.5; 9];
        assert!((segmentation_loss(&half, &g).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let exact: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        let l = segmentation_loss(&exact, &g).unwrap();
        assert!(l <= -(1.0 - BCE_EPS).ln() + 1e-15 && l > 0.0);
        assert!(segmentation_loss(&half[..4], &g).is_err());
    }

    #[test]
    fn bce_tensor_matches_scalar_and_finite_differences() {
        let g = BinarySegmentationMap::from_fn(8, 8, |y, x| (y * 3 + x) % 5 < 2).unwrap();
        let probs: Vec<f64> = (0..64).map(|i| 0.05 + 0.9 * ((i * 37 % 64) as f64 / 63.0)).collect();
        let p = Var::from_tensor(&Tensor::from_slice(&probs, (1, 1, 8, 8), &Device::Cpu).unwrap()).unwrap();
        let t = g.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let loss = bce_tensor(&p, &t).unwrap();
        assert!((nn::scalar(&loss).unwrap() - segmentation_loss(&probs, &g).unwrap()).abs() < 1e-12);
        let grad: Vec<f64> = loss.backward().unwrap().get(&p).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..64 {
            let mut a = probs.clone();
            a[i] += h;
            let mut b = probs.clone();
            b[i] -= h;
            let fd = (segmentation_loss(&a, &g).unwrap() - segmentation_loss(&b, &g).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn segmenter_shapes_and_binary_output() {
        let cfg = SegmenterConfig {
            input_size: 32,
            base_channels: 4,
            depth: 3,
        };
        let model = Segmenter::new(cfg, 1).unwrap();
        let img = ImageTensor::from_fn(32, 32, 3, |y, x, c| ((y * x + c) % 9) as f32 / 9.0).unwrap();
        let m = model.predict(&img, 0.5).unwrap();
        assert_eq!((m.height(), m.width()), (32, 32));
        assert!(m.data().iter().all(|&v| v <= 1));
        assert!(model.predict(&ImageTensor::filled(16, 16, 3, 0.1).unwrap(), 0.5).is_err());
        assert!(model.predict(&img, 1.0).is_err());
        assert!(SegmenterConfig { input_size: 30, ..cfg }.validate().is_err());
    }

    #[test]
    fn default_segmenter_maps_256_to_256() {
        let model = Segmenter::new(SegmenterConfig { base_channels: 4, ..Default::default() }, 0).unwrap();
        let img = ImageTensor::filled(256, 256, 3, 0.4).unwrap();
        let m = model.predict(&img, 0.5).unwrap();
        assert_eq!((m.height(), m.width()), (256, 256));
    }

    #[test]
    fn rasterised_area_converges_with_resolution() {
        // mean error over seeded random convex polygons in unit coordinates
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let fixtures: Vec<Vec<(f64, f64)>> = (0..60)
            .map(|_| {
                let n = rng.random_range(3..8);
                let (cx, cy, r) = (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6), rng.random_range(0.15..0.35));
                let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(f64::total_cmp);
                angles.iter().map(|a| (cx + r * a.cos(), cy + r * a.sin())).collect()
            })
            .collect();
        let err_at = |size: usize| -> f64 {
            fixtures
                .iter()
                .map(|f| {
                    let verts: Vec<(f64, f64)> = f.iter().map(|&(x, y)| (x * size as f64, y * size as f64)).collect();
                    let count = rasterize_polygon(&verts, size, size).iter().filter(|&&v| v == 1).count();
                    (count as f64 - shoelace_area(&verts)).abs() / (size * size) as f64
                })
                .sum::<f64>()
                / fixtures.len() as f64
        };
        let mut prev = err_at(32);
        for size in [64, 128, 256] {
            let e = err_at(size);
            assert!(e <= 0.6 * prev, "size {size}: {e} vs {prev}");
            prev = e;
        }
    }

    fn arb_mask() -> impl Strategy<Value = BinarySegmentationMap> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            prop::collection::vec(0u8..=1, h * w).prop_map(move |d| BinarySegmentationMap::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_one_iff_equal(a in arb_mask(), seed in any::<u64>()) {
            let b = BinarySegmentationMap::from_fn(a.height(), a.width(), |y, x| {
                a.get(y, x) ^ ((seed >> ((y * a.width() + x) % 64)) & 1 == 1 && seed % 3 == 0)
            }).unwrap();
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            if !a.is_empty() {
                prop_assert_eq!(iou(&a, &b).unwrap() == 1.0, a == b);
            }
        }

        #[test]
        fn dilation_only_grows(m in arb_mask(), r in 0usize..3) {
            let d = dilate_mask(&m, r);
            prop_assert!(m.data().iter().zip(d.data()).all(|(a, b)| a <= b));
            prop_assert_eq!(d.mask_pixel_count(), d.data().iter().filter(|&&v| v == 1).count());
        }
    }
}
