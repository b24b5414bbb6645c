//! Procedural frontal faces with exact 98-point landmark annotations.
//!
//! The layout follows the common 98-point convention: 0-32 jaw contour
//! (16 is the chin), 33-41 and 42-50 eyebrows, 51-54 nose bridge, 55-59
//! nostrils, 60-67 and 68-75 eyes, 76-87 outer lips, 88-95 inner lips,
//! 96-97 pupils. These faces stand in for a real corpus so every stage can
//! be trained and tested without external data.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Gender;
use crate::error::Result;
use crate::imaging::ImageTensor;
use crate::landmarks::{LandmarkSet, NUM_LANDMARKS};
use crate::segmentation::rasterize_polygon;

type Rgb = [f32; 3];

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(size: usize, top: Rgb, bottom: Rgb) -> Self {
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            let t = y as f32 / size as f32;
            for _ in 0..size {
                px.push(lerp(top, bottom, t));
            }
        }
        Self { size, px }
    }

    fn fill_where(&mut self, mut f: impl FnMut(f64, f64) -> Option<Rgb>) {
        let s = self.size as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                // normalised pixel centre
                if let Some(c) = f((x as f64 + 0.5) / s, (y as f64 + 0.5) / s) {
                    self.px[y * self.size + x] = c;
                }
            }
        }
    }

    fn fill_ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb) {
        self.fill_where(|x, y| {
            let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
            (d <= 1.0).then_some(color)
        });
    }

    fn polygon_mask(&self, pts: &[(f64, f64)]) -> Vec<u8> {
        let s = self.size as f64;
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x * s, y * s)).collect();
        rasterize_polygon(&scaled, self.size, self.size)
    }

    fn fill_polygon(&mut self, pts: &[(f64, f64)], color: Rgb) {
        let m = self.polygon_mask(pts);
        for (p, &inside) in self.px.iter_mut().zip(&m) {
            if inside == 1 {
                *p = color;
            }
        }
    }

    fn stroke(&mut self, pts: &[(f64, f64)], width: f64, color: Rgb) {
        let half = (width / 2.0).max(0.6 / self.size as f64);
        self.fill_where(|x, y| {
            let hit = pts.windows(2).any(|seg| segment_distance((x, y), seg[0], seg[1]) <= half);
            hit.then_some(color)
        });
    }
}

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: Rgb, k: f32) -> Rgb {
    [(c[0] * k).clamp(0.0, 1.0), (c[1] * k).clamp(0.0, 1.0), (c[2] * k).clamp(0.0, 1.0)]
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn ellipse_points(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<(f64, f64)> {
    // starts at the left corner and runs over the top edge first
    (0..n)
        .map(|j| {
            let t = PI + j as f64 * 2.0 * PI / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

struct Layout {
    points: Vec<(f64, f64)>,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

fn layout(gender: Gender, rng: &mut ChaCha8Rng) -> Layout {
    let male = gender == Gender::Male;
    let cx = 0.5 + rng.random_range(-0.03..0.03);
    let cy = 0.46 + rng.random_range(-0.03..0.03);
    let a = if male { rng.random_range(0.27..0.31) } else { rng.random_range(0.23..0.27) };
    let b = rng.random_range(0.32..0.36);
    let jaw_exp = if male { 0.7 } else { 1.0 };
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);

    for i in 0..33 {
        let phi = (PI + 0.25) - i as f64 * (PI + 0.5) / 32.0;
        let (c, s) = (phi.cos(), phi.sin());
        // squarer jaw for the lower half of male faces
        let (c, s) = if s > 0.0 {
            (c.signum() * c.abs().powf(jaw_exp), s.powf(jaw_exp))
        } else {
            (c, s)
        };
        pts.push((cx + a * c, cy + b * s));
    }

    let eye_y = cy - 0.2 * b + rng.random_range(-0.01..0.01);
    let eye_dx = 0.42 * a;
    let (erx, ery) = (0.17 * a, if male { 0.07 * b } else { 0.085 * b });
    let brow_y = eye_y - if male { 0.16 * b } else { 0.2 * b };
    let brow_arch = if male { 0.02 * b } else { 0.05 * b };
    let brow_thick = if male { 0.045 * b } else { 0.025 * b };
    for side in [-1.0, 1.0] {
        let ex = cx + side * eye_dx;
        let upper: Vec<(f64, f64)> = (0..5)
            .map(|j| {
                let u = j as f64 / 4.0;
                let x = ex - 1.3 * erx + u * 2.6 * erx;
                (x, brow_y - brow_arch * (1.0 - (2.0 * u - 1.0).powi(2)))
            })
            .collect();
        let lower: Vec<(f64, f64)> = (1..5).rev().map(|j| (upper[j].0 - 0.05 * erx, upper[j].1 + brow_thick)).collect();
        pts.extend(upper);
        pts.extend(lower);
    }

    let tip_y = cy + 0.2 * b;
    for j in 0..4 {
        pts.push((cx, eye_y + (tip_y - eye_y) * j as f64 / 3.0));
    }
    let nostril_y = cy + 0.27 * b;
    for j in 0..5 {
        let k = j as f64 - 2.0;
        pts.push((cx + k * 0.07 * a, nostril_y + 0.01 * b * (1.0 - k.abs() / 2.0)));
    }

    for side in [-1.0, 1.0] {
        pts.extend(ellipse_points(cx + side * eye_dx, eye_y, erx, ery, 8));
    }

    let mouth_y = cy + 0.52 * b;
    let (mw, mh) = if male { (0.36 * a, 0.08 * b) } else { (0.32 * a, 0.1 * b) };
    pts.extend(ellipse_points(cx, mouth_y, mw, mh, 12));
    pts.extend(ellipse_points(cx, mouth_y, 0.75 * mw, 0.3 * mh, 8));

    let gaze = (rng.random_range(-0.3..0.3) * erx, rng.random_range(-0.2..0.2) * ery);
    for side in [-1.0, 1.0] {
        pts.push((cx + side * eye_dx + gaze.0, eye_y + gaze.1));
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    let points = pts.into_iter().map(|(x, y)| (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))).collect();
    Layout { points, cx, cy, a, b }
}

const SKIN_LIGHT: Rgb = [0.96, 0.83, 0.72];
const SKIN_DARK: Rgb = [0.42, 0.28, 0.2];
const HAIR: [Rgb; 5] = [
    [0.08, 0.06, 0.05],
    [0.3, 0.18, 0.1],
    [0.75, 0.6, 0.35],
    [0.55, 0.25, 0.12],
    [0.45, 0.45, 0.45],
];

/// Renders a `size x size` face of the given gender with its landmarks.
/// Output is a pure function of `(size, gender, seed)`.
pub fn procedural_face(size: usize, gender: Gender, seed: u64) -> Result<(ImageTensor, LandmarkSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let male = gender == Gender::Male;
    let lay = layout(gender, &mut rng);
    let Layout { points: ref p, cx, cy, a, b } = lay;

    let bg_top = [rng.random_range(0.3..0.9), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
    let bg_bottom = scale(bg_top, rng.random_range(0.6..0.95));
    let mut canvas = Canvas::new(size, bg_top, bg_bottom);
    let skin = lerp(SKIN_LIGHT, SKIN_DARK, rng.random_range(0.0..1.0));
    let hair = HAIR[rng.random_range(0..HAIR.len())];
    let cloth = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];

    if male {
        canvas.fill_ellipse(cx, cy - 0.2 * b, a * 1.1, b * 0.95, hair);
    } else {
        canvas.fill_ellipse(cx, cy + 0.05, a * 1.4, b * 1.2, hair);
        let (l, r) = (cx - 1.35 * a, cx + 1.35 * a);
        canvas.fill_where(|x, y| (y > cy && x > l && x < r).then_some(hair));
    }
    canvas.fill_ellipse(cx, 1.08, 0.48, 0.2, cloth);
    let neck = scale(skin, 0.85);
    canvas.fill_where(|x, y| ((x - cx).abs() < 0.45 * a && y > cy + 0.4 * b && y < 0.95).then_some(neck));

    let mut outline: Vec<(f64, f64)> = p[..33].to_vec();
    for j in 1..16 {
        let phi = -0.25 - j as f64 * (PI - 0.5) / 16.0;
        outline.push((cx + a * phi.cos(), cy + b * phi.sin()));
    }
    let face_mask = canvas.polygon_mask(&outline);
    let s = size as f64;
    for (i, inside) in face_mask.iter().enumerate() {
        if *inside == 1 {
            let x = ((i % size) as f64 + 0.5) / s;
            let shade = 1.0 - 0.18 * ((x - cx) / a).powi(2);
            canvas.px[i] = scale(skin, shade as f32);
        }
    }
    let hairline = cy - if male { 0.62 * b } else { 0.55 * b };
    canvas.fill_where(|x, y| {
        let d = ((x - cx) / (a * 1.03)).powi(2) + ((y - cy) / (b * 1.03)).powi(2);
        (d <= 1.0 && y < hairline).then_some(hair)
    });

    if male && rng.random_bool(0.6) {
        let beard = scale(skin, 0.62);
        let density = rng.random_range(0.3..0.7);
        let mut speckle = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (i, inside) in face_mask.iter().enumerate() {
            let y = ((i / size) as f64 + 0.5) / s;
            let hit = speckle.random_bool(density);
            if *inside == 1 && y > p[54].1 && hit {
                canvas.px[i] = beard;
            }
        }
    }

    let brow = scale(hair, 0.8);
    for side in 0..2 {
        let base = 33 + side * 9;
        canvas.fill_polygon(&p[base..base + 9], brow);
    }
    for side in 0..2 {
        let base = 60 + side * 8;
        canvas.fill_polygon(&p[base..base + 8], [0.95, 0.95, 0.95]);
        let (ex, ey) = p[96 + side];
        let r = (p[base + 4].0 - p[base].0).abs() * 0.22;
        let iris = [rng.random_range(0.1..0.4), rng.random_range(0.15..0.45), rng.random_range(0.1..0.5)];
        let iris_mask: Vec<bool> = (0..size * size)
            .map(|i| {
                let x = ((i % size) as f64 + 0.5) / s;
                let y = ((i / size) as f64 + 0.5) / s;
                (x - ex).hypot(y - ey) <= r
            })
            .collect();
        let eye_mask = canvas.polygon_mask(&p[base..base + 8]);
        for i in 0..size * size {
            if iris_mask[i] && eye_mask[i] == 1 {
                canvas.px[i] = iris;
            }
        }
        canvas.stroke(&p[base..base + 5], 0.008, [0.1, 0.08, 0.08]);
    }

    let nose = scale(skin, 0.7);
    canvas.stroke(&p[52..55], 0.012, nose);
    canvas.stroke(&p[55..60], 0.012, scale(skin, 0.55));

    let lip = if male {
        scale([0.68, 0.4, 0.36], rng.random_range(0.85..1.05))
    } else {
        [rng.random_range(0.6..0.85), rng.random_range(0.1..0.3), rng.random_range(0.2..0.35)]
    };
    canvas.fill_polygon(&p[76..88], lip);
    canvas.fill_polygon(&p[88..96], [0.25, 0.08, 0.08]);

    let mut noise = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut data = Vec::with_capacity(size * size * 3);
    for px in &canvas.px {
        let n: f32 = noise.random_range(-0.015..0.015);
        for &c in px {
            data.push((c + n).clamp(0.0, 1.0));
        }
    }
    let image = ImageTensor::new(size, size, 3, data)?;
    Ok((image, LandmarkSet::new(lay.points)?))
}
