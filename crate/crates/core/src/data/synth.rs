//! Synthetic cross-domain dataset: parametric shape families rendered as
//! filled, textured "photos" on cluttered backgrounds and as jittered
//! stroke-sequence "sketches" of their outlines.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SketchAsset};
use super::manifest::{DatasetManifest, Domain, ManifestItem, Split};
use super::raster::RasterImage;
use super::sketch::StrokeSketch;
use super::{invalid, Result};
use crate::derive_seed;

/// Family names in category order. Categories beyond this list reuse the
/// families with a quarter-turn.
pub const SHAPE_FAMILIES: &[&str] = &[
    "circle", "triangle", "cross", "star", "square", "heart", "arrow", "crescent", "diamond", "tee", "capsule",
    "hourglass", "hexagon", "ell", "ring", "gear",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub photos_per_category: usize,
    pub sketches_per_category: usize,
    /// Extra held-out sketches per training category.
    pub validation_sketches_per_category: usize,
    /// The last this-many categories form the test split.
    pub test_categories: usize,
    pub photo_size: usize,
    pub canvas_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_categories: 12,
            photos_per_category: 20,
            sketches_per_category: 20,
            validation_sketches_per_category: 0,
            test_categories: 0,
            photo_size: 72,
            canvas_size: 256.0,
            seed: 0,
        }
    }
}

type Contour = Vec<[f64; 2]>;

fn circle(n: usize, r: f64, cx: f64, cy: f64) -> Contour {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64 * TAU;
            [cx + r * t.cos(), cy + r * t.sin()]
        })
        .collect()
}

fn regular(n: usize, phase: f64) -> Contour {
    (0..n)
        .map(|i| {
            let t = phase + i as f64 / n as f64 * TAU;
            [t.cos(), t.sin()]
        })
        .collect()
}

/// Closed outlines in unit coordinates (roughly within [-1, 1]).
fn family_outline(family: usize, rng: &mut ChaCha8Rng) -> Vec<Contour> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    match family {
        0 => vec![circle(72, 1.0, 0.0, 0.0)],
        1 => {
            let apex = u(-0.15, 0.15);
            vec![vec![[apex, -1.0], [0.95, 0.75], [-0.95, 0.75]]]
        }
        2 => {
            let a = u(0.28, 0.4);
            vec![vec![
                [-a, -1.0], [a, -1.0], [a, -a], [1.0, -a], [1.0, a], [a, a], [a, 1.0], [-a, 1.0], [-a, a],
                [-1.0, a], [-1.0, -a], [-a, -a],
            ]]
        }
        3 => {
            let inner = u(0.38, 0.5);
            vec![(0..10)
                .map(|i| {
                    let t = -PI / 2.0 + i as f64 * PI / 5.0;
                    let r = if i % 2 == 0 { 1.0 } else { inner };
                    [r * t.cos(), r * t.sin()]
                })
                .collect()]
        }
        4 => vec![vec![[-0.85, -0.85], [0.85, -0.85], [0.85, 0.85], [-0.85, 0.85]]],
        5 => {
            let k = u(0.9, 1.1);
            let pts: Contour = (0..72)
                .map(|i| {
                    let t = i as f64 / 72.0 * TAU;
                    let x = 16.0 * t.sin().powi(3);
                    let y = 13.0 * t.cos() - 5.0 * (2.0 * t).cos() - 2.0 * (3.0 * t).cos() - (4.0 * t).cos();
                    [x / 17.0 * k, -(y + 2.5) / 15.0]
                })
                .collect();
            vec![pts]
        }
        6 => {
            let s = u(0.18, 0.26);
            let head = u(0.1, 0.3);
            vec![vec![
                [-1.0, -s], [head, -s], [head, -0.8], [1.0, 0.0], [head, 0.8], [head, s], [-1.0, s],
            ]]
        }
        7 => {
            let d = u(0.45, 0.6);
            let r = u(0.8, 0.9);
            let x = (1.0 + d * d - r * r) / (2.0 * d);
            let y = (1.0 - x * x).max(0.0).sqrt();
            let a = y.atan2(x);
            let mut pts = Vec::new();
            for i in 0..=40 {
                let t = a + (TAU - 2.0 * a) * i as f64 / 40.0;
                pts.push([t.cos(), t.sin()]);
            }
            let g1 = (-y).atan2(x - d);
            let g2 = y.atan2(x - d) - TAU;
            for i in 1..40 {
                let t = g1 + (g2 - g1) * i as f64 / 40.0;
                pts.push([d + r * t.cos(), r * t.sin()]);
            }
            vec![pts.into_iter().map(|p| [p[0] + 0.2, p[1]]).collect()]
        }
        8 => {
            let w = u(0.5, 0.65);
            vec![vec![[0.0, -1.0], [w, 0.0], [0.0, 1.0], [-w, 0.0]]]
        }
        9 => {
            let bar = u(0.3, 0.4);
            let stem = u(0.18, 0.26);
            vec![vec![
                [-1.0, -1.0], [1.0, -1.0], [1.0, -1.0 + bar], [stem, -1.0 + bar], [stem, 1.0], [-stem, 1.0],
                [-stem, -1.0 + bar], [-1.0, -1.0 + bar],
            ]]
        }
        10 => {
            let h = u(0.38, 0.5);
            let mut pts = Vec::new();
            for i in 0..=20 {
                let t = -PI / 2.0 + PI * i as f64 / 20.0;
                pts.push([1.0 - h + h * t.cos(), h * t.sin()]);
            }
            for i in 0..=20 {
                let t = PI / 2.0 + PI * i as f64 / 20.0;
                pts.push([-1.0 + h + h * t.cos(), h * t.sin()]);
            }
            vec![pts]
        }
        11 => {
            let waist = u(0.08, 0.18);
            vec![vec![[-0.8, -1.0], [0.8, -1.0], [waist, 0.0], [0.8, 1.0], [-0.8, 1.0], [-waist, 0.0]]]
        }
        12 => vec![regular(6, 0.0)],
        13 => {
            let t = u(0.35, 0.45);
            vec![vec![[-0.8, -1.0], [-0.8 + t, -1.0], [-0.8 + t, 1.0 - t], [0.8, 1.0 - t], [0.8, 1.0], [-0.8, 1.0]]]
        }
        14 => {
            let inner = u(0.5, 0.62);
            vec![circle(64, 1.0, 0.0, 0.0), circle(48, inner, 0.0, 0.0)]
        }
        _ => {
            let depth = u(0.72, 0.8);
            let mut pts = Vec::new();
            for i in 0..8 {
                let base = i as f64 / 8.0 * TAU;
                let half = TAU / 32.0;
                for (da, r) in [(-half, depth), (-half, 1.0), (half, 1.0), (half, depth)] {
                    let t = base + da;
                    pts.push([r * t.cos(), r * t.sin()]);
                }
            }
            vec![pts]
        }
    }
}

/// Per-instance pose in unit coordinates.
#[derive(Debug, Clone, Copy)]
struct Pose {
    scale: f64,
    aspect: f64,
    rotation: f64,
    cx: f64,
    cy: f64,
}

impl Pose {
    fn draw(rng: &mut ChaCha8Rng, quarter_turns: usize) -> Self {
        Self {
            scale: rng.random_range(0.62..=0.76),
            aspect: rng.random_range(0.9..=1.1),
            rotation: rng.random_range(-0.14..=0.14) + quarter_turns as f64 * PI / 2.0,
            cx: rng.random_range(-0.05..=0.05),
            cy: rng.random_range(-0.05..=0.05),
        }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (p[0] * self.aspect, p[1] / self.aspect);
        [
            self.cx + self.scale * (c * x - s * y),
            self.cy + self.scale * (s * x + c * y),
        ]
    }
}

struct Instance {
    contours: Vec<Contour>,
}

fn instance(family: usize, quarter_turns: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = family_outline(family, &mut rng);
    let pose = Pose::draw(&mut rng, quarter_turns);
    Instance {
        contours: shape
            .into_iter()
            .map(|c| c.into_iter().map(|p| pose.apply(p)).collect())
            .collect(),
    }
}

fn inside(contours: &[Contour], x: f64, y: f64) -> bool {
    let mut odd = false;
    for c in contours {
        let n = c.len();
        for i in 0..n {
            let (a, b) = (c[i], c[(i + 1) % n]);
            if (a[1] > y) != (b[1] > y) {
                let xi = a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if x < xi {
                    odd = !odd;
                }
            }
        }
    }
    odd
}

fn render_photo(inst: &Instance, size: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.72..=0.95));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..=0.3));
    let grad = [rng.random_range(-0.06..=0.06), rng.random_range(-0.06..=0.06)];
    let stripe_f = rng.random_range(0.3..=0.8);
    let stripe_phase = rng.random_range(0.0..TAU);
    // Faint background clutter: low-contrast discs.
    let clutter: Vec<([f64; 2], f64, f32)> = (0..4)
        .map(|_| {
            (
                [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
                rng.random_range(0.08..=0.25),
                rng.random_range(-0.08..=0.08),
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let half = size as f64 / 2.0;
    let sub = 3;
    let mut data = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let x = (px as f64 + (sx as f64 + 0.5) / sub as f64 - half) / half;
                    let y = (py as f64 + (sy as f64 + 0.5) / sub as f64 - half) / half;
                    if inside(&inst.contours, x, y) {
                        cover += 1.0;
                    }
                }
            }
            let cover = (cover / (sub * sub) as f64) as f32;
            let (ux, uy) = ((px as f64 + 0.5 - half) / half, (py as f64 + 0.5 - half) / half);
            let shade = grad[0] * ux as f32 + grad[1] * uy as f32;
            let blob: f32 = clutter
                .iter()
                .filter(|(c, r, _)| (ux - c[0]).powi(2) + (uy - c[1]).powi(2) < r * r)
                .map(|b| b.2)
                .sum();
            let stripe = 0.04 * ((ux + uy) * stripe_f * 10.0 + stripe_phase).sin() as f32;
            for ch in 0..3 {
                let back = bg[ch] + shade + blob;
                let front = fg[ch] + stripe;
                let v = back * (1.0 - cover) + front * cover + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    RasterImage::new(size, size, 3, data, Domain::Photo).expect("values clamped")
}

fn contour_length(c: &Contour) -> f64 {
    (0..c.len())
        .map(|i| {
            let (a, b) = (c[i], c[(i + 1) % c.len()]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum()
}

/// Point at arc length `s` along a closed contour.
fn point_at(c: &Contour, total: f64, s: f64) -> [f64; 2] {
    let mut s = s.rem_euclid(total);
    for i in 0..c.len() {
        let (a, b) = (c[i], c[(i + 1) % c.len()]);
        let l = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if s <= l || i == c.len() - 1 {
            let t = if l > 0.0 { (s / l).min(1.0) } else { 0.0 };
            return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        }
        s -= l;
    }
    c[0]
}

fn render_sketch(inst: &Instance, canvas: f64, seed: u64) -> StrokeSketch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A slightly off pose, as a drawer would produce.
    let ds = rng.random_range(0.94..=1.06);
    let rot: f64 = rng.random_range(-0.07..=0.07);
    let (tx, ty) = (rng.random_range(-0.04..=0.04), rng.random_range(-0.04..=0.04));
    let (sr, cr) = rot.sin_cos();
    let warp = |p: [f64; 2]| [ds * (cr * p[0] - sr * p[1]) + tx, ds * (sr * p[0] + cr * p[1]) + ty];
    let lengths: Vec<f64> = inst.contours.iter().map(contour_length).collect();
    let total: f64 = lengths.iter().sum();
    let wanted = rng.random_range(8..=14usize);
    let mut counts: Vec<usize> = lengths
        .iter()
        .map(|l| ((l / total) * wanted as f64).round().max(1.0) as usize)
        .collect();
    let jitter = Normal::new(0.0, 0.004).expect("valid sigma");
    let half = canvas / 2.0;
    let to_canvas = |p: [f64; 2]| [(half + p[0] * half).clamp(0.0, canvas), (half + p[1] * half).clamp(0.0, canvas)];
    let mut strokes = Vec::new();
    for (ci, c) in inst.contours.iter().enumerate() {
        let len = lengths[ci];
        let k = counts[ci].max(1);
        counts[ci] = k;
        let start = rng.random_range(0.0..len);
        let mut cuts: Vec<f64> = (0..=k)
            .map(|i| {
                let base = i as f64 / k as f64;
                let wiggle = if i == 0 || i == k { 0.0 } else { rng.random_range(-0.2..=0.2) / k as f64 };
                start + (base + wiggle) * len
            })
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for w in cuts.windows(2) {
            let over = rng.random_range(-0.02..=0.03);
            let (s0, s1) = (w[0] - over, w[1] + over);
            let amp = rng.random_range(0.0..=0.02);
            let phase = rng.random_range(0.0..TAU);
            let n = ((s1 - s0) / 0.03).ceil().max(2.0) as usize;
            let pts: Vec<[f64; 2]> = (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    let p = point_at(c, len, s0 + t * (s1 - s0));
                    let q = point_at(c, len, s0 + t * (s1 - s0) + 1e-3);
                    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                    let dl = (dx * dx + dy * dy).sqrt().max(1e-12);
                    let off = amp * (PI * t + phase).sin();
                    let p = [p[0] - dy / dl * off, p[1] + dx / dl * off];
                    let p = warp(p);
                    to_canvas([p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng)])
                })
                .collect();
            strokes.push(pts);
        }
    }
    StrokeSketch::new(canvas, canvas, strokes).expect("points clamped to canvas")
}

fn category_name(c: usize) -> String {
    let fam = SHAPE_FAMILIES[c % SHAPE_FAMILIES.len()];
    let turn = c / SHAPE_FAMILIES.len();
    if turn == 0 {
        format!("c{c:02}_{fam}")
    } else {
        format!("c{c:02}_{fam}_r{turn}")
    }
}

/// Builds a balanced synthetic dataset held in memory. Every item has its
/// own seed stream, so a configuration with fewer categories or items
/// produces a subset of a larger one.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_categories < 2 {
        return Err(invalid("synth_generate", "at least 2 categories are required"));
    }
    if cfg.photos_per_category == 0 || cfg.sketches_per_category == 0 {
        return Err(invalid("synth_generate", "each category needs photos and sketches"));
    }
    if cfg.test_categories >= cfg.num_categories {
        return Err(invalid("synth_generate", "at least one category must remain for training"));
    }
    if cfg.photo_size < 32 || cfg.canvas_size < 32.0 {
        return Err(invalid("synth_generate", "photo and canvas sizes must be at least 32"));
    }
    let mut items = Vec::new();
    let mut sketches = BTreeMap::new();
    let mut photos = BTreeMap::new();
    for c in 0..cfg.num_categories {
        let family = c % SHAPE_FAMILIES.len();
        let turns = c / SHAPE_FAMILIES.len();
        let cat = category_name(c);
        let test = c >= cfg.num_categories - cfg.test_categories;
        let split_of = |validation: bool| match (test, validation) {
            (true, _) => Split::Test,
            (false, true) => Split::Validation,
            (false, false) => Split::Train,
        };
        let inst_seed = |k: usize| derive_seed(cfg.seed, &[c as u64, 0, k as u64]);
        for k in 0..cfg.photos_per_category {
            let inst = instance(family, turns, inst_seed(k));
            let id = format!("c{c:02}_p{k:03}");
            photos.insert(
                id.clone(),
                render_photo(&inst, cfg.photo_size, derive_seed(cfg.seed, &[c as u64, 1, k as u64])),
            );
            items.push(ManifestItem {
                path: format!("photos/{id}.png"),
                id,
                category: cat.clone(),
                instance_group: format!("c{c:02}_i{k:03}"),
                domain: Domain::Photo,
                split: split_of(false),
            });
        }
        let n_val = if test { 0 } else { cfg.validation_sketches_per_category };
        for (kind, count, tag) in [("s", cfg.sketches_per_category, 2u64), ("v", n_val, 3u64)] {
            for k in 0..count {
                let group = if kind == "s" { k } else { cfg.sketches_per_category + k } % cfg.photos_per_category;
                let inst = instance(family, turns, inst_seed(group));
                let id = format!("c{c:02}_{kind}{k:03}");
                sketches.insert(
                    id.clone(),
                    SketchAsset::Strokes(render_sketch(
                        &inst,
                        cfg.canvas_size,
                        derive_seed(cfg.seed, &[c as u64, tag, k as u64]),
                    )),
                );
                items.push(ManifestItem {
                    path: format!("sketches/{id}.json"),
                    id,
                    category: cat.clone(),
                    instance_group: format!("c{c:02}_i{group:03}"),
                    domain: Domain::Sketch,
                    split: split_of(kind == "v"),
                });
            }
        }
    }
    let manifest = DatasetManifest::new(items, "");
    manifest.validate()?;
    Ok(Dataset::from_parts(manifest, sketches, photos))
}
