//! Binary edge maps: Gaussian smoothing, Sobel gradient magnitude,
//! non-maximum suppression and hysteresis thresholding.

use serde::{Deserialize, Serialize};

use super::manifest::Domain;
use super::raster::RasterImage;
use super::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeThresholds {
    pub low: f32,
    pub high: f32,
}

impl Default for EdgeThresholds {
    fn default() -> Self {
        Self { low: 0.1, high: 0.3 }
    }
}

const SIGMA: f32 = 1.0;

fn blur(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let radius = (3.0 * SIGMA).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-radius..=radius)
                .map(|i| k[(i + radius) as usize] * src[y * w + clamp(x as isize + i, w)])
                .sum();
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-radius..=radius)
                .map(|i| k[(i + radius) as usize] * tmp[clamp(y as isize + i, h) * w + x])
                .sum();
        }
    }
    out
}

/// Detects edges and returns them as dark one-pixel lines on white.
/// Thresholds apply to the gradient magnitude normalised so that an
/// unsmoothed unit step scores 1.
pub fn extract_edges(photo: &RasterImage, low: f32, high: f32) -> Result<RasterImage> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(invalid(
            "extract_edges",
            format!("thresholds must satisfy 0 <= low < high <= 1, got low={low} high={high}"),
        ));
    }
    let (w, h) = (photo.width(), photo.height());
    let g = blur(&photo.gray(), w, h);
    let px = |x: isize, y: isize| g[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0f32; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = (gx * gx + gy * gy).sqrt() / 4.0;
            // Sector of the gradient direction: 0 horizontal, 1 diagonal
            // (down-right), 2 vertical, 3 anti-diagonal.
            let angle = gy.atan2(gx).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            dir[i] = if !(22.5..157.5).contains(&a) {
                0
            } else if a < 67.5 {
                1
            } else if a < 112.5 {
                2
            } else {
                3
            };
        }
    }
    let m = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // Strictly above the "before" neighbour and at least the "after" one,
    // so plateaus of two equal pixels keep exactly one.
    let mut thin = vec![0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v < low || v == 0.0 {
                continue;
            }
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            if v > m(x - dx, y - dy) && v >= m(x + dx, y + dy) {
                thin[i] = v;
            }
        }
    }
    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for (nx, ny) in neighbours(x, y, w, h) {
            let j = ny * w + nx;
            if !edge[j] && thin[j] >= low {
                edge[j] = true;
                stack.push(j);
            }
        }
    }
    let keep: Vec<bool> = (0..w * h)
        .map(|i| {
            edge[i] && {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                neighbours(x, y, w, h).any(|(nx, ny)| edge[ny * w + nx])
            }
        })
        .collect();
    let data = keep.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
    RasterImage::new(w, h, 1, data, Domain::Edgemap)
}

fn neighbours(x: isize, y: isize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1..=1)
        .flat_map(move |dy| (-1..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(nx, ny)| (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize)
        .map(|(nx, ny)| (nx as usize, ny as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn edge_pixels(img: &RasterImage) -> Vec<(usize, usize)> {
        let w = img.width();
        (0..w * img.height())
            .filter(|&i| img.data()[i] < 0.5)
            .map(|i| (i % w, i / w))
            .collect()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = RasterImage::filled(32, 32, 3, 0.4, Domain::Photo);
        assert!(edge_pixels(&extract_edges(&img, 0.1, 0.3).unwrap()).is_empty());
    }

    #[test]
    fn step_edge_gives_single_vertical_line() {
        let (w, h) = (40, 30);
        let data = (0..w * h).map(|i| if i % w < 20 { 0.0 } else { 1.0 }).collect();
        let img = RasterImage::new(w, h, 1, data, Domain::Photo).unwrap();
        let e = edge_pixels(&extract_edges(&img, 0.1, 0.3).unwrap());
        assert_eq!(e.len(), h);
        let col = e[0].0;
        assert!(col == 19 || col == 20);
        assert!(e.iter().all(|p| p.0 == col));
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let img = RasterImage::filled(8, 8, 1, 0.0, Domain::Photo);
        assert!(extract_edges(&img, 0.3, 0.3).is_err());
        assert!(extract_edges(&img, -0.1, 0.3).is_err());
        assert!(extract_edges(&img, 0.1, 1.5).is_err());
    }

    #[test]
    fn circle_on_noise_recalled() {
        let n = 96;
        let (cx, cy, r) = (48.0f32, 48.0f32, 28.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let data: Vec<f32> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f32 + 0.5, (i / n) as f32 + 0.5);
                let inside = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < r;
                let base = if inside { 0.25 } else { 0.75 };
                (base + noise.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        let img = RasterImage::new(n, n, 1, data, Domain::Photo).unwrap();
        let out = extract_edges(&img, 0.1, 0.3).unwrap();
        let edges = edge_pixels(&out);
        // Boundary samples along the true circle; a sample is recalled when an
        // edge pixel lies within one pixel of it.
        let samples = 360;
        let hit = (0..samples)
            .filter(|k| {
                let t = *k as f32 / samples as f32 * std::f32::consts::TAU;
                let (bx, by) = ((cx + r * t.cos() - 0.5).round() as isize, (cy + r * t.sin() - 0.5).round() as isize);
                edges
                    .iter()
                    .any(|&(x, y)| (x as isize - bx).abs() <= 1 && (y as isize - by).abs() <= 1)
            })
            .count();
        assert!(hit as f64 / samples as f64 >= 0.8, "recall {hit}/{samples}");
        // Binary, no isolated pixels.
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for &(x, y) in &edges {
            let touching = edges.iter().any(|&(a, b)| (a, b) != (x, y) && a.abs_diff(x) <= 1 && b.abs_diff(y) <= 1);
            assert!(touching, "isolated edge pixel at ({x},{y})");
        }
    }
}
