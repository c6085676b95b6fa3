use std::path::Path;

use super::manifest::Domain;
use super::sketch::StrokeSketch;
use super::{invalid, DataError, Result};
use crate::tensor::Tensor;

/// Grayscale or RGB image with values in `[0, 1]`, stored row-major with
/// interleaved channels. Sketches and edgemaps are dark ink on white.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub domain: Domain,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>, domain: Domain) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(invalid("raster", format!("bad geometry {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(invalid(
                "raster",
                format!("{} values for a {width}x{height}x{channels} image", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid("raster", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            domain,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32, domain: Domain) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            domain,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Luminance plane.
    pub fn gray(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Background value used when resampling past the border.
    pub fn background(&self) -> Option<f32> {
        match self.domain {
            Domain::Sketch | Domain::Edgemap => Some(1.0),
            Domain::Photo => None,
        }
    }

    /// Channel-first network input `[C, H, W]`. Line drawings are inverted
    /// so ink is positive; photos are centred on zero.
    pub fn to_input(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let invert = self.domain != Domain::Photo;
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            let v = self.data[rest * c + ch];
            if invert {
                1.0 - v
            } else {
                v - 0.5
            }
        })
    }

    /// Bilinear resize; returns a copy when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> RasterImage {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        use image::imageops::{resize, FilterType};
        let (w, h) = (self.width as u32, self.height as u32);
        let data = if self.channels == 1 {
            let buf = image::ImageBuffer::<image::Luma<f32>, _>::from_raw(w, h, self.data.clone()).expect("sized buffer");
            resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        } else {
            let buf = image::ImageBuffer::<image::Rgb<f32>, _>::from_raw(w, h, self.data.clone()).expect("sized buffer");
            resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        };
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        RasterImage::new(width, height, self.channels, data, self.domain).expect("clamped values")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path.as_ref(),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| DataError::Image {
            path: path.as_ref().display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>, domain: Domain) -> Result<Self> {
        let p = path.as_ref();
        let img = image::open(p).map_err(|e| DataError::Image {
            path: p.display().to_string(),
            msg: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match domain {
            Domain::Photo => (3, img.to_rgb8().into_raw()),
            _ => (1, img.to_luma8().into_raw()),
        };
        let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(w, h, channels, data, domain)
    }
}

fn dist_to_segment(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx - px, a[1] + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Draws the strokes as anti-aliased polylines on a white `size`x`size`
/// canvas. The canvas is scaled uniformly and centred. `line_width` is the
/// ink thickness measured along the minor axis of each segment, so every
/// column (or row) a segment crosses receives `line_width` pixels of ink.
pub fn rasterize(sketch: &StrokeSketch, size: usize, line_width: usize) -> Result<RasterImage> {
    if size < 32 {
        return Err(invalid("rasterize", format!("size must be at least 32, got {size}")));
    }
    if line_width == 0 {
        return Err(invalid("rasterize", "line width must be positive"));
    }
    sketch.validate()?;
    let s = size as f64 / sketch.width.max(sketch.height);
    let (ox, oy) = (
        (size as f64 - sketch.width * s) / 2.0,
        (size as f64 - sketch.height * s) / 2.0,
    );
    let mut ink = vec![0f32; size * size];
    let half = line_width as f64 / 2.0;
    for stroke in &sketch.strokes {
        let pts: Vec<[f64; 2]> = stroke.iter().map(|p| [p[0] * s + ox, p[1] * s + oy]).collect();
        let segs: Vec<([f64; 2], [f64; 2])> = if pts.len() == 1 {
            vec![(pts[0], pts[0])]
        } else {
            pts.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (a, b) in segs {
            let (dx, dy) = ((b[0] - a[0]).abs(), (b[1] - a[1]).abs());
            let len = (dx * dx + dy * dy).sqrt();
            let r = if len == 0.0 { half } else { half * dx.max(dy) / len };
            let reach = r + 1.0;
            let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
            let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + reach).ceil() as usize).min(size);
            let y1 = ((a[1].max(b[1]) + reach).ceil() as usize).min(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, a, b);
                    let cov = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                    let cell = &mut ink[y * size + x];
                    *cell = cell.max(cov);
                }
            }
        }
    }
    let data = ink.into_iter().map(|v| 1.0 - v).collect();
    RasterImage::new(size, size, 1, data, Domain::Sketch)
}
