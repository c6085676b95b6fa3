use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::RasterImage;
use super::{invalid, Result};

pub const SCALE_RANGE: (f32, f32) = (0.9, 1.1);
pub const ROTATION_RANGE_DEG: (f32, f32) = (-5.0, 5.0);

/// One draw of the geometric augmentation. The crop centre is given as an
/// offset from the centre of the scaled, rotated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams {
    pub scale: f32,
    pub rotation_deg: f32,
    pub offset_x: f32,
    pub offset_y: f32,
    pub flip: bool,
}

impl GeometricParams {
    /// Centre crop with no other change.
    pub const IDENTITY: GeometricParams = GeometricParams {
        scale: 1.0,
        rotation_deg: 0.0,
        offset_x: 0.0,
        offset_y: 0.0,
        flip: false,
    };
}

fn check_size(width: usize, height: usize, crop: usize) -> Result<()> {
    let smallest = width.min(height) as f32 * SCALE_RANGE.0;
    if smallest < crop as f32 {
        return Err(invalid(
            "augment_geometric",
            format!("{width}x{height} image is smaller than the {crop}px crop after scaling by {}", SCALE_RANGE.0),
        ));
    }
    Ok(())
}

pub fn draw_geometric(width: usize, height: usize, crop: usize, rng: &mut impl Rng) -> Result<GeometricParams> {
    check_size(width, height, crop)?;
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let rotation_deg = rng.random_range(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1);
    let slack = |n: usize| ((n as f32 * scale - crop as f32) / 2.0).max(0.0);
    let (sx, sy) = (slack(width), slack(height));
    let offset_x = if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 };
    let offset_y = if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 };
    let flip = rng.random_bool(0.5);
    Ok(GeometricParams {
        scale,
        rotation_deg,
        offset_x,
        offset_y,
        flip,
    })
}

/// Renders the `crop`x`crop` window described by `p` with bilinear
/// sampling. Line drawings are padded with white, photos by edge
/// replication.
pub fn apply_geometric(img: &RasterImage, crop: usize, p: &GeometricParams) -> Result<RasterImage> {
    check_size(img.width(), img.height(), crop)?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let half = crop as f32 / 2.0;
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let bg = img.background();
    let mut out = vec![0f32; crop * crop * c];
    let mut pix = vec![0f32; c];
    for v in 0..crop {
        for u in 0..crop {
            let uu = if p.flip { crop - 1 - u } else { u };
            let qx = uu as f32 + 0.5 - half + p.offset_x;
            let qy = v as f32 + 0.5 - half + p.offset_y;
            // Undo rotation, then scale.
            let rx = (cos * qx + sin * qy) / p.scale;
            let ry = (-sin * qx + cos * qy) / p.scale;
            sample(img, rx + cx - 0.5, ry + cy - 0.5, bg, &mut pix);
            out[(v * crop + u) * c..(v * crop + u + 1) * c].copy_from_slice(&pix);
        }
    }
    RasterImage::new(crop, crop, c, out, img.domain)
}

fn sample(img: &RasterImage, x: f32, y: f32, bg: Option<f32>, out: &mut [f32]) {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    for (ch, o) in out.iter_mut().enumerate() {
        let at = |xi: isize, yi: isize| -> f32 {
            let inside = xi >= 0 && yi >= 0 && xi < w && yi < h;
            match (inside, bg) {
                (true, _) => img.get(xi as usize, yi as usize, ch),
                (false, Some(b)) => b,
                (false, None) => img.get(xi.clamp(0, w - 1) as usize, yi.clamp(0, h - 1) as usize, ch),
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        *o = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
    }
}

/// Random scale, rotation, crop and horizontal flip, as a pure function of
/// the image and seed.
pub fn augment_geometric(img: &RasterImage, crop: usize, seed: u64) -> Result<RasterImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = draw_geometric(img.width(), img.height(), crop, &mut rng)?;
    apply_geometric(img, crop, &p)
}
