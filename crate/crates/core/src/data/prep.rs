use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::augment::{apply_geometric, augment_geometric, GeometricParams};
use super::dataset::{Dataset, SketchAsset};
use super::edges::{extract_edges, EdgeThresholds};
use super::manifest::Domain;
use super::raster::{rasterize, RasterImage};
use super::skeleton::skeletonize;
use super::sketch::{augment_stroke_removal, StrokeSketch};
use super::{DataError, Result};
use crate::derive_seed;
use crate::tensor::Tensor;

/// How photos enter the photo-domain branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotoInput {
    Edgemap,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Network input side.
    pub input_size: usize,
    /// Side at which images are rendered before cropping.
    pub render_size: usize,
    pub line_width: usize,
    pub skeletonize: bool,
    pub edges: EdgeThresholds,
    pub stroke_removal: bool,
    pub geometric: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            render_size: 72,
            line_width: 2,
            skeletonize: true,
            edges: EdgeThresholds { low: 0.08, high: 0.2 },
            stroke_removal: true,
            geometric: true,
        }
    }
}

/// Turns dataset assets into network inputs. Deterministic inputs are
/// computed once; augmented ones are pure functions of the seed.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    cfg: PrepConfig,
    mode: PhotoInput,
    sketch_assets: BTreeMap<String, SketchAsset>,
    sketch_base: BTreeMap<String, RasterImage>,
    photo_base: BTreeMap<String, RasterImage>,
}

impl Preprocessor {
    pub fn new(cfg: PrepConfig, mode: PhotoInput, data: &Dataset) -> Result<Self> {
        let mut p = Self::for_queries(cfg, mode)?;
        for item in &data.manifest.items {
            if item.is_photo_like() {
                let base = p.photo_raster(data.photo(&item.id)?)?;
                p.photo_base.insert(item.id.clone(), base);
            } else {
                let asset = data.sketch(&item.id)?.clone();
                p.sketch_base.insert(item.id.clone(), p.render_sketch(&asset)?);
                p.sketch_assets.insert(item.id.clone(), asset);
            }
        }
        Ok(p)
    }

    /// A preprocessor without dataset assets, for `query_image` only.
    pub fn for_queries(cfg: PrepConfig, mode: PhotoInput) -> Result<Self> {
        if cfg.render_size < cfg.input_size {
            return Err(super::invalid("preprocess", "render size must be at least the input size"));
        }
        Ok(Self {
            cfg,
            mode,
            sketch_assets: BTreeMap::new(),
            sketch_base: BTreeMap::new(),
            photo_base: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PrepConfig {
        &self.cfg
    }

    pub fn photo_mode(&self) -> PhotoInput {
        self.mode
    }

    pub fn photo_channels(&self) -> usize {
        match self.mode {
            PhotoInput::Edgemap => 1,
            PhotoInput::Rgb => 3,
        }
    }

    fn thin(&self, img: RasterImage) -> RasterImage {
        if self.cfg.skeletonize {
            skeletonize(&img)
        } else {
            img
        }
    }

    fn render_sketch(&self, asset: &SketchAsset) -> Result<RasterImage> {
        let n = self.cfg.render_size;
        Ok(match asset {
            SketchAsset::Strokes(s) => self.thin(rasterize(s, n, self.cfg.line_width)?),
            SketchAsset::Raster(r) => {
                let mut g = RasterImage::new(r.width(), r.height(), 1, r.gray(), Domain::Sketch)?;
                g = g.resized(n, n);
                self.thin(g)
            }
        })
    }

    /// Render-size photo-branch image for a photo or edgemap.
    pub fn photo_raster(&self, photo: &RasterImage) -> Result<RasterImage> {
        let n = self.cfg.render_size;
        let img = photo.resized(n, n);
        Ok(match (self.mode, img.domain) {
            (PhotoInput::Edgemap, Domain::Photo) => extract_edges(&img, self.cfg.edges.low, self.cfg.edges.high)?,
            (PhotoInput::Edgemap, _) => RasterImage::new(n, n, 1, img.gray(), Domain::Edgemap)?,
            (PhotoInput::Rgb, Domain::Photo) if img.channels() == 3 => img,
            (PhotoInput::Rgb, d) => {
                return Err(DataError::Manifest(format!("RGB photo input requested but got a {d} image")));
            }
        })
    }

    fn crop(&self, img: &RasterImage, seed: Option<u64>) -> Result<RasterImage> {
        match seed {
            Some(s) if self.cfg.geometric => augment_geometric(img, self.cfg.input_size, s),
            _ => apply_geometric(img, self.cfg.input_size, &GeometricParams::IDENTITY),
        }
    }

    /// Sketch input `[1, S, S]`; `aug` enables stroke removal and
    /// geometric augmentation.
    pub fn sketch_image(&self, id: &str, aug: Option<u64>) -> Result<RasterImage> {
        let base = self
            .sketch_base
            .get(id)
            .ok_or_else(|| DataError::Manifest(format!("no sketch with id `{id}`")))?;
        match (aug, &self.sketch_assets[id]) {
            (Some(seed), SketchAsset::Strokes(s)) if self.cfg.stroke_removal => {
                let reduced = augment_stroke_removal(s, derive_seed(seed, &[0]));
                let img = self.render_sketch(&SketchAsset::Strokes(reduced))?;
                self.crop(&img, Some(derive_seed(seed, &[1])))
            }
            (Some(seed), _) => self.crop(base, Some(derive_seed(seed, &[1]))),
            (None, _) => self.crop(base, None),
        }
    }

    pub fn photo_image(&self, id: &str, aug: Option<u64>) -> Result<RasterImage> {
        let base = self
            .photo_base
            .get(id)
            .ok_or_else(|| DataError::Manifest(format!("no photo with id `{id}`")))?;
        self.crop(base, aug.map(|s| derive_seed(s, &[2])))
    }

    /// Query-time path for a stroke document: render, thin, centre crop.
    pub fn query_image(&self, sketch: &StrokeSketch) -> Result<RasterImage> {
        let img = self.render_sketch(&SketchAsset::Strokes(sketch.clone()))?;
        self.crop(&img, None)
    }

    /// Stacks `[C, H, W]` inputs into a batch.
    pub fn batch(images: &[RasterImage]) -> Result<Tensor> {
        let inputs: Vec<Tensor> = images.iter().map(RasterImage::to_input).collect();
        Tensor::stack(&inputs).map_err(|e| super::invalid("batch", e.to_string()))
    }
}
