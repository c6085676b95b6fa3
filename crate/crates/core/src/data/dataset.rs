use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, Domain};
use super::raster::RasterImage;
use super::sketch::StrokeSketch;
use super::{DataError, Result};

/// A sketch as stored on disk: a stroke document or a pre-rasterised image.
#[derive(Debug, Clone, PartialEq)]
pub enum SketchAsset {
    Strokes(StrokeSketch),
    Raster(RasterImage),
}

/// A manifest together with its decoded assets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    sketches: BTreeMap<String, SketchAsset>,
    photos: BTreeMap<String, RasterImage>,
}

impl Dataset {
    pub(crate) fn from_parts(
        manifest: DatasetManifest,
        sketches: BTreeMap<String, SketchAsset>,
        photos: BTreeMap<String, RasterImage>,
    ) -> Self {
        Self {
            manifest,
            sketches,
            photos,
        }
    }

    pub fn sketch(&self, id: &str) -> Result<&SketchAsset> {
        self.sketches
            .get(id)
            .ok_or_else(|| DataError::Manifest(format!("no sketch with id `{id}`")))
    }

    /// Photo or edgemap raster.
    pub fn photo(&self, id: &str) -> Result<&RasterImage> {
        self.photos
            .get(id)
            .ok_or_else(|| DataError::Manifest(format!("no photo with id `{id}`")))
    }

    /// Restricts the dataset to the items of `manifest`.
    pub fn with_manifest(&self, manifest: DatasetManifest) -> Result<Self> {
        let mut sketches = BTreeMap::new();
        let mut photos = BTreeMap::new();
        for item in &manifest.items {
            if item.is_photo_like() {
                photos.insert(item.id.clone(), self.photo(&item.id)?.clone());
            } else {
                sketches.insert(item.id.clone(), self.sketch(&item.id)?.clone());
            }
        }
        Ok(Self {
            manifest,
            sketches,
            photos,
        })
    }

    /// Hash of an item's encoded asset.
    pub fn asset_fingerprint(&self, id: &str) -> Option<String> {
        let mut h = Sha256::new();
        if let Some(s) = self.sketches.get(id) {
            match s {
                SketchAsset::Strokes(s) => h.update(s.to_json().as_bytes()),
                SketchAsset::Raster(r) => r.data().iter().for_each(|v| h.update(v.to_le_bytes())),
            }
        } else {
            self.photos.get(id)?.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes every asset beneath `dir` at its manifest path, plus
    /// `manifest.tsv`. Returns the manifest path.
    pub fn write_to(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for item in &self.manifest.items {
            let path = dir.join(&item.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            if item.is_photo_like() {
                self.photo(&item.id)?.save_png(&path)?;
            } else {
                match self.sketch(&item.id)? {
                    SketchAsset::Strokes(s) => std::fs::write(&path, s.to_json())?,
                    SketchAsset::Raster(r) => r.save_png(&path)?,
                }
            }
        }
        let manifest_path = dir.join("manifest.tsv");
        self.manifest.save(&manifest_path)?;
        self.manifest.root = dir.to_path_buf();
        Ok(manifest_path)
    }

    /// Loads a manifest and decodes all of its assets. Sketch files ending
    /// in `.json` are stroke documents; anything else is read as an image.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let mut sketches = BTreeMap::new();
        let mut photos = BTreeMap::new();
        for item in &manifest.items {
            let path = manifest.resolve(item);
            match item.domain {
                Domain::Sketch if item.path.ends_with(".json") => {
                    let text = std::fs::read_to_string(&path)?;
                    let s = StrokeSketch::from_json(&text).map_err(|e| DataError::Image {
                        path: path.display().to_string(),
                        msg: e.to_string(),
                    })?;
                    sketches.insert(item.id.clone(), SketchAsset::Strokes(s));
                }
                Domain::Sketch => {
                    sketches.insert(item.id.clone(), SketchAsset::Raster(RasterImage::load(&path, Domain::Sketch)?));
                }
                d => {
                    photos.insert(item.id.clone(), RasterImage::load(&path, d)?);
                }
            }
        }
        Ok(Self {
            manifest,
            sketches,
            photos,
        })
    }
}
