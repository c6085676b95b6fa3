//! Everything a query needs: network, preprocessing and the photo index.

use std::path::Path;

use anyhow::{Context, Result};
use sbir_core::data::{Dataset, DatasetManifest, Preprocessor, StrokeSketch};
use sbir_core::index::{EmbeddingIndex, Hit};
use sbir_core::model::{build_triplet, ModelError, SharingScheme, TripletNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::AppConfig;

/// Failures with a dedicated exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads `manifest.tsv` from the data root, generating the synthetic
/// dataset there first when configured and absent.
pub fn load_dataset(cfg: &AppConfig) -> Result<Dataset> {
    let path = cfg.manifest_path();
    if !path.exists() {
        let Some(synth) = &cfg.data.synth else {
            anyhow::bail!("no manifest at {} and no [data.synth] section to generate one", path.display());
        };
        log::info!("generating synthetic dataset into {}", cfg.paths.data_root.display());
        let mut data = sbir_core::data::synth_generate(synth)?;
        data.write_to(&cfg.paths.data_root)?;
    }
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn build_net(cfg: &AppConfig) -> Result<TripletNet> {
    let m = &cfg.model;
    let scheme = SharingScheme::resolve(m.scheme, m.pairing, m.preset)?;
    let mut net = build_triplet(&scheme, m.pairing, m.preset, cfg.seed)?;
    net.query_scale = cfg.query_scale();
    Ok(net)
}

pub fn load_net(cfg: &AppConfig, checkpoint: &Path) -> Result<TripletNet> {
    let mut net = build_net(cfg)?;
    match net.load(checkpoint) {
        Err(e @ ModelError::DimMismatch { .. }) => {
            Err(CliError::Dim(format!("{}: {e}", checkpoint.display())).into())
        }
        r => r.with_context(|| format!("loading checkpoint {}", checkpoint.display())),
    }?;
    Ok(net)
}

pub fn load_index(path: &Path, dim: usize) -> Result<EmbeddingIndex> {
    let index = EmbeddingIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
    if index.dim() != dim {
        return Err(CliError::Dim(format!(
            "index {} has dimension {}, the model embeds to {dim}",
            path.display(),
            index.dim()
        ))
        .into());
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub rank: usize,
    pub id: String,
    pub distance: f64,
    pub category: Option<String>,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub k: usize,
    pub scale: f32,
    pub results: Vec<QueryHit>,
}

impl QueryResponse {
    pub fn new(k: usize, scale: f32, hits: Vec<Hit>) -> Self {
        let results = hits
            .into_iter()
            .enumerate()
            .map(|(i, h)| QueryHit {
                rank: i + 1,
                thumbnail: format!("/image/{}", h.id),
                id: h.id,
                distance: h.distance,
                category: h.category,
            })
            .collect();
        Self { k, scale, results }
    }
}

pub struct Engine {
    pub net: TripletNet,
    pub prep: Preprocessor,
    pub index: EmbeddingIndex,
    /// Present when the data root has a manifest; serves thumbnails.
    pub manifest: Option<DatasetManifest>,
    pub model_fingerprint: String,
    pub index_fingerprint: String,
}

impl Engine {
    pub fn load(cfg: &AppConfig, checkpoint: &Path, index_path: &Path) -> Result<Self> {
        let net = load_net(cfg, checkpoint)?;
        let index = load_index(index_path, net.embedding_dim())?;
        let prep = Preprocessor::for_queries(cfg.data.prep.clone(), cfg.photo_input())?;
        let manifest_path = cfg.manifest_path();
        let manifest = if manifest_path.exists() {
            Some(DatasetManifest::load(&manifest_path)?)
        } else {
            None
        };
        Ok(Self {
            model_fingerprint: file_fingerprint(checkpoint)?,
            index_fingerprint: index.fingerprint()?,
            net,
            prep,
            index,
            manifest,
        })
    }

    /// Unscaled sketch-branch embedding.
    pub fn embed(&self, sketch: &StrokeSketch) -> Result<Vec<f32>> {
        let img = self.prep.query_image(sketch)?;
        Ok(self.net.anchor.embed(&self.net.store, &img.to_input())?)
    }

    pub fn query(&self, sketch: &StrokeSketch, k: usize) -> Result<QueryResponse> {
        let q = self.embed(sketch)?;
        let hits = self.index.query(&q, k, self.net.query_scale)?;
        Ok(QueryResponse::new(k, self.net.query_scale, hits))
    }
}
