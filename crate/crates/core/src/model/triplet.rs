use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{preset_arch, BranchArch, BranchKind, Preset, HEAD_NAME};
use super::branch::{init_layer, new_classifier, Branch, BranchOutput, ClassifierHead, ForwardCtx};
use super::{ModelError, Result};
use crate::derive_seed;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    FullShare,
    HalfShare,
    NoShare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Sketch anchors against photo edgemaps.
    SketchEdgemap,
    /// Sketch anchors against RGB photos.
    SketchPhoto,
}

macro_rules! snake_enum {
    ($ty:ty, $($var:path => $s:literal),+) => {
        impl FromStr for $ty {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($var),)+
                    other => Err(ModelError::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($var => $s,)+ })
            }
        }
    };
}

snake_enum!(ShareMode, ShareMode::FullShare => "full_share", ShareMode::HalfShare => "half_share", ShareMode::NoShare => "no_share");
snake_enum!(Pairing, Pairing::SketchEdgemap => "sketch_edgemap", Pairing::SketchPhoto => "sketch_photo");

impl Pairing {
    pub fn anchor_kind(self) -> BranchKind {
        match self {
            Pairing::SketchEdgemap => BranchKind::Sketch,
            Pairing::SketchPhoto => BranchKind::HybridSketch,
        }
    }

    pub fn photo_kind(self) -> BranchKind {
        match self {
            Pairing::SketchEdgemap => BranchKind::Sketch,
            Pairing::SketchPhoto => BranchKind::Photo,
        }
    }
}

/// Which parameterized layers are bound to a single parameter set across
/// the anchor and photo branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingScheme {
    pub mode: ShareMode,
    /// Bottom to top.
    pub shared_layer_names: Vec<String>,
}

impl SharingScheme {
    /// The canonical layer set for `mode` on a pairing's architectures.
    pub fn resolve(mode: ShareMode, pairing: Pairing, preset: Preset) -> Result<Self> {
        let anchor = preset_arch(pairing.anchor_kind(), preset);
        let photo = preset_arch(pairing.photo_kind(), preset);
        resolve(mode, pairing, &anchor, &photo)
    }

    pub fn is_shared(&self, layer: &str) -> bool {
        self.shared_layer_names.iter().any(|n| n == layer)
    }
}

fn resolve(mode: ShareMode, pairing: Pairing, anchor: &BranchArch, photo: &BranchArch) -> Result<SharingScheme> {
    let a_layers: Vec<_> = anchor.param_layers().collect();
    let p_layers: Vec<_> = photo.param_layers().collect();
    let names = |ls: &[&super::LayerSpec]| ls.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
    let shared = match mode {
        ShareMode::NoShare => Vec::new(),
        ShareMode::FullShare => {
            if names(&a_layers) != names(&p_layers) {
                return Err(ModelError::Scheme(format!(
                    "full_share needs identical layer stacks, anchor has {:?} and photo has {:?}",
                    names(&a_layers),
                    names(&p_layers)
                )));
            }
            for (a, p) in a_layers.iter().zip(&p_layers) {
                if a.kind != p.kind {
                    return Err(ModelError::Scheme(format!(
                        "full_share is impossible for {pairing}: layer `{}` is {:?} in the anchor branch but {:?} in the photo branch",
                        a.name, a.kind, p.kind
                    )));
                }
            }
            names(&a_layers)
        }
        ShareMode::HalfShare => {
            let shared: Vec<String> = a_layers
                .iter()
                .filter(|a| a.shareable && photo.layer(&a.name).is_some_and(|p| p.shareable && p.kind == a.kind))
                .map(|a| a.name.clone())
                .collect();
            let suffix = |all: Vec<String>| all[all.len().saturating_sub(shared.len())..].to_vec();
            if shared.is_empty() || suffix(names(&a_layers)) != shared || suffix(names(&p_layers)) != shared {
                return Err(ModelError::Scheme(format!(
                    "half_share layers {shared:?} do not form a common top-of-stack suffix"
                )));
            }
            shared
        }
    };
    let scheme = SharingScheme {
        mode,
        shared_layer_names: shared,
    };
    check_pairing_rule(&scheme, pairing, anchor)?;
    Ok(scheme)
}

/// Sketch-edgemap half-sharing binds the top four body layers; sketch-photo
/// half-sharing binds only fully-connected layers.
fn check_pairing_rule(scheme: &SharingScheme, pairing: Pairing, anchor: &BranchArch) -> Result<()> {
    if scheme.mode != ShareMode::HalfShare {
        return Ok(());
    }
    let body: Vec<&str> = scheme
        .shared_layer_names
        .iter()
        .map(String::as_str)
        .filter(|n| *n != HEAD_NAME)
        .collect();
    match pairing {
        Pairing::SketchEdgemap if body.len() != 4 => Err(ModelError::Scheme(format!(
            "sketch_edgemap half_share binds the top 4 body layers, got {body:?}"
        ))),
        Pairing::SketchPhoto => {
            let conv: Vec<_> = body
                .iter()
                .filter(|n| !matches!(anchor.layer(n).map(|l| l.kind), Some(super::LayerKind::Linear { .. })))
                .collect();
            if conv.is_empty() && !body.is_empty() {
                Ok(())
            } else {
                Err(ModelError::Scheme(format!(
                    "sketch_photo half_share binds fully-connected layers only, got {body:?}"
                )))
            }
        }
        _ => Ok(()),
    }
}

/// Anchor (sketch) branch plus one photo-domain branch used for both the
/// positive and the negative inputs.
#[derive(Debug, Clone)]
pub struct TripletNet {
    pub store: ParamStore,
    pub scheme: SharingScheme,
    pub pairing: Pairing,
    pub preset: Preset,
    pub anchor: Branch,
    pub photo: Branch,
    /// Factor applied to anchor embeddings at query time.
    pub query_scale: f32,
}

/// Builds a triplet network. `scheme` must match the canonical layer set
/// for its mode on this pairing.
pub fn build_triplet(scheme: &SharingScheme, pairing: Pairing, preset: Preset, seed: u64) -> Result<TripletNet> {
    let anchor_arch = preset_arch(pairing.anchor_kind(), preset);
    let photo_arch = preset_arch(pairing.photo_kind(), preset);
    let canonical = resolve(scheme.mode, pairing, &anchor_arch, &photo_arch)?;
    if canonical != *scheme {
        return Err(ModelError::Scheme(format!(
            "{} for {pairing} shares {:?}, requested {:?}",
            scheme.mode, canonical.shared_layer_names, scheme.shared_layer_names
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut shared: HashMap<String, (ParamId, ParamId)> = HashMap::new();
    let mut anchor_params = Vec::with_capacity(anchor_arch.layers.len());
    for l in &anchor_arch.layers {
        let bound = if !l.kind.has_params() {
            None
        } else if scheme.is_shared(&l.name) {
            let ids = init_layer(&mut store, "shared", l, &mut rng)?;
            shared.insert(l.name.clone(), ids);
            Some(ids)
        } else {
            Some(init_layer(&mut store, "anchor", l, &mut rng)?)
        };
        anchor_params.push(bound);
    }
    let mut photo_params = Vec::with_capacity(photo_arch.layers.len());
    for l in &photo_arch.layers {
        let bound = if !l.kind.has_params() {
            None
        } else if let Some(&ids) = shared.get(&l.name) {
            Some(ids)
        } else {
            Some(init_layer(&mut store, "photo", l, &mut rng)?)
        };
        photo_params.push(bound);
    }
    Ok(TripletNet {
        store,
        scheme: scheme.clone(),
        pairing,
        preset,
        anchor: Branch::bind(anchor_arch, anchor_params),
        photo: Branch::bind(photo_arch, photo_params),
        query_scale: 2.0,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TripletOutputs {
    pub anchor: BranchOutput,
    pub positive: BranchOutput,
    pub negative: BranchOutput,
}

impl TripletNet {
    pub fn embedding_dim(&self) -> usize {
        self.anchor.embedding_dim()
    }

    pub fn head_shared(&self) -> bool {
        self.scheme.is_shared(HEAD_NAME)
    }

    pub fn shared_param_ids(&self) -> BTreeSet<ParamId> {
        let a: BTreeSet<_> = self.anchor.param_ids().into_iter().collect();
        self.photo.param_ids().into_iter().filter(|id| a.contains(id)).collect()
    }

    /// Parameters owned by exactly one branch, excluding classifiers.
    pub fn unshared_param_ids(&self) -> BTreeSet<ParamId> {
        let shared = self.shared_param_ids();
        self.anchor
            .param_ids()
            .into_iter()
            .chain(self.photo.param_ids())
            .filter(|id| !shared.contains(id))
            .collect()
    }

    pub fn classifier_param_ids(&self) -> BTreeSet<ParamId> {
        [self.anchor.classifier(), self.photo.classifier()]
            .into_iter()
            .flatten()
            .flat_map(|h| [h.weight, h.bias])
            .collect()
    }

    /// Weight and bias ids of the named layers in either branch.
    pub fn layer_param_ids(&self, names: &[String]) -> Result<BTreeSet<ParamId>> {
        let mut out = BTreeSet::new();
        for name in names {
            let found: Vec<_> = [&self.anchor, &self.photo]
                .iter()
                .filter_map(|b| b.layer_params(name))
                .collect();
            if found.is_empty() && name != "fc8" {
                return Err(ModelError::Config(format!("no parameterized layer named `{name}`")));
            }
            out.extend(found.into_iter().flat_map(|(w, b)| [w, b]));
            if name == "fc8" {
                out.extend(self.classifier_param_ids());
            }
        }
        Ok(out)
    }

    pub fn has_classifier(&self) -> bool {
        self.anchor.classifier().is_some()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.anchor.classifier().map(|h| h.num_classes)
    }

    /// Attaches `FC8` to both branches, shared iff the embedding head is.
    pub fn attach_classifier_heads(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if self.has_classifier() {
            return Err(ModelError::HeadAttached);
        }
        if self.head_shared() {
            let head = new_classifier(&mut self.store, "shared", &self.anchor, num_classes, seed)?;
            self.anchor.set_classifier(Some(head));
            self.photo.set_classifier(Some(head));
        } else {
            let a = new_classifier(&mut self.store, "anchor", &self.anchor, num_classes, seed)?;
            let p = new_classifier(&mut self.store, "photo", &self.photo, num_classes, derive_seed(seed, &[1]))?;
            self.anchor.set_classifier(Some(a));
            self.photo.set_classifier(Some(p));
        }
        Ok(())
    }

    pub fn detach_classifier_heads(&mut self) -> Result<()> {
        if !self.has_classifier() {
            return Err(ModelError::NoHead);
        }
        let heads: BTreeSet<_> = self.classifier_param_ids();
        for id in heads {
            self.store.remove(id);
        }
        self.anchor.set_classifier(None);
        self.photo.set_classifier(None);
        Ok(())
    }

    /// Runs anchors through the anchor branch and both photo batches through
    /// the photo branch.
    pub fn forward_triplet(
        &self,
        g: &mut Graph,
        anchors: NodeId,
        positives: NodeId,
        negatives: NodeId,
        ctx: &ForwardCtx,
    ) -> Result<TripletOutputs> {
        let role = |r: u64| ForwardCtx {
            seed: derive_seed(ctx.seed, &[r]),
            ..*ctx
        };
        Ok(TripletOutputs {
            anchor: self.anchor.forward(g, &self.store, anchors, &role(0))?,
            positive: self.photo.forward(g, &self.store, positives, &role(1))?,
            negative: self.photo.forward(g, &self.store, negatives, &role(2))?,
        })
    }

    pub fn embed_anchors(&self, images: &Tensor) -> Result<Tensor> {
        self.anchor.embed_batch(&self.store, images)
    }

    pub fn embed_photos(&self, images: &Tensor) -> Result<Tensor> {
        self.photo.embed_batch(&self.store, images)
    }

    /// Collapses every embedding head onto a common output: weights are
    /// scaled by `weight_scale` and biases set to `common`.
    pub fn degenerate_head_init(&mut self, common: &[f32], weight_scale: f32) -> Result<()> {
        let d = self.embedding_dim();
        if common.len() != d {
            return Err(ModelError::DimMismatch {
                expected: d,
                found: common.len(),
            });
        }
        let heads: BTreeSet<_> = [&self.anchor, &self.photo]
            .iter()
            .filter_map(|b| b.layer_params(HEAD_NAME))
            .collect();
        for (w, b) in heads {
            self.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v *= weight_scale);
            self.store.get_mut(b).data_mut().copy_from_slice(common);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(&self.store, path)?)
    }

    /// Replaces all parameters from a checkpoint, attaching or detaching
    /// classifier heads to match it.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.assign(load_checkpoint(path)?)
    }

    pub fn assign(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let head_weight = records
            .iter()
            .find(|(n, _)| n.ends_with(&format!(".{HEAD_NAME}.weight")))
            .map(|(_, t)| t.shape()[0]);
        if let Some(found) = head_weight {
            if found != self.embedding_dim() {
                return Err(ModelError::DimMismatch {
                    expected: self.embedding_dim(),
                    found,
                });
            }
        }
        let classes = records
            .iter()
            .find(|(n, _)| n.ends_with(".fc8.weight"))
            .map(|(_, t)| t.shape()[0]);
        match (classes, self.num_classes()) {
            (Some(c), Some(have)) if c == have => {}
            (Some(c), existing) => {
                if existing.is_some() {
                    self.detach_classifier_heads()?;
                }
                self.attach_classifier_heads(c, 0)?;
            }
            (None, Some(_)) => self.detach_classifier_heads()?,
            (None, None) => {}
        }
        Ok(self.store.assign_all(records)?)
    }
}

impl ClassifierHead {
    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(mode: ShareMode, pairing: Pairing) -> Result<TripletNet> {
        let scheme = SharingScheme::resolve(mode, pairing, Preset::Mini)?;
        build_triplet(&scheme, pairing, Preset::Mini, 3)
    }

    #[test]
    fn full_share_uses_one_identity_set() {
        let n = net(ShareMode::FullShare, Pairing::SketchEdgemap).unwrap();
        let a: BTreeSet<_> = n.anchor.param_ids().into_iter().collect();
        let p: BTreeSet<_> = n.photo.param_ids().into_iter().collect();
        assert_eq!(a, p);
        assert!(n.unshared_param_ids().is_empty());
    }

    #[test]
    fn no_share_sets_are_disjoint() {
        for pairing in [Pairing::SketchEdgemap, Pairing::SketchPhoto] {
            let n = net(ShareMode::NoShare, pairing).unwrap();
            assert!(n.shared_param_ids().is_empty());
            assert!(n.scheme.shared_layer_names.is_empty());
        }
    }

    #[test]
    fn half_share_sketch_edgemap_binds_top_four() {
        let n = net(ShareMode::HalfShare, Pairing::SketchEdgemap).unwrap();
        assert_eq!(n.scheme.shared_layer_names, ["conv2", "conv3", "fc6", "fc7", HEAD_NAME]);
        assert_ne!(n.anchor.layer_params("conv1"), n.photo.layer_params("conv1"));
        assert_eq!(n.anchor.layer_params("conv2"), n.photo.layer_params("conv2"));
    }

    #[test]
    fn half_share_sketch_photo_binds_fc_only() {
        for preset in [Preset::Mini, Preset::Full] {
            let s = SharingScheme::resolve(ShareMode::HalfShare, Pairing::SketchPhoto, preset).unwrap();
            assert_eq!(s.shared_layer_names, ["fc6", "fc7", HEAD_NAME]);
        }
        let s = SharingScheme::resolve(ShareMode::HalfShare, Pairing::SketchEdgemap, Preset::Full).unwrap();
        assert_eq!(s.shared_layer_names, ["conv4", "conv5", "fc6", "fc7", HEAD_NAME]);
    }

    #[test]
    fn full_share_sketch_photo_rejected() {
        let err = net(ShareMode::FullShare, Pairing::SketchPhoto).unwrap_err();
        assert!(matches!(err, ModelError::Scheme(_)), "{err}");
    }

    #[test]
    fn mismatched_scheme_rejected() {
        let mut s = SharingScheme::resolve(ShareMode::HalfShare, Pairing::SketchEdgemap, Preset::Mini).unwrap();
        s.shared_layer_names.remove(0);
        let err = build_triplet(&s, Pairing::SketchEdgemap, Preset::Mini, 0).unwrap_err();
        assert!(err.to_string().contains("conv2"), "{err}");
    }

    #[test]
    fn classifier_follows_head_sharing() {
        let mut n = net(ShareMode::HalfShare, Pairing::SketchPhoto).unwrap();
        n.attach_classifier_heads(8, 1).unwrap();
        assert_eq!(n.anchor.classifier(), n.photo.classifier());
        let mut n = net(ShareMode::NoShare, Pairing::SketchPhoto).unwrap();
        n.attach_classifier_heads(8, 1).unwrap();
        assert_ne!(n.anchor.classifier(), n.photo.classifier());
        let before = n.store.len();
        n.detach_classifier_heads().unwrap();
        assert_eq!(n.store.len(), before - 4);
    }

    #[test]
    fn checkpoint_round_trip_restores_heads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.sbf");
        let mut n = net(ShareMode::HalfShare, Pairing::SketchEdgemap).unwrap();
        n.attach_classifier_heads(5, 2).unwrap();
        n.save(&path).unwrap();
        let mut m = net(ShareMode::HalfShare, Pairing::SketchEdgemap).unwrap();
        m.load(&path).unwrap();
        assert_eq!(m.num_classes(), Some(5));
        for ((_, a, ta), (_, b, tb)) in n.store.iter().zip(m.store.iter()) {
            assert_eq!((a, ta), (b, tb));
        }
    }

    #[test]
    fn parse_modes() {
        assert_eq!("half_share".parse::<ShareMode>().unwrap(), ShareMode::HalfShare);
        assert_eq!(Pairing::SketchPhoto.to_string(), "sketch_photo");
        assert!("halfshare".parse::<ShareMode>().is_err());
    }
}
