use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::Normal;

use super::arch::{preset_arch, BranchArch, BranchKind, LayerKind, LayerSpec, Preset, HEAD_NAME};
use super::{ModelError, Result};
use crate::derive_seed;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Rows per forward pass when embedding many images.
const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub num_classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    /// Enables dropout.
    pub train: bool,
    pub seed: u64,
    /// Record parameter gradients on the tape.
    pub grads: bool,
    /// Parameters that enter the tape as constants.
    pub frozen: Option<&'a HashSet<ParamId>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            grads: false,
            frozen: None,
        }
    }

    /// Deterministic forward that still records parameter gradients.
    pub fn eval_with_grads() -> Self {
        Self {
            grads: true,
            ..Self::eval()
        }
    }

    pub fn train(seed: u64, frozen: &'a HashSet<ParamId>) -> Self {
        Self {
            train: true,
            seed,
            grads: true,
            frozen: Some(frozen),
        }
    }

    fn trainable(&self, id: ParamId) -> bool {
        self.grads && !self.frozen.is_some_and(|f| f.contains(&id))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// Input to the embedding head.
    pub features: NodeId,
    pub embedding: NodeId,
}

/// A layer stack bound to parameters in some [`ParamStore`]. Several
/// branches may point at the same parameter ids.
#[derive(Debug, Clone)]
pub struct Branch {
    arch: BranchArch,
    params: Vec<Option<(ParamId, ParamId)>>,
    classifier: Option<ClassifierHead>,
}

pub(crate) fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    layer: &LayerSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamId, ParamId)> {
    let (wshape, bshape) = layer
        .kind
        .param_shapes()
        .ok_or_else(|| ModelError::Config(format!("layer `{}` has no parameters", layer.name)))?;
    let gain = if layer.name == HEAD_NAME { 1.0 } else { 2.0 };
    let std = (gain / layer.kind.fan_in() as f64).sqrt() as f32;
    let w = normal_tensor(&wshape, std, rng);
    let w = store.insert(format!("{prefix}.{}.weight", layer.name), w)?;
    let b = store.insert(format!("{prefix}.{}.bias", layer.name), Tensor::zeros(&bshape))?;
    Ok((w, b))
}

fn normal_tensor(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| rng.sample(dist))
}

impl Branch {
    pub(crate) fn bind(arch: BranchArch, params: Vec<Option<(ParamId, ParamId)>>) -> Self {
        debug_assert_eq!(arch.layers.len(), params.len());
        Self {
            arch,
            params,
            classifier: None,
        }
    }

    pub fn arch(&self) -> &BranchArch {
        &self.arch
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    pub fn classifier(&self) -> Option<&ClassifierHead> {
        self.classifier.as_ref()
    }

    pub(crate) fn set_classifier(&mut self, head: Option<ClassifierHead>) {
        self.classifier = head;
    }

    /// Weight and bias ids of a named layer.
    pub fn layer_params(&self, name: &str) -> Option<(ParamId, ParamId)> {
        let idx = self.arch.layers.iter().position(|l| l.name == name)?;
        self.params[idx]
    }

    /// All parameter ids, bottom to top, excluding the classifier.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.arch.input;
        if shape.len() != 4 || shape[1..] != want {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                want: vec![0, want[0], want[1], want[2]],
            });
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, ctx: &ForwardCtx) -> Result<BranchOutput> {
        self.check_input(g.value(x).shape())?;
        let mut h = x;
        let mut features = x;
        let last = self.arch.layers.len() - 1;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if i == last {
                features = h;
            }
            h = match layer.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, b) = self.param_nodes(g, store, i, ctx);
                    g.conv2d(h, w, b, stride, pad)?
                }
                LayerKind::MaxPool { kernel, stride } => g.maxpool2d(h, kernel, stride)?,
                LayerKind::Relu => g.relu(h),
                LayerKind::Dropout { p } if ctx.train && p > 0.0 => g.dropout(h, p, derive_seed(ctx.seed, &[i as u64]))?,
                LayerKind::Dropout { .. } => h,
                LayerKind::Linear { .. } => {
                    if g.value(h).rank() != 2 {
                        h = g.flatten(h)?;
                    }
                    let (w, b) = self.param_nodes(g, store, i, ctx);
                    g.linear(h, w, b)?
                }
            };
        }
        Ok(BranchOutput { features, embedding: h })
    }

    fn param_nodes(&self, g: &mut Graph, store: &ParamStore, layer: usize, ctx: &ForwardCtx) -> (NodeId, NodeId) {
        let (w, b) = self.params[layer].expect("parameterized layer is bound");
        (g.param(store, w, ctx.trainable(w)), g.param(store, b, ctx.trainable(b)))
    }

    /// Classification logits computed from the embedding.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, embedding: NodeId, ctx: &ForwardCtx) -> Result<NodeId> {
        let head = self.classifier.ok_or(ModelError::NoHead)?;
        let w = g.param(store, head.weight, ctx.trainable(head.weight));
        let b = g.param(store, head.bias, ctx.trainable(head.bias));
        Ok(g.linear(embedding, w, b)?)
    }

    /// Embeds a batch `[N, C, H, W]` in evaluation mode, returning `[N, D]`.
    pub fn embed_batch(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per = images.len() / n;
        let mut out = Vec::with_capacity(n * self.arch.embedding_dim);
        for start in (0..n).step_by(EMBED_CHUNK) {
            let rows = EMBED_CHUNK.min(n - start);
            let mut shape = images.shape().to_vec();
            shape[0] = rows;
            let chunk = Tensor::new(shape, images.data()[start * per..(start + rows) * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.input(chunk);
            let o = self.forward(&mut g, store, x, &ForwardCtx::eval())?;
            out.extend_from_slice(g.value(o.embedding).data());
        }
        Ok(Tensor::new(vec![n, self.arch.embedding_dim], out)?)
    }

    /// Embeds one image `[C, H, W]` or `[1, C, H, W]`.
    pub fn embed(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f32>> {
        let batched = if image.rank() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            image.clone().reshape(&s)?
        } else {
            image.clone()
        };
        if batched.shape()[0] != 1 {
            return Err(ModelError::InputShape {
                got: image.shape().to_vec(),
                want: vec![1, self.arch.input[0], self.arch.input[1], self.arch.input[2]],
            });
        }
        Ok(self.embed_batch(store, &batched)?.into_data())
    }
}

/// A single branch that owns its parameters.
#[derive(Debug, Clone)]
pub struct BranchNet {
    pub store: ParamStore,
    pub branch: Branch,
    prefix: String,
}

impl BranchNet {
    pub fn new(arch: BranchArch, prefix: &str, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = arch
            .layers
            .iter()
            .map(|l| l.kind.has_params().then(|| init_layer(&mut store, prefix, l, &mut rng)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            branch: Branch::bind(arch, params),
            prefix: prefix.to_string(),
        })
    }

    pub fn embed(&self, image: &Tensor) -> Result<Vec<f32>> {
        self.branch.embed(&self.store, image)
    }

    /// Adds a linear classifier `FC8` on top of the embedding.
    pub fn attach_classifier_head(&mut self, num_classes: usize, seed: u64) -> Result<ClassifierHead> {
        let head = new_classifier(&mut self.store, &self.prefix, &self.branch, num_classes, seed)?;
        self.branch.set_classifier(Some(head));
        Ok(head)
    }

    pub fn detach_classifier_head(&mut self) -> Result<()> {
        let head = self.branch.classifier.take().ok_or(ModelError::NoHead)?;
        self.store.remove(head.weight);
        self.store.remove(head.bias);
        Ok(())
    }
}

pub(crate) fn new_classifier(
    store: &mut ParamStore,
    prefix: &str,
    branch: &Branch,
    num_classes: usize,
    seed: u64,
) -> Result<ClassifierHead> {
    if branch.classifier.is_some() {
        return Err(ModelError::HeadAttached);
    }
    if num_classes < 2 {
        return Err(ModelError::TooFewClasses(num_classes));
    }
    let d = branch.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal_tensor(&[num_classes, d], (1.0 / d as f32).sqrt(), &mut rng);
    let weight = store.insert(format!("{prefix}.fc8.weight"), w)?;
    let bias = store.insert(format!("{prefix}.fc8.bias"), Tensor::zeros(&[num_classes]))?;
    Ok(ClassifierHead {
        num_classes,
        weight,
        bias,
    })
}

pub fn build_sketch_branch(preset: Preset, seed: u64) -> Result<BranchNet> {
    BranchNet::new(preset_arch(BranchKind::Sketch, preset), "sketch", seed)
}

pub fn build_photo_branch(preset: Preset, seed: u64) -> Result<BranchNet> {
    BranchNet::new(preset_arch(BranchKind::Photo, preset), "photo", seed)
}
