//! Multi-phase training curriculum: classification pre-training, joint
//! classification and contrastive regression, then triplet ranking.

mod config;
mod embed;
mod recipe;

pub use config::PhaseConfig;
pub use embed::{
    build_photo_index, classification_accuracy, embed_photos, embed_sketches, evaluate_split, sketch_queries, validate,
};
pub use recipe::{check_recipe, RECIPE_TABLE};

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, Preprocessor, Split, TripletSample, TripletSampler};
use crate::derive_seed;
use crate::evaluation::EvalError;
use crate::index::IndexError;
use crate::losses::{LossError, LossGraphExt};
use crate::model::{ForwardCtx, ModelError, ShareMode, TripletNet};
use crate::tensor::{Graph, NodeId, ParamId, Sgd, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("phase precondition: {0}")]
    Precondition(String),
    #[error("curriculum rejected: {msg}\n{table}")]
    Recipe { msg: String, table: String },
    #[error("phase {phase} diverged at step {step}: {msg}")]
    Diverged { phase: u8, step: usize, msg: String },
    #[error("validation needs at least one validation sketch")]
    EmptyValidation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Inputs shared by every phase of a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub manifest: &'a DatasetManifest,
    pub prep: &'a Preprocessor,
    /// Where `phase{n}.sbf` and `best.sbf` go.
    pub checkpoint_dir: Option<&'a Path>,
    /// CSV training log, rewritten after every epoch.
    pub log_path: Option<&'a Path>,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub phase: u8,
    pub epoch: usize,
    pub loss: f32,
    pub softmax: Option<f32>,
    pub contrastive: Option<f32>,
    pub triplet: Option<f32>,
    /// Global norm of the parameter gradients.
    pub grad_norm: f32,
    /// Norms of the loss gradient at the anchor, positive and negative
    /// embeddings.
    pub grad_norm_a: f32,
    pub grad_norm_p: f32,
    pub grad_norm_n: f32,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub phase: u8,
    /// 0 is the phase start.
    pub epoch: usize,
    pub step: usize,
    pub map: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Best validation mAP reached in a triplet phase.
    pub best_map: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<LogRow>,
    pub validation: Vec<ValidationPoint>,
    pub warnings: Vec<String>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn losses(&self) -> Vec<f32> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.history {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sorted categories with training photos; class `i` of the classifier is
/// the `i`-th entry.
pub fn train_categories(manifest: &DatasetManifest) -> Vec<String> {
    let mut c: Vec<String> = manifest.photos(Split::Train).into_iter().map(|p| p.category.clone()).collect();
    c.sort();
    c.dedup();
    c
}

struct Batch {
    anchors: Tensor,
    positives: Tensor,
    negatives: Tensor,
    anchor_labels: Vec<usize>,
    negative_labels: Vec<usize>,
}

fn load_batch(ctx: &TrainContext, samples: &[TripletSample], classes: &BTreeMap<&str, usize>, augment: Option<u64>) -> Result<Batch> {
    let aug = |i: usize, role: u64| augment.map(|s| derive_seed(s, &[i as u64, role]));
    let mut a = Vec::with_capacity(samples.len());
    let mut p = Vec::with_capacity(samples.len());
    let mut n = Vec::with_capacity(samples.len());
    let label = |id: &str| -> Result<usize> {
        ctx.manifest
            .get(id)
            .and_then(|item| classes.get(item.category.as_str()).copied())
            .ok_or_else(|| TrainError::Precondition(format!("`{id}` has no training category")))
    };
    let mut anchor_labels = Vec::with_capacity(samples.len());
    let mut negative_labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        a.push(ctx.prep.sketch_image(&s.anchor, aug(i, 0))?);
        p.push(ctx.prep.photo_image(&s.positive, aug(i, 1))?);
        n.push(ctx.prep.photo_image(&s.negative, aug(i, 2))?);
        anchor_labels.push(label(&s.anchor)?);
        negative_labels.push(label(&s.negative)?);
    }
    Ok(Batch {
        anchors: Preprocessor::batch(&a)?,
        positives: Preprocessor::batch(&p)?,
        negatives: Preprocessor::batch(&n)?,
        anchor_labels,
        negative_labels,
    })
}

struct StepOutput {
    loss: NodeId,
    softmax: Option<NodeId>,
    contrastive: Option<NodeId>,
    triplet: Option<NodeId>,
    embeddings: [NodeId; 3],
}

fn build_loss(g: &mut Graph, net: &TripletNet, cfg: &PhaseConfig, batch: &Batch, fctx: &ForwardCtx) -> Result<StepOutput> {
    let a = g.input(batch.anchors.clone());
    let p = g.input(batch.positives.clone());
    let n = g.input(batch.negatives.clone());
    let out = net.forward_triplet(g, a, p, n, fctx)?;
    let embeddings = [out.anchor.embedding, out.positive.embedding, out.negative.embedding];
    let [ea, ep, en] = embeddings;
    for e in embeddings {
        g.retain_grad(e);
    }
    if cfg.uses_triplet() {
        let t = g.triplet_loss(ea, ep, en, cfg.triplet, cfg.margin)?;
        return Ok(StepOutput {
            loss: t,
            softmax: None,
            contrastive: None,
            triplet: Some(t),
            embeddings,
        });
    }
    let la = net.anchor.logits(g, &net.store, ea, fctx)?;
    let lp = net.photo.logits(g, &net.store, ep, fctx)?;
    let ln = net.photo.logits(g, &net.store, en, fctx)?;
    let sa = g.softmax_xent(la, &batch.anchor_labels)?;
    let sp = g.softmax_xent(lp, &batch.anchor_labels)?;
    let sn = g.softmax_xent(ln, &batch.negative_labels)?;
    let photo = g.add(sp, sn)?;
    let photo = g.scale(photo, 0.5);
    let softmax = g.add(sa, photo)?;
    let mut loss = g.scale(softmax, cfg.softmax_weight);
    let mut contrastive = None;
    if cfg.phase == 2 {
        let rows = batch.anchor_labels.len();
        let c1 = g.contrastive(ea, ep, &vec![true; rows], cfg.contrastive_margin)?;
        let c2 = g.contrastive(ea, en, &vec![false; rows], cfg.contrastive_margin)?;
        let c = g.add(c1, c2)?;
        let c = g.scale(c, 0.5);
        let weighted = g.scale(c, cfg.contrastive_weight);
        loss = g.add(loss, weighted)?;
        contrastive = Some(c);
    }
    Ok(StepOutput {
        loss,
        softmax: Some(softmax),
        contrastive,
        triplet: None,
        embeddings,
    })
}

/// The phase objective on fixed samples, without augmentation or dropout.
pub fn batch_loss(net: &TripletNet, ctx: &TrainContext, cfg: &PhaseConfig, samples: &[TripletSample]) -> Result<f32> {
    let classes = train_categories(ctx.manifest);
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let batch = load_batch(ctx, samples, &class_index, None)?;
    let mut g = Graph::new();
    let out = build_loss(&mut g, net, cfg, &batch, &ForwardCtx::eval())?;
    Ok(g.value(out.loss).item())
}

/// Sets up heads and returns the parameters the phase holds fixed.
fn prepare_phase(net: &mut TripletNet, ctx: &TrainContext, cfg: &PhaseConfig) -> Result<HashSet<ParamId>> {
    let classes = train_categories(ctx.manifest);
    match cfg.phase {
        1 => match net.num_classes() {
            None => net.attach_classifier_heads(classes.len(), derive_seed(cfg.seed, &[0xc1a5]))?,
            Some(c) if c == classes.len() => {}
            Some(c) => {
                return Err(TrainError::Precondition(format!(
                    "classifier has {c} classes but the training split has {}",
                    classes.len()
                )))
            }
        },
        2 => {
            if net.scheme.mode != ShareMode::HalfShare {
                return Err(TrainError::Precondition(format!(
                    "phase 2 is only defined for half_share, not {}",
                    net.scheme.mode
                )));
            }
            if net.num_classes() != Some(classes.len()) {
                return Err(TrainError::Precondition(
                    "phase 2 needs the classifier heads trained in phase 1".into(),
                ));
            }
        }
        _ => {
            if net.has_classifier() {
                net.detach_classifier_heads()?;
            }
        }
    }
    let mut frozen: HashSet<ParamId> = net.layer_param_ids(&cfg.frozen)?.into_iter().collect();
    if cfg.phase == 2 {
        frozen.extend(net.unshared_param_ids());
    }
    Ok(frozen)
}

fn phase_pass_len(manifest: &DatasetManifest, cfg: &PhaseConfig) -> usize {
    if cfg.phase == 4 {
        manifest.photos(Split::Train).len()
    } else {
        manifest.sketches(Split::Train).len()
    }
}

fn node_norm(g: &Graph, id: NodeId) -> f32 {
    g.grad(id).map_or(0.0, Tensor::l2_norm)
}

/// Runs one phase on `net`, appending to `state`. On divergence the
/// parameters are left at the last finite update.
pub fn run_phase(net: &mut TripletNet, ctx: &TrainContext, cfg: &PhaseConfig, state: &mut TrainState) -> Result<()> {
    cfg.validate()?;
    let frozen = prepare_phase(net, ctx, cfg)?;
    if cfg.uses_triplet() {
        net.query_scale = cfg.triplet.query_scale();
    }
    let classes = train_categories(ctx.manifest);
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let sampler = TripletSampler::new(ctx.manifest, cfg.granularity())?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| phase_pass_len(ctx.manifest, cfg).div_ceil(cfg.batch_size));
    let frozen_before: Vec<(ParamId, Tensor)> = frozen.iter().map(|&id| (id, net.store.get(id).clone())).collect();
    let mut sgd = Sgd::new(cfg.lr(), cfg.momentum, cfg.weight_decay)?;
    let has_validation = !ctx.manifest.sketches(Split::Validation).is_empty();
    if cfg.validate && !has_validation {
        let w = format!("phase {}: no validation sketches, validation skipped", cfg.phase);
        log::warn!("{w}");
        state.warnings.push(w);
    }
    let validating = cfg.validate && has_validation;
    let mut phase_best = None;
    if validating {
        let map = validate(net, ctx.prep, ctx.manifest)?;
        state.validation.push(ValidationPoint {
            phase: cfg.phase,
            epoch: 0,
            step: state.step,
            map,
        });
        phase_best = Some(map);
    }
    let mut stale = 0usize;
    log::info!(
        "phase {}: {} epochs x {steps} steps, batch {}, lr {}, {} frozen tensors",
        cfg.phase,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr(),
        frozen.len()
    );
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        for s in 0..steps {
            let seed = derive_seed(cfg.seed, &[u64::from(cfg.phase), epoch as u64, s as u64]);
            let samples = sampler.sample(cfg.batch_size, derive_seed(seed, &[0]));
            let batch = load_batch(ctx, &samples, &class_index, cfg.augment.then(|| derive_seed(seed, &[1])))?;
            let mut g = Graph::new();
            let fctx = ForwardCtx::train(derive_seed(seed, &[2]), &frozen);
            let out = build_loss(&mut g, net, cfg, &batch, &fctx)?;
            let loss = g.value(out.loss).item();
            let diverged = |msg: String| TrainError::Diverged {
                phase: cfg.phase,
                step: state.step,
                msg,
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            g.backward(out.loss)?;
            let grads = g.param_grads();
            let last_good = net.store.clone();
            match sgd.step(&mut net.store, &grads, &frozen) {
                Err(TensorError::NonFiniteGradient(name)) => {
                    return Err(diverged(format!("non-finite gradient for `{name}`")))
                }
                r => r?,
            }
            let broken = net.store.iter().find(|(_, _, t)| !t.all_finite()).map(|(_, n, _)| n.to_string());
            if let Some(name) = broken {
                let msg = format!("update made `{name}` non-finite");
                net.store = last_good;
                return Err(diverged(msg));
            }
            let value = |id: Option<NodeId>| id.map(|n| g.value(n).item());
            state.history.push(LogRow {
                step: state.step,
                phase: cfg.phase,
                epoch,
                loss,
                softmax: value(out.softmax),
                contrastive: value(out.contrastive),
                triplet: value(out.triplet),
                grad_norm: grads.global_norm(),
                grad_norm_a: node_norm(&g, out.embeddings[0]),
                grad_norm_p: node_norm(&g, out.embeddings[1]),
                grad_norm_n: node_norm(&g, out.embeddings[2]),
                val_map: None,
            });
            state.step += 1;
        }
        sgd.lr *= cfg.lr_decay;
        let last = state.history.last().map_or(f32::NAN, |r| r.loss);
        if validating {
            let map = validate(net, ctx.prep, ctx.manifest)?;
            if let Some(row) = state.history.last_mut() {
                row.val_map = Some(map);
            }
            state.validation.push(ValidationPoint {
                phase: cfg.phase,
                epoch,
                step: state.step,
                map,
            });
            log::info!("phase {} epoch {epoch}: loss {last:.5}, validation mAP {map:.4}", cfg.phase);
            if cfg.uses_triplet() && state.best_map.is_none_or(|b| map > b) {
                state.best_map = Some(map);
                if let Some(dir) = ctx.checkpoint_dir {
                    let path = dir.join("best.sbf");
                    net.save(&path)?;
                    state.best_checkpoint = Some(path);
                }
            }
            if phase_best.is_none_or(|b| map > b) {
                phase_best = Some(map);
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            log::info!("phase {} epoch {epoch}: loss {last:.5}", cfg.phase);
        }
        if let Some(path) = ctx.log_path {
            state.write_log(path)?;
        }
        if cfg.patience.is_some_and(|p| validating && stale >= p) {
            log::info!("phase {}: no validation improvement for {stale} epochs, stopping", cfg.phase);
            state.stopped_early = true;
            break;
        }
    }
    for (id, before) in &frozen_before {
        if net.store.get(*id) != before {
            return Err(TrainError::Precondition(format!(
                "frozen parameter `{}` changed during phase {}",
                net.store.name(*id),
                cfg.phase
            )));
        }
    }
    if let Some(dir) = ctx.checkpoint_dir {
        let path = dir.join(format!("phase{}.sbf", cfg.phase));
        net.save(&path)?;
        state.checkpoints.push(path);
    }
    Ok(())
}

/// Checks the phase sequence against the recipe for the network's scheme,
/// then runs the phases in order.
pub fn run_curriculum(net: &mut TripletNet, ctx: &TrainContext, phases: &[PhaseConfig]) -> Result<TrainState> {
    let mut state = TrainState::default();
    for w in check_recipe(net.scheme.mode, net.pairing, phases)? {
        log::warn!("{w}");
        state.warnings.push(w);
    }
    if let Some(dir) = ctx.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for cfg in phases {
        run_phase(net, ctx, cfg, &mut state)?;
    }
    Ok(state)
}

