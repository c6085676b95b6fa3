use super::{Result, TrainError};
use crate::data::{DatasetManifest, Preprocessor, Split};
use crate::evaluation::{benchmark_report, BenchmarkReport, Protocol, QueryItem};
use crate::index::EmbeddingIndex;
use crate::model::{ForwardCtx, TripletNet};
use crate::tensor::{Graph, Tensor};

const CHUNK: usize = 64;

fn embed_with(
    ids: &[&str],
    image: impl Fn(&str) -> crate::data::Result<crate::data::RasterImage>,
    embed: impl Fn(&Tensor) -> crate::model::Result<Tensor>,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let images = chunk.iter().map(|id| image(id)).collect::<crate::data::Result<Vec<_>>>()?;
        let e = embed(&Preprocessor::batch(&images)?)?;
        out.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
    }
    Ok(out)
}

/// Unscaled anchor-branch embeddings of the given sketches.
pub fn embed_sketches(net: &TripletNet, prep: &Preprocessor, ids: &[&str]) -> Result<Vec<Vec<f32>>> {
    embed_with(ids, |id| prep.sketch_image(id, None), |t| net.embed_anchors(t))
}

pub fn embed_photos(net: &TripletNet, prep: &Preprocessor, ids: &[&str]) -> Result<Vec<Vec<f32>>> {
    embed_with(ids, |id| prep.photo_image(id, None), |t| net.embed_photos(t))
}

/// Snapshotted index over the photos of one split.
pub fn build_photo_index(
    net: &TripletNet,
    prep: &Preprocessor,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<EmbeddingIndex> {
    let items = manifest.photos(split);
    if items.is_empty() {
        return Err(TrainError::Precondition(format!("no {split} photos to index")));
    }
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let mut index = EmbeddingIndex::new(net.embedding_dim())?;
    for (item, v) in items.iter().zip(embed_photos(net, prep, &ids)?) {
        index.add(item.id.clone(), &v, Some(item.category.clone()))?;
    }
    index.snapshot();
    Ok(index)
}

pub fn sketch_queries(
    net: &TripletNet,
    prep: &Preprocessor,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<QueryItem>> {
    let items = manifest.sketches(split);
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    Ok(items
        .iter()
        .zip(embed_sketches(net, prep, &ids)?)
        .map(|(item, embedding)| QueryItem {
            id: item.id.clone(),
            embedding,
            category: Some(item.category.clone()),
            instance_group: Some(item.instance_group.clone()),
        })
        .collect())
}

/// Ranks every `query_split` sketch against the `corpus_split` photos with
/// the network's query scale.
pub fn evaluate_split(
    net: &TripletNet,
    prep: &Preprocessor,
    manifest: &DatasetManifest,
    query_split: Split,
    corpus_split: Split,
    protocol: Protocol,
) -> Result<BenchmarkReport> {
    let queries = sketch_queries(net, prep, manifest, query_split)?;
    if queries.is_empty() {
        return Err(TrainError::Precondition(format!("no {query_split} sketches to query with")));
    }
    let index = build_photo_index(net, prep, manifest, corpus_split)?;
    Ok(benchmark_report(&index, &queries, manifest, protocol, net.query_scale)?)
}

/// Validation mAP: validation sketches queried against the training photos.
pub fn validate(net: &TripletNet, prep: &Preprocessor, manifest: &DatasetManifest) -> Result<f64> {
    if manifest.sketches(Split::Validation).is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    Ok(evaluate_split(net, prep, manifest, Split::Validation, Split::Train, Protocol::Map)?.metric)
}

/// Fraction of sketches and photos in `split` whose classifier argmax is
/// their category, with classes indexed by sorted training category.
pub fn classification_accuracy(
    net: &TripletNet,
    prep: &Preprocessor,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<f64> {
    let classes = super::train_categories(manifest);
    let mut correct = 0usize;
    let mut total = 0usize;
    let ctx = ForwardCtx::eval();
    for (photo_like, branch) in [(false, &net.anchor), (true, &net.photo)] {
        let items: Vec<_> = manifest.select(photo_like, split).collect();
        for chunk in items.chunks(CHUNK) {
            let images = chunk
                .iter()
                .map(|i| if photo_like { prep.photo_image(&i.id, None) } else { prep.sketch_image(&i.id, None) })
                .collect::<crate::data::Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let x = g.input(Preprocessor::batch(&images)?);
            let out = branch.forward(&mut g, &net.store, x, &ctx)?;
            let logits = branch.logits(&mut g, &net.store, out.embedding, &ctx)?;
            let v = g.value(logits);
            for (r, item) in chunk.iter().enumerate() {
                let row = v.row(r);
                let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                correct += usize::from(classes.get(arg) == Some(&item.category));
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(TrainError::Precondition(format!("no {split} items to classify")));
    }
    Ok(correct as f64 / total as f64)
}
