//! Ranked-retrieval metrics: average precision, mAP, interpolated PR
//! curves and Kendall's τ_b, plus a benchmark report over an index.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetManifest;
use crate::index::{EmbeddingIndex, IndexError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("{protocol} protocol needs labels that are missing for: {ids}")]
    MissingLabels { protocol: Protocol, ids: String },
    #[error("Kendall's tau_b is undefined: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One query's ranked list with binary relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query: String,
    pub retrieved: Vec<String>,
    pub relevant: Vec<bool>,
    /// Relevant items in the whole corpus.
    pub total_relevant: usize,
}

impl RankedResult {
    pub fn new(query: impl Into<String>, retrieved: Vec<String>, relevant: Vec<bool>, total_relevant: usize) -> Result<Self> {
        if retrieved.len() != relevant.len() {
            return Err(EvalError::Invalid(format!(
                "{} retrieved ids but {} relevance labels",
                retrieved.len(),
                relevant.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = retrieved.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(EvalError::Invalid(format!("duplicate retrieved id `{dup}`")));
        }
        Ok(Self {
            query: query.into(),
            retrieved,
            relevant,
            total_relevant,
        })
    }

    pub fn hits(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// `(1/total_relevant) Σ precision@r` over the ranks `r` holding a hit.
pub fn average_precision(result: &RankedResult, total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(EvalError::Invalid("average precision needs at least one relevant item".into()));
    }
    if result.hits() > total_relevant {
        return Err(EvalError::Invalid(format!(
            "query `{}` has {} hits but only {total_relevant} relevant items",
            result.query,
            result.hits()
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in result.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

fn scored(results: &[RankedResult]) -> Vec<&RankedResult> {
    let (keep, skip): (Vec<_>, Vec<_>) = results.iter().partition(|r| r.total_relevant > 0);
    for r in skip {
        log::warn!("query `{}` has no relevant items and is excluded", r.query);
    }
    keep
}

/// Unweighted mean of per-query AP. Queries without relevant items are
/// excluded with a warning.
pub fn mean_ap(results: &[RankedResult]) -> Result<f64> {
    let keep = scored(results);
    if keep.is_empty() {
        return Err(EvalError::Invalid("no query with relevant items".into()));
    }
    let mut sum = 0.0;
    for r in &keep {
        sum += average_precision(r, r.total_relevant)?;
    }
    Ok(sum / keep.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision of one ranked list at recall level `r`, read off the
/// polyline through `(recall@k, precision@k)`. Left of the first point the
/// curve is flat; past the last recall reached it is 0.
fn precision_at(result: &RankedResult, r: f64) -> f64 {
    let t = result.total_relevant as f64;
    let mut hits = 0usize;
    let pts: Vec<(f64, f64)> = result
        .relevant
        .iter()
        .enumerate()
        .map(|(i, &rel)| {
            hits += usize::from(rel);
            (hits as f64 / t, hits as f64 / (i + 1) as f64)
        })
        .collect();
    let Some(&(last_recall, _)) = pts.last() else {
        return 0.0;
    };
    if r > last_recall {
        return 0.0;
    }
    match pts.iter().rposition(|&(rk, _)| rk < r) {
        None => pts[0].1,
        Some(lo) => {
            let ((r0, p0), (r1, p1)) = (pts[lo], pts[lo + 1]);
            p0 + (p1 - p0) * (r - r0) / (r1 - r0)
        }
    }
}

/// Precision averaged over queries at `points` evenly spaced recall levels
/// from 0 to 1.
pub fn pr_curve(results: &[RankedResult], points: usize) -> Result<Vec<PrPoint>> {
    if points < 2 {
        return Err(EvalError::Invalid("a PR curve needs at least 2 points".into()));
    }
    let keep = scored(results);
    if keep.is_empty() {
        return Err(EvalError::Invalid("no query with relevant items".into()));
    }
    Ok((0..points)
        .map(|j| {
            let recall = j as f64 / (points - 1) as f64;
            let precision = keep.iter().map(|q| precision_at(q, recall)).sum::<f64>() / keep.len() as f64;
            PrPoint { recall, precision }
        })
        .collect())
}

/// Counts strict inversions of `v` while sorting it.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i].total_cmp(&v[j]).is_le() {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

fn tie_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Kendall's τ_b between paired observations, in `O(n log n)`.
pub fn tau_b(reference: &[f64], predicted: &[f64]) -> Result<f64> {
    let n = reference.len();
    if n != predicted.len() {
        return Err(EvalError::Invalid(format!("{n} reference values but {} predictions", predicted.len())));
    }
    if n < 2 {
        return Err(EvalError::Degenerate("fewer than two items".into()));
    }
    if reference.iter().chain(predicted).any(|v| v.is_nan()) {
        return Err(EvalError::Invalid("rank values must not be NaN".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        reference[a]
            .total_cmp(&reference[b])
            .then(predicted[a].total_cmp(&predicted[b]))
    });
    let xs: Vec<f64> = idx.iter().map(|&i| reference[i]).collect();
    let joint: Vec<(f64, f64)> = idx.iter().map(|&i| (reference[i], predicted[i])).collect();
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let n1 = tie_pairs(&xs);
    let n3 = tie_pairs(&joint);
    let mut ys: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
    let discordant = merge_count(&mut ys, &mut Vec::with_capacity(n));
    let n2 = tie_pairs(&ys);
    if n1 == n0 || n2 == n0 {
        return Err(EvalError::Degenerate("all items tied on one side".into()));
    }
    let s = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * discordant as i64;
    Ok(s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
}

/// τ_b between a predicted order (position = rank) and reference ranks
/// that may contain ties.
pub fn kendall_tau_b(predicted_order: &[String], reference_ranks: &BTreeMap<String, f64>) -> Result<f64> {
    if predicted_order.len() != reference_ranks.len() {
        return Err(EvalError::Invalid(format!(
            "prediction covers {} ids, reference {}",
            predicted_order.len(),
            reference_ranks.len()
        )));
    }
    let mut seen = HashSet::new();
    let mut reference = Vec::with_capacity(predicted_order.len());
    for id in predicted_order {
        if !seen.insert(id) {
            return Err(EvalError::Invalid(format!("duplicate id `{id}` in prediction")));
        }
        let r = reference_ranks
            .get(id)
            .ok_or_else(|| EvalError::Invalid(format!("id `{id}` has no reference rank")))?;
        reference.push(*r);
    }
    let predicted: Vec<f64> = (0..predicted_order.len()).map(|i| i as f64).collect();
    tau_b(&reference, &predicted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Category-level mAP over the full corpus ranking.
    Map,
    /// Kendall's τ_b against graded relevance: same instance, same
    /// category, other.
    TauB,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Map => "map",
            Protocol::TauB => "tau_b",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(Protocol::Map),
            "tau_b" => Ok(Protocol::TauB),
            other => Err(EvalError::Invalid(format!("unknown protocol `{other}` (expected map or tau_b)"))),
        }
    }
}

/// A query embedding with whatever labels it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub id: String,
    pub embedding: Vec<f32>,
    pub category: Option<String>,
    pub instance_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub id: String,
    /// AP under `map`, τ_b under `tau_b`.
    pub score: f64,
    pub total_relevant: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub protocol: Protocol,
    pub scale: f32,
    pub dim: usize,
    pub corpus_size: usize,
    pub index_fingerprint: String,
    /// mAP or mean τ_b over scored queries.
    pub metric: f64,
    pub per_query: Vec<QueryScore>,
    pub excluded: Vec<String>,
    pub pr: Vec<PrPoint>,
    pub rankings: Vec<RankedResult>,
    pub distances: Vec<Vec<f64>>,
}

pub const PR_POINTS: usize = 100;

fn labels_of<'a>(
    id: &str,
    manifest: &'a DatasetManifest,
    index: &'a EmbeddingIndex,
    pos: usize,
) -> (Option<&'a str>, Option<&'a str>) {
    match manifest.get(id) {
        Some(item) => (Some(item.category.as_str()), Some(item.instance_group.as_str())),
        None => (index.category(pos), None),
    }
}

/// Runs every query against the index over the full corpus and scores the
/// rankings under `protocol`.
pub fn benchmark_report(
    index: &EmbeddingIndex,
    queries: &[QueryItem],
    manifest: &DatasetManifest,
    protocol: Protocol,
    scale: f32,
) -> Result<BenchmarkReport> {
    if queries.is_empty() {
        return Err(EvalError::Invalid("no queries".into()));
    }
    let corpus: Vec<(Option<&str>, Option<&str>)> = index
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| labels_of(id, manifest, index, i))
        .collect();
    let missing: Vec<&str> = queries
        .iter()
        .filter(|q| q.category.is_none() || (protocol == Protocol::TauB && q.instance_group.is_none()))
        .map(|q| q.id.as_str())
        .chain(
            index
                .ids()
                .iter()
                .zip(&corpus)
                .filter(|(_, (c, g))| c.is_none() || (protocol == Protocol::TauB && g.is_none()))
                .map(|(id, _)| id.as_str()),
        )
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingLabels {
            protocol,
            ids: missing.join(", "),
        });
    }
    let mut rankings = Vec::with_capacity(queries.len());
    let mut distances = Vec::with_capacity(queries.len());
    let mut per_query = Vec::with_capacity(queries.len());
    let mut excluded = Vec::new();
    for q in queries {
        let hits = index.query(&q.embedding, index.len(), scale)?;
        let cat = q.category.as_deref();
        let pos: Vec<usize> = hits.iter().map(|h| index.position(&h.id).expect("hit from index")).collect();
        let relevant: Vec<bool> = pos.iter().map(|&i| corpus[i].0 == cat).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        let ids: Vec<String> = hits.iter().map(|h| h.id.clone()).collect();
        let ranked = RankedResult::new(q.id.clone(), ids.clone(), relevant, total)?;
        let score = match protocol {
            Protocol::Map if total == 0 => None,
            Protocol::Map => Some(average_precision(&ranked, total)?),
            Protocol::TauB => {
                let grade = |i: usize| -> f64 {
                    if corpus[i].1 == q.instance_group.as_deref() {
                        0.0
                    } else if corpus[i].0 == cat {
                        1.0
                    } else {
                        2.0
                    }
                };
                let reference: BTreeMap<String, f64> = ids.iter().cloned().zip(pos.iter().map(|&i| grade(i))).collect();
                match kendall_tau_b(&ids, &reference) {
                    Ok(t) => Some(t),
                    Err(EvalError::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        match score {
            Some(score) => per_query.push(QueryScore {
                id: q.id.clone(),
                score,
                total_relevant: total,
            }),
            None => {
                log::warn!("query `{}` cannot be scored under {protocol} and is excluded", q.id);
                excluded.push(q.id.clone());
            }
        }
        distances.push(hits.iter().map(|h| h.distance).collect());
        rankings.push(ranked);
    }
    if per_query.is_empty() {
        return Err(EvalError::Invalid("no query could be scored".into()));
    }
    let metric = per_query.iter().map(|s| s.score).sum::<f64>() / per_query.len() as f64;
    let pr = pr_curve(&rankings, PR_POINTS)?;
    Ok(BenchmarkReport {
        protocol,
        scale,
        dim: index.dim(),
        corpus_size: index.len(),
        index_fingerprint: index.fingerprint()?,
        metric,
        per_query,
        excluded,
        pr,
        rankings,
        distances,
    })
}

impl BenchmarkReport {
    pub fn metric_name(&self) -> &'static str {
        match self.protocol {
            Protocol::Map => "mAP",
            Protocol::TauB => "mean tau_b",
        }
    }

    /// Text report: metrics block, per-query table and PR points.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[metrics]");
        let _ = writeln!(s, "protocol = {}", self.protocol);
        let _ = writeln!(s, "{} = {:.6}", self.metric_name(), self.metric);
        let _ = writeln!(s, "queries_scored = {}", self.per_query.len());
        let _ = writeln!(s, "queries_excluded = {}", self.excluded.len());
        let _ = writeln!(s);
        let _ = writeln!(s, "[config]");
        let _ = writeln!(s, "query_scale = {}", self.scale);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "corpus_size = {}", self.corpus_size);
        let _ = writeln!(s, "index_sha256 = {}", self.index_fingerprint);
        let _ = writeln!(s);
        let _ = writeln!(s, "[per_query]");
        let _ = writeln!(s, "query\tscore\trelevant");
        for q in &self.per_query {
            let _ = writeln!(s, "{}\t{:.6}\t{}", q.id, q.score, q.total_relevant);
        }
        for id in &self.excluded {
            let _ = writeln!(s, "{id}\texcluded\t0");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[pr_curve]");
        s.push_str(&self.pr_csv());
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for p in &self.pr {
            let _ = writeln!(s, "{},{}", p.recall, p.precision);
        }
        s
    }

    /// Writes `report.txt`, `pr.csv`, `per_query.csv` and `rankings.csv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.render())?;
        std::fs::write(dir.join("pr.csv"), self.pr_csv())?;
        let mut w = csv::Writer::from_path(dir.join("per_query.csv"))?;
        w.write_record(["query", "score", "total_relevant"])?;
        for q in &self.per_query {
            w.write_record([q.id.clone(), q.score.to_string(), q.total_relevant.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("rankings.csv"))?;
        w.write_record(["query", "rank", "id", "distance", "relevant"])?;
        for (r, d) in self.rankings.iter().zip(&self.distances) {
            for (i, (id, rel)) in r.retrieved.iter().zip(&r.relevant).enumerate() {
                w.write_record([
                    r.query.clone(),
                    (i + 1).to_string(),
                    id.clone(),
                    d[i].to_string(),
                    u8::from(*rel).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Rebuilds ranked results from a `rankings.csv` dump.
pub fn read_rankings(path: impl AsRef<Path>) -> Result<Vec<RankedResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut grouped: Vec<(String, Vec<String>, Vec<bool>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (q, id, rel) = (&rec[0], &rec[2], &rec[4] == "1");
        match grouped.last_mut() {
            Some(last) if last.0 == q => {
                last.1.push(id.to_string());
                last.2.push(rel);
            }
            _ => grouped.push((q.to_string(), vec![id.to_string()], vec![rel])),
        }
    }
    grouped
        .into_iter()
        .map(|(q, ids, rel)| {
            let total = rel.iter().filter(|&&x| x).count();
            RankedResult::new(q, ids, rel, total)
        })
        .collect()
}
