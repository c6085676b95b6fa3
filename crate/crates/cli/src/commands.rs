use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sbir_core::data::{Split, StrokeSketch};
use sbir_core::evaluation::{benchmark_report, EvalError, Protocol, QueryItem};
use sbir_core::losses::{saddle_probe, saddle_trace, write_trace_csv, TripletBatchFeatures, TripletKind};
use sbir_core::tensor::Tensor;
use sbir_core::trainer::{self, run_curriculum, TrainContext};
use serde::Deserialize;

use crate::config::{AppConfig, ConfigError};
use crate::engine::{self, CliError, Engine};

#[derive(Debug, Parser)]
#[command(name = "sbir", version, about = "Sketch-based image retrieval with triplet convnets")]
pub struct Cli {
    /// Application config (TOML).
    #[arg(short, long, global = true, env = "SBIR_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training curriculum.
    Train,
    /// Embed photos into an index file.
    Index(IndexArgs),
    /// Score sketch queries against an index.
    Eval(EvalArgs),
    /// Rank the index against one stroke document.
    Query(QueryArgs),
    /// Serve queries over HTTP.
    Serve(ServeArgs),
    /// Trace the triplet losses from the collapsed start a = p = n.
    ProbeSaddle(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Defaults to `final.sbf` in the checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the configured index path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only index photos of this split.
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// `map` or `tau_b`.
    #[arg(long, default_value = "map")]
    pub protocol: String,
    /// Sketch split used as queries.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Precomputed query embeddings, one JSON object per line with `id`,
    /// `embedding` and optional `category` and `instance_group`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Query scale; defaults to the one implied by the training loss.
    #[arg(long)]
    pub scale: Option<f32>,
    /// Report directory; defaults to `eval-<protocol>` under the checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Stroke document to query with.
    pub sketch: PathBuf,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Print the service's JSON response instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeKind {
    Standard,
    Modified,
    Both,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub kind: ProbeKind,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f32,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    /// Directory for `saddle_<kind>.csv`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    let Some(path) = path else {
        return Err(ConfigError {
            path: "<none>".into(),
            msg: "pass --config or set SBIR_CONFIG".into(),
        }
        .into());
    };
    Ok(AppConfig::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::ProbeSaddle(args) = &cli.command {
        return probe_saddle(args);
    }
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train => train(&cfg),
        Command::Index(a) => index(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a),
        Command::Query(a) => query(&cfg, &a),
        Command::Serve(a) => {
            let checkpoint = a.checkpoint.unwrap_or_else(|| cfg.final_checkpoint());
            let index = a.index.unwrap_or_else(|| cfg.paths.index.clone());
            crate::service::serve_blocking(cfg, checkpoint, index)
        }
        Command::ProbeSaddle(_) => unreachable!(),
    }
}

pub fn train(cfg: &AppConfig) -> Result<()> {
    if cfg.phases.is_empty() {
        return Err(ConfigError {
            path: String::new(),
            msg: "no [[phases]] to train".into(),
        }
        .into());
    }
    let data = engine::load_dataset(cfg)?;
    let prep = sbir_core::data::Preprocessor::new(cfg.data.prep.clone(), cfg.photo_input(), &data)?;
    let mut net = engine::build_net(cfg)?;
    let dir = &cfg.paths.checkpoints;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let log = dir.join("train.csv");
    let ctx = TrainContext {
        manifest: &data.manifest,
        prep: &prep,
        checkpoint_dir: Some(dir),
        log_path: Some(&log),
    };
    let state = run_curriculum(&mut net, &ctx, &cfg.phases)?;
    for w in &state.warnings {
        println!("warning: {w}");
    }
    let final_path = cfg.final_checkpoint();
    net.save(&final_path)?;
    println!("steps: {}", state.step);
    if let Some(last) = state.history.last() {
        println!("final loss: {:.6}", last.loss);
    }
    if let Some(v) = state.validation.last() {
        println!("final validation mAP: {:.6}", v.map);
    }
    if let (Some(best), Some(path)) = (state.best_map, &state.best_checkpoint) {
        println!("best validation mAP: {best:.6} ({})", path.display());
    }
    println!("checkpoint: {}", final_path.display());
    println!("log: {}", log.display());
    Ok(())
}

pub fn index(cfg: &AppConfig, a: &IndexArgs) -> Result<()> {
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| cfg.final_checkpoint());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.index.clone());
    let net = engine::load_net(cfg, &checkpoint)?;
    let data = engine::load_dataset(cfg)?;
    let prep = sbir_core::data::Preprocessor::new(cfg.data.prep.clone(), cfg.photo_input(), &data)?;
    let photos: Vec<_> = data
        .manifest
        .items
        .iter()
        .filter(|i| i.is_photo_like() && a.split.is_none_or(|s| i.split == s))
        .collect();
    if photos.is_empty() {
        bail!("no photos to index");
    }
    let ids: Vec<&str> = photos.iter().map(|i| i.id.as_str()).collect();
    let vectors = trainer::embed_photos(&net, &prep, &ids)?;
    let mut ix = sbir_core::index::EmbeddingIndex::new(net.embedding_dim())?;
    for (item, v) in photos.iter().zip(vectors) {
        ix.add(item.id.clone(), &v, Some(item.category.clone()))?;
    }
    ix.snapshot();
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ix.save(&out)?;
    println!("entries: {}", ix.len());
    println!("dim: {}", ix.dim());
    println!("bytes: {}", ix.file_size());
    println!("fingerprint: {}", ix.fingerprint()?);
    println!("index: {}", out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f32>,
    category: Option<String>,
    instance_group: Option<String>,
}

fn read_embeddings(path: &Path) -> Result<Vec<QueryItem>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let e: EmbeddingLine =
                serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1))?;
            Ok(QueryItem {
                id: e.id,
                embedding: e.embedding,
                category: e.category,
                instance_group: e.instance_group,
            })
        })
        .collect()
}

pub fn eval(cfg: &AppConfig, a: &EvalArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse().map_err(|e: EvalError| CliError::Protocol(e.to_string()))?;
    let index_path = a.index.clone().unwrap_or_else(|| cfg.paths.index.clone());
    let data = engine::load_dataset(cfg)?;
    let (queries, dim, scale) = match &a.embeddings {
        Some(path) => {
            let q = read_embeddings(path)?;
            let dim = q.first().map_or(0, |q| q.embedding.len());
            (q, dim, a.scale.unwrap_or(cfg.query_scale()))
        }
        None => {
            let checkpoint = a.checkpoint.clone().unwrap_or_else(|| cfg.final_checkpoint());
            let net = engine::load_net(cfg, &checkpoint)?;
            let prep = sbir_core::data::Preprocessor::new(cfg.data.prep.clone(), cfg.photo_input(), &data)?;
            let q = trainer::sketch_queries(&net, &prep, &data.manifest, a.split)?;
            (q, net.embedding_dim(), a.scale.unwrap_or(net.query_scale))
        }
    };
    if queries.is_empty() {
        bail!("no queries to evaluate");
    }
    let index = engine::load_index(&index_path, dim)?;
    let report = match benchmark_report(&index, &queries, &data.manifest, protocol, scale) {
        Err(e @ EvalError::MissingLabels { .. }) => return Err(CliError::Protocol(e.to_string()).into()),
        r => r?,
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoints.join(format!("eval-{protocol}")));
    report.write_dir(&out)?;
    let text = report.render();
    print!("{}", text.split("[per_query]").next().unwrap_or(&text));
    println!("report: {}", out.display());
    Ok(())
}

pub fn query(cfg: &AppConfig, a: &QueryArgs) -> Result<()> {
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| cfg.final_checkpoint());
    let index_path = a.index.clone().unwrap_or_else(|| cfg.paths.index.clone());
    let k = a.k.unwrap_or(cfg.service.top_k);
    if k == 0 {
        bail!("k must be at least 1");
    }
    let text = std::fs::read_to_string(&a.sketch).with_context(|| format!("reading {}", a.sketch.display()))?;
    let sketch = StrokeSketch::from_json(&text).with_context(|| format!("parsing {}", a.sketch.display()))?;
    let engine = Engine::load(cfg, &checkpoint, &index_path)?;
    let response = engine.query(&sketch, k)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&response)?);
    } else {
        for h in &response.results {
            println!("{:>4}  {:<24} {:.6}  {}", h.rank, h.id, h.distance, h.category.as_deref().unwrap_or("-"));
        }
    }
    Ok(())
}

pub fn probe_saddle(a: &ProbeArgs) -> Result<()> {
    if a.dim == 0 || a.rows == 0 {
        bail!("dim and rows must be positive");
    }
    let kinds: &[TripletKind] = match a.kind {
        ProbeKind::Standard => &[TripletKind::Standard],
        ProbeKind::Modified => &[TripletKind::Modified],
        ProbeKind::Both => &[TripletKind::Standard, TripletKind::Modified],
    };
    let v = Tensor::from_fn(&[a.rows, a.dim], |i| if i % a.dim == 0 { 1.0 } else { 0.0 });
    let start = TripletBatchFeatures::new(v.clone(), v.clone(), v, a.margin)?;
    std::fs::create_dir_all(&a.out)?;
    for &kind in kinds {
        let name = match kind {
            TripletKind::Standard => "standard",
            TripletKind::Modified => "modified",
        };
        let p = saddle_probe(&start, kind);
        let rows = saddle_trace(&start, kind, a.steps, a.lr);
        let path = a.out.join(format!("saddle_{name}.csv"));
        write_trace_csv(std::io::BufWriter::new(std::fs::File::create(&path)?), &rows)?;
        let last = rows.last().expect("at least one row");
        println!(
            "{name}: loss {:.6} |dL/da| {:.3e} |dL/dp| {:.3e} |dL/dn| {:.3e}; after {} steps loss {:.6} -> {}",
            p.loss,
            p.grad_norm_a,
            p.grad_norm_p,
            p.grad_norm_n,
            a.steps,
            last.report.loss,
            path.display()
        );
    }
    Ok(())
}

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        match cause.downcast_ref::<CliError>() {
            Some(CliError::Dim(_)) => return 3,
            Some(CliError::Protocol(_)) => return 4,
            None => {}
        }
    }
    1
}
