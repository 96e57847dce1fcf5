//! Command-line verbs mirroring the HTTP endpoints.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use caplens_core::adapter::{build_adapter, ModelAdapter};
use caplens_core::grounding::{evaluate, read_manifest, write_table, EvalOptions, Variant};
use caplens_core::pipeline::{register_dataset, run_ingest, DatasetManifest, DatasetView, IngestOptions, JobState};
use caplens_core::store::ArtifactStore;
use caplens_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ServiceConfig;
use crate::ops::{self, ColorBy, MatrixDoc, SteerBatchBody, SteerBody};

#[derive(Parser, Debug)]
#[command(
    name = "caplens",
    version,
    about = "Explore caption corpora and steer caption generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Dataset id.
    #[arg(long)]
    pub dataset: Option<String>,
    /// TOML service configuration.
    #[arg(long, env = "CAPLENS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register a dataset manifest (optional) and run ingest.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Manifest JSON to register before running.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Co-occurrence graph with small nodes and edges filtered out.
    Graph {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        min_node: u64,
        #[arg(long, default_value_t = 0)]
        min_edge: u64,
    },
    /// Histogram of image-text matching scores.
    Histogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Per-word share of captions whose score falls in [lo, hi].
    Portions {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        #[arg(long, default_value_t = 1.0)]
        hi: f64,
    },
    /// Segment scatterplot points.
    Segments {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "coverage")]
        color: String,
        #[arg(long)]
        word: Option<String>,
    },
    /// Association matrix of one image, or the dataset union.
    Associate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: Option<String>,
    },
    /// Per-segment coverage counts for a given k.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Pointing-game accuracy per layer on an annotated JSON-lines manifest.
    GroundEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Variant to evaluate; all four when omitted.
        #[arg(long)]
        variant: Option<String>,
        /// Also report per-head accuracy at this layer.
        #[arg(long)]
        head_layer: Option<usize>,
        /// Write a CSV table instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Steer one caption.
    Steer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: String,
        #[arg(long)]
        prompt: Option<String>,
        /// Comma-separated patch indices.
        #[arg(long, value_delimiter = ',')]
        patches: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        weight: f32,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
    /// Steer many images with one prompt and report the success rate.
    SteerBatch {
        #[command(flatten)]
        common: Common,
        /// Comma-separated image ids; every image in the dataset when omitted.
        #[arg(long, value_delimiter = ',')]
        images: Vec<String>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        /// Write the per-image CSV report instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest { common, .. }
            | Command::Graph { common, .. }
            | Command::Histogram { common, .. }
            | Command::Portions { common, .. }
            | Command::Segments { common, .. }
            | Command::Associate { common, .. }
            | Command::Coverage { common, .. }
            | Command::GroundEval { common, .. }
            | Command::Steer { common, .. }
            | Command::SteerBatch { common, .. }
            | Command::Serve { common, .. } => common,
        }
    }
}

struct Env {
    store: Arc<ArtifactStore>,
    adapter_config: caplens_core::adapter::AdapterConfig,
}

impl Env {
    fn adapter(&self) -> Result<Arc<dyn ModelAdapter>> {
        build_adapter(&self.adapter_config)
    }
}

fn dataset(common: &Common) -> Result<&str> {
    common
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Validation("--dataset is required".into()))
}

fn emit_bytes(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit_bytes(out, &bytes)
}

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let cfg = ServiceConfig::load(common.config.as_deref())?;
    let env = Env {
        store: Arc::new(ArtifactStore::open(&cfg.store)?),
        adapter_config: cfg.adapter,
    };
    let out = common.out.as_deref();
    let store = env.store.as_ref();
    match cli.command {
        Command::Ingest { manifest, .. } => {
            let id = match &manifest {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let m: DatasetManifest = serde_json::from_str(&text)?;
                    if common.dataset.as_deref().is_some_and(|d| d != m.dataset_id) {
                        return Err(Error::Validation("--dataset does not match the manifest".into()));
                    }
                    register_dataset(store, &m)?;
                    m.dataset_id
                }
                None => dataset(&common)?.to_string(),
            };
            let adapter = env.adapter()?;
            let job = run_ingest(store, adapter.as_ref(), &id, &IngestOptions::default())?;
            emit(out, &job)?;
            if job.state == JobState::Failed {
                return Err(Error::Adapter(job.message.unwrap_or_else(|| "ingest failed".into())));
            }
        }
        Command::Graph { min_node, min_edge, .. } => {
            let view = DatasetView::open(store, dataset(&common)?)?;
            emit(out, &ops::graph(&view, min_node, min_edge)?)?;
        }
        Command::Histogram { bins, .. } => {
            emit(out, &DatasetView::open(store, dataset(&common)?)?.histogram(bins)?)?;
        }
        Command::Portions { lo, hi, .. } => {
            let view = DatasetView::open(store, dataset(&common)?)?;
            emit(out, &ops::portions(&view, lo, hi)?)?;
        }
        Command::Segments { color, word, .. } => {
            let color: ColorBy = color.parse()?;
            let view = DatasetView::open(store, dataset(&common)?)?;
            emit(out, &ops::segments(&view, color, word.as_deref())?)?;
        }
        Command::Associate { image, .. } => {
            let view = DatasetView::open(store, dataset(&common)?)?;
            let m = match image {
                Some(id) => view.image_matrix(&id)?,
                None => view.union()?,
            };
            emit(out, &MatrixDoc::from(&m))?;
        }
        Command::Coverage { k, .. } => {
            let view = DatasetView::open(store, dataset(&common)?)?;
            emit(out, &ops::coverage_counts(&view, k)?)?;
        }
        Command::GroundEval {
            manifest,
            variant,
            head_layer,
            csv,
            ..
        } => {
            let file = std::fs::File::open(&manifest)?;
            let examples = read_manifest(std::io::BufReader::new(file))?;
            let variants = match variant {
                Some(v) => vec![v.parse::<Variant>()?],
                None => Variant::ALL.to_vec(),
            };
            let adapter = env.adapter()?;
            let options = EvalOptions {
                head_layer,
                ..Default::default()
            };
            let reports = variants
                .into_iter()
                .map(|v| evaluate(&examples, v, adapter.as_ref(), &options))
                .collect::<Result<Vec<_>>>()?;
            if csv {
                let mut buf = Vec::new();
                write_table(&reports, &mut buf)?;
                emit_bytes(out, &buf)?;
            } else {
                emit(out, &reports)?;
            }
        }
        Command::Steer {
            image,
            prompt,
            patches,
            weight,
            targets,
            ..
        } => {
            let body = SteerBody {
                dataset_id: dataset(&common)?.to_string(),
                image_id: image,
                prompt,
                selected_patches: patches.into_iter().collect(),
                weight,
                target_words: targets.into_iter().collect(),
            };
            let adapter = env.adapter()?;
            emit(out, &ops::steer(store, adapter.as_ref(), &body)?)?;
        }
        Command::SteerBatch {
            images,
            prompt,
            targets,
            csv,
            ..
        } => {
            let id = dataset(&common)?.to_string();
            let image_ids = if images.is_empty() {
                DatasetView::open(store, &id)?
                    .manifest()
                    .records
                    .iter()
                    .map(|r| r.id.clone())
                    .collect()
            } else {
                images
            };
            let body = SteerBatchBody {
                dataset_id: id,
                image_ids,
                prompt,
                target_words: targets.into_iter().collect::<BTreeSet<_>>(),
                per_image_weights: None,
            };
            let adapter = env.adapter()?;
            let resp = ops::steer_batch(store, adapter.as_ref(), &body)?;
            if csv {
                let mut buf = Vec::new();
                resp.report.write_csv(&mut buf)?;
                emit_bytes(out, &buf)?;
            } else {
                emit(out, &resp)?;
            }
        }
        Command::Serve { addr, .. } => {
            let adapter = env.adapter()?;
            let state = crate::api::AppState::new(env.store.clone(), adapter);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                log::info!("listening on {addr}");
                axum::serve(listener, crate::api::router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
    }
    Ok(())
}
