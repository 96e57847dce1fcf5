//! Operations shared by the HTTP handlers and the CLI.

use std::collections::{BTreeMap, BTreeSet};

use base64::Engine;
use caplens_core::adapter::{ModelAdapter, DEFAULT_PROMPT};
use caplens_core::association::{coverage, AssociationMatrix, Scope};
use caplens_core::corpus::GraphDocument;
use caplens_core::error::Error;
use caplens_core::par::Exec;
use caplens_core::pipeline::DatasetView;
use caplens_core::steering::{self, BatchReport, SteerRequest, SteerResult};
use caplens_core::store::rle::Rle;
use caplens_core::store::{ArtifactKey, ArtifactStore, Json, Stage};
use caplens_core::Result;
use serde::{Deserialize, Serialize};

/// Class under which steering results are stored.
pub const STEER_CLASS: &str = "_steer";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub images: usize,
    pub ingested: bool,
}

pub fn list_datasets(store: &ArtifactStore) -> Result<Vec<DatasetSummary>> {
    store
        .list_datasets()?
        .into_iter()
        .map(|id| {
            let view = DatasetView::open(store, &id)?;
            Ok(DatasetSummary {
                images: view.manifest().records.len(),
                ingested: view.captions().is_ok(),
                dataset_id: id,
            })
        })
        .collect()
}

pub fn graph(view: &DatasetView, min_node: u64, min_edge: u64) -> Result<GraphDocument> {
    Ok(view.graph()?.filtered(min_node, min_edge).to_document(None))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Portions {
    pub lo: f64,
    pub hi: f64,
    pub portions: BTreeMap<String, f64>,
}

pub fn portions(view: &DatasetView, lo: f64, hi: f64) -> Result<Portions> {
    Ok(Portions {
        lo,
        hi,
        portions: view.portions(lo, hi)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorBy {
    #[default]
    Coverage,
    Attention,
}

impl std::str::FromStr for ColorBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(ColorBy::Coverage),
            "attention" => Ok(ColorBy::Attention),
            _ => Err(Error::Validation(format!(
                "color must be coverage or attention, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPoint {
    pub segment_id: String,
    pub image_id: String,
    pub xy: [f64; 2],
    pub area_fraction: f64,
    pub coverage: u32,
    /// Coverage count or the word's association score; `None` when the
    /// word does not occur in the segment's caption.
    pub value: Option<f64>,
}

pub fn segments(view: &DatasetView, color: ColorBy, word: Option<&str>) -> Result<Vec<SegmentPoint>> {
    let colors = match (color, word) {
        (ColorBy::Attention, Some(w)) => Some(view.word_colors(w)?),
        (ColorBy::Attention, None) => return Err(Error::Validation("attention coloring needs a word".into())),
        (ColorBy::Coverage, _) => None,
    };
    Ok(view
        .segments()?
        .into_iter()
        .map(|s| SegmentPoint {
            value: match &colors {
                Some(c) => c.get(&s.segment_id).copied(),
                None => Some(s.coverage as f64),
            },
            segment_id: s.segment_id,
            image_id: s.image_id,
            xy: s.xy,
            area_fraction: s.area_fraction,
            coverage: s.coverage,
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentView {
    pub segment_id: String,
    pub image_id: String,
    pub area_fraction: f64,
    pub xy: [f64; 2],
    pub coverage: u32,
    pub mask: Rle,
    pub caption: String,
    pub highlights: Vec<[usize; 2]>,
    pub top_words: Vec<WordScore>,
    pub word: Option<String>,
    pub score: Option<f64>,
    /// Base64 PNG of the word heatmap over the segment.
    pub overlay_png: Option<String>,
}

/// Dataset id encoded in a segment id (`dataset:image:index`).
pub fn segment_dataset(segment_id: &str) -> Result<&str> {
    match segment_id.split(':').collect::<Vec<_>>().as_slice() {
        [ds, _, _] if !ds.is_empty() => Ok(ds),
        _ => Err(Error::NotFound(format!("segment {segment_id}"))),
    }
}

pub fn segment_view(store: &ArtifactStore, segment_id: &str, word: Option<&str>) -> Result<SegmentView> {
    let view = DatasetView::open(store, segment_dataset(segment_id)?)?;
    let d = view.segment_detail(segment_id, word)?;
    Ok(SegmentView {
        segment_id: d.segment.segment_id,
        image_id: d.segment.image_id,
        area_fraction: d.segment.area_fraction,
        xy: d.segment.xy,
        coverage: d.segment.coverage,
        mask: d.segment.mask.to_rle(),
        caption: d.caption,
        highlights: d.highlights,
        top_words: d
            .top_words
            .into_iter()
            .map(|(word, score)| WordScore { word, score })
            .collect(),
        word: d.word,
        score: d.score,
        overlay_png: d
            .overlay_png
            .map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub scope: Scope,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl From<&AssociationMatrix> for MatrixDoc {
    fn from(m: &AssociationMatrix) -> Self {
        let (r, c) = m.shape();
        Self {
            scope: m.scope.clone(),
            rows: m.rows.clone(),
            cols: m.cols.clone(),
            values: (0..r).map(|i| (0..c).map(|j| m.get(i, j)).collect()).collect(),
        }
    }
}

pub fn coverage_counts(view: &DatasetView, k: usize) -> Result<BTreeMap<String, u32>> {
    coverage(&view.image_matrices()?, k)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteerBody {
    pub dataset_id: String,
    pub image_id: String,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub selected_patches: BTreeSet<usize>,
    #[serde(default = "one")]
    pub weight: f32,
    #[serde(default)]
    pub target_words: BTreeSet<String>,
}

fn one() -> f32 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteerResponse {
    pub artifact_id: String,
    #[serde(flatten)]
    pub result: SteerResult,
}

fn steer_key(dataset: &str, name: &str) -> Result<ArtifactKey> {
    ArtifactKey::new(dataset, STEER_CLASS, Stage::Steering, name)
}

pub fn steer(store: &ArtifactStore, adapter: &dyn ModelAdapter, body: &SteerBody) -> Result<SteerResponse> {
    let view = DatasetView::open(store, &body.dataset_id)?;
    let image = view.record(&body.image_id)?.image()?;
    let prompt = body.prompt.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_string());
    let request = SteerRequest::from_selection(
        &body.image_id,
        prompt,
        &adapter.grid(),
        &body.selected_patches,
        body.weight,
    )?
    .with_targets(body.target_words.iter().cloned());
    let result = steering::steer(adapter, &image, &request)?;
    let artifact_id = store.put_versioned(&steer_key(&body.dataset_id, &body.image_id)?, &Json(result.clone()))?;
    Ok(SteerResponse { artifact_id, result })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteerBatchBody {
    pub dataset_id: String,
    pub image_ids: Vec<String>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub target_words: BTreeSet<String>,
    #[serde(default)]
    pub per_image_weights: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteerBatchResponse {
    pub artifact_id: String,
    #[serde(flatten)]
    pub report: BatchReport,
}

pub fn steer_batch(
    store: &ArtifactStore,
    adapter: &dyn ModelAdapter,
    body: &SteerBatchBody,
) -> Result<SteerBatchResponse> {
    let view = DatasetView::open(store, &body.dataset_id)?;
    let images = body
        .image_ids
        .iter()
        .map(|id| view.record(id)?.image())
        .collect::<Result<Vec<_>>>()?;
    let prompt = body.prompt.as_deref().unwrap_or(DEFAULT_PROMPT);
    let report = steering::steer_batch(
        adapter,
        &images,
        prompt,
        &body.target_words,
        body.per_image_weights.as_deref(),
        Exec::default(),
    )?;
    let artifact_id = store.put_versioned(&steer_key(&body.dataset_id, "batch")?, &Json(report.clone()))?;
    Ok(SteerBatchResponse { artifact_id, report })
}
