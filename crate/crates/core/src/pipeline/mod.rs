//! Dataset ingest: caption, score, segment, embed, associate, graph.
//!
//! Each stage runs over every image before the next starts. Per-image
//! artifacts double as completion markers, so a re-run skips whatever is
//! already committed and writes nothing new for a finished dataset.

mod view;

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapter::{AttentionBundle, AttentionSource, CaptionResult, ImageRef, ModelAdapter, DEFAULT_PROMPT};
use crate::association::{
    build_association, coverage, union_associations, AssociationMatrix, AssociationOptions, MatrixIndex,
    DEFAULT_COVERAGE_K, DEFAULT_LAYER,
};
use crate::corpus::{build_cooccurrence_with, CaptionRecord, StopWords, DEFAULT_BINS, ENGLISH_STOPWORDS_VERSION};
use crate::error::{invalid, Error, Result};
use crate::mask::RawMask;
use crate::par::Exec;
use crate::segments::Projector;
use crate::segments::{filter_segments, SegmentRecord, Tsne, DEFAULT_IOU_THRESH, DEFAULT_MIN_AREA_FRAC};
use crate::store::tensor::TensorBlob;
use crate::store::{valid_component, Artifact, ArtifactKey, ArtifactStore, Json, Stage};

pub use view::{highlight_spans, DatasetView, SegmentDetail};

/// Class used for dataset-level artifacts.
pub const DATASET_CLASS: &str = "_dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub min_area_frac: f64,
    pub iou_thresh: f64,
    pub layer: usize,
    pub coverage_k: usize,
    pub prompt: String,
    pub histogram_bins: usize,
    pub projection_seed: u64,
    pub stop_words_version: String,
    pub adapter: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_area_frac: DEFAULT_MIN_AREA_FRAC,
            iou_thresh: DEFAULT_IOU_THRESH,
            layer: DEFAULT_LAYER,
            coverage_k: DEFAULT_COVERAGE_K,
            prompt: DEFAULT_PROMPT.to_string(),
            histogram_bins: DEFAULT_BINS,
            projection_seed: 0,
            stop_words_version: ENGLISH_STOPWORDS_VERSION.to_string(),
            adapter: "mock".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_area_frac) || !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(invalid("segment thresholds must lie in [0, 1]"));
        }
        if self.coverage_k == 0 || self.histogram_bins == 0 {
            return Err(invalid("coverage k and histogram bins must be positive"));
        }
        self.stop_words()?;
        Ok(())
    }

    pub fn stop_words(&self) -> Result<StopWords> {
        if self.stop_words_version == ENGLISH_STOPWORDS_VERSION {
            Ok(StopWords::english())
        } else {
            Err(invalid(format!("unknown stop-word list {:?}", self.stop_words_version)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub label: String,
    #[serde(default)]
    pub split: String,
}

impl DatasetRecord {
    pub fn image(&self) -> Result<ImageRef> {
        ImageRef::new(self.id.clone(), self.width, self.height, self.path.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub records: Vec<DatasetRecord>,
    #[serde(default)]
    pub config: PipelineConfig,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !valid_component(&self.dataset_id) {
            return Err(invalid(format!("invalid dataset id {:?}", self.dataset_id)));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !valid_component(&r.id) || r.id.contains('@') {
                return Err(invalid(format!("invalid image id {:?}", r.id)));
            }
            if !valid_component(&r.label) || r.label == DATASET_CLASS {
                return Err(invalid(format!("invalid class label {:?} for image {}", r.label, r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(invalid(format!("duplicate image id {}", r.id)));
            }
            r.image()?;
        }
        self.config.validate()
    }

    pub fn record(&self, image_id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == image_id)
    }
}

/// Validate and store a manifest; refused once artifacts exist unless it is
/// unchanged.
pub fn register_dataset(store: &ArtifactStore, manifest: &DatasetManifest) -> Result<bool> {
    manifest.validate()?;
    store.save_manifest(&manifest.dataset_id, manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestStage {
    Caption,
    Score,
    Segment,
    Embed,
    Associate,
    Graph,
}

impl IngestStage {
    pub const ALL: [IngestStage; 6] = [
        IngestStage::Caption,
        IngestStage::Score,
        IngestStage::Segment,
        IngestStage::Embed,
        IngestStage::Associate,
        IngestStage::Graph,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProgress {
    pub stage: IngestStage,
    pub total: u64,
    pub done: u64,
    pub skipped: u64,
    pub failed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub stage: IngestStage,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestJob {
    pub job_id: String,
    pub dataset_id: String,
    pub state: JobState,
    pub stages: Vec<StageProgress>,
    pub errors: Vec<ImageFailure>,
    pub writes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl IngestJob {
    pub fn new(job_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        Self {
            job_id: job_id.into(),
            dataset_id: dataset_id.into(),
            state: JobState::Pending,
            stages: IngestStage::ALL
                .iter()
                .map(|&stage| StageProgress {
                    stage,
                    total: 0,
                    done: 0,
                    skipped: 0,
                    failed: 0,
                })
                .collect(),
            errors: Vec::new(),
            writes: 0,
            message: None,
        }
    }

    pub fn progress(&self, stage: IngestStage) -> &StageProgress {
        &self.stages[stage as usize]
    }
}

/// Serialized score stage output that accompanies the stored tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub itm_score: f64,
    pub tokens: Vec<String>,
    pub layers: usize,
    pub heads: usize,
    pub p: usize,
}

pub(crate) fn key(dataset: &str, class: &str, stage: Stage, name: &str) -> Result<ArtifactKey> {
    ArtifactKey::new(dataset, class, stage, name)
}

pub(crate) fn dataset_key(dataset: &str, stage: Stage, name: &str) -> Result<ArtifactKey> {
    key(dataset, DATASET_CLASS, stage, name)
}

fn put_missing<A: Artifact>(store: &ArtifactStore, key: &ArtifactKey, value: &A) -> Result<()> {
    if store.exists::<A>(key) {
        return Ok(());
    }
    match store.put(key, value) {
        Ok(_) | Err(Error::Conflict(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

type Updater<'a> = dyn Fn(&mut dyn FnMut(&mut IngestJob)) + Sync + 'a;

enum Outcome {
    Done,
    Skipped,
}

struct Ctx<'a> {
    store: &'a ArtifactStore,
    adapter: &'a dyn ModelAdapter,
    manifest: &'a DatasetManifest,
    stop: StopWords,
    exec: Exec,
}

impl Ctx<'_> {
    fn ds(&self) -> &str {
        &self.manifest.dataset_id
    }

    fn caption_key(&self, r: &DatasetRecord) -> Result<ArtifactKey> {
        key(self.ds(), &r.label, Stage::Captions, &r.id)
    }

    fn score_key(&self, r: &DatasetRecord) -> Result<ArtifactKey> {
        key(self.ds(), &r.label, Stage::Captions, &format!("{}@score", r.id))
    }

    fn tensor_key(&self, r: &DatasetRecord, which: &str) -> Result<ArtifactKey> {
        key(self.ds(), &r.label, Stage::Tensors, &format!("{}@{which}", r.id))
    }

    fn masks_key(&self, r: &DatasetRecord) -> Result<ArtifactKey> {
        key(self.ds(), &r.label, Stage::Masks, &r.id)
    }

    fn segments_key(&self, r: &DatasetRecord) -> Result<ArtifactKey> {
        key(self.ds(), &r.label, Stage::Segments, &r.id)
    }

    fn matrix_keys(&self, r: &DatasetRecord) -> Result<(ArtifactKey, ArtifactKey)> {
        Ok((
            key(self.ds(), &r.label, Stage::Matrices, &r.id)?,
            key(self.ds(), &r.label, Stage::Matrices, &format!("{}@index", r.id))?,
        ))
    }

    fn run(&self, stage: IngestStage, r: &DatasetRecord) -> Result<Outcome> {
        match stage {
            IngestStage::Caption => self.caption(r),
            IngestStage::Score => self.score(r),
            IngestStage::Segment => self.segment(r),
            IngestStage::Embed => self.embed(r),
            IngestStage::Associate => self.associate(r),
            IngestStage::Graph => Err(invalid("graph is a dataset-level stage")),
        }
    }

    fn caption(&self, r: &DatasetRecord) -> Result<Outcome> {
        let k = self.caption_key(r)?;
        if self.store.exists::<Json<CaptionResult>>(&k) {
            return Ok(Outcome::Skipped);
        }
        let caption = self
            .adapter
            .generate_caption(&r.image()?, &self.manifest.config.prompt, None)?;
        put_missing(self.store, &k, &Json(caption))?;
        Ok(Outcome::Done)
    }

    fn score(&self, r: &DatasetRecord) -> Result<Outcome> {
        let k = self.score_key(r)?;
        if self.store.exists::<Json<ScoreRecord>>(&k) {
            return Ok(Outcome::Skipped);
        }
        let caption: CaptionResult = self.store.get_json(&self.caption_key(r)?)?;
        let bundle = self
            .adapter
            .score_and_attend(&r.image()?, &caption.text, AttentionSource::Itm)?;
        let itm = bundle
            .itm_score
            .ok_or_else(|| Error::Adapter(format!("no matching score for image {}", r.id)))?;
        let dims = vec![
            bundle.layers as u64,
            bundle.heads as u64,
            bundle.patch_count() as u64,
            bundle.token_count() as u64,
        ];
        let grads = bundle
            .gradients_raw()
            .ok_or_else(|| Error::Adapter(format!("no gradients for image {}", r.id)))?;
        put_missing(
            self.store,
            &self.tensor_key(r, "attention")?,
            &TensorBlob::new(dims.clone(), bundle.attention_raw().to_vec())?,
        )?;
        put_missing(
            self.store,
            &self.tensor_key(r, "gradients")?,
            &TensorBlob::new(dims, grads.to_vec())?,
        )?;
        let record = ScoreRecord {
            itm_score: itm as f64,
            tokens: bundle.tokens.clone(),
            layers: bundle.layers,
            heads: bundle.heads,
            p: bundle.p,
        };
        put_missing(self.store, &k, &Json(record))?;
        Ok(Outcome::Done)
    }

    fn segment(&self, r: &DatasetRecord) -> Result<Outcome> {
        let k = self.masks_key(r)?;
        if self.store.exists::<Json<Vec<RawMask>>>(&k) {
            return Ok(Outcome::Skipped);
        }
        let image = r.image()?;
        let raw = self.adapter.segment_image(&image)?;
        let cfg = &self.manifest.config;
        let kept = filter_segments(&raw, &image, cfg.min_area_frac, cfg.iou_thresh);
        put_missing(self.store, &k, &Json(kept))?;
        Ok(Outcome::Done)
    }

    fn embed(&self, r: &DatasetRecord) -> Result<Outcome> {
        let k = self.segments_key(r)?;
        if self.store.exists::<Json<Vec<SegmentRecord>>>(&k) {
            return Ok(Outcome::Skipped);
        }
        let image = r.image()?;
        let masks: Vec<RawMask> = self.store.get_json(&self.masks_key(r)?)?;
        let records = masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| {
                Ok(SegmentRecord {
                    segment_id: format!("{}:{}:{i}", self.ds(), r.id),
                    image_id: r.id.clone(),
                    embedding: self.adapter.embed_segment(&image, &mask)?,
                    area_fraction: mask.area_fraction(),
                    mask,
                    xy: [0.0, 0.0],
                    coverage: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        put_missing(self.store, &k, &Json(records))?;
        Ok(Outcome::Done)
    }

    fn caption_record(&self, r: &DatasetRecord) -> Result<CaptionRecord> {
        let caption: CaptionResult = self.store.get_json(&self.caption_key(r)?)?;
        let score: ScoreRecord = self.store.get_json(&self.score_key(r)?)?;
        CaptionRecord::new(r.id.clone(), caption.text, caption.prompt, score.itm_score, &self.stop)
    }

    fn associate(&self, r: &DatasetRecord) -> Result<Outcome> {
        let (mk, ik) = self.matrix_keys(r)?;
        if self.store.exists::<Json<MatrixIndex>>(&ik) {
            return Ok(Outcome::Skipped);
        }
        let image = r.image()?;
        let caption = self.caption_record(r)?;
        let segments: Vec<SegmentRecord> = self.store.get_json(&self.segments_key(r)?)?;
        let bundle = load_layer_bundle(self.store, self.ds(), r, self.manifest.config.layer)?;
        let options = AssociationOptions {
            layer: 0,
            clamp_gradients: true,
            stop_words: self.stop.clone(),
            exec: Exec::Sequential,
        };
        let matrix = build_association(&image, &caption, &segments, &bundle, &options)?;
        put_missing(self.store, &mk, &matrix.to_tensor())?;
        put_missing(self.store, &ik, &Json(matrix.index()))?;
        Ok(Outcome::Done)
    }

    fn load_matrix(&self, r: &DatasetRecord) -> Result<AssociationMatrix> {
        let (mk, ik) = self.matrix_keys(r)?;
        AssociationMatrix::from_parts(self.store.get_json(&ik)?, &self.store.get_key(&mk)?)
    }

    /// Dataset-level artifacts over the images that made it through
    /// association.
    fn graph(&self, ok: &[&DatasetRecord]) -> Result<Outcome> {
        let ds = self.ds();
        let graph_key = dataset_key(ds, Stage::Graphs, "cooccurrence")?;
        let captions_key = dataset_key(ds, Stage::Reports, "captions")?;
        let union_key = dataset_key(ds, Stage::Matrices, "union")?;
        let union_index_key = dataset_key(ds, Stage::Matrices, "union@index")?;
        let segments_key = dataset_key(ds, Stage::Segments, "index")?;
        let all_present = self.store.exists::<Json<serde_json::Value>>(&graph_key)
            && self.store.exists::<Json<serde_json::Value>>(&captions_key)
            && self.store.exists::<TensorBlob>(&union_key)
            && self.store.exists::<Json<serde_json::Value>>(&union_index_key)
            && self.store.exists::<Json<serde_json::Value>>(&segments_key);
        if all_present {
            return Ok(Outcome::Skipped);
        }
        let captions = ok.iter().map(|r| self.caption_record(r)).collect::<Result<Vec<_>>>()?;
        let graph = build_cooccurrence_with(self.exec, &captions);
        let matrices = ok.iter().map(|r| self.load_matrix(r)).collect::<Result<Vec<_>>>()?;
        let union = union_associations(&matrices)?;
        let cov = coverage(&matrices, self.manifest.config.coverage_k)?;
        let mut segments = Vec::new();
        for r in ok {
            let recs: Vec<SegmentRecord> = self.store.get_json(&self.segments_key(r)?)?;
            segments.extend(recs);
        }
        if !segments.is_empty() {
            let embeddings: Vec<Vec<f32>> = segments.iter().map(|s| s.embedding.clone()).collect();
            let tsne = Tsne {
                exec: self.exec,
                ..Tsne::default()
            };
            let xy = tsne.project(&embeddings, self.manifest.config.projection_seed)?;
            for (s, p) in segments.iter_mut().zip(xy) {
                s.xy = p;
                s.coverage = cov.get(&s.segment_id).copied().unwrap_or(0);
            }
        }
        put_missing(self.store, &captions_key, &Json(captions))?;
        put_missing(self.store, &graph_key, &Json(graph.to_document(None)))?;
        put_missing(self.store, &union_key, &union.to_tensor())?;
        put_missing(self.store, &union_index_key, &Json(union.index()))?;
        put_missing(self.store, &segments_key, &Json(segments))?;
        Ok(Outcome::Done)
    }
}

/// Load one layer of a stored attention bundle as a single-layer bundle.
pub(crate) fn load_layer_bundle(
    store: &ArtifactStore,
    dataset: &str,
    r: &DatasetRecord,
    layer: usize,
) -> Result<AttentionBundle> {
    let score: ScoreRecord = store.get_json(&key(dataset, &r.label, Stage::Captions, &format!("{}@score", r.id))?)?;
    if layer >= score.layers {
        return Err(invalid(format!("layer {layer} outside 0..{}", score.layers)));
    }
    let slice = |which: &str| -> Result<Vec<f32>> {
        let k = key(dataset, &r.label, Stage::Tensors, &format!("{}@{which}", r.id))?;
        Ok(TensorBlob::read_outer_slice(&store.path_for(&k, TensorBlob::EXT), layer as u64)?.into_data())
    };
    AttentionBundle::new(
        AttentionSource::Itm,
        1,
        score.heads,
        score.p,
        score.tokens,
        slice("attention")?,
        Some(slice("gradients")?),
        Some(score.itm_score as f32),
    )
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub exec: Exec,
}

/// Run (or resume) ingest for a registered dataset.
pub fn run_ingest(
    store: &ArtifactStore,
    adapter: &dyn ModelAdapter,
    dataset_id: &str,
    options: &IngestOptions,
) -> Result<IngestJob> {
    let job = Mutex::new(IngestJob::new(format!("{dataset_id}-ingest"), dataset_id));
    run_ingest_tracked(store, adapter, dataset_id, options, &job)?;
    Ok(job.into_inner().expect("job lock poisoned"))
}

/// Like [`run_ingest`], updating `job` as images complete so another thread
/// can poll it.
pub fn run_ingest_tracked(
    store: &ArtifactStore,
    adapter: &dyn ModelAdapter,
    dataset_id: &str,
    options: &IngestOptions,
    job: &Mutex<IngestJob>,
) -> Result<()> {
    let update = |f: &mut dyn FnMut(&mut IngestJob)| f(&mut job.lock().expect("job lock poisoned"));
    let result = ingest_inner(store, adapter, dataset_id, options, &update);
    update(&mut |j| match &result {
        Ok(()) if j.state != JobState::Failed => j.state = JobState::Done,
        Ok(()) => {}
        Err(e) => {
            j.state = JobState::Failed;
            j.message = Some(e.to_string());
        }
    });
    result
}

fn ingest_inner(
    store: &ArtifactStore,
    adapter: &dyn ModelAdapter,
    dataset_id: &str,
    options: &IngestOptions,
    update: &Updater<'_>,
) -> Result<()> {
    let manifest: DatasetManifest = store.load_manifest(dataset_id)?;
    manifest.validate()?;
    if manifest.dataset_id != dataset_id {
        return Err(Error::Data(format!(
            "manifest under {dataset_id} names {}",
            manifest.dataset_id
        )));
    }
    if manifest.config.adapter != adapter.name() {
        log::warn!(
            "dataset {dataset_id} was configured for adapter {:?} but runs with {:?}",
            manifest.config.adapter,
            adapter.name()
        );
    }
    let writes_before = store.write_count();
    update(&mut |j| j.state = JobState::Running);
    let ctx = Ctx {
        store,
        adapter,
        stop: manifest.config.stop_words()?,
        manifest: &manifest,
        exec: options.exec,
    };
    let mut alive: Vec<&DatasetRecord> = manifest.records.iter().collect();
    for stage in &IngestStage::ALL[..5] {
        let stage = *stage;
        update(&mut |j| j.stages[stage as usize].total = alive.len() as u64);
        let outcomes = options.exec.map_bounded(adapter.max_concurrency(), &alive, |r| {
            let out = ctx.run(stage, r);
            update(&mut |j| {
                let p = &mut j.stages[stage as usize];
                match &out {
                    Ok(Outcome::Done) => p.done += 1,
                    Ok(Outcome::Skipped) => p.skipped += 1,
                    Err(_) => p.failed += 1,
                }
            });
            out
        });
        let mut next = Vec::with_capacity(alive.len());
        for (r, out) in alive.iter().zip(outcomes) {
            match out {
                Ok(_) => next.push(*r),
                Err(e) => {
                    log::warn!("image {} failed at {stage:?}: {e}", r.id);
                    let failure = ImageFailure {
                        image_id: r.id.clone(),
                        stage,
                        error: e.to_string(),
                    };
                    update(&mut |j| j.errors.push(failure.clone()));
                }
            }
        }
        alive = next;
    }
    update(&mut |j| j.stages[IngestStage::Graph as usize].total = 1);
    if alive.is_empty() && !manifest.records.is_empty() {
        update(&mut |j| {
            j.state = JobState::Failed;
            j.message = Some("every image failed".into());
        });
        return Ok(());
    }
    let outcome = ctx.graph(&alive)?;
    let failures = update_collect(update);
    if !failures.is_empty() {
        put_missing(
            store,
            &dataset_key(dataset_id, Stage::Reports, "failures")?,
            &Json(failures),
        )?;
    }
    let writes = store.write_count() - writes_before;
    update(&mut |j| {
        let p = &mut j.stages[IngestStage::Graph as usize];
        match outcome {
            Outcome::Done => p.done = 1,
            Outcome::Skipped => p.skipped = 1,
        }
        j.writes = writes;
    });
    Ok(())
}

fn update_collect(update: &Updater<'_>) -> Vec<ImageFailure> {
    let mut out = Vec::new();
    update(&mut |j| out = j.errors.clone());
    out
}
