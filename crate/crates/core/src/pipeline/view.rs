use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{dataset_key, key, load_layer_bundle, DatasetManifest, DatasetRecord};
use crate::association::{
    compute_gradcam, drop_stopword_columns, overlay_png, resize_map, top_words_for_segment, word_attention_colors,
    AssociationMatrix, Heatmap,
};
use crate::corpus::{
    content_word, itm_histogram, strip_prompt, word_portions_in_range, CaptionRecord, CoOccurrenceGraph, GraphDocument,
    ScoreHistogram, StopWords,
};
use crate::error::{Error, Result};
use crate::segments::SegmentRecord;
use crate::store::{ArtifactStore, Stage};

/// Byte ranges of the caption words (after the prompt) that normalize to
/// `word`.
pub fn highlight_spans(text: &str, prompt: &str, word: &str, stop: &StopWords) -> Vec<[usize; 2]> {
    let body = strip_prompt(text, prompt);
    let offset = text.len() - body.len();
    let is_word = |c: char| c.is_alphanumeric() || c == '\'';
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in body.char_indices().chain(std::iter::once((body.len(), ' '))) {
        match (start, is_word(c)) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                let token = &body[s..i];
                let trimmed = token.trim_matches('\'');
                if content_word(trimmed, stop).as_deref() == Some(word) {
                    let lead = token.len() - token.trim_start_matches('\'').len();
                    out.push([offset + s + lead, offset + s + lead + trimmed.len()]);
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentDetail {
    pub segment: SegmentRecord,
    pub caption: String,
    pub highlights: Vec<[usize; 2]>,
    pub top_words: Vec<(String, f64)>,
    pub word: Option<String>,
    pub score: Option<f64>,
    /// PNG of the word's heatmap with the segment emphasized.
    #[serde(skip)]
    pub overlay_png: Option<Vec<u8>>,
}

/// Read access to a fully ingested dataset.
pub struct DatasetView<'a> {
    store: &'a ArtifactStore,
    manifest: DatasetManifest,
    stop: StopWords,
}

impl<'a> DatasetView<'a> {
    pub fn open(store: &'a ArtifactStore, dataset_id: &str) -> Result<Self> {
        let manifest: DatasetManifest = store.load_manifest(dataset_id)?;
        let stop = manifest.config.stop_words()?;
        Ok(Self { store, manifest, stop })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn id(&self) -> &str {
        &self.manifest.dataset_id
    }

    fn not_ingested(e: Error, what: &str) -> Error {
        match e {
            Error::NotFound(_) => Error::NotFound(format!("{what} (dataset not ingested)")),
            e => e,
        }
    }

    pub fn captions(&self) -> Result<Vec<CaptionRecord>> {
        self.store
            .get_json(&dataset_key(self.id(), Stage::Reports, "captions")?)
            .map_err(|e| Self::not_ingested(e, "captions"))
    }

    pub fn graph(&self) -> Result<CoOccurrenceGraph> {
        let doc: GraphDocument = self
            .store
            .get_json(&dataset_key(self.id(), Stage::Graphs, "cooccurrence")?)
            .map_err(|e| Self::not_ingested(e, "graph"))?;
        Ok(CoOccurrenceGraph::from_document(&doc))
    }

    pub fn histogram(&self, bins: Option<usize>) -> Result<ScoreHistogram> {
        let scores: Vec<f64> = self.captions()?.iter().map(|c| c.itm_score).collect();
        itm_histogram(&scores, bins.unwrap_or(self.manifest.config.histogram_bins))
    }

    pub fn portions(&self, lo: f64, hi: f64) -> Result<BTreeMap<String, f64>> {
        word_portions_in_range(&self.captions()?, lo, hi)
    }

    pub fn union(&self) -> Result<AssociationMatrix> {
        let index = self
            .store
            .get_json(&dataset_key(self.id(), Stage::Matrices, "union@index")?)
            .map_err(|e| Self::not_ingested(e, "association matrix"))?;
        let tensor = self.store.get_key(&dataset_key(self.id(), Stage::Matrices, "union")?)?;
        AssociationMatrix::from_parts(index, &tensor)
    }

    /// Per-image association matrix as committed by ingest.
    pub fn image_matrix(&self, image_id: &str) -> Result<AssociationMatrix> {
        let r = self.record(image_id)?;
        let k = |name: &str| key(self.id(), &r.label, Stage::Matrices, name);
        let index = self
            .store
            .get_json(&k(&format!("{image_id}@index"))?)
            .map_err(|e| Self::not_ingested(e, "association matrix"))?;
        AssociationMatrix::from_parts(index, &self.store.get_key(&k(image_id)?)?)
    }

    /// Per-image matrices of every image that made it through ingest.
    pub fn image_matrices(&self) -> Result<Vec<AssociationMatrix>> {
        self.captions()?
            .iter()
            .map(|c| self.image_matrix(&c.image_id))
            .collect()
    }

    pub fn segments(&self) -> Result<Vec<SegmentRecord>> {
        self.store
            .get_json(&dataset_key(self.id(), Stage::Segments, "index")?)
            .map_err(|e| Self::not_ingested(e, "segments"))
    }

    pub fn segment(&self, segment_id: &str) -> Result<SegmentRecord> {
        self.segments()?
            .into_iter()
            .find(|s| s.segment_id == segment_id)
            .ok_or_else(|| Error::NotFound(format!("segment {segment_id}")))
    }

    pub fn word_colors(&self, word: &str) -> Result<BTreeMap<String, f64>> {
        Ok(word_attention_colors(word, &self.union()?))
    }

    pub fn record(&self, image_id: &str) -> Result<&DatasetRecord> {
        self.manifest
            .record(image_id)
            .ok_or_else(|| Error::NotFound(format!("image {image_id}")))
    }

    pub fn caption(&self, image_id: &str) -> Result<CaptionRecord> {
        self.captions()?
            .into_iter()
            .find(|c| c.image_id == image_id)
            .ok_or_else(|| Error::NotFound(format!("caption of image {image_id}")))
    }

    /// Image-sized Grad-CAM map of one caption word at the configured layer.
    pub fn word_heatmap(&self, image_id: &str, word: &str) -> Result<Heatmap> {
        let record = self.record(image_id)?;
        let caption = self.caption(image_id)?;
        let bundle = load_layer_bundle(self.store, self.id(), record, self.manifest.config.layer)?;
        let words = drop_stopword_columns(&compute_gradcam(&bundle, 0, true)?, &caption.prompt, &self.stop);
        let col = words
            .words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::NotFound(format!("word {word:?} in caption of {image_id}")))?;
        resize_map(&words.grid(col), record.width as usize, record.height as usize)
    }

    pub fn segment_detail(&self, segment_id: &str, word: Option<&str>) -> Result<SegmentDetail> {
        let segment = self.segment(segment_id)?;
        let caption = self.caption(&segment.image_id)?;
        let union = self.union()?;
        let top_words = top_words_for_segment(segment_id, &union, usize::MAX)?;
        let (highlights, score, overlay) = match word {
            Some(w) => {
                let map = self.word_heatmap(&segment.image_id, w)?;
                (
                    highlight_spans(&caption.text, &caption.prompt, w, &self.stop),
                    union.cell(segment_id, w),
                    Some(overlay_png(&map, &segment.mask)?),
                )
            }
            None => (Vec::new(), None, None),
        };
        Ok(SegmentDetail {
            segment,
            caption: caption.text,
            highlights,
            top_words,
            word: word.map(str::to_string),
            score,
            overlay_png: overlay,
        })
    }
}
