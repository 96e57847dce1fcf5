//! Caption corpus analytics: tokenization, co-occurrence graph, ITM score
//! histogram and per-word score-range portions.

mod graph;
mod scores;
mod words;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use graph::{build_cooccurrence, build_cooccurrence_with, CoOccurrenceGraph, EdgeEntry, GraphDocument, NodeEntry};
pub use scores::{itm_histogram, word_portions_in_range, word_portions_in_range_with, ScoreHistogram, DEFAULT_BINS};
pub use words::{
    content_word, normalize_word, raw_words, strip_prompt, tokenize_caption, StopWords, ENGLISH_STOPWORDS_VERSION,
};

/// One image's caption with its content words and matching score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub prompt: String,
    pub normalized_words: BTreeSet<String>,
    pub itm_score: f64,
}

impl CaptionRecord {
    pub fn new(
        image_id: impl Into<String>,
        text: impl Into<String>,
        prompt: impl Into<String>,
        itm_score: f64,
        stop: &StopWords,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&itm_score) {
            return Err(invalid(format!("itm score {itm_score} outside [0, 1]")));
        }
        let text = text.into();
        let prompt = prompt.into();
        Ok(Self {
            normalized_words: tokenize_caption(&text, &prompt, stop),
            image_id: image_id.into(),
            text,
            prompt,
            itm_score,
        })
    }
}
