//! Model adapter contract.
//!
//! Everything downstream of this module consumes plain values (captions,
//! attention tensors, masks, embeddings); only adapters talk to a model
//! runtime. Two implementations ship here: a seeded [`MockAdapter`] and a
//! [`ReplayAdapter`] that serves outputs exported offline from a real model.

mod mock;
mod replay;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
pub use crate::mask::RawMask;

pub use mock::{CaptionFixture, MockAdapter, MockConfig, MockFixtures};
pub use replay::ReplayAdapter;

/// Default generation prompt.
pub const DEFAULT_PROMPT: &str = "a picture of";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub source_path: String,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, width: u32, height: u32, source_path: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            source_path: source_path.into(),
        })
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Patch grid of the vision encoder: `p x p` patches of `patch_px` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub p: usize,
    pub patch_px: u32,
}

impl Default for PatchGrid {
    fn default() -> Self {
        // 384x384 input with 16-pixel patches
        Self { p: 24, patch_px: 16 }
    }
}

impl PatchGrid {
    pub fn patch_count(&self) -> usize {
        self.p * self.p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    Sample {
        temperature: f32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    #[serde(flatten)]
    pub strategy: DecodeStrategy,
    pub max_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_length: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub text: String,
    pub tokens: Vec<String>,
    pub prompt: String,
    pub decode_params: DecodeParams,
}

impl CaptionResult {
    /// Build from caption text using whitespace detokenization.
    pub fn from_text(text: &str, prompt: &str, decode_params: DecodeParams) -> Self {
        let tokens = split_tokens(text);
        Self {
            text: tokens.join(" "),
            tokens,
            prompt: prompt.to_string(),
            decode_params,
        }
    }
}

/// Token split used by the bundled adapters; joining with a single space
/// reproduces the normalized caption text.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSource {
    Itm,
    Lm,
}

impl AttentionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionSource::Itm => "itm",
            AttentionSource::Lm => "lm",
        }
    }
}

/// Cross-attention and gradient stacks for one image-caption pair.
///
/// Tensors are laid out `[layer][head][patch][token]`, row-major, so each
/// `(layer, head)` slice is a `p² x t` matrix with patches as rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub source: AttentionSource,
    pub layers: usize,
    pub heads: usize,
    pub p: usize,
    pub tokens: Vec<String>,
    pub itm_score: Option<f32>,
    #[serde(skip)]
    attention: Vec<f32>,
    #[serde(skip)]
    gradients: Option<Vec<f32>>,
}

impl AttentionBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source: AttentionSource,
        layers: usize,
        heads: usize,
        p: usize,
        tokens: Vec<String>,
        attention: Vec<f32>,
        gradients: Option<Vec<f32>>,
        itm_score: Option<f32>,
    ) -> Result<Self> {
        let t = tokens.len();
        if t == 0 {
            return Err(invalid("attention bundle needs at least one token"));
        }
        if layers == 0 || heads == 0 || p == 0 {
            return Err(invalid("layers, heads and p must be positive"));
        }
        let expected = layers * heads * p * p * t;
        if attention.len() != expected {
            return Err(invalid(format!(
                "attention has {} values, expected {expected}",
                attention.len()
            )));
        }
        if let Some(g) = &gradients {
            if g.len() != expected {
                return Err(invalid(format!(
                    "gradients have {} values, expected {expected}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(invalid("gradients must be finite"));
            }
        }
        if attention.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(invalid("attention entries must be finite and non-negative"));
        }
        if let Some(s) = itm_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid(format!("itm score {s} outside [0, 1]")));
            }
        }
        Ok(Self {
            source,
            layers,
            heads,
            p,
            tokens,
            itm_score,
            attention,
            gradients,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.p * self.p
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    fn slice_len(&self) -> usize {
        self.patch_count() * self.token_count()
    }

    fn check(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.layers {
            return Err(invalid(format!("layer {layer} out of range 0..{}", self.layers)));
        }
        if head >= self.heads {
            return Err(invalid(format!("head {head} out of range 0..{}", self.heads)));
        }
        Ok((layer * self.heads + head) * self.slice_len())
    }

    /// `p² x t` attention of one head.
    pub fn attention(&self, layer: usize, head: usize) -> Result<&[f32]> {
        let off = self.check(layer, head)?;
        Ok(&self.attention[off..off + self.slice_len()])
    }

    /// `p² x t` gradient of one head; a data error when gradients were not
    /// requested from the adapter.
    pub fn gradient(&self, layer: usize, head: usize) -> Result<&[f32]> {
        let off = self.check(layer, head)?;
        let g = self
            .gradients
            .as_ref()
            .ok_or_else(|| Error::Data("bundle carries no gradients".into()))?;
        Ok(&g[off..off + self.slice_len()])
    }

    pub fn has_gradients(&self) -> bool {
        self.gradients.is_some()
    }

    pub fn attention_raw(&self) -> &[f32] {
        &self.attention
    }

    pub fn gradients_raw(&self) -> Option<&[f32]> {
        self.gradients.as_deref()
    }

    pub fn without_gradients(mut self) -> Self {
        self.gradients = None;
        self
    }
}

/// Contract every model backend implements.
///
/// Implementations must be pure functions of their arguments and their own
/// configuration.
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn grid(&self) -> PatchGrid;

    /// Upper bound on concurrent inference calls.
    fn max_concurrency(&self) -> usize {
        1
    }

    fn embedding_dim(&self) -> usize;

    /// Generate a caption. `patch_weights`, when given, scales each patch
    /// embedding before decoding; an all-ones vector is the same as `None`.
    fn generate_caption(&self, image: &ImageRef, prompt: &str, patch_weights: Option<&[f32]>) -> Result<CaptionResult>;

    /// Cross-attention plus gradients of the matching score.
    fn score_and_attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle>;

    /// Cross-attention only. Backends override this when they can skip the
    /// backward pass.
    fn attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle> {
        self.score_and_attend(image, caption, source)
            .map(AttentionBundle::without_gradients)
    }

    fn segment_image(&self, image: &ImageRef) -> Result<Vec<RawMask>>;

    fn embed_segment(&self, image: &ImageRef, mask: &RawMask) -> Result<Vec<f32>>;
}

/// Validate a patch weight vector and collapse the identity vector to `None`.
pub fn effective_weights<'a>(weights: Option<&'a [f32]>, grid: &PatchGrid) -> Result<Option<&'a [f32]>> {
    let Some(w) = weights else { return Ok(None) };
    if w.len() != grid.patch_count() {
        return Err(invalid(format!(
            "patch weight vector has length {}, expected {}",
            w.len(),
            grid.patch_count()
        )));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(invalid(format!(
            "patch weight {i} is {v}; weights must be finite and >= 0"
        )));
    }
    if w.iter().all(|&v| v == 1.0) {
        Ok(None)
    } else {
        Ok(Some(w))
    }
}

pub(crate) fn check_mask_for_image(image: &ImageRef, mask: &RawMask) -> Result<()> {
    if mask.dims() != (image.width, image.height) {
        return Err(invalid(format!(
            "mask is {:?} but image {} is {}x{}",
            mask.dims(),
            image.id,
            image.width,
            image.height
        )));
    }
    if !mask.image_id().is_empty() && mask.image_id() != image.id {
        return Err(invalid(format!(
            "mask belongs to image {}, not {}",
            mask.image_id(),
            image.id
        )));
    }
    Ok(())
}

/// Adapter selection, keyed by `name`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum AdapterConfig {
    Mock(MockConfig),
    Replay { dir: PathBuf },
    Blip { weights: PathBuf },
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::Mock(MockConfig::default())
    }
}

pub fn build_adapter(config: &AdapterConfig) -> Result<Arc<dyn ModelAdapter>> {
    match config {
        AdapterConfig::Mock(cfg) => Ok(Arc::new(MockAdapter::from_config(cfg.clone())?)),
        AdapterConfig::Replay { dir } => Ok(Arc::new(ReplayAdapter::open(dir)?)),
        AdapterConfig::Blip { weights } => Err(Error::Adapter(format!(
            "no in-process runtime for model weights at {}; export model outputs and use the replay adapter",
            weights.display()
        ))),
    }
}

/// Stable short digest of an effective weight vector; `"identity"` for none.
pub fn weights_digest(weights: Option<&[f32]>) -> String {
    use std::hash::Hasher;
    match weights {
        None => "identity".to_string(),
        Some(w) => {
            let mut h = fnv::FnvHasher::default();
            for v in w {
                h.write(&v.to_le_bytes());
            }
            format!("{:016x}", h.finish())
        }
    }
}
