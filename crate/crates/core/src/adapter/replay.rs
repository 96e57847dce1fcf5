//! Serves model outputs that were exported offline from a real backend.
//!
//! The directory holds a `replay.json` index plus tensor files in the
//! store's binary tensor format, each shaped `[layers, heads, p², t]`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    check_mask_for_image, effective_weights, split_tokens, weights_digest, AttentionBundle, AttentionSource,
    CaptionResult, DecodeParams, ImageRef, ModelAdapter, PatchGrid, RawMask,
};
use crate::error::{invalid, Error, Result};
use crate::store::tensor::TensorBlob;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayCaption {
    pub image_id: String,
    pub prompt: String,
    /// Digest of the effective patch weights, `"identity"` for none.
    #[serde(default = "identity")]
    pub weights_digest: String,
    pub caption: String,
}

fn identity() -> String {
    "identity".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBundle {
    pub image_id: String,
    pub caption: String,
    pub source: AttentionSource,
    pub attention: PathBuf,
    #[serde(default)]
    pub gradients: Option<PathBuf>,
    #[serde(default)]
    pub itm_score: Option<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayEmbedding {
    pub image_id: String,
    /// RLE count string of the mask the vector belongs to.
    pub mask_counts: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayIndex {
    pub grid: PatchGrid,
    pub layers: usize,
    pub heads: usize,
    pub embedding_dim: usize,
    #[serde(default = "one")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub captions: Vec<ReplayCaption>,
    #[serde(default)]
    pub bundles: Vec<ReplayBundle>,
    #[serde(default)]
    pub masks: Vec<RawMask>,
    #[serde(default)]
    pub embeddings: Vec<ReplayEmbedding>,
}

fn one() -> usize {
    1
}

pub struct ReplayAdapter {
    dir: PathBuf,
    index: ReplayIndex,
    captions: HashMap<(String, String, String), String>,
    bundles: HashMap<(String, String, AttentionSource), ReplayBundle>,
    masks: HashMap<String, Vec<RawMask>>,
    embeddings: HashMap<(String, String), Vec<f32>>,
}

impl ReplayAdapter {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("replay.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Adapter(format!("cannot read replay index {}: {e}", path.display())))?;
        let index: ReplayIndex = serde_json::from_str(&text)?;
        Ok(Self::from_index(dir.to_path_buf(), index))
    }

    pub fn from_index(dir: PathBuf, index: ReplayIndex) -> Self {
        let captions = index
            .captions
            .iter()
            .map(|c| {
                (
                    (c.image_id.clone(), c.prompt.clone(), c.weights_digest.clone()),
                    c.caption.clone(),
                )
            })
            .collect();
        let bundles = index
            .bundles
            .iter()
            .map(|b| {
                (
                    (b.image_id.clone(), split_tokens(&b.caption).join(" "), b.source),
                    b.clone(),
                )
            })
            .collect();
        let mut masks: HashMap<String, Vec<RawMask>> = HashMap::new();
        for m in &index.masks {
            masks.entry(m.image_id().to_string()).or_default().push(m.clone());
        }
        let embeddings = index
            .embeddings
            .iter()
            .map(|e| ((e.image_id.clone(), e.mask_counts.clone()), e.vector.clone()))
            .collect();
        Self {
            dir,
            index,
            captions,
            bundles,
            masks,
            embeddings,
        }
    }

    fn load_tensor(&self, rel: &Path, t: usize) -> Result<Vec<f32>> {
        let bytes = std::fs::read(self.dir.join(rel))?;
        let blob = TensorBlob::from_bytes(&bytes)?;
        let want = [
            self.index.layers as u64,
            self.index.heads as u64,
            self.index.grid.patch_count() as u64,
            t as u64,
        ];
        if blob.dims() != want {
            return Err(Error::Data(format!(
                "tensor {} has dims {:?}, expected {want:?}",
                rel.display(),
                blob.dims()
            )));
        }
        Ok(blob.into_data())
    }

    fn bundle(
        &self,
        image: &ImageRef,
        caption: &str,
        source: AttentionSource,
        with_gradients: bool,
    ) -> Result<AttentionBundle> {
        let tokens = split_tokens(caption);
        if tokens.is_empty() {
            return Err(invalid("caption tokenizes to zero tokens"));
        }
        let key = (image.id.clone(), tokens.join(" "), source);
        let entry = self
            .bundles
            .get(&key)
            .ok_or_else(|| Error::NotFound(format!("no exported tensors for {} / {:?}", image.id, key.1)))?;
        let t = tokens.len();
        let attention = self.load_tensor(&entry.attention, t)?;
        let gradients = if with_gradients {
            let rel = entry
                .gradients
                .as_ref()
                .ok_or_else(|| Error::Data(format!("no exported gradients for {}", image.id)))?;
            Some(self.load_tensor(rel, t)?)
        } else {
            None
        };
        AttentionBundle::new(
            source,
            self.index.layers,
            self.index.heads,
            self.index.grid.p,
            tokens,
            attention,
            gradients,
            entry.itm_score,
        )
    }
}

impl ModelAdapter for ReplayAdapter {
    fn name(&self) -> &str {
        "replay"
    }

    fn grid(&self) -> PatchGrid {
        self.index.grid
    }

    fn max_concurrency(&self) -> usize {
        self.index.max_concurrency.max(1)
    }

    fn embedding_dim(&self) -> usize {
        self.index.embedding_dim
    }

    fn generate_caption(&self, image: &ImageRef, prompt: &str, patch_weights: Option<&[f32]>) -> Result<CaptionResult> {
        let weights = effective_weights(patch_weights, &self.index.grid)?;
        let key = (image.id.clone(), prompt.to_string(), weights_digest(weights));
        let text = self
            .captions
            .get(&key)
            .ok_or_else(|| Error::NotFound(format!("no exported caption for {} with prompt {prompt:?}", image.id)))?;
        Ok(CaptionResult::from_text(text, prompt, self.index.decode))
    }

    fn score_and_attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle> {
        self.bundle(image, caption, source, true)
    }

    fn attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle> {
        self.bundle(image, caption, source, false)
    }

    fn segment_image(&self, image: &ImageRef) -> Result<Vec<RawMask>> {
        let masks = self.masks.get(&image.id).cloned().unwrap_or_default();
        for m in &masks {
            check_mask_for_image(image, m)?;
        }
        Ok(masks)
    }

    fn embed_segment(&self, image: &ImageRef, mask: &RawMask) -> Result<Vec<f32>> {
        check_mask_for_image(image, mask)?;
        let v = self
            .embeddings
            .get(&(image.id.clone(), mask.to_rle().counts))
            .ok_or_else(|| Error::NotFound(format!("no exported embedding for a mask of {}", image.id)))?;
        if v.len() != self.index.embedding_dim {
            return Err(invalid(format!(
                "embedding has {} dims, adapter declares {}",
                v.len(),
                self.index.embedding_dim
            )));
        }
        Ok(v.clone())
    }
}
