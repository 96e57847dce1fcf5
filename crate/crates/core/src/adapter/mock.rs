//! Seeded, fixture-driven adapter for tests and offline demos.
//!
//! Every output is a pure function of `(seed, image id, arguments)`:
//! captions come from a fixture table keyed by image id and prompt (falling
//! back to a seeded template), tensors from a ChaCha stream keyed by the
//! image id and caption, and masks from fixtures or seeded shapes.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_mask_for_image, effective_weights, split_tokens, AttentionBundle, AttentionSource, CaptionResult,
    DecodeParams, DecodeStrategy, ImageRef, ModelAdapter, PatchGrid, RawMask,
};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub grid: PatchGrid,
    pub layers: usize,
    pub heads: usize,
    pub embedding_dim: usize,
    pub max_concurrency: usize,
    pub decode: DecodeParams,
    /// Directory holding `fixtures.json`.
    pub fixtures_dir: Option<PathBuf>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: PatchGrid::default(),
            layers: 12,
            heads: 12,
            embedding_dim: 8,
            max_concurrency: 8,
            decode: DecodeParams::default(),
            fixtures_dir: None,
        }
    }
}

/// One row of the caption lookup table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionFixture {
    pub image_id: String,
    pub prompt: String,
    pub caption: String,
    /// Returned when any patch weight is above 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emphasized: Option<String>,
    /// Returned when weights only go below 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm_score: Option<f32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixtures {
    pub captions: Vec<CaptionFixture>,
    pub masks: Vec<RawMask>,
    /// Images whose decode fails.
    pub failing_images: BTreeSet<String>,
    /// When non-empty, any other image id is reported as not found.
    pub known_images: BTreeSet<String>,
}

impl MockFixtures {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("fixtures.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Adapter(format!("cannot read mock fixtures {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

type PlantKey = (String, String, AttentionSource);

pub struct MockAdapter {
    config: MockConfig,
    captions: HashMap<(String, String), CaptionFixture>,
    masks: HashMap<String, Vec<RawMask>>,
    failing: BTreeSet<String>,
    known: BTreeSet<String>,
    planted: RwLock<HashMap<PlantKey, AttentionBundle>>,
    gradient_reads: AtomicUsize,
    attention_reads: AtomicUsize,
}

const SUBJECTS: &[&str] = &["man", "woman", "boy", "girl", "dog", "person", "fisherman", "child"];
const ADJECTIVES: &[&str] = &["young", "large", "small", "smiling", "old", "happy"];
const VERBS: &[&str] = &["holding", "standing", "sitting", "wearing", "carrying", "showing"];
const OBJECTS: &[&str] = &["fish", "hat", "net", "boat", "rod", "bucket", "jacket", "bag"];
const PLACES: &[&str] = &[
    "in the water",
    "on a boat",
    "near a lake",
    "on the grass",
    "in a field",
    "by a river",
];

impl MockAdapter {
    pub fn new(config: MockConfig) -> Self {
        Self {
            config,
            captions: HashMap::new(),
            masks: HashMap::new(),
            failing: BTreeSet::new(),
            known: BTreeSet::new(),
            planted: RwLock::new(HashMap::new()),
            gradient_reads: AtomicUsize::new(0),
            attention_reads: AtomicUsize::new(0),
        }
    }

    /// Build from configuration, loading `fixtures.json` when a directory is set.
    pub fn from_config(config: MockConfig) -> Result<Self> {
        let fixtures = match &config.fixtures_dir {
            Some(dir) => Some(MockFixtures::load(dir)?),
            None => None,
        };
        let adapter = Self::new(config);
        Ok(match fixtures {
            Some(f) => adapter.with_fixtures(f),
            None => adapter,
        })
    }

    pub fn with_fixtures(mut self, fixtures: MockFixtures) -> Self {
        for c in fixtures.captions {
            self.captions.insert((c.image_id.clone(), c.prompt.clone()), c);
        }
        for m in fixtures.masks {
            self.masks.entry(m.image_id().to_string()).or_default().push(m);
        }
        self.failing.extend(fixtures.failing_images);
        self.known.extend(fixtures.known_images);
        self
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Serve `bundle` verbatim for `(image_id, caption, bundle.source)`.
    pub fn plant_bundle(&self, image_id: &str, caption: &str, bundle: AttentionBundle) {
        let key = (image_id.to_string(), normalize_caption(caption), bundle.source);
        self.planted.write().expect("planted lock").insert(key, bundle);
    }

    /// Number of calls that produced gradient tensors.
    pub fn gradient_reads(&self) -> usize {
        self.gradient_reads.load(Ordering::SeqCst)
    }

    /// Number of attention-only calls.
    pub fn attention_reads(&self) -> usize {
        self.attention_reads.load(Ordering::SeqCst)
    }

    fn stream(&self, tag: &str, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write(&self.config.seed.to_le_bytes());
        h.write(tag.as_bytes());
        for p in parts {
            h.write(&(p.len() as u64).to_le_bytes());
            h.write(p);
        }
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    fn check_image(&self, image: &ImageRef) -> Result<()> {
        if !self.known.is_empty() && !self.known.contains(&image.id) {
            return Err(Error::NotFound(format!("image {}", image.id)));
        }
        if self.failing.contains(&image.id) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("cannot decode image {}", image.id),
            )));
        }
        Ok(())
    }

    fn template_caption(&self, image: &ImageRef, prompt: &str, weights: Option<&[f32]>) -> String {
        let weight_bytes: Vec<u8> = weights
            .map(|w| w.iter().flat_map(|v| v.to_le_bytes()).collect())
            .unwrap_or_default();
        let decode_seed = match self.config.decode.strategy {
            DecodeStrategy::Greedy => Vec::new(),
            DecodeStrategy::Sample { .. } => self.config.decode.seed.to_le_bytes().to_vec(),
        };
        let mut rng = self.stream(
            "caption",
            &[image.id.as_bytes(), prompt.as_bytes(), &weight_bytes, &decode_seed],
        );
        let mut pick = |xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
        let text = format!(
            "{prompt} a {} {} {} a {} {}",
            pick(ADJECTIVES),
            pick(SUBJECTS),
            pick(VERBS),
            pick(OBJECTS),
            pick(PLACES)
        );
        let tokens = split_tokens(&text);
        tokens[..tokens.len().min(self.config.decode.max_length.max(1))].join(" ")
    }

    fn attention_tensor(&self, image: &ImageRef, caption: &str, source: AttentionSource, t: usize) -> Vec<f32> {
        let mut rng = self.stream(
            "attention",
            &[image.id.as_bytes(), caption.as_bytes(), source.as_str().as_bytes()],
        );
        let rows = self.config.layers * self.config.heads * self.config.grid.patch_count();
        let mut out = Vec::with_capacity(rows * t);
        let mut row = vec![0f32; t];
        for _ in 0..rows {
            for v in row.iter_mut() {
                *v = rng.random::<f32>() + 1e-3;
            }
            let sum: f32 = row.iter().sum();
            out.extend(row.iter().map(|v| v / sum));
        }
        out
    }

    fn gradient_tensor(&self, image: &ImageRef, caption: &str, source: AttentionSource, t: usize) -> Vec<f32> {
        let mut rng = self.stream(
            "gradient",
            &[image.id.as_bytes(), caption.as_bytes(), source.as_str().as_bytes()],
        );
        let n = self.config.layers * self.config.heads * self.config.grid.patch_count() * t;
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn itm_score(&self, image: &ImageRef, caption: &str) -> f32 {
        let fixed = self
            .captions
            .values()
            .find(|c| c.image_id == image.id && normalize_caption(&c.caption) == caption)
            .and_then(|c| c.itm_score);
        fixed.unwrap_or_else(|| {
            self.stream("itm", &[image.id.as_bytes(), caption.as_bytes()])
                .random::<f32>()
        })
    }

    fn bundle(
        &self,
        image: &ImageRef,
        caption: &str,
        source: AttentionSource,
        with_gradients: bool,
    ) -> Result<AttentionBundle> {
        self.check_image(image)?;
        let caption = normalize_caption(caption);
        let tokens = split_tokens(&caption);
        if tokens.is_empty() {
            return Err(invalid("caption tokenizes to zero tokens"));
        }
        let key = (image.id.clone(), caption.clone(), source);
        if let Some(b) = self.planted.read().expect("planted lock").get(&key) {
            return Ok(if with_gradients {
                b.clone()
            } else {
                b.clone().without_gradients()
            });
        }
        let t = tokens.len();
        let attention = self.attention_tensor(image, &caption, source, t);
        let gradients = with_gradients.then(|| self.gradient_tensor(image, &caption, source, t));
        let itm = match source {
            AttentionSource::Itm => Some(self.itm_score(image, &caption)),
            AttentionSource::Lm => None,
        };
        AttentionBundle::new(
            source,
            self.config.layers,
            self.config.heads,
            self.config.grid.p,
            tokens,
            attention,
            gradients,
            itm,
        )
    }

    fn synthetic_masks(&self, image: &ImageRef) -> Vec<RawMask> {
        let (w, h) = (image.width, image.height);
        let mut rng = self.stream("segment", &[image.id.as_bytes()]);
        let mut masks = Vec::new();
        let n = rng.random_range(3..=5);
        for i in 0..n {
            let bw = ((w as f64 * rng.random_range(0.15..0.5)) as u32).max(1);
            let bh = ((h as f64 * rng.random_range(0.15..0.5)) as u32).max(1);
            let x0 = rng.random_range(0..=w - bw);
            let y0 = rng.random_range(0..=h - bh);
            let mask = if i % 2 == 0 {
                RawMask::rect(image.id.clone(), w, h, x0, y0, x0 + bw, y0 + bh)
            } else {
                let (cx, cy) = (x0 as f64 + bw as f64 / 2.0, y0 as f64 + bh as f64 / 2.0);
                let (rx, ry) = (bw as f64 / 2.0, bh as f64 / 2.0);
                RawMask::from_fn(image.id.clone(), w, h, |x, y| {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                })
            };
            masks.push(mask);
        }
        // near-duplicate of the first shape
        if let Some((x0, y0, x1, y1)) = masks[0].bbox() {
            if x1 > x0 + 20 {
                masks.push(RawMask::rect(image.id.clone(), w, h, x0, y0, x1, y1 + 1));
            }
        }
        // speck well under one percent of the image
        let sx = rng.random_range(0..w);
        let sy = rng.random_range(0..h);
        masks.push(RawMask::rect(
            image.id.clone(),
            w,
            h,
            sx,
            sy,
            (sx + 2).min(w),
            (sy + 2).min(h),
        ));
        masks
    }
}

/// Whitespace-normalized caption text used as a lookup key.
fn normalize_caption(caption: &str) -> String {
    split_tokens(caption).join(" ")
}

impl ModelAdapter for MockAdapter {
    fn name(&self) -> &str {
        "mock"
    }

    fn grid(&self) -> PatchGrid {
        self.config.grid
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency.max(1)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn generate_caption(&self, image: &ImageRef, prompt: &str, patch_weights: Option<&[f32]>) -> Result<CaptionResult> {
        let weights = effective_weights(patch_weights, &self.config.grid)?;
        self.check_image(image)?;
        let fixture = self.captions.get(&(image.id.clone(), prompt.to_string()));
        let text = match (fixture, weights) {
            (Some(f), None) => f.caption.clone(),
            (Some(f), Some(w)) => {
                let emphasized = w.iter().any(|&v| v > 1.0);
                let variant = if emphasized { &f.emphasized } else { &f.suppressed };
                variant.clone().unwrap_or_else(|| f.caption.clone())
            }
            (None, w) => self.template_caption(image, prompt, w),
        };
        Ok(CaptionResult::from_text(&text, prompt, self.config.decode))
    }

    fn score_and_attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle> {
        self.gradient_reads.fetch_add(1, Ordering::SeqCst);
        self.bundle(image, caption, source, true)
    }

    fn attend(&self, image: &ImageRef, caption: &str, source: AttentionSource) -> Result<AttentionBundle> {
        self.attention_reads.fetch_add(1, Ordering::SeqCst);
        self.bundle(image, caption, source, false)
    }

    fn segment_image(&self, image: &ImageRef) -> Result<Vec<RawMask>> {
        self.check_image(image)?;
        Ok(match self.masks.get(&image.id) {
            Some(m) => m.clone(),
            None => self.synthetic_masks(image),
        })
    }

    fn embed_segment(&self, image: &ImageRef, mask: &RawMask) -> Result<Vec<f32>> {
        check_mask_for_image(image, mask)?;
        let (w, h) = (image.width as f64, image.height as f64);
        let (cx, cy) = mask.centroid().unwrap_or((0.0, 0.0));
        let (bw, bh) = mask
            .bbox()
            .map(|(x0, y0, x1, y1)| ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64))
            .unwrap_or((0.0, 0.0));
        let fill = if bw * bh > 0.0 {
            mask.area() as f64 / (bw * bh)
        } else {
            0.0
        };
        let features = [
            cx / w,
            cy / h,
            mask.area_fraction().sqrt(),
            bw / w,
            bh / h,
            fill,
            1.0 - cx / w,
            1.0 - cy / h,
        ];
        let rle = mask.to_rle();
        let mut rng = self.stream("embed", &[image.id.as_bytes(), rle.counts.as_bytes()]);
        Ok((0..self.config.embedding_dim)
            .map(|i| {
                let jitter = rng.random_range(-0.005f64..0.005);
                (features.get(i).copied().unwrap_or(0.0) + jitter) as f32
            })
            .collect())
    }
}
