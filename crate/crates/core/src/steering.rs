//! Prompt and patch-weight caption steering.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::{effective_weights, weights_digest, ImageRef, ModelAdapter, PatchGrid, DEFAULT_PROMPT};
use crate::corpus::{normalize_word, raw_words, strip_prompt};
use crate::error::{invalid, Error, Result};
use crate::mask::RawMask;
use crate::par::Exec;

pub const DEFAULT_MIN_OVERLAP: f64 = 0.5;

fn patch_row(y: u32, h: u32, p: usize) -> usize {
    (y as u64 * p as u64 / h as u64) as usize
}

/// Patches containing the given `(x, y)` pixels. Cells are `h/p` by `w/p`
/// real pixels with floor indexing, so non-square images work unchanged.
pub fn pixels_to_patches(pixels: &[(u32, u32)], image: &ImageRef, p: usize) -> Result<BTreeSet<usize>> {
    if p == 0 {
        return Err(invalid("patch grid size must be positive"));
    }
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= image.width || y >= image.height {
                return Err(invalid(format!(
                    "pixel ({x}, {y}) outside {}x{} image {}",
                    image.width, image.height, image.id
                )));
            }
            Ok(patch_row(y, image.height, p) * p + patch_row(x, image.width, p))
        })
        .collect()
}

/// Patches with at least `min_overlap_frac` of their pixels inside the mask.
pub fn mask_to_patches(mask: &RawMask, p: usize, min_overlap_frac: f64) -> BTreeSet<usize> {
    let (w, h) = mask.dims();
    if p == 0 || w == 0 || h == 0 {
        return BTreeSet::new();
    }
    let mut inside = vec![0u64; p * p];
    let mut total = vec![0u64; p * p];
    for y in 0..h {
        let row = patch_row(y, h, p) * p;
        for x in 0..w {
            let idx = row + patch_row(x, w, p);
            total[idx] += 1;
            if mask.get(x, y) {
                inside[idx] += 1;
            }
        }
    }
    (0..p * p)
        .filter(|&i| total[i] > 0 && inside[i] as f64 >= min_overlap_frac * total[i] as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerRequest {
    pub image_id: String,
    pub prompt: String,
    pub patch_weights: Vec<f32>,
    #[serde(default)]
    pub target_words: BTreeSet<String>,
}

impl SteerRequest {
    /// All-ones weights with the default prompt.
    pub fn identity(image_id: impl Into<String>, grid: &PatchGrid) -> Self {
        Self {
            image_id: image_id.into(),
            prompt: DEFAULT_PROMPT.to_string(),
            patch_weights: vec![1.0; grid.patch_count()],
            target_words: BTreeSet::new(),
        }
    }

    /// `weight` on the selected patches, 1 elsewhere.
    pub fn from_selection(
        image_id: impl Into<String>,
        prompt: impl Into<String>,
        grid: &PatchGrid,
        selected: &BTreeSet<usize>,
        weight: f32,
    ) -> Result<Self> {
        let n = grid.patch_count();
        if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("patch index {bad} outside a {n}-patch grid")));
        }
        let mut patch_weights = vec![1.0; n];
        for &i in selected {
            patch_weights[i] = weight;
        }
        let req = Self {
            image_id: image_id.into(),
            prompt: prompt.into(),
            patch_weights,
            target_words: BTreeSet::new(),
        };
        effective_weights(Some(&req.patch_weights), grid)?;
        Ok(req)
    }

    pub fn with_targets(mut self, words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.target_words = words.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    pub image_id: String,
    pub prompt: String,
    pub baseline_caption: String,
    pub steered_caption: String,
    pub changed: bool,
    pub target_hits: BTreeMap<String, bool>,
    pub weights_digest: String,
}

impl SteerResult {
    pub fn any_hit(&self) -> bool {
        self.target_hits.values().any(|&h| h)
    }
}

/// Normalized words of a generated caption after its prompt.
fn caption_words(caption: &str, prompt: &str) -> BTreeSet<String> {
    raw_words(strip_prompt(caption, prompt))
        .map(|w| normalize_word(&w))
        .collect()
}

pub fn steer(adapter: &dyn ModelAdapter, image: &ImageRef, request: &SteerRequest) -> Result<SteerResult> {
    if request.image_id != image.id {
        return Err(invalid(format!(
            "request is for {}, not {}",
            request.image_id, image.id
        )));
    }
    let weights = effective_weights(Some(&request.patch_weights), &adapter.grid())?;
    let baseline = adapter.generate_caption(image, DEFAULT_PROMPT, None)?;
    let steered = if weights.is_none() && request.prompt == DEFAULT_PROMPT {
        baseline.clone()
    } else {
        adapter.generate_caption(image, &request.prompt, weights)?
    };
    let words = caption_words(&steered.text, &request.prompt);
    let target_hits = request
        .target_words
        .iter()
        .map(|t| {
            let t = normalize_word(t.trim());
            let hit = words.contains(&t);
            (t, hit)
        })
        .collect();
    Ok(SteerResult {
        image_id: image.id.clone(),
        prompt: request.prompt.clone(),
        changed: baseline.text != steered.text,
        baseline_caption: baseline.text,
        steered_caption: steered.text,
        target_hits,
        weights_digest: weights_digest(weights),
    })
}

/// Success count over attempted images, kept as integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub successes: u64,
    pub attempted: u64,
}

impl SuccessRate {
    pub fn as_f64(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempted as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub image_id: String,
    pub result: Option<SteerResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub prompt: String,
    pub target_words: BTreeSet<String>,
    pub entries: Vec<BatchEntry>,
    pub success_count: u64,
    pub success_rate: f64,
    pub rate: SuccessRate,
}

impl BatchReport {
    pub fn failures(&self) -> impl Iterator<Item = &BatchEntry> {
        self.entries.iter().filter(|e| e.error.is_some())
    }

    /// One CSV record per image: id, baseline, steered, hits, weights digest.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "image_id",
            "baseline_caption",
            "steered_caption",
            "hits",
            "weights_digest",
            "error",
        ])
        .map_err(csv_err)?;
        for e in &self.entries {
            let record = match &e.result {
                Some(r) => {
                    let hits: Vec<&str> = r
                        .target_hits
                        .iter()
                        .filter(|(_, &h)| h)
                        .map(|(t, _)| t.as_str())
                        .collect();
                    [
                        e.image_id.clone(),
                        r.baseline_caption.clone(),
                        r.steered_caption.clone(),
                        hits.join(" "),
                        r.weights_digest.clone(),
                        String::new(),
                    ]
                }
                None => [
                    e.image_id.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.error.clone().unwrap_or_default(),
                ],
            };
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Steer every image with one prompt. An image succeeds when any target
/// word appears in its steered caption; adapter failures are recorded and
/// left out of the denominator.
pub fn steer_batch(
    adapter: &dyn ModelAdapter,
    images: &[ImageRef],
    prompt: &str,
    target_words: &BTreeSet<String>,
    per_image_weights: Option<&[Vec<f32>]>,
    exec: Exec,
) -> Result<BatchReport> {
    if images.is_empty() {
        return Err(invalid("batch steering needs at least one image"));
    }
    let grid = adapter.grid();
    if let Some(w) = per_image_weights {
        if w.len() != images.len() {
            return Err(invalid(format!(
                "{} weight vectors for {} images",
                w.len(),
                images.len()
            )));
        }
        for v in w {
            effective_weights(Some(v), &grid)?;
        }
    }
    let indices: Vec<usize> = (0..images.len()).collect();
    let entries = exec.map_bounded(adapter.max_concurrency(), &indices, |&i| {
        let image = &images[i];
        let request = SteerRequest {
            image_id: image.id.clone(),
            prompt: prompt.to_string(),
            patch_weights: per_image_weights.map_or_else(|| vec![1.0; grid.patch_count()], |w| w[i].clone()),
            target_words: target_words.clone(),
        };
        match steer(adapter, image, &request) {
            Ok(r) => BatchEntry {
                image_id: image.id.clone(),
                result: Some(r),
                error: None,
            },
            Err(e) => BatchEntry {
                image_id: image.id.clone(),
                result: None,
                error: Some(e.to_string()),
            },
        }
    });
    let attempted = entries.iter().filter(|e| e.result.is_some()).count() as u64;
    let successes = entries
        .iter()
        .filter(|e| e.result.as_ref().is_some_and(SteerResult::any_hit))
        .count() as u64;
    let rate = SuccessRate { successes, attempted };
    Ok(BatchReport {
        prompt: prompt.to_string(),
        target_words: target_words.clone(),
        entries,
        success_count: successes,
        success_rate: rate.as_f64(),
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{CaptionFixture, MockAdapter, MockConfig, MockFixtures};

    #[test]
    fn corner_patches() {
        let img = ImageRef::new("i", 224, 224, "").unwrap();
        let got = pixels_to_patches(&[(0, 0), (223, 0), (0, 223), (223, 223)], &img, 14).unwrap();
        assert_eq!(got, BTreeSet::from([0, 13, 182, 195]));
        assert!(pixels_to_patches(&[(224, 0)], &img, 14).is_err());
    }

    #[test]
    fn non_square_cells() {
        let img = ImageRef::new("i", 30, 10, "").unwrap();
        // cells are 10 wide and 10/3 tall
        let got = pixels_to_patches(&[(9, 3), (10, 4), (29, 9)], &img, 3).unwrap();
        assert_eq!(got, BTreeSet::from([0, 4, 8]));
    }

    #[test]
    fn mask_patches_extremes() {
        let full = RawMask::rect("i", 12, 8, 0, 0, 12, 8);
        assert_eq!(mask_to_patches(&full, 4, 0.5).len(), 16);
        assert!(mask_to_patches(&RawMask::empty("i", 12, 8), 4, 0.5).is_empty());
        // left half of the image covers the two left patch columns
        let half = RawMask::rect("i", 12, 8, 0, 0, 6, 8);
        assert_eq!(
            mask_to_patches(&half, 4, 0.5),
            BTreeSet::from([0, 1, 4, 5, 8, 9, 12, 13])
        );
    }

    #[test]
    fn selection_builds_weights() {
        let grid = PatchGrid { p: 3, patch_px: 16 };
        let r = SteerRequest::from_selection("i", "p", &grid, &BTreeSet::from([1, 4]), 0.0).unwrap();
        assert_eq!(r.patch_weights, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(SteerRequest::from_selection("i", "p", &grid, &BTreeSet::from([9]), 2.0).is_err());
        assert!(SteerRequest::from_selection("i", "p", &grid, &BTreeSet::from([0]), -1.0).is_err());
    }

    #[test]
    fn identity_request_is_unchanged() {
        let adapter = MockAdapter::new(MockConfig::default());
        let img = ImageRef::new("x", 64, 48, "").unwrap();
        let r = steer(&adapter, &img, &SteerRequest::identity("x", &adapter.grid())).unwrap();
        assert!(!r.changed);
        assert_eq!(r.baseline_caption, r.steered_caption);
        assert_eq!(r.weights_digest, "identity");
    }

    #[test]
    fn plural_caption_matches_singular_target() {
        let fixtures = MockFixtures {
            captions: vec![CaptionFixture {
                image_id: "x".into(),
                prompt: "the person is wearing".into(),
                caption: "the person is wearing two hats".into(),
                emphasized: None,
                suppressed: None,
                itm_score: None,
            }],
            ..Default::default()
        };
        let adapter = MockAdapter::new(MockConfig::default()).with_fixtures(fixtures);
        let img = ImageRef::new("x", 64, 48, "").unwrap();
        let mut req = SteerRequest::identity("x", &adapter.grid()).with_targets(["Hat", "person"]);
        req.prompt = "the person is wearing".into();
        let r = steer(&adapter, &img, &req).unwrap();
        assert_eq!(
            r.target_hits,
            BTreeMap::from([("hat".into(), true), ("person".into(), false)])
        );
    }

    #[test]
    fn empty_targets_give_zero_rate() {
        let adapter = MockAdapter::new(MockConfig::default());
        let images: Vec<ImageRef> = (0..3)
            .map(|i| ImageRef::new(format!("i{i}"), 32, 32, "").unwrap())
            .collect();
        let rep = steer_batch(
            &adapter,
            &images,
            "a picture of",
            &BTreeSet::new(),
            None,
            Exec::default(),
        )
        .unwrap();
        assert_eq!(
            rep.rate,
            SuccessRate {
                successes: 0,
                attempted: 3
            }
        );
        assert_eq!(rep.success_rate, 0.0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
