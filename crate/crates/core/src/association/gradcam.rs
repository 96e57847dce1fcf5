use crate::adapter::{split_tokens, AttentionBundle};
use crate::corpus::{content_word, raw_words, StopWords};
use crate::error::{invalid, Result};

/// Patch-by-token matrix (`p²` rows, one column per token), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenMatrix {
    pub p: usize,
    pub tokens: Vec<String>,
    pub values: Vec<f64>,
}

impl PatchTokenMatrix {
    pub fn rows(&self) -> usize {
        self.p * self.p
    }

    pub fn cols(&self) -> usize {
        self.tokens.len()
    }

    pub fn get(&self, patch: usize, token: usize) -> f64 {
        self.values[patch * self.cols() + token]
    }

    /// Column `token` laid out as a `p x p` grid (row = patch row).
    pub fn grid(&self, token: usize) -> Heatmap {
        let values = (0..self.rows()).map(|r| self.get(r, token)).collect();
        Heatmap {
            width: self.p,
            height: self.p,
            values,
        }
    }
}

/// Row-major 2D map, `height` rows of `width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(invalid(format!(
                "heatmap needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// First maximum in row-major order, i.e. lowest `(y, x)` on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Which map to aggregate from a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// `A ⊙ g(G)`, with `g = max(·, 0)` when `clamp` is set.
    GradCam { clamp: bool },
    /// Raw cross-attention `A`. Never touches gradients.
    Attention,
}

/// Head aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Mean,
    Single(usize),
}

/// Aggregate one layer of a bundle into a `p² x t` map.
pub fn layer_map(bundle: &AttentionBundle, layer: usize, kind: MapKind, heads: Heads) -> Result<PatchTokenMatrix> {
    if layer >= bundle.layers {
        return Err(invalid(format!("layer {layer} out of range 0..{}", bundle.layers)));
    }
    let head_ids: Vec<usize> = match heads {
        Heads::Mean => (0..bundle.heads).collect(),
        Heads::Single(h) if h < bundle.heads => vec![h],
        Heads::Single(h) => return Err(invalid(format!("head {h} out of range 0..{}", bundle.heads))),
    };
    let len = bundle.patch_count() * bundle.token_count();
    let mut acc = vec![0.0f64; len];
    for &h in &head_ids {
        let a = bundle.attention(layer, h)?;
        match kind {
            MapKind::Attention => {
                for (o, &av) in acc.iter_mut().zip(a) {
                    *o += av as f64;
                }
            }
            MapKind::GradCam { clamp } => {
                let g = bundle.gradient(layer, h)?;
                for ((o, &av), &gv) in acc.iter_mut().zip(a).zip(g) {
                    let gv = if clamp { gv.max(0.0) } else { gv };
                    *o += av as f64 * gv as f64;
                }
            }
        }
    }
    let n = head_ids.len() as f64;
    for v in &mut acc {
        *v /= n;
    }
    Ok(PatchTokenMatrix {
        p: bundle.p,
        tokens: bundle.tokens.clone(),
        values: acc,
    })
}

/// Head-averaged Grad-CAM of one layer.
pub fn compute_gradcam(bundle: &AttentionBundle, layer: usize, clamp_gradients: bool) -> Result<PatchTokenMatrix> {
    layer_map(bundle, layer, MapKind::GradCam { clamp: clamp_gradients }, Heads::Mean)
}

/// Patch-by-word matrix after stop-word removal and duplicate merging.
#[derive(Clone, Debug, PartialEq)]
pub struct WordColumns {
    pub p: usize,
    pub words: Vec<String>,
    /// `p²` rows of `words.len()` values.
    pub values: Vec<f64>,
}

impl WordColumns {
    pub fn grid(&self, col: usize) -> Heatmap {
        let n = self.words.len();
        Heatmap {
            width: self.p,
            height: self.p,
            values: (0..self.p * self.p).map(|r| self.values[r * n + col]).collect(),
        }
    }
}

/// Remove prompt and stop-word columns and merge columns whose tokens
/// normalize to the same word by summing them. A token holding several
/// words (e.g. hyphenated) contributes its column to each of them.
pub fn drop_stopword_columns(c: &PatchTokenMatrix, prompt: &str, stop: &StopWords) -> WordColumns {
    let prompt_tokens = split_tokens(prompt);
    let skip = if !prompt_tokens.is_empty()
        && c.tokens.len() >= prompt_tokens.len()
        && c.tokens[..prompt_tokens.len()] == prompt_tokens[..]
    {
        prompt_tokens.len()
    } else {
        0
    };
    let mut words: Vec<String> = Vec::new();
    let mut sources: Vec<Vec<usize>> = Vec::new();
    for (j, tok) in c.tokens.iter().enumerate().skip(skip) {
        for raw in raw_words(tok) {
            let Some(w) = content_word(&raw, stop) else { continue };
            match words.iter().position(|x| *x == w) {
                Some(k) => {
                    if !sources[k].contains(&j) {
                        sources[k].push(j)
                    }
                }
                None => {
                    words.push(w);
                    sources.push(vec![j]);
                }
            }
        }
    }
    let n = words.len();
    let mut values = vec![0.0f64; c.rows() * n];
    for r in 0..c.rows() {
        for (k, src) in sources.iter().enumerate() {
            values[r * n + k] = src.iter().map(|&j| c.get(r, j)).sum();
        }
    }
    WordColumns { p: c.p, words, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AttentionSource;

    fn bundle(heads: usize, a: Vec<f32>, g: Vec<f32>, t: usize) -> AttentionBundle {
        AttentionBundle::new(
            AttentionSource::Itm,
            1,
            heads,
            1,
            (0..t).map(|i| format!("w{i}")).collect(),
            a,
            Some(g),
            Some(0.5),
        )
        .unwrap()
    }

    #[test]
    fn identity_gradient_returns_attention() {
        let b = bundle(1, vec![0.25, 0.75], vec![1.0, 1.0], 2);
        assert_eq!(compute_gradcam(&b, 0, true).unwrap().values, vec![0.25, 0.75]);
    }

    #[test]
    fn mean_of_scaled_heads() {
        // A1 = A2 = A, G1 = 2, G2 = 0, clamp off -> (2A + 0) / 2 = A
        let b = bundle(2, vec![0.25, 0.75, 0.25, 0.75], vec![2.0, 2.0, 0.0, 0.0], 2);
        assert_eq!(compute_gradcam(&b, 0, false).unwrap().values, vec![0.25, 0.75]);
    }

    #[test]
    fn clamp_zeroes_negative_gradients() {
        let b = bundle(1, vec![0.5, 0.5], vec![-1.0, 2.0], 2);
        assert_eq!(compute_gradcam(&b, 0, true).unwrap().values, vec![0.0, 1.0]);
        assert_eq!(compute_gradcam(&b, 0, false).unwrap().values, vec![-0.5, 1.0]);
        assert!(compute_gradcam(&b, 1, true).is_err());
    }

    #[test]
    fn attention_map_ignores_missing_gradients() {
        let b = bundle(1, vec![0.5, 0.5], vec![1.0, 1.0], 2).without_gradients();
        assert!(layer_map(&b, 0, MapKind::Attention, Heads::Mean).is_ok());
        assert!(compute_gradcam(&b, 0, true).is_err());
    }

    fn matrix(tokens: &[&str], values: Vec<f64>) -> PatchTokenMatrix {
        PatchTokenMatrix {
            p: 1,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            values,
        }
    }

    #[test]
    fn stop_words_dropped() {
        let stop = StopWords::english();
        let w = drop_stopword_columns(&matrix(&["a", "fish"], vec![0.3, 0.7]), "", &stop);
        assert_eq!(w.words, vec!["fish"]);
        assert_eq!(w.values, vec![0.7]);
    }

    #[test]
    fn duplicate_words_merge_by_sum() {
        let stop = StopWords::english();
        let w = drop_stopword_columns(&matrix(&["fish", "fishes"], vec![0.25, 0.5]), "", &stop);
        assert_eq!(w.words, vec!["fish"]);
        assert_eq!(w.values, vec![0.75]);
    }

    #[test]
    fn prompt_columns_dropped() {
        let stop = StopWords::english();
        let m = matrix(
            &["a", "picture", "of", "a", "dog", "picture"],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        );
        let w = drop_stopword_columns(&m, "a picture of", &stop);
        assert_eq!(w.words, vec!["dog", "picture"]);
        assert_eq!(w.values, vec![5.0, 6.0]);
    }
}
