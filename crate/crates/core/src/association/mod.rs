//! Word-to-segment association through cross-attention Grad-CAM.
//!
//! Per image-caption pair: aggregate one layer's heads into a `p² x t`
//! map, drop stop-word columns, resize each word's `p x p` grid to the image
//! size and score every segment as `sum(map inside mask) / sqrt(area)`.
//! Per-image matrices combine into a corpus-level union with explicit
//! missing cells.

mod gradcam;
mod heatmap;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::adapter::{split_tokens, AttentionBundle, ImageRef};
use crate::corpus::{CaptionRecord, StopWords};
use crate::error::{invalid, Error, Result};
use crate::mask::RawMask;
use crate::par::Exec;
use crate::segments::SegmentRecord;
use crate::store::tensor::TensorBlob;

pub use gradcam::{
    compute_gradcam, drop_stopword_columns, layer_map, Heads, Heatmap, MapKind, PatchTokenMatrix, WordColumns,
};
pub use heatmap::{heatmap_rgb, overlay_png};

/// Best grounding layer of the reference captioning model.
pub const DEFAULT_LAYER: usize = 7;
pub const DEFAULT_COVERAGE_K: usize = 3;

/// Corner-aligned bilinear resize of `grid` to `width x height`.
///
/// Interpolation is written as nested lerps (`a + (b - a) * f`) so a
/// constant grid resizes to exactly the same constant.
pub fn resize_map(grid: &Heatmap, width: usize, height: usize) -> Result<Heatmap> {
    if width == 0 || height == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    if grid.width == 0 || grid.height == 0 {
        return Err(invalid("cannot resize an empty grid"));
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let s = if dst > 1 {
                    (i * (src - 1)) as f64 / (dst - 1) as f64
                } else {
                    0.0
                };
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(width, grid.width);
    let ys = axis(height, grid.height);
    let lerp = |a: f64, b: f64, f: f64| if a == b { a } else { a + (b - a) * f };
    let mut values = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(grid.get(x0, y0), grid.get(x1, y0), fx);
            let bottom = lerp(grid.get(x0, y1), grid.get(x1, y1), fx);
            values.push(lerp(top, bottom, fy));
        }
    }
    Ok(Heatmap { width, height, values })
}

/// `sum(map inside mask) / sqrt(mask area)`.
pub fn segment_score(map: &Heatmap, mask: &RawMask) -> Result<f64> {
    if (map.width, map.height) != (mask.width() as usize, mask.height() as usize) {
        return Err(invalid(format!(
            "map is {}x{} but mask is {:?}",
            map.width,
            map.height,
            mask.dims()
        )));
    }
    if mask.area() == 0 {
        return Err(invalid("cannot score an empty segment"));
    }
    // Neumaier summation
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (v, _) in map.values.iter().zip(mask.bits()).filter(|(_, &b)| b) {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    Ok((sum + comp) / (mask.area() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scope {
    PerImage { image_id: String },
    Union,
}

/// Segment-by-word score matrix. Missing cells (`None`) only occur in a
/// union, for words whose caption belongs to another image.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    pub scope: Scope,
    pub rows: Vec<String>,
    pub row_images: Vec<String>,
    pub cols: Vec<String>,
    values: Vec<Option<f64>>,
}

/// Sidecar index persisted next to the value tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixIndex {
    pub scope: Scope,
    pub rows: Vec<String>,
    pub row_images: Vec<String>,
    pub cols: Vec<String>,
}

impl AssociationMatrix {
    pub fn new(
        scope: Scope,
        rows: Vec<String>,
        row_images: Vec<String>,
        cols: Vec<String>,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        if row_images.len() != rows.len() || values.len() != rows.len() * cols.len() {
            return Err(invalid("association matrix shape mismatch"));
        }
        if let Scope::PerImage { image_id } = &scope {
            if row_images.iter().any(|r| r != image_id) {
                return Err(invalid("per-image matrix rows must share one image"));
            }
        }
        Ok(Self {
            scope,
            rows,
            row_images,
            cols,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.cols.len() + col]
    }

    pub fn row_index(&self, segment_id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == segment_id)
    }

    pub fn col_index(&self, word: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == word)
    }

    pub fn cell(&self, segment_id: &str, word: &str) -> Option<f64> {
        self.get(self.row_index(segment_id)?, self.col_index(word)?)
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn index(&self) -> MatrixIndex {
        MatrixIndex {
            scope: self.scope.clone(),
            rows: self.rows.clone(),
            row_images: self.row_images.clone(),
            cols: self.cols.clone(),
        }
    }

    /// Values as an `m x n` f32 tensor, NaN for missing cells.
    pub fn to_tensor(&self) -> TensorBlob {
        let (m, n) = self.shape();
        let data = self
            .values
            .iter()
            .map(|v| v.map(|x| x as f32).unwrap_or(f32::NAN))
            .collect();
        TensorBlob::new(vec![m as u64, n as u64], data).expect("shape checked at construction")
    }

    pub fn from_parts(index: MatrixIndex, tensor: &TensorBlob) -> Result<Self> {
        let (m, n) = (index.rows.len() as u64, index.cols.len() as u64);
        if tensor.dims() != [m, n] {
            return Err(Error::Data(format!(
                "matrix tensor dims {:?}, index says [{m}, {n}]",
                tensor.dims()
            )));
        }
        let values = tensor
            .data()
            .iter()
            .map(|v| (!v.is_nan()).then_some(*v as f64))
            .collect();
        Self::new(index.scope, index.rows, index.row_images, index.cols, values)
    }
}

#[derive(Clone, Debug)]
pub struct AssociationOptions {
    pub layer: usize,
    pub clamp_gradients: bool,
    pub stop_words: StopWords,
    pub exec: Exec,
}

impl Default for AssociationOptions {
    fn default() -> Self {
        Self {
            layer: DEFAULT_LAYER,
            clamp_gradients: true,
            stop_words: StopWords::english(),
            exec: Exec::default(),
        }
    }
}

/// Score every (segment, word) pair of one image-caption pair.
pub fn build_association(
    image: &ImageRef,
    caption: &CaptionRecord,
    segments: &[SegmentRecord],
    bundle: &AttentionBundle,
    options: &AssociationOptions,
) -> Result<AssociationMatrix> {
    if caption.image_id != image.id {
        return Err(invalid(format!(
            "caption belongs to {}, not {}",
            caption.image_id, image.id
        )));
    }
    if bundle.tokens != split_tokens(&caption.text) {
        return Err(invalid(format!(
            "bundle has {} tokens that do not match the caption {:?}",
            bundle.token_count(),
            caption.text
        )));
    }
    for s in segments {
        if s.image_id != image.id || s.mask.dims() != (image.width, image.height) {
            return Err(invalid(format!(
                "segment {} does not belong to image {}",
                s.segment_id, image.id
            )));
        }
    }
    let c = compute_gradcam(bundle, options.layer, options.clamp_gradients)?;
    let words = drop_stopword_columns(&c, &caption.prompt, &options.stop_words);
    let (w, h) = (image.width as usize, image.height as usize);
    let per_word: Vec<Result<Vec<f64>>> = options.exec.map_range(words.words.len(), |k| {
        let map = resize_map(&words.grid(k), w, h)?;
        segments.iter().map(|s| segment_score(&map, &s.mask)).collect()
    });
    let n = words.words.len();
    let m = segments.len();
    let mut values = vec![None; m * n];
    for (k, col) in per_word.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            values[i * n + k] = Some(v);
        }
    }
    AssociationMatrix::new(
        Scope::PerImage {
            image_id: image.id.clone(),
        },
        segments.iter().map(|s| s.segment_id.clone()).collect(),
        vec![image.id.clone(); m],
        words.words,
        values,
    )
}

/// Join per-image matrices over the union of rows and columns. Cells for a
/// word that did not occur in a row's own caption stay missing.
pub fn union_associations(matrices: &[AssociationMatrix]) -> Result<AssociationMatrix> {
    let mut seen = BTreeSet::new();
    for m in matrices {
        if m.scope == Scope::Union {
            return Err(invalid("union input must be per-image matrices"));
        }
        for r in &m.rows {
            if !seen.insert(r.clone()) {
                return Err(invalid(format!("segment id {r} appears in more than one matrix")));
            }
        }
    }
    let cols: Vec<String> = matrices
        .iter()
        .flat_map(|m| m.cols.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_pos: HashMap<&str, usize> = cols.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let n = cols.len();
    let mut rows = Vec::new();
    let mut row_images = Vec::new();
    let mut values = Vec::new();
    for m in matrices {
        let targets: Vec<usize> = m.cols.iter().map(|c| col_pos[c.as_str()]).collect();
        for i in 0..m.rows.len() {
            let mut row = vec![None; n];
            for (j, &t) in targets.iter().enumerate() {
                row[t] = m.get(i, j);
            }
            values.extend(row);
            rows.push(m.rows[i].clone());
            row_images.push(m.row_images[i].clone());
        }
    }
    AssociationMatrix::new(Scope::Union, rows, row_images, cols, values)
}

/// Indices of the top-`k` present entries of a column: score descending,
/// lower row index first on ties.
fn top_k_rows(matrix: &AssociationMatrix, rows: &[usize], col: usize, k: usize) -> Vec<usize> {
    let mut present: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|&r| matrix.get(r, col).map(|v| (r, v)))
        .collect();
    present.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    present.into_iter().take(k).map(|(r, _)| r).collect()
}

/// Number of distinct words that rank each segment among their top `k`
/// segments within the segment's own image, summed over matrices.
///
/// Union matrices are split back into their images first, so the candidate
/// pool for a word is always one image's segments.
pub fn coverage(matrices: &[AssociationMatrix], k: usize) -> Result<BTreeMap<String, u32>> {
    if k == 0 {
        return Err(invalid("coverage needs k >= 1"));
    }
    let mut out: BTreeMap<String, u32> = BTreeMap::new();
    for m in matrices {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, img) in m.row_images.iter().enumerate() {
            groups.entry(img.as_str()).or_default().push(i);
        }
        let mut counts = vec![0u32; m.rows.len()];
        for rows in groups.values() {
            for col in 0..m.cols.len() {
                for r in top_k_rows(m, rows, col, k) {
                    counts[r] += 1;
                }
            }
        }
        for (id, c) in m.rows.iter().zip(counts) {
            *out.entry(id.clone()).or_default() += c;
        }
    }
    Ok(out)
}

/// Words ranked by score for one segment (descending; ties alphabetical).
pub fn top_words_for_segment(segment_id: &str, matrix: &AssociationMatrix, k: usize) -> Result<Vec<(String, f64)>> {
    let row = matrix
        .row_index(segment_id)
        .ok_or_else(|| Error::NotFound(format!("segment {segment_id}")))?;
    let mut words: Vec<(String, f64)> = (0..matrix.cols.len())
        .filter_map(|j| matrix.get(row, j).map(|v| (matrix.cols[j].clone(), v)))
        .collect();
    words.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(k);
    Ok(words)
}

/// Score of every segment that has a value for `word`; empty when the word
/// is not a column.
pub fn word_attention_colors(word: &str, matrix: &AssociationMatrix) -> BTreeMap<String, f64> {
    let Some(col) = matrix.col_index(word) else {
        return BTreeMap::new();
    };
    (0..matrix.rows.len())
        .filter_map(|i| matrix.get(i, col).map(|v| (matrix.rows[i].clone(), v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_image(image: &str, rows: &[&str], cols: &[&str], vals: &[f64]) -> AssociationMatrix {
        AssociationMatrix::new(
            Scope::PerImage { image_id: image.into() },
            rows.iter().map(|s| s.to_string()).collect(),
            vec![image.to_string(); rows.len()],
            cols.iter().map(|s| s.to_string()).collect(),
            vals.iter().map(|&v| Some(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Heatmap::constant(3, 3, 2.0);
        let r = resize_map(&c, 17, 5).unwrap();
        assert!(r.values.iter().all(|&v| v == 2.0));
        let g = Heatmap::new(3, 3, vec![0.1, 0.7, 0.2, 0.9, 0.3, 0.4, 0.5, 0.6, 0.8]).unwrap();
        assert_eq!(resize_map(&g, 3, 3).unwrap(), g);
    }

    #[test]
    fn resize_corner_aligned_ramp() {
        let g = Heatmap::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_map(&g, 4, 2).unwrap();
        for y in 0..2 {
            let row: Vec<f64> = (0..4).map(|x| r.get(x, y)).collect();
            let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn score_examples() {
        let mask = RawMask::rect("i", 5, 5, 1, 1, 4, 4);
        assert_eq!(mask.area(), 9);
        assert_eq!(segment_score(&Heatmap::constant(5, 5, 2.0), &mask).unwrap(), 6.0);
        assert_eq!(segment_score(&Heatmap::constant(5, 5, 0.0), &mask).unwrap(), 0.0);
        assert!(segment_score(&Heatmap::constant(5, 5, 1.0), &RawMask::empty("i", 5, 5)).is_err());
        assert!(segment_score(&Heatmap::constant(4, 5, 1.0), &mask).is_err());
    }

    #[test]
    fn coverage_argmax_example() {
        let m = per_image(
            "im",
            &["s0", "s1", "s2", "s3"],
            &["word1", "word2"],
            &[0.9, 0.05, 0.1, 0.4, 0.2, 0.3, 0.3, 0.2],
        );
        let cov = coverage(std::slice::from_ref(&m), 1).unwrap();
        assert_eq!(cov.values().copied().collect::<Vec<_>>(), vec![1, 1, 0, 0]);
        let sat = coverage(&[m], 4).unwrap();
        assert!(sat.values().all(|&c| c == 2));
    }

    #[test]
    fn union_marks_cross_image_cells_missing() {
        let a = per_image("a", &["a0", "a1"], &["fish", "man"], &[1.0, 2.0, 3.0, 4.0]);
        let b = per_image("b", &["b0"], &["fish", "water"], &[5.0, 6.0]);
        let u = union_associations(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u.cols, vec!["fish", "man", "water"]);
        assert_eq!(u.cell("a1", "fish"), Some(3.0));
        assert_eq!(u.cell("b0", "fish"), Some(5.0));
        assert_eq!(u.cell("b0", "man"), None);
        assert_eq!(u.cell("a0", "water"), None);
        assert!(union_associations(&[a.clone(), a.clone()]).is_err());
        let single = union_associations(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.rows, a.rows);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(single.get(r, c), a.get(r, c));
            }
        }
        let colors = word_attention_colors("fish", &u);
        assert_eq!(colors.len(), 3);
        assert!(word_attention_colors("cat", &u).is_empty());
        assert_eq!(word_attention_colors("man", &u).len(), 2);
    }

    #[test]
    fn ranking_ties_alphabetical() {
        let m = per_image("im", &["s"], &["man", "fish", "large", "boat"], &[0.1, 0.9, 0.5, 0.5]);
        let top = top_words_for_segment("s", &m, 2).unwrap();
        assert_eq!(
            top.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>(),
            vec!["fish", "boat"]
        );
        assert!(matches!(top_words_for_segment("zz", &m, 2), Err(Error::NotFound(_))));
    }

    #[test]
    fn tensor_round_trip_keeps_missing_cells() {
        let a = per_image("a", &["a0"], &["fish"], &[1.5]);
        let b = per_image("b", &["b0"], &["dog"], &[2.5]);
        let u = union_associations(&[a, b]).unwrap();
        let back = AssociationMatrix::from_parts(u.index(), &u.to_tensor()).unwrap();
        assert_eq!(back, u);
    }
}
