//! Segment filtering, deduplication and 2D projection of segment embeddings.

mod projection;

use serde::{Deserialize, Serialize};

use crate::adapter::ImageRef;
use crate::error::{invalid, Result};
use crate::mask::RawMask;
use crate::par::Exec;

pub use projection::{project_embeddings, validate_embeddings, Pca, Projector, Tsne};

pub const DEFAULT_MIN_AREA_FRAC: f64 = 0.01;
pub const DEFAULT_IOU_THRESH: f64 = 0.85;

/// A retained segment with its embedding, projected position and coverage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub image_id: String,
    pub mask: RawMask,
    pub area_fraction: f64,
    pub embedding: Vec<f32>,
    pub xy: [f64; 2],
    pub coverage: u32,
}

/// Intersection over union of two masks of the same image size.
pub fn mask_iou(a: &RawMask, b: &RawMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(invalid(format!("mask dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.area() == 0 && b.area() == 0 {
        return Err(invalid("IoU of two empty masks is undefined"));
    }
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count() as u64;
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Thresholds for [`filter_segments`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentFilter {
    pub min_area_frac: f64,
    pub iou_thresh: f64,
}

impl Default for SegmentFilter {
    fn default() -> Self {
        Self {
            min_area_frac: DEFAULT_MIN_AREA_FRAC,
            iou_thresh: DEFAULT_IOU_THRESH,
        }
    }
}

/// Indices of the masks kept by [`filter_segments`], in input order.
pub fn filter_segment_indices(masks: &[RawMask], image: &ImageRef, min_area_frac: f64, iou_thresh: f64) -> Vec<usize> {
    let min_area = min_area_frac * image.pixel_count() as f64;
    let mut order: Vec<usize> = (0..masks.len())
        .filter(|&i| masks[i].dims() == (image.width, image.height))
        .filter(|&i| masks[i].area() > 0 && masks[i].area() as f64 >= min_area)
        .collect();
    // larger first; stable sort keeps earlier index first on ties
    order.sort_by(|&a, &b| masks[b].area().cmp(&masks[a].area()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let dup = kept
            .iter()
            .any(|&k| mask_iou(&masks[k], &masks[i]).map(|v| v > iou_thresh).unwrap_or(false));
        if !dup {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Drop masks smaller than `min_area_frac` of the image, then greedily drop
/// any mask whose IoU with an already kept, larger (or equal and earlier)
/// mask exceeds `iou_thresh`. Masks of the wrong size and empty masks are
/// dropped. The result keeps input order.
pub fn filter_segments(masks: &[RawMask], image: &ImageRef, min_area_frac: f64, iou_thresh: f64) -> Vec<RawMask> {
    filter_segment_indices(masks, image, min_area_frac, iou_thresh)
        .into_iter()
        .map(|i| masks[i].clone())
        .collect()
}

/// [`filter_segments`] over many images.
pub fn filter_all(exec: Exec, batch: &[(ImageRef, Vec<RawMask>)], filter: SegmentFilter) -> Vec<Vec<RawMask>> {
    exec.map(batch, |(image, masks)| {
        filter_segments(masks, image, filter.min_area_frac, filter.iou_thresh)
    })
}
