//! Pointing-game evaluation of word-to-region association maps.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AttentionBundle, AttentionSource, ImageRef, ModelAdapter};
use crate::association::{drop_stopword_columns, layer_map, resize_map, Heads, Heatmap, MapKind};
use crate::corpus::StopWords;
use crate::error::{invalid, Error, Result};
use crate::mask::RawMask;
use crate::par::Exec;
use crate::store::rle::Rle;

/// Ground-truth region: an `[x, y, w, h]` box in pixels or a mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Box([f64; 4]),
    Mask(RawMask),
}

impl Region {
    /// Whether pixel `(x, y)` lies in the region. A box covers the pixels
    /// whose top-left corner is in `[x, x + w) x [y, y + h)`.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        match self {
            Region::Box([bx, by, bw, bh]) => {
                let (x, y) = (x as f64, y as f64);
                x >= *bx && x < bx + bw && y >= *by && y < by + bh
            }
            Region::Mask(m) => x < m.width() && y < m.height() && m.get(x, y),
        }
    }

    fn check(&self, image: &ImageRef) -> Result<()> {
        match self {
            Region::Box([x, y, w, h]) => {
                let ok = [*x, *y, *w, *h].iter().all(|v| v.is_finite())
                    && *x >= 0.0
                    && *y >= 0.0
                    && *w > 0.0
                    && *h > 0.0
                    && x + w <= image.width as f64
                    && y + h <= image.height as f64;
                if !ok {
                    return Err(invalid(format!("box {:?} outside image {}", [x, y, w, h], image.id)));
                }
            }
            Region::Mask(m) => {
                if m.dims() != (image.width, image.height) {
                    return Err(invalid(format!(
                        "region mask is {:?}, image {} is {}x{}",
                        m.dims(),
                        image.id,
                        image.width,
                        image.height
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub image: ImageRef,
    pub referring_text: String,
    pub gt_region: Region,
}

impl GroundingExample {
    pub fn new(image: ImageRef, referring_text: impl Into<String>, gt_region: Region) -> Result<Self> {
        let referring_text = referring_text.into();
        if referring_text.trim().is_empty() {
            return Err(invalid("referring text must not be empty"));
        }
        gt_region.check(&image)?;
        Ok(Self {
            image,
            referring_text,
            gt_region,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ItmGradCam,
    ItmCa,
    LmGradCam,
    LmCa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ItmGradCam, Variant::ItmCa, Variant::LmGradCam, Variant::LmCa];

    pub fn source(self) -> AttentionSource {
        match self {
            Variant::ItmGradCam | Variant::ItmCa => AttentionSource::Itm,
            Variant::LmGradCam | Variant::LmCa => AttentionSource::Lm,
        }
    }

    pub fn kind(self) -> MapKind {
        match self {
            Variant::ItmGradCam | Variant::LmGradCam => MapKind::GradCam { clamp: true },
            Variant::ItmCa | Variant::LmCa => MapKind::Attention,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ItmGradCam => "itm_gradcam",
            Variant::ItmCa => "itm_ca",
            Variant::LmGradCam => "lm_gradcam",
            Variant::LmCa => "lm_ca",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

fn fetch_bundle(adapter: &dyn ModelAdapter, example: &GroundingExample, variant: Variant) -> Result<AttentionBundle> {
    match variant.kind() {
        MapKind::Attention => adapter.attend(&example.image, &example.referring_text, variant.source()),
        MapKind::GradCam { .. } => adapter.score_and_attend(&example.image, &example.referring_text, variant.source()),
    }
}

/// Image-sized map for the referring text: per-word grids summed after
/// stop-word removal, or all token columns when every word is a stop word.
pub fn referring_map(
    bundle: &AttentionBundle,
    image: &ImageRef,
    variant: Variant,
    layer: usize,
    heads: Heads,
    stop: &StopWords,
) -> Result<Heatmap> {
    let c = layer_map(bundle, layer, variant.kind(), heads)?;
    let words = drop_stopword_columns(&c, "", stop);
    let grids: Vec<Heatmap> = if words.words.is_empty() {
        (0..c.cols()).map(|t| c.grid(t)).collect()
    } else {
        (0..words.words.len()).map(|k| words.grid(k)).collect()
    };
    let mut sum = Heatmap::constant(c.p, c.p, 0.0);
    for g in &grids {
        for (s, v) in sum.values.iter_mut().zip(&g.values) {
            *s += v;
        }
    }
    resize_map(&sum, image.width as usize, image.height as usize)
}

fn hit_on_bundle(
    example: &GroundingExample,
    bundle: &AttentionBundle,
    variant: Variant,
    layer: usize,
    heads: Heads,
    stop: &StopWords,
) -> Result<bool> {
    let map = referring_map(bundle, &example.image, variant, layer, heads, stop)?;
    let (x, y) = map.argmax();
    Ok(example.gt_region.contains(x as u32, y as u32))
}

/// Pointing game: the argmax pixel (ties to the lowest `(y, x)`) falls in
/// the ground-truth region.
pub fn ground_one(
    example: &GroundingExample,
    variant: Variant,
    layer: usize,
    head: Option<usize>,
    adapter: &dyn ModelAdapter,
    stop: &StopWords,
) -> Result<bool> {
    let bundle = fetch_bundle(adapter, example, variant)?;
    hit_on_bundle(
        example,
        &bundle,
        variant,
        layer,
        head.map_or(Heads::Mean, Heads::Single),
        stop,
    )
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub head_layer: Option<usize>,
    pub stop_words: StopWords,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub variant: Variant,
    pub examples: u64,
    pub per_layer_hits: Vec<u64>,
    pub per_layer_accuracy: Vec<f64>,
    /// Layer of the per-head drilldown, when requested.
    pub head_layer: Option<usize>,
    pub per_head_accuracy: Option<Vec<f64>>,
}

struct ExampleHits {
    layers: Vec<bool>,
    heads: Vec<bool>,
}

/// Per-layer accuracy (heads averaged) over the dataset.
pub fn evaluate(
    dataset: &[GroundingExample],
    variant: Variant,
    adapter: &dyn ModelAdapter,
    options: &EvalOptions,
) -> Result<GroundingReport> {
    if dataset.is_empty() {
        return Err(invalid("grounding evaluation needs at least one example"));
    }
    let stop = &options.stop_words;
    let hits = options
        .exec
        .map_bounded(adapter.max_concurrency(), dataset, |ex| -> Result<ExampleHits> {
            let bundle = fetch_bundle(adapter, ex, variant)?;
            let layers = (0..bundle.layers)
                .map(|l| hit_on_bundle(ex, &bundle, variant, l, Heads::Mean, stop))
                .collect::<Result<Vec<_>>>()?;
            let heads = match options.head_layer {
                Some(l) => (0..bundle.heads)
                    .map(|h| hit_on_bundle(ex, &bundle, variant, l, Heads::Single(h), stop))
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            Ok(ExampleHits { layers, heads })
        });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    let n_layers = hits[0].layers.len();
    let n_heads = hits[0].heads.len();
    if hits
        .iter()
        .any(|h| h.layers.len() != n_layers || h.heads.len() != n_heads)
    {
        return Err(Error::Data("attention bundles disagree on layer or head count".into()));
    }
    let count = |f: &dyn Fn(&ExampleHits) -> bool| hits.iter().filter(|h| f(h)).count() as u64;
    let n = dataset.len() as u64;
    let per_layer_hits: Vec<u64> = (0..n_layers).map(|l| count(&|h| h.layers[l])).collect();
    let per_head_accuracy = options
        .head_layer
        .map(|_| (0..n_heads).map(|k| count(&|h| h.heads[k]) as f64 / n as f64).collect());
    Ok(GroundingReport {
        variant,
        examples: n,
        per_layer_accuracy: per_layer_hits.iter().map(|&h| h as f64 / n as f64).collect(),
        per_layer_hits,
        head_layer: options.head_layer,
        per_head_accuracy,
    })
}

/// Index of the most accurate layer; ties go to the lowest index.
pub fn best_layer(report: &GroundingReport) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (l, &a) in report.per_layer_accuracy.iter().enumerate() {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((l, a));
        }
    }
    best.map(|(l, _)| l)
}

/// One line of an annotated grounding manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default)]
    pub image_id: Option<String>,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub text: String,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
}

impl ManifestRecord {
    pub fn into_example(self) -> Result<GroundingExample> {
        let id = self.image_id.clone().unwrap_or_else(|| {
            Path::new(&self.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.path.clone())
        });
        let image = ImageRef::new(id.clone(), self.width, self.height, self.path)?;
        let region = match (self.bbox, self.mask) {
            (Some(b), None) => Region::Box(b),
            (None, Some(rle)) => Region::Mask(RawMask::from_rle(id, &rle)?),
            _ => return Err(invalid("each record needs exactly one of box or mask")),
        };
        GroundingExample::new(image, self.text, region)
    }
}

/// Read a JSON-lines manifest; blank lines are skipped.
pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<GroundingExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?;
        out.push(rec.into_example()?);
    }
    Ok(out)
}

/// Variant x layer accuracy table as CSV.
pub fn write_table<W: Write>(reports: &[GroundingReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["variant", "layer", "hits", "examples", "accuracy"])
        .map_err(csv_err)?;
    for r in reports {
        for (l, (&h, a)) in r.per_layer_hits.iter().zip(&r.per_layer_accuracy).enumerate() {
            w.write_record([
                r.variant.as_str().to_string(),
                l.to_string(),
                h.to_string(),
                r.examples.to_string(),
                a.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
