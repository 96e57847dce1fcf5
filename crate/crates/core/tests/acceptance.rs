//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every check runs against the mock adapter and synthetic data.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use caplens_core::adapter::{
    AttentionBundle, AttentionSource, CaptionFixture, ImageRef, MockAdapter, MockConfig, MockFixtures, ModelAdapter,
    PatchGrid, DEFAULT_PROMPT,
};
use caplens_core::association::{
    build_association, compute_gradcam, coverage, layer_map, segment_score, union_associations, AssociationMatrix,
    AssociationOptions, Heads, Heatmap, MapKind, Scope,
};
use caplens_core::corpus::{build_cooccurrence_with, CaptionRecord, StopWords};
use caplens_core::grounding::{best_layer, evaluate, EvalOptions, GroundingExample, Region, Variant};
use caplens_core::mask::RawMask;
use caplens_core::par::Exec;
use caplens_core::pipeline::{
    register_dataset, run_ingest, DatasetManifest, DatasetRecord, IngestOptions, JobState, PipelineConfig,
};
use caplens_core::segments::{filter_segments, mask_iou, SegmentRecord};
use caplens_core::steering::{pixels_to_patches, steer, steer_batch, SteerRequest, SuccessRate};
use caplens_core::store::rle::{rle_decode, rle_encode};
use caplens_core::store::tensor::TensorBlob;
use caplens_core::store::{ArtifactKey, ArtifactStore, Json, Stage};
use caplens_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(r: &mut ChaCha8Rng, id: &str, w: u32, h: u32) -> RawMask {
    match r.random_range(0..4) {
        0 => {
            let x0 = r.random_range(0..w);
            let y0 = r.random_range(0..h);
            let x1 = r.random_range(x0 + 1..=w);
            let y1 = r.random_range(y0 + 1..=h);
            RawMask::rect(id, w, h, x0, y0, x1, y1)
        }
        1 => {
            let p = r.random::<f64>();
            let bits = (0..w * h).map(|_| r.random_bool(p)).collect();
            RawMask::from_bits(id, w, h, bits).unwrap()
        }
        2 => {
            let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
            let rad = r.random_range(0.5..(w.max(h) as f64));
            RawMask::from_fn(id, w, h, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= rad * rad
            })
        }
        _ => {
            let x = r.random_range(0..w);
            let y = r.random_range(0..h);
            RawMask::rect(id, w, h, x, y, x + 1, y + 1)
        }
    }
}

fn flip_one(r: &mut ChaCha8Rng, m: &RawMask) -> RawMask {
    let mut bits = m.bits().to_vec();
    let i = r.random_range(0..bits.len());
    bits[i] = !bits[i];
    RawMask::from_bits(m.image_id(), m.width(), m.height(), bits).unwrap()
}

// criterion 1

const VOCAB: &[&str] = &[
    "dog", "cat", "fish", "man", "woman", "boat", "water", "tree", "hat", "net", "river", "grass", "ball", "car",
    "road", "house", "bird", "sky", "cloud", "field", "horse", "child", "table", "chair", "cup", "book", "lamp",
    "flower", "garden", "beach", "sand", "wave", "rock", "hill", "bridge", "train", "bus", "bike", "street", "window",
    "door", "wall", "roof", "snow", "ice", "lake", "forest", "leaf", "shirt", "jacket", "bag", "rod", "bucket",
    "fence", "pole", "sign", "light", "shadow", "mountain", "island",
];

fn cooccurrence_oracle() -> Check {
    let stop = StopWords::english();
    let mut r = rng(1);
    let mut planted = Vec::new();
    let captions: Vec<CaptionRecord> = (0..1000)
        .map(|i| {
            let n = r.random_range(1..=9);
            let words: Vec<&str> = (0..n).map(|_| VOCAB[r.random_range(0..VOCAB.len())]).collect();
            planted.push(words.iter().map(|w| w.to_string()).collect::<BTreeSet<_>>());
            let text = format!("{DEFAULT_PROMPT} the {} in a scene", words.join(" and a "));
            CaptionRecord::new(format!("c{i}"), text, DEFAULT_PROMPT, r.random::<f64>(), &stop).unwrap()
        })
        .collect();
    for (c, want) in captions.iter().zip(&planted) {
        let mut want = want.clone();
        want.insert("scene".into());
        ensure(c.normalized_words == want, || {
            format!("tokenized {:?}, planted {want:?}", c.normalized_words)
        })?;
    }
    let mut nodes: BTreeMap<String, u64> = BTreeMap::new();
    let mut edges: BTreeMap<(String, String), u64> = BTreeMap::new();
    for c in &captions {
        let words: Vec<&String> = c.normalized_words.iter().collect();
        for i in 0..words.len() {
            *nodes.entry(words[i].clone()).or_default() += 1;
            for j in 0..words.len() {
                if words[i] < words[j] {
                    *edges.entry((words[i].clone(), words[j].clone())).or_default() += 1;
                }
            }
        }
    }
    let start = Instant::now();
    let graph = build_cooccurrence_with(Exec::default(), &captions);
    let elapsed = start.elapsed();
    ensure(graph.nodes() == &nodes, || "node counts differ from brute force".into())?;
    ensure(graph.edges() == &edges, || "edge counts differ from brute force".into())?;
    ensure(build_cooccurrence_with(Exec::Sequential, &captions) == graph, || {
        "sequential build differs".into()
    })?;
    ensure(elapsed < Duration::from_secs(2), || format!("build took {elapsed:?}"))?;
    Ok(format!(
        "1000 captions, {} nodes, {} edges, built in {elapsed:.2?}",
        nodes.len(),
        edges.len()
    ))
}

// criterion 2

fn oracle_iou(a: &RawMask, b: &RawMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    inter as f64 / union as f64
}

fn oracle_filter(masks: &[RawMask], w: u32, h: u32, min_frac: f64, thresh: f64) -> Vec<usize> {
    let area = |m: &RawMask| {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y))
            .count()
    };
    let pixels = (w * h) as f64;
    let eligible: Vec<usize> = (0..masks.len())
        .filter(|&i| area(&masks[i]) > 0 && area(&masks[i]) as f64 >= min_frac * pixels)
        .collect();
    // rank: larger area first, lower index on ties
    let outranks = |j: usize, i: usize| {
        let (aj, ai) = (area(&masks[j]), area(&masks[i]));
        aj > ai || (aj == ai && j < i)
    };
    let mut ranked = eligible.clone();
    ranked.sort_by(|&a, &b| {
        if outranks(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    let mut keep: BTreeMap<usize, bool> = BTreeMap::new();
    for &i in &ranked {
        let suppressed = ranked
            .iter()
            .take_while(|&&j| j != i)
            .any(|&j| keep[&j] && oracle_iou(&masks[j], &masks[i]) > thresh);
        keep.insert(i, !suppressed);
    }
    keep.into_iter().filter(|&(_, k)| k).map(|(i, _)| i).collect()
}

fn segment_filter_oracle() -> Check {
    let mut r = rng(2);
    let mut kept_total = 0;
    for set in 0..200 {
        let (w, h) = (r.random_range(4..40), r.random_range(4..40));
        let image = ImageRef::new(format!("im{set}"), w, h, "").unwrap();
        let mut masks: Vec<RawMask> = Vec::new();
        for _ in 0..r.random_range(1..12) {
            let m = random_mask(&mut r, &image.id, w, h);
            if r.random_bool(0.3) {
                masks.push(flip_one(&mut r, &m));
            }
            if r.random_bool(0.1) {
                masks.push(m.clone());
            }
            masks.push(m);
        }
        let got = filter_segments(&masks, &image, 0.01, 0.85);
        let want: Vec<RawMask> = oracle_filter(&masks, w, h, 0.01, 0.85)
            .into_iter()
            .map(|i| masks[i].clone())
            .collect();
        ensure(got == want, || {
            format!("mask set {set}: kept {} vs oracle {}", got.len(), want.len())
        })?;
        kept_total += got.len();
    }
    let (mut disjoint, mut checked) = (0, 0);
    while checked < 10_000 {
        let (w, h) = (r.random_range(1..24), r.random_range(1..24));
        let a = random_mask(&mut r, "p", w, h);
        let b = random_mask(&mut r, "p", w, h);
        if a.area() == 0 || b.area() == 0 {
            continue;
        }
        checked += 1;
        let ab = mask_iou(&a, &b).unwrap();
        ensure(ab.to_bits() == mask_iou(&b, &a).unwrap().to_bits(), || {
            "IoU not symmetric".into()
        })?;
        ensure(ab == oracle_iou(&a, &b), || "IoU differs from pixel count".into())?;
        ensure(mask_iou(&a, &a).unwrap() == 1.0, || "self IoU != 1".into())?;
        let rest = RawMask::from_fn("p", w, h, |x, y| !a.get(x, y) && b.get(x, y));
        if rest.area() > 0 {
            disjoint += 1;
            ensure(mask_iou(&a, &rest).unwrap() == 0.0, || "disjoint IoU != 0".into())?;
        }
    }
    Ok(format!(
        "200 mask sets ({kept_total} kept), 10000 IoU pairs ({disjoint} disjoint)"
    ))
}

// criterion 3

fn random_bundle(r: &mut ChaCha8Rng, layers: usize, heads: usize, p: usize, t: usize, ones: bool) -> AttentionBundle {
    let n = layers * heads * p * p * t;
    let a: Vec<f32> = (0..n).map(|_| r.random::<f32>()).collect();
    let g: Vec<f32> = (0..n)
        .map(|_| if ones { 1.0 } else { r.random_range(-1.0f32..1.0) })
        .collect();
    let tokens = (0..t).map(|i| format!("w{i}")).collect();
    AttentionBundle::new(AttentionSource::Itm, layers, heads, p, tokens, a, Some(g), Some(0.5)).unwrap()
}

fn gradcam_oracle() -> Check {
    let mut r = rng(3);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (p, t, heads, layers) = (
            r.random_range(2..=4),
            r.random_range(2..=5),
            r.random_range(1..=3),
            r.random_range(1..=3),
        );
        let b = random_bundle(&mut r, layers, heads, p, t, false);
        let a = b.attention_raw();
        let g = b.gradients_raw().unwrap();
        for l in 0..layers {
            let c = compute_gradcam(&b, l, true).map_err(|e| e.to_string())?;
            for patch in 0..p * p {
                for tok in 0..t {
                    let mut sum = 0.0f64;
                    for h in 0..heads {
                        let idx = ((l * heads + h) * p * p + patch) * t + tok;
                        sum += a[idx] as f64 * (g[idx] as f64).max(0.0);
                    }
                    let want = sum / heads as f64;
                    let err = (c.get(patch, tok) - want).abs();
                    worst = worst.max(err);
                    ensure(err <= 1e-6, || format!("cell ({patch}, {tok}) off by {err}"))?;
                }
            }
            cases += 1;
        }
        let ones = random_bundle(&mut r, 1, heads, p, t, true);
        let c = compute_gradcam(&ones, 0, true).map_err(|e| e.to_string())?;
        let attn = layer_map(&ones, 0, MapKind::Attention, Heads::Mean).map_err(|e| e.to_string())?;
        ensure(c == attn, || "unit gradients changed the attention map".into())?;
        if heads == 1 {
            let raw: Vec<f64> = ones.attention_raw().iter().map(|&v| v as f64).collect();
            ensure(c.values == raw, || {
                "unit gradients with one head do not return A".into()
            })?;
        }
    }
    for i in 0..100 {
        let (w, h) = (r.random_range(1..40), r.random_range(1..40));
        let mask = loop {
            let m = random_mask(&mut r, "c", w, h);
            if m.area() > 0 {
                break m;
            }
        };
        let c = r.random_range(-10.0..10.0);
        let got = segment_score(&Heatmap::constant(w as usize, h as usize, c), &mask).map_err(|e| e.to_string())?;
        let want = c * (mask.area() as f64).sqrt();
        ensure((got - want).abs() <= 1e-9, || {
            format!("constant law case {i}: {got} vs {want}")
        })?;
    }
    Ok(format!(
        "{cases} random layers (max error {worst:.1e}), identity gradients, 100 constant-map cases"
    ))
}

// criterion 4

fn naive_resize(grid: &[f64], p: usize, w: usize, h: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| {
        if n > 1 {
            i as f64 * (p - 1) as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (coord(x, w), coord(y, h));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(p - 1), (y0 + 1).min(p - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let v = |gx: usize, gy: usize| grid[gy * p + gx];
            out[y * w + x] = (1.0 - fx) * (1.0 - fy) * v(x0, y0)
                + fx * (1.0 - fy) * v(x1, y0)
                + (1.0 - fx) * fy * v(x0, y1)
                + fx * fy * v(x1, y1);
        }
    }
    out
}

fn association_fixture(
    r: &mut ChaCha8Rng,
    id: &str,
    w: u32,
    h: u32,
) -> (ImageRef, CaptionRecord, Vec<SegmentRecord>, AttentionBundle) {
    let stop = StopWords::english();
    let image = ImageRef::new(id, w, h, "").unwrap();
    let text = "a picture of the dog and a ball";
    let caption = CaptionRecord::new(id, text, DEFAULT_PROMPT, 0.8, &stop).unwrap();
    let rects = [(0, 0, w / 2, h / 2), (w / 3, h / 4, w, h), (1, h / 2, w / 2 + 1, h)];
    let segments = rects
        .iter()
        .enumerate()
        .map(|(i, &(x0, y0, x1, y1))| {
            let mask = RawMask::rect(id, w, h, x0, y0, x1, y1);
            SegmentRecord {
                segment_id: format!("{id}:{i}"),
                image_id: id.into(),
                area_fraction: mask.area_fraction(),
                mask,
                embedding: vec![0.0; 2],
                xy: [0.0, 0.0],
                coverage: 0,
            }
        })
        .collect();
    let tokens: Vec<String> = text.split(' ').map(str::to_string).collect();
    let (layers, heads, p) = (2, 3, 4);
    let n = layers * heads * p * p * tokens.len();
    let a = (0..n).map(|_| r.random::<f32>()).collect();
    let g = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let bundle = AttentionBundle::new(AttentionSource::Itm, layers, heads, p, tokens, a, Some(g), Some(0.8)).unwrap();
    (image, caption, segments, bundle)
}

fn association_oracle() -> Check {
    let mut r = rng(4);
    let (image, caption, segments, bundle) = association_fixture(&mut r, "img", 13, 9);
    let options = AssociationOptions {
        layer: 1,
        ..Default::default()
    };
    let m = build_association(&image, &caption, &segments, &bundle, &options).map_err(|e| e.to_string())?;
    ensure(m.cols == ["dog", "ball"], || format!("columns {:?}", m.cols))?;
    let (p, t, heads) = (bundle.p, bundle.token_count(), bundle.heads);
    let a = bundle.attention_raw();
    let g = bundle.gradients_raw().unwrap();
    let mut worst = 0.0f64;
    for (col, tok) in [(0usize, 4usize), (1, 7)] {
        let grid: Vec<f64> = (0..p * p)
            .map(|patch| {
                (0..heads)
                    .map(|hd| {
                        let idx = ((heads + hd) * p * p + patch) * t + tok;
                        a[idx] as f64 * (g[idx] as f64).max(0.0)
                    })
                    .sum::<f64>()
                    / heads as f64
            })
            .collect();
        let map = naive_resize(&grid, p, 13, 9);
        for (row, s) in segments.iter().enumerate() {
            let mut sum = 0.0;
            let mut area = 0usize;
            for y in 0..9u32 {
                for x in 0..13u32 {
                    if s.mask.get(x, y) {
                        sum += map[(y * 13 + x) as usize];
                        area += 1;
                    }
                }
            }
            let want = sum / (area as f64).sqrt();
            let got = m.get(row, col).ok_or("missing cell")?;
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-6, || format!("segment {row} word {col}: {got} vs {want}"))?;
        }
    }
    let (image2, caption2, segments2, bundle2) = association_fixture(&mut r, "img2", 7, 11);
    let m2 = build_association(&image2, &caption2, &segments2, &bundle2, &options).map_err(|e| e.to_string())?;
    let lone = AssociationMatrix::new(
        Scope::PerImage {
            image_id: "img3".into(),
        },
        vec!["img3:0".into()],
        vec!["img3".into()],
        vec!["cat".into()],
        vec![Some(0.25)],
    )
    .map_err(|e| e.to_string())?;
    let sources = [m, m2, lone];
    let union = union_associations(&sources).map_err(|e| e.to_string())?;
    let mut cells = 0;
    for src in &sources {
        for (i, row) in src.rows.iter().enumerate() {
            for (j, col) in src.cols.iter().enumerate() {
                ensure(union.cell(row, col) == src.get(i, j), || {
                    format!("union lost ({row}, {col})")
                })?;
                cells += 1;
            }
            for col in union.cols.iter().filter(|c| !src.cols.contains(c)) {
                ensure(union.cell(row, col).is_none(), || {
                    format!("({row}, {col}) should be missing")
                })?;
            }
        }
    }
    Ok(format!(
        "3 segments x 2 words match the naive pipeline (max error {worst:.1e}); union kept {cells} cells"
    ))
}

// criterion 5

fn coverage_oracle() -> Check {
    let mut r = rng(5);
    let mut matrices = Vec::new();
    for i in 0..100 {
        let (m, n) = (r.random_range(1..=8), r.random_range(1..=6));
        let image = format!("im{i}");
        // small value set so ties are common
        let values = (0..m * n).map(|_| Some(r.random_range(0..6) as f64 / 4.0)).collect();
        matrices.push(
            AssociationMatrix::new(
                Scope::PerImage {
                    image_id: image.clone(),
                },
                (0..m).map(|k| format!("{image}:{k}")).collect(),
                vec![image.clone(); m],
                (0..n).map(|k| format!("w{k}")).collect(),
                values,
            )
            .unwrap(),
        );
    }
    for k in 1..=5 {
        let got = coverage(&matrices, k).map_err(|e| e.to_string())?;
        for mat in &matrices {
            let (m, n) = mat.shape();
            for row in 0..m {
                let mut want = 0;
                for col in 0..n {
                    let v = mat.get(row, col).unwrap();
                    let better = (0..m)
                        .filter(|&o| {
                            let ov = mat.get(o, col).unwrap();
                            ov > v || (ov == v && o < row)
                        })
                        .count();
                    want += (better < k) as u32;
                }
                let id = &mat.rows[row];
                ensure(got.get(id).copied() == Some(want), || {
                    format!("k={k} segment {id}: {:?} vs {want}", got.get(id))
                })?;
            }
        }
    }
    Ok("100 matrices, k = 1..5 match per-column top-k counts".into())
}

// criterion 6

fn steering_checks() -> Check {
    let adapter = MockAdapter::new(MockConfig::default());
    let grid = adapter.grid();
    let mut r = rng(6);
    for i in 0..20 {
        let img = ImageRef::new(format!("s{i}"), r.random_range(16..640), r.random_range(16..480), "").unwrap();
        let res = steer(&adapter, &img, &SteerRequest::identity(&img.id, &grid)).map_err(|e| e.to_string())?;
        ensure(
            !res.changed && res.baseline_caption.as_bytes() == res.steered_caption.as_bytes(),
            || format!("identity changed caption of {}", img.id),
        )?;
        let ones = vec![1.0f32; grid.patch_count()];
        let base = adapter
            .generate_caption(&img, DEFAULT_PROMPT, None)
            .map_err(|e| e.to_string())?;
        let weighted = adapter
            .generate_caption(&img, DEFAULT_PROMPT, Some(&ones))
            .map_err(|e| e.to_string())?;
        ensure(base == weighted, || "all-ones weights differ from no weights".into())?;
    }

    let row_of = |v: u32, extent: u32, p: usize| {
        (0..p)
            .find(|&k| {
                (k as u64) * (extent as u64) <= (v as u64) * (p as u64)
                    && (v as u64) * (p as u64) < (k as u64 + 1) * extent as u64
            })
            .unwrap()
    };
    let img = ImageRef::new("g", 224, 224, "").unwrap();
    let corners = pixels_to_patches(&[(0, 0), (223, 0), (0, 223), (223, 223)], &img, 14).map_err(|e| e.to_string())?;
    ensure(corners == BTreeSet::from([0, 13, 182, 195]), || {
        format!("corners {corners:?}")
    })?;
    for _ in 0..1000 {
        let (w, h, p) = (r.random_range(1..700), r.random_range(1..700), r.random_range(1..40));
        let img = ImageRef::new("g", w, h, "").unwrap();
        let (x, y) = (r.random_range(0..w), r.random_range(0..h));
        let got = pixels_to_patches(&[(x, y)], &img, p).map_err(|e| e.to_string())?;
        let want = row_of(y, h, p) * p + row_of(x, w, p);
        ensure(got == BTreeSet::from([want]), || {
            format!("pixel ({x}, {y}) of {w}x{h}, p={p}: {got:?} vs {want}")
        })?;
    }

    let prompt = "the person is wearing";
    let captions = (0..10)
        .map(|i| CaptionFixture {
            image_id: format!("h{i}"),
            prompt: prompt.into(),
            caption: if i == 4 {
                format!("{prompt} a blue scarf")
            } else {
                format!("{prompt} a straw hat")
            },
            emphasized: None,
            suppressed: None,
            itm_score: None,
        })
        .collect();
    let adapter = adapter.with_fixtures(MockFixtures {
        captions,
        ..Default::default()
    });
    let images: Vec<ImageRef> = (0..10)
        .map(|i| ImageRef::new(format!("h{i}"), 64, 64, "").unwrap())
        .collect();
    let targets = BTreeSet::from(["hats".to_string(), "beanie".to_string()]);
    let rep = steer_batch(&adapter, &images, prompt, &targets, None, Exec::default()).map_err(|e| e.to_string())?;
    ensure(
        rep.rate
            == SuccessRate {
                successes: 9,
                attempted: 10,
            }
            && rep.success_rate == 0.9,
        || format!("batch rate {:?} = {}", rep.rate, rep.success_rate),
    )?;
    Ok("identity x20 byte-identical, 4 corners + 1000 pixels, batch 9/10 = 0.9".into())
}

// criterion 7

fn peaked(
    p: usize,
    layers: usize,
    heads: usize,
    planted_layer: usize,
    peak: usize,
    elsewhere: usize,
) -> AttentionBundle {
    let n = p * p;
    let mut a = vec![0.0f32; layers * heads * n];
    for l in 0..layers {
        for h in 0..heads {
            let cell = if l == planted_layer { peak } else { elsewhere };
            a[(l * heads + h) * n + cell] = 1.0;
        }
    }
    let g = vec![1.0f32; a.len()];
    AttentionBundle::new(
        AttentionSource::Itm,
        layers,
        heads,
        p,
        vec!["dog".into()],
        a,
        Some(g),
        Some(0.9),
    )
    .unwrap()
}

fn grounding_checks() -> Check {
    let (p, layers, heads, planted) = (4, 6, 2, 4);
    let adapter = MockAdapter::new(MockConfig {
        grid: PatchGrid { p, patch_px: 4 },
        layers,
        heads,
        ..Default::default()
    });
    let inside = p + 1; // grid (1, 1) lands on pixel (5, 5)
    let outside = p * p - 1; // grid (3, 3) lands on pixel (15, 15)
    let mut examples = Vec::new();
    for i in 0..50 {
        let img = ImageRef::new(format!("e{i}"), 16, 16, "").unwrap();
        let peak = if i < 35 { inside } else { outside };
        adapter.plant_bundle(&img.id, "dog", peaked(p, layers, heads, planted, peak, outside));
        examples.push(GroundingExample::new(img, "dog", Region::Box([0.0, 0.0, 8.0, 8.0])).unwrap());
    }
    let rep = evaluate(&examples, Variant::ItmGradCam, &adapter, &EvalOptions::default()).map_err(|e| e.to_string())?;
    ensure(rep.per_layer_accuracy[planted] == 0.7, || {
        format!("accuracy {:?}", rep.per_layer_accuracy)
    })?;
    ensure(best_layer(&rep) == Some(planted), || {
        format!("best layer {:?}", best_layer(&rep))
    })?;
    let grads_before = adapter.gradient_reads();
    let ca = evaluate(&examples, Variant::ItmCa, &adapter, &EvalOptions::default()).map_err(|e| e.to_string())?;
    ensure(adapter.gradient_reads() == grads_before, || {
        "attention-only variant requested gradients".into()
    })?;
    ensure(adapter.attention_reads() == 50, || {
        format!("{} attention-only calls", adapter.attention_reads())
    })?;
    ensure(ca.per_layer_accuracy[planted] == 0.7, || {
        "attention-only accuracy differs".into()
    })?;
    Ok(format!(
        "accuracy {} at layer {planted}, best layer {planted}, 0 gradient reads for ITM CA",
        rep.per_layer_accuracy[planted]
    ))
}

// criterion 8

fn persistence_checks() -> Check {
    let mut r = rng(8);
    for i in 0..1000 {
        let ndim = r.random_range(0..=4);
        let dims: Vec<u64> = (0..ndim).map(|_| r.random_range(0..7)).collect();
        let n: u64 = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random())).collect();
        let t = TensorBlob::new(dims, data).map_err(|e| e.to_string())?;
        let bytes = t.to_bytes();
        let back = TensorBlob::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back == t && back.to_bytes() == bytes, || {
            format!("tensor {i} changed in round trip")
        })?;
    }
    let big = TensorBlob::new(
        vec![12, 12, 576, 30],
        (0..12 * 12 * 576 * 30).map(|_| r.random::<f32>()).collect(),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        TensorBlob::from_bytes(&big.to_bytes()).map_err(|e| e.to_string())? == big,
        || "large tensor".into(),
    )?;
    for i in 0..1000 {
        let (w, h) = (r.random_range(1..48), r.random_range(1..48));
        let m = match i % 10 {
            0 => RawMask::empty("r", w, h),
            1 => RawMask::rect("r", w, h, 0, 0, w, h),
            _ => random_mask(&mut r, "r", w, h),
        };
        let counts = rle_encode(m.bits(), h, w);
        let bits = rle_decode(&counts, h, w).map_err(|e| e.to_string())?;
        ensure(bits == m.bits(), || format!("RLE mask {i} changed"))?;
        let back = RawMask::from_rle("r", &m.to_rle()).map_err(|e| e.to_string())?;
        ensure(back == m, || format!("mask {i} changed through Rle"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ArtifactStore::open(dir.path()).map_err(|e| e.to_string())?;
    let key = ArtifactKey::new("ds", "cls", Stage::Tensors, "t").map_err(|e| e.to_string())?;
    let id = store.put(&key, &big).map_err(|e| e.to_string())?;
    ensure(matches!(store.put(&key, &big), Err(Error::Conflict(_))), || {
        "second put did not conflict".into()
    })?;
    ensure(store.get::<TensorBlob>(&id).map_err(|e| e.to_string())? == big, || {
        "stored tensor changed".into()
    })?;
    let jkey = ArtifactKey::new("ds", "cls", Stage::Reports, "r").map_err(|e| e.to_string())?;
    store.put(&jkey, &Json(vec![1u32, 2])).map_err(|e| e.to_string())?;
    ensure(
        matches!(store.put(&jkey, &Json(vec![3u32])), Err(Error::Conflict(_))),
        || "json overwrite allowed".into(),
    )?;
    Ok("1000 tensors + [12,12,576,30], 1000 RLE masks bit-identical, overwrite refused".into())
}

// criterion 9

fn pipeline_smoke() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ArtifactStore::open(dir.path()).map_err(|e| e.to_string())?;
    let adapter = MockAdapter::new(MockConfig::default());
    let manifest = DatasetManifest {
        dataset_id: "smoke".into(),
        records: (0..5)
            .map(|i| DatasetRecord {
                id: format!("i{i}"),
                path: format!("i{i}.jpg"),
                width: 120,
                height: 90,
                label: "tench".into(),
                split: "train".into(),
            })
            .collect(),
        config: PipelineConfig::default(),
    };
    register_dataset(&store, &manifest).map_err(|e| e.to_string())?;
    let job = run_ingest(&store, &adapter, "smoke", &IngestOptions::default()).map_err(|e| e.to_string())?;
    ensure(job.state == JobState::Done && job.errors.is_empty(), || {
        format!("job ended {:?}", job.state)
    })?;
    let stages = [
        Stage::Captions,
        Stage::Masks,
        Stage::Tensors,
        Stage::Segments,
        Stage::Matrices,
        Stage::Graphs,
        Stage::Reports,
    ];
    for s in stages {
        ensure(!store.list("smoke", s).map_err(|e| e.to_string())?.is_empty(), || {
            format!("{s:?} has no artifacts")
        })?;
    }
    let first = job.writes;
    let again = run_ingest(&store, &adapter, "smoke", &IngestOptions::default()).map_err(|e| e.to_string())?;
    ensure(again.state == JobState::Done && again.writes == 0, || {
        format!("re-run wrote {}", again.writes)
    })?;
    Ok(format!("5 images, {first} artifacts committed, re-run wrote 0"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("co-occurrence oracle", cooccurrence_oracle),
        ("segment filtering oracle", segment_filter_oracle),
        ("grad-cam oracle", gradcam_oracle),
        ("end-to-end association", association_oracle),
        ("coverage oracle", coverage_oracle),
        ("steering identity and routing", steering_checks),
        ("grounding planted peaks", grounding_checks),
        ("persistence round trips", persistence_checks),
        ("pipeline smoke", pipeline_smoke),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why} ({secs:.2}s)", i + 1);
            }
        }
    }
    let total = start.elapsed();
    let in_budget = total < Duration::from_secs(60);
    println!(
        "{} suite runtime {total:.2?} (limit 60s)",
        if in_budget { "PASS" } else { "FAIL" }
    );
    if failed > 0 || !in_budget {
        std::process::exit(1);
    }
}
