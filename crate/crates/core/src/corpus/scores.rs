use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CaptionRecord;
use crate::error::{invalid, Result};
use crate::par::Exec;

pub const DEFAULT_BINS: usize = 20;

/// Equal-width histogram over `[0, 1]`; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ScoreHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn itm_histogram(scores: &[f64], bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid(format!("score {s} outside [0, 1]")));
        }
        let mut idx = ((s * bins as f64).floor() as usize).min(bins - 1);
        // keep the index consistent with the stored edges under rounding
        while idx + 1 < bins && s >= bin_edges[idx + 1] {
            idx += 1;
        }
        while idx > 0 && s < bin_edges[idx] {
            idx -= 1;
        }
        counts[idx] += 1;
    }
    Ok(ScoreHistogram { bin_edges, counts })
}

pub fn word_portions_in_range(captions: &[CaptionRecord], lo: f64, hi: f64) -> Result<BTreeMap<String, f64>> {
    word_portions_in_range_with(Exec::default(), captions, lo, hi)
}

/// For each word: captions scored in `[lo, hi]` that contain it, divided by
/// all captions that contain it.
pub fn word_portions_in_range_with(
    exec: Exec,
    captions: &[CaptionRecord],
    lo: f64,
    hi: f64,
) -> Result<BTreeMap<String, f64>> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(invalid(format!(
            "score range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    type Tally = BTreeMap<String, (u64, u64)>;
    let tally: Tally = exec.fold(
        captions,
        Tally::new,
        |mut acc, c| {
            let inside = (lo..=hi).contains(&c.itm_score) as u64;
            for w in &c.normalized_words {
                let e = acc.entry(w.clone()).or_default();
                e.0 += inside;
                e.1 += 1;
            }
            acc
        },
        |mut a, b| {
            for (w, (i, t)) in b {
                let e = a.entry(w).or_default();
                e.0 += i;
                e.1 += t;
            }
            a
        },
    );
    Ok(tally
        .into_iter()
        .map(|(w, (inside, total))| (w, inside as f64 / total as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(words: &[&str], score: f64) -> CaptionRecord {
        CaptionRecord {
            image_id: "i".into(),
            text: String::new(),
            prompt: String::new(),
            normalized_words: words.iter().map(|s| s.to_string()).collect(),
            itm_score: score,
        }
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(itm_histogram(&[0.1, 0.2, 0.9], 2).unwrap().counts, vec![2, 1]);
        assert_eq!(itm_histogram(&[], 4).unwrap().counts, vec![0; 4]);
        let h = itm_histogram(&[0.0, 1.0, 0.5], 2).unwrap();
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.bin_edges, vec![0.0, 0.5, 1.0]);
        assert!(itm_histogram(&[1.2], 3).is_err());
        assert!(itm_histogram(&[f64::NAN], 3).is_err());
        assert!(itm_histogram(&[0.5], 0).is_err());
    }

    #[test]
    fn scores_on_edges_land_in_upper_bin() {
        for bins in 1..50usize {
            let scores: Vec<f64> = (0..bins).map(|k| k as f64 / bins as f64).collect();
            let h = itm_histogram(&scores, bins).unwrap();
            assert!(h.counts.iter().all(|&c| c == 1), "bins={bins} {:?}", h.counts);
        }
    }

    #[test]
    fn portion_examples() {
        let caps = vec![rec(&["fish"], 0.2), rec(&["man"], 0.5), rec(&["fish", "man"], 0.9)];
        let p = word_portions_in_range(&caps, 0.0, 0.6).unwrap();
        assert_eq!(p["fish"], 0.5);
        assert_eq!(p["man"], 0.5);
        let full = word_portions_in_range(&caps, 0.0, 1.0).unwrap();
        assert!(full.values().all(|&v| v == 1.0));
        let none = word_portions_in_range(&caps, 0.3, 0.4).unwrap();
        assert!(none.values().all(|&v| v == 0.0));
        assert!(word_portions_in_range(&caps, 0.7, 0.2).is_err());
        assert!(word_portions_in_range(&caps, -0.1, 0.2).is_err());
    }
}
