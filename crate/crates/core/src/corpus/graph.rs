use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CaptionRecord;
use crate::par::Exec;

/// Word frequencies and caption-level co-occurrence counts.
///
/// Node count = number of captions containing the word. Edge count = number
/// of captions containing both words. Edges are stored once per unordered
/// pair with `a < b`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoOccurrenceGraph {
    nodes: BTreeMap<String, u64>,
    edges: BTreeMap<(String, String), u64>,
}

impl CoOccurrenceGraph {
    pub fn nodes(&self) -> &BTreeMap<String, u64> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<(String, String), u64> {
        &self.edges
    }

    pub fn node_count(&self, word: &str) -> u64 {
        self.nodes.get(word).copied().unwrap_or(0)
    }

    pub fn edge_count(&self, a: &str, b: &str) -> u64 {
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        self.edges.get(&key).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Count one caption's word set. `words` must be sorted and unique.
    pub fn add_caption<'a, I>(&mut self, words: I)
    where
        I: IntoIterator<Item = &'a String>,
        I::IntoIter: Clone,
    {
        let it = words.into_iter();
        for (i, a) in it.clone().enumerate() {
            *self.nodes.entry(a.clone()).or_default() += 1;
            for b in it.clone().skip(i + 1) {
                *self.edges.entry((a.clone(), b.clone())).or_default() += 1;
            }
        }
    }

    /// Pointwise sum of counts.
    pub fn merge(mut self, other: CoOccurrenceGraph) -> Self {
        for (w, c) in other.nodes {
            *self.nodes.entry(w).or_default() += c;
        }
        for (k, c) in other.edges {
            *self.edges.entry(k).or_default() += c;
        }
        self
    }

    /// Keep nodes with `count >= min_node` and edges with
    /// `count >= min_edge` whose endpoints both survive.
    pub fn filtered(&self, min_node: u64, min_edge: u64) -> Self {
        let nodes: BTreeMap<String, u64> = self
            .nodes
            .iter()
            .filter(|(_, &c)| c >= min_node)
            .map(|(w, &c)| (w.clone(), c))
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|((a, b), &c)| c >= min_edge && nodes.contains_key(a) && nodes.contains_key(b))
            .map(|(k, &c)| (k.clone(), c))
            .collect();
        Self { nodes, edges }
    }

    pub fn total_edge_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    /// Export document, optionally carrying per-word portions.
    pub fn to_document(&self, portions: Option<&BTreeMap<String, f64>>) -> GraphDocument {
        GraphDocument {
            nodes: self
                .nodes
                .iter()
                .map(|(w, &c)| NodeEntry {
                    word: w.clone(),
                    count: c,
                    portion: portions.and_then(|p| p.get(w).copied()),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|((a, b), &c)| EdgeEntry {
                    a: a.clone(),
                    b: b.clone(),
                    count: c,
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Self {
        Self {
            nodes: doc.nodes.iter().map(|n| (n.word.clone(), n.count)).collect(),
            edges: doc
                .edges
                .iter()
                .map(|e| {
                    let key = if e.a <= e.b {
                        (e.a.clone(), e.b.clone())
                    } else {
                        (e.b.clone(), e.a.clone())
                    };
                    (key, e.count)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub word: String,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub a: String,
    pub b: String,
    pub count: u64,
}

/// Graph export format; nodes sorted by word, edges by `(a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<EdgeEntry>,
}

impl Serialize for CoOccurrenceGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_document(None).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CoOccurrenceGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        GraphDocument::deserialize(d).map(|doc| CoOccurrenceGraph::from_document(&doc))
    }
}

pub fn build_cooccurrence(captions: &[CaptionRecord]) -> CoOccurrenceGraph {
    build_cooccurrence_with(Exec::default(), captions)
}

/// Shards captions across the executor and merges the partial graphs.
pub fn build_cooccurrence_with(exec: Exec, captions: &[CaptionRecord]) -> CoOccurrenceGraph {
    exec.fold(
        captions,
        CoOccurrenceGraph::default,
        |mut g, c| {
            g.add_caption(&c.normalized_words);
            g
        },
        CoOccurrenceGraph::merge,
    )
}
