//! Multi-view graph samples, JSONL ingestion, the synthetic generator and
//! batch assembly with batch-coupled context.

mod batching;
mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

pub use batching::{assemble_batches, Batch, ContextModel};
pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset};
pub use synthetic::{generate_synthetic, tagged_motif, SynthScenario, MOTIF_TAG};

/// Standard view ids, in fusion order.
pub const VIEW_IDS: [&str; 3] = ["sm", "pe", "ge"];

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing view \"{view}\"")]
    MissingView { line: usize, view: String },
    #[error("line {line}: unexpected view \"{view}\"")]
    UnexpectedView { line: usize, view: String },
    #[error("line {line}: view \"{view}\" has feature_dim {found}, expected {expected}")]
    FeatureDim {
        line: usize,
        view: String,
        found: usize,
        expected: usize,
    },
    #[error("line {line}: edge endpoint out of range ({src}, {dst}) for {nodes} nodes in view \"{view}\"")]
    EdgeOutOfRange {
        line: usize,
        view: String,
        src: usize,
        dst: usize,
        nodes: usize,
    },
    #[error("line {line}: view \"{view}\": {message}")]
    Positions { line: usize, view: String, message: String },
    #[error("line {line}: view \"{view}\" has no nodes")]
    EmptyGraph { line: usize, view: String },
    #[error("dataset needs at least 2 samples, got {0}")]
    TooSmall(usize),
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),
}

/// One view of a sample: node features, undirected edges stored in both
/// directions, and optional 3-D node positions (geometry views only).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub positions: Option<Vec<[f64; 3]>>,
}

impl ViewGraph {
    /// Normalizes an undirected edge list: drops self-loops and duplicates,
    /// stores both directions, sorted.
    pub fn new(
        features: Vec<Vec<f64>>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        positions: Option<Vec<[f64; 3]>>,
    ) -> Self {
        let mut set = BTreeSet::new();
        for (s, d) in edges {
            if s != d {
                set.insert((s, d));
                set.insert((d, s));
            }
        }
        Self {
            features,
            edges: set.into_iter().collect(),
            positions,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn is_geometric(&self) -> bool {
        self.positions.is_some()
    }

    /// Each undirected edge once, as (min, max).
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().filter(|(s, d)| s < d).collect()
    }

    /// Neighbor lists, in ascending order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for &(s, d) in &self.edges {
            out[s].push(d);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub id: String,
    pub views: BTreeMap<String, ViewGraph>,
    pub y: f64,
    /// Planted sample-intrinsic signal (synthetic data only).
    pub planted_c: Option<f64>,
    /// Planted label noise (synthetic data only; not serialized).
    pub planted_noise: Option<f64>,
    /// Planted motif node indices, shared by all views (synthetic only; not serialized).
    pub motif: Option<Vec<usize>>,
}

impl MultiViewSample {
    pub fn view(&self, id: &str) -> Option<&ViewGraph> {
        self.views.get(id)
    }

    pub fn num_nodes(&self) -> usize {
        self.views.values().next().map_or(0, ViewGraph::num_nodes)
    }
}

/// An ordered, validated collection of samples sharing one view layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MultiViewSample>,
    pub view_ids: Vec<String>,
    pub feature_dim: usize,
    /// Whether each view (aligned with `view_ids`) carries node positions.
    pub geometric: Vec<bool>,
}

impl Dataset {
    pub fn new(samples: Vec<MultiViewSample>) -> Result<Self, GraphError> {
        let first = samples.first().ok_or(GraphError::TooSmall(0))?;
        let view_ids: Vec<String> = first.views.keys().cloned().collect();
        let feature_dim = first.views.values().next().map_or(0, ViewGraph::feature_dim);
        let view_ids = order_views(view_ids);
        let geometric = view_ids.iter().map(|v| first.views[v].is_geometric()).collect();
        let ds = Self {
            view_ids,
            feature_dim,
            geometric,
            samples,
        };
        for (i, s) in ds.samples.iter().enumerate() {
            ds.validate_sample(s, i + 1)?;
        }
        Ok(ds)
    }

    pub(crate) fn validate_sample(&self, s: &MultiViewSample, line: usize) -> Result<(), GraphError> {
        for v in &self.view_ids {
            if !s.views.contains_key(v) {
                return Err(GraphError::MissingView {
                    line,
                    view: v.clone(),
                });
            }
        }
        for (name, g) in &s.views {
            if !self.view_ids.contains(name) {
                return Err(GraphError::UnexpectedView {
                    line,
                    view: name.clone(),
                });
            }
            validate_view(name, g, self.feature_dim, line)?;
            let k = self.view_ids.iter().position(|v| v == name).expect("checked above");
            if g.is_geometric() != self.geometric[k] {
                return Err(GraphError::Positions {
                    line,
                    view: name.clone(),
                    message: if self.geometric[k] {
                        "geometry view without positions".into()
                    } else {
                        "positions on a non-geometry view".into()
                    },
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Samples at the given positions, as a new dataset with the same layout.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            view_ids: self.view_ids.clone(),
            feature_dim: self.feature_dim,
            geometric: self.geometric.clone(),
        }
    }

    /// Keeps only the listed views (in the given order).
    pub fn with_views(&self, views: &[String]) -> Result<Self, GraphError> {
        for v in views {
            if !self.view_ids.contains(v) {
                return Err(GraphError::MissingView { line: 0, view: v.clone() });
            }
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.views.retain(|k, _| views.contains(k));
                s
            })
            .collect();
        let geometric = views
            .iter()
            .map(|v| self.geometric[self.view_ids.iter().position(|x| x == v).expect("checked")])
            .collect();
        Ok(Self {
            samples,
            view_ids: views.to_vec(),
            feature_dim: self.feature_dim,
            geometric,
        })
    }
}

/// Standard ids first in their canonical order, any others after, sorted.
fn order_views(mut ids: Vec<String>) -> Vec<String> {
    ids.sort_by_key(|v| {
        (
            VIEW_IDS.iter().position(|s| s == v).unwrap_or(VIEW_IDS.len()),
            v.clone(),
        )
    });
    ids
}

fn validate_view(name: &str, g: &ViewGraph, feature_dim: usize, line: usize) -> Result<(), GraphError> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(GraphError::EmptyGraph {
            line,
            view: name.to_string(),
        });
    }
    for row in &g.features {
        if row.len() != feature_dim {
            return Err(GraphError::FeatureDim {
                line,
                view: name.to_string(),
                found: row.len(),
                expected: feature_dim,
            });
        }
    }
    for &(s, d) in &g.edges {
        if s >= n || d >= n {
            return Err(GraphError::EdgeOutOfRange {
                line,
                view: name.to_string(),
                src: s,
                dst: d,
                nodes: n,
            });
        }
    }
    if let Some(pos) = &g.positions {
        if pos.len() != n {
            return Err(GraphError::Positions {
                line,
                view: name.to_string(),
                message: format!("{} positions for {n} nodes", pos.len()),
            });
        }
    }
    Ok(())
}
