//! Per-view message-passing encoders mapping node features into a shared
//! D-dimensional embedding space, and gated node pooling.
//!
//! A batch of graphs is encoded as one block-diagonal graph: node features
//! are stacked, neighbor aggregation is a sparse product, and per-sample
//! pooling is a sparse segment sum.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::graphs::{MultiViewSample, ViewGraph};

/// Stabilizer of the pooling denominator.
pub const POOL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub rounds: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden: 32,
            embed_dim: 32,
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Round {
    w_upd: ParamId,
    w_msg: ParamId,
    b: ParamId,
}

/// Parameter handles of one view's encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEncoder {
    pub view: String,
    pub geometric: bool,
    w_in: ParamId,
    b_in: ParamId,
    rounds: Vec<Round>,
    w_proj: ParamId,
    b_proj: ParamId,
}

impl ViewEncoder {
    /// Registers a freshly initialized encoder for `view` in `store`.
    pub fn init(store: &mut ParamStore, view: &str, geometric: bool, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let p = |s: &str| format!("enc.{view}.{s}");
        let w_in = store.insert_uniform(p("w_in"), cfg.feature_dim, cfg.hidden, rng);
        let b_in = store.insert_zeros(p("b_in"), &[cfg.hidden]);
        let rounds = (0..cfg.rounds)
            .map(|r| Round {
                w_upd: store.insert_uniform(p(&format!("r{r}.w_upd")), cfg.hidden, cfg.hidden, rng),
                w_msg: store.insert_uniform(p(&format!("r{r}.w_msg")), cfg.hidden, cfg.hidden, rng),
                b: store.insert_zeros(p(&format!("r{r}.b")), &[cfg.hidden]),
            })
            .collect();
        let w_proj = store.insert_uniform(p("w_proj"), cfg.hidden, cfg.embed_dim, rng);
        let b_proj = store.insert_zeros(p("b_proj"), &[cfg.embed_dim]);
        Self {
            view: view.to_string(),
            geometric,
            w_in,
            b_in,
            rounds,
            w_proj,
            b_proj,
        }
    }
}

/// Several graphs of one view packed block-diagonally.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    /// Node `offsets[i]..offsets[i+1]` belong to graph `i`.
    pub offsets: Vec<usize>,
    pub features: Tensor,
    /// Row-normalized neighbor weights (rows of isolated nodes are empty).
    pub adjacency: Rc<SparseMatrix>,
    /// Graph-by-node indicator used for pooling.
    pub segments: Rc<SparseMatrix>,
}

impl BatchGraph {
    pub fn from_graphs(graphs: &[&ViewGraph]) -> Self {
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        let mut adj = Vec::new();
        let mut seg = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            let base = *offsets.last().expect("non-empty");
            rows.extend(g.features.iter().cloned());
            for (i, nbrs) in g.neighbors().iter().enumerate() {
                seg.push((gi, base + i, 1.0));
                let w: Vec<f64> = nbrs
                    .iter()
                    .map(|&j| match &g.positions {
                        Some(p) => 1.0 / (1.0 + dist(&p[i], &p[j])),
                        None => 1.0,
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                for (&j, wj) in nbrs.iter().zip(w) {
                    adj.push((base + i, base + j, wj / total));
                }
            }
            offsets.push(base + g.num_nodes());
        }
        let n = *offsets.last().expect("non-empty");
        let features = Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(&[0, 0]));
        Self {
            adjacency: Rc::new(SparseMatrix::from_triplets(n, n, &adj)),
            segments: Rc::new(SparseMatrix::from_triplets(graphs.len(), n, &seg)),
            offsets,
            features,
        }
    }

    /// Packs view `view` of every sample.
    pub fn from_samples(samples: &[&MultiViewSample], view: &str) -> Option<Self> {
        let graphs: Option<Vec<&ViewGraph>> = samples.iter().map(|s| s.view(view)).collect();
        graphs.map(|g| Self::from_graphs(&g))
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Node embeddings (N×D) of a packed batch.
pub fn encode_view(tape: &mut Tape, bound: &Bound, enc: &ViewEncoder, g: &BatchGraph) -> Result<Var, AutodiffError> {
    let x = tape.constant(g.features.clone())?;
    let xw = tape.matmul(x, bound.var(enc.w_in))?;
    let pre = tape.add(xw, bound.var(enc.b_in))?;
    let mut h = tape.tanh(pre)?;
    for r in &enc.rounds {
        let msg = tape.spmm(&g.adjacency, h)?;
        let a = tape.matmul(h, bound.var(r.w_upd))?;
        let m = tape.matmul(msg, bound.var(r.w_msg))?;
        let s = tape.add(a, m)?;
        let s = tape.add(s, bound.var(r.b))?;
        h = tape.tanh(s)?;
    }
    let out = tape.matmul(h, bound.var(enc.w_proj))?;
    tape.add(out, bound.var(enc.b_proj))
}

/// Per-graph weighted mean `Σ gᵢ·embᵢ / (Σ gᵢ + ε)`; returns (graphs × D).
pub fn pool_nodes(
    tape: &mut Tape,
    emb: Var,
    gate: Var,
    segments: &Rc<SparseMatrix>,
    eps: f64,
) -> Result<Var, AutodiffError> {
    let weighted = tape.row_scale(emb, gate)?;
    let num = tape.spmm(segments, weighted)?;
    let den = tape.spmm(segments, gate)?;
    let ones = tape.constant(Tensor::full(&[segments.rows()], 1.0))?;
    let inv = tape.div_eps(ones, den, eps)?;
    tape.row_scale(num, inv)
}

/// Convenience: embeddings of a single graph, outside of training.
pub fn encode_graph(store: &ParamStore, enc: &ViewEncoder, g: &ViewGraph) -> Result<Tensor, AutodiffError> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false)?;
    let bg = BatchGraph::from_graphs(&[g]);
    let out = encode_view(&mut tape, &bound, enc, &bg)?;
    Ok(tape.value(out).clone())
}
