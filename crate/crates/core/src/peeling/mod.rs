//! The causal block stack.
//!
//! Each layer gates every node of every view into a causal and a trivial
//! share, pools both per view, fuses views with softmax gates and reads one
//! causal and one trivial scalar per sample. The α-gated causal node
//! embeddings, passed through a D→D map with tanh, feed the next layer.
//!
//! The batch context `q` enters only through the scalar heads, as one more
//! input next to the fused representation. The forward computation of a
//! sample depends on its own graphs and its own `q_i`, never on other
//! members of the batch.

mod saliency;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::{encode_view, pool_nodes, BatchGraph, EncoderConfig, ViewEncoder, POOL_EPS};
use crate::graphs::{Batch, Dataset, MultiViewSample};

pub use saliency::{extract_saliency, render_svg, saliency_json, SaliencyMap};

#[derive(Debug, thiserror::Error)]
pub enum PeelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("layer {layer} out of range 1..={depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("sample {sample} is missing view \"{view}\"")]
    MissingView { sample: String, view: String },
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// How the causal part of the prediction is read out of `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// The last column, `y_c*`.
    #[default]
    Final,
    /// Mean over all layers.
    AverageCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub views: Vec<String>,
    pub geometric: Vec<bool>,
    pub encoder: EncoderConfig,
    pub depth: usize,
    pub tau: f64,
    /// Whether the heads receive the batch context.
    pub use_context: bool,
    pub trivial_branch: bool,
    pub readout: Readout,
    pub seed: u64,
}

impl ModelConfig {
    /// Views and geometry flags taken from a dataset, defaults elsewhere.
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self {
            views: ds.view_ids.clone(),
            geometric: ds.geometric.clone(),
            encoder: EncoderConfig {
                feature_dim: ds.feature_dim,
                ..EncoderConfig::default()
            },
            depth: 5,
            tau: 1.0,
            use_context: true,
            trivial_branch: true,
            readout: Readout::Final,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), PeelError> {
        let bad = |m: &str| Err(PeelError::Config(m.to_string()));
        if self.views.is_empty() || self.views.len() != self.geometric.len() {
            return bad("views and geometric flags must be non-empty and aligned");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        let e = &self.encoder;
        if e.feature_dim == 0 || e.hidden == 0 || e.embed_dim == 0 {
            return bad("encoder widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Gate {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Head {
    u: ParamId,
    u_q: ParamId,
    u0: ParamId,
}

/// Parameter handles of one causal block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    splitter: Vec<Gate>,
    fuse_c: Gate,
    fuse_t: Gate,
    head_c: Head,
    head_t: Head,
    forward: Option<Gate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeelModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoders: Vec<ViewEncoder>,
    blocks: Vec<Block>,
}

impl PeelModel {
    /// Builds a model with seeded uniform ±1/√fan_in weights, zero biases and
    /// zero context weights.
    pub fn new(config: ModelConfig) -> Result<Self, PeelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoders = config
            .views
            .iter()
            .zip(&config.geometric)
            .map(|(v, &g)| ViewEncoder::init(&mut store, v, g, &config.encoder, &mut rng))
            .collect();
        let d = config.encoder.embed_dim;
        let nv = config.views.len();
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = |s: &str| format!("blk{}.{s}", l + 1);
            let splitter = config
                .views
                .iter()
                .map(|v| Gate {
                    w: store.insert_uniform(p(&format!("split.{v}.w")), d, 1, &mut rng),
                    b: store.insert(p(&format!("split.{v}.b")), Tensor::scalar(0.0)),
                })
                .collect();
            let mut gate = |store: &mut ParamStore, name: &str| Gate {
                w: store.insert_uniform(p(&format!("{name}.w")), nv * d, nv, &mut rng),
                b: store.insert_zeros(p(&format!("{name}.b")), &[nv]),
            };
            let fuse_c = gate(&mut store, "fuse_c");
            let fuse_t = gate(&mut store, "fuse_t");
            let mut mk_head = |store: &mut ParamStore, name: &str| Head {
                u: store.insert_uniform(p(&format!("{name}.u")), d, 1, &mut rng),
                u_q: store.insert(p(&format!("{name}.u_q")), Tensor::scalar(0.0)),
                u0: store.insert(p(&format!("{name}.u0")), Tensor::scalar(0.0)),
            };
            let head_c = mk_head(&mut store, "head_c");
            let head_t = mk_head(&mut store, "head_t");
            let forward = (l + 1 < config.depth).then(|| Gate {
                w: store.insert_uniform(p("fwd.w"), d, d, &mut rng),
                b: store.insert_zeros(p("fwd.b"), &[d]),
            });
            blocks.push(Block {
                splitter,
                fuse_c,
                fuse_t,
                head_c,
                head_t,
                forward,
            });
        }
        Ok(Self {
            config,
            params: store,
            encoders,
            blocks,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn num_views(&self) -> usize {
        self.config.views.len()
    }

    /// Parameters of everything that feeds the causal scalars (encoders,
    /// splitters, causal fusion, causal heads, forward maps).
    pub fn causal_path_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for id in self.params.ids() {
            let n = self.params.name(id);
            if !(n.contains(".fuse_t.") || n.contains(".head_t.")) {
                out.push(id);
            }
        }
        out
    }

    /// Parameters of the trivial heads and trivial fusion gates.
    pub fn trivial_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.contains(".fuse_t.") || n.contains(".head_t.")
            })
            .collect()
    }

    /// Sets the splitter weights and biases of every layer to zero (α ≡ 0.5).
    pub fn zero_splitters(&mut self) {
        for b in &self.blocks {
            for g in &b.splitter {
                let (w, bias) = (g.w, g.b);
                self.params.get_mut(w).data_mut().fill(0.0);
                self.params.get_mut(bias).data_mut().fill(0.0);
            }
        }
    }

    /// Sets the trivial heads to zero.
    pub fn zero_trivial_heads(&mut self) {
        for b in &self.blocks {
            for id in [b.head_t.u, b.head_t.u_q, b.head_t.u0] {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    /// The context coefficient of the causal head at each layer.
    pub fn causal_context_weights(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| self.params.get(b.head_c.u_q).item()).collect()
    }
}

/// One batch, packed per view, ready for the stack.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub ids: Vec<String>,
    pub graphs: Vec<BatchGraph>,
    pub context: Vec<f64>,
    pub y: Vec<f64>,
}

impl BatchInput {
    pub fn new(samples: &[&MultiViewSample], context: Vec<f64>, views: &[String]) -> Result<Self, PeelError> {
        if samples.len() < 2 {
            return Err(PeelError::BatchTooSmall(samples.len()));
        }
        let mut graphs = Vec::with_capacity(views.len());
        for v in views {
            if let Some(s) = samples.iter().find(|s| s.view(v).is_none()) {
                return Err(PeelError::MissingView {
                    sample: s.id.clone(),
                    view: v.clone(),
                });
            }
            graphs.push(BatchGraph::from_samples(samples, v).expect("checked"));
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            graphs,
            context,
            y: samples.iter().map(|s| s.y).collect(),
        })
    }

    pub fn from_batch(ds: &Dataset, batch: &Batch, views: &[String]) -> Result<Self, PeelError> {
        let samples: Vec<&MultiViewSample> = batch.members.iter().map(|&i| &ds.samples[i]).collect();
        Self::new(&samples, batch.context.clone(), views)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tape handles produced by [`forward_stack`].
#[derive(Debug, Clone)]
pub struct StackVars {
    /// `c^(ℓ)` per layer, each of length B.
    pub c: Vec<Var>,
    /// `t^(ℓ)` per layer (constant zeros when the trivial branch is off).
    pub t: Vec<Var>,
    pub y_c_star: Var,
    pub t_sum: Var,
    /// Causal part of the prediction: `y_c*`, or the layer mean of C.
    pub causal_readout: Var,
    pub y_hat: Var,
    /// Final-layer causal pooled representation per view (B×D).
    pub view_z: Vec<Var>,
    /// α per layer, per view (N_v).
    pub alphas: Vec<Vec<Var>>,
    /// Causal fusion weights per layer (B×V).
    pub gate_weights: Vec<Var>,
    pub trivial_gate_weights: Vec<Var>,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeelTrace {
    pub sample_ids: Vec<String>,
    pub views: Vec<String>,
    /// B×L.
    pub c: Vec<Vec<f64>>,
    /// B×L.
    pub t: Vec<Vec<f64>>,
    /// Per layer, per sample, length-V simplex.
    pub gate_weights: Vec<Vec<Vec<f64>>>,
    pub trivial_gate_weights: Vec<Vec<Vec<f64>>>,
    /// Per layer, per view, per sample, per node.
    pub alphas: Vec<Vec<Vec<Vec<f64>>>>,
    pub y_c_star: Vec<f64>,
    pub t_sum: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl PeelTrace {
    pub fn depth(&self) -> usize {
        self.c.first().map_or(0, Vec::len)
    }

    pub(crate) fn collect(tape: &Tape, vars: &StackVars, input: &BatchInput, views: &[String]) -> Self {
        let b = input.len();
        let cols = |vs: &[Var]| -> Vec<Vec<f64>> {
            (0..b).map(|i| vs.iter().map(|&v| tape.value(v).data()[i]).collect()).collect()
        };
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = tape.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        };
        let alphas = vars
            .alphas
            .iter()
            .map(|per_view| {
                per_view
                    .iter()
                    .zip(&input.graphs)
                    .map(|(&a, g)| {
                        let d = tape.value(a).data();
                        (0..b).map(|i| d[g.offsets[i]..g.offsets[i + 1]].to_vec()).collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            sample_ids: input.ids.clone(),
            views: views.to_vec(),
            c: cols(&vars.c),
            t: cols(&vars.t),
            gate_weights: vars.gate_weights.iter().map(|&w| rows(w)).collect(),
            trivial_gate_weights: vars.trivial_gate_weights.iter().map(|&w| rows(w)).collect(),
            alphas,
            y_c_star: tape.value(vars.y_c_star).data().to_vec(),
            t_sum: tape.value(vars.t_sum).data().to_vec(),
            y_hat: tape.value(vars.y_hat).data().to_vec(),
        }
    }
}

/// Softmax-gated mix of per-view vectors: returns (fused B×D, weights B×V).
fn fuse(tape: &mut Tape, bound: &Bound, gate: &Gate, zs: &[Var], tau: f64) -> Result<(Var, Var), AutodiffError> {
    let cat = tape.concat(zs, 1)?;
    let logits = tape.matmul(cat, bound.var(gate.w))?;
    let logits = tape.add(logits, bound.var(gate.b))?;
    let w = tape.softmax(logits, tau)?;
    let mut fused = None;
    for (v, &z) in zs.iter().enumerate() {
        let wv = tape.column(w, v)?;
        let part = tape.row_scale(z, wv)?;
        fused = Some(match fused {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok((fused.expect("at least one view"), w))
}

fn head(tape: &mut Tape, bound: &Bound, h: &Head, z: Var, q: Option<Var>) -> Result<Var, AutodiffError> {
    let b = tape.value(z).rows();
    let s = tape.matmul(z, bound.var(h.u))?;
    let s = tape.reshape(s, vec![b])?;
    let s = tape.add(s, bound.var(h.u0))?;
    match q {
        Some(q) => {
            let qs = tape.mul(q, bound.var(h.u_q))?;
            tape.add(s, qs)
        }
        None => Ok(s),
    }
}

/// Runs encoders and all L blocks on one batch.
pub fn forward_stack(
    tape: &mut Tape,
    bound: &Bound,
    model: &PeelModel,
    input: &BatchInput,
) -> Result<StackVars, PeelError> {
    let cfg = &model.config;
    let b = input.len();
    if b < 2 {
        return Err(PeelError::BatchTooSmall(b));
    }
    let tau = cfg.tau;
    let q = if cfg.use_context {
        Some(tape.constant(Tensor::vector(input.context.clone()))?)
    } else {
        None
    };
    let mut emb: Vec<Var> = model
        .encoders
        .iter()
        .zip(&input.graphs)
        .map(|(enc, g)| encode_view(tape, bound, enc, g))
        .collect::<Result<_, _>>()?;

    let zeros = tape.constant(Tensor::zeros(&[b]))?;
    let mut vars = StackVars {
        c: Vec::new(),
        t: Vec::new(),
        y_c_star: zeros,
        t_sum: zeros,
        causal_readout: zeros,
        y_hat: zeros,
        view_z: Vec::new(),
        alphas: Vec::new(),
        gate_weights: Vec::new(),
        trivial_gate_weights: Vec::new(),
    };
    for blk in &model.blocks {
        let mut zc = Vec::with_capacity(emb.len());
        let mut zt = Vec::with_capacity(emb.len());
        let mut alphas = Vec::with_capacity(emb.len());
        for ((&e, g), sp) in emb.iter().zip(&input.graphs).zip(&blk.splitter) {
            let n = g.num_nodes();
            let logit = tape.matmul(e, bound.var(sp.w))?;
            let logit = tape.reshape(logit, vec![n])?;
            let logit = tape.add(logit, bound.var(sp.b))?;
            let alpha = tape.sigmoid(logit)?;
            zc.push(pool_nodes(tape, e, alpha, &g.segments, POOL_EPS)?);
            if cfg.trivial_branch {
                // The trivial branch reads detached inputs, so no loss on it
                // can move a parameter that feeds the causal scalars.
                let e_sg = tape.stop_gradient(e)?;
                let a_sg = tape.stop_gradient(alpha)?;
                let neg = tape.neg(a_sg)?;
                let beta = tape.add_scalar(neg, 1.0)?;
                zt.push(pool_nodes(tape, e_sg, beta, &g.segments, POOL_EPS)?);
            }
            alphas.push(alpha);
        }
        let (fc, wc) = fuse(tape, bound, &blk.fuse_c, &zc, tau)?;
        vars.c.push(head(tape, bound, &blk.head_c, fc, q)?);
        vars.gate_weights.push(wc);
        if cfg.trivial_branch {
            let (ft, wt) = fuse(tape, bound, &blk.fuse_t, &zt, tau)?;
            vars.t.push(head(tape, bound, &blk.head_t, ft, q)?);
            vars.trivial_gate_weights.push(wt);
        } else {
            vars.t.push(zeros);
        }
        if let Some(fw) = &blk.forward {
            for (e, &a) in emb.iter_mut().zip(&alphas) {
                let gated = tape.row_scale(*e, a)?;
                let lin = tape.matmul(gated, bound.var(fw.w))?;
                let lin = tape.add(lin, bound.var(fw.b))?;
                *e = tape.tanh(lin)?;
            }
        }
        vars.view_z = zc;
        vars.alphas.push(alphas);
    }

    vars.y_c_star = *vars.c.last().expect("depth >= 1");
    let mut t_sum = vars.t[0];
    for &t in &vars.t[1..] {
        t_sum = tape.add(t_sum, t)?;
    }
    vars.t_sum = t_sum;
    vars.causal_readout = match cfg.readout {
        Readout::Final => vars.y_c_star,
        Readout::AverageCausal => {
            let mut s = vars.c[0];
            for &c in &vars.c[1..] {
                s = tape.add(s, c)?;
            }
            tape.scale(s, 1.0 / vars.c.len() as f64)?
        }
    };
    vars.y_hat = tape.add(vars.causal_readout, vars.t_sum)?;
    Ok(vars)
}

/// Forward pass without gradients, returning plain values.
pub fn trace_batch(model: &PeelModel, input: &BatchInput) -> Result<PeelTrace, PeelError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false)?;
    let vars = forward_stack(&mut tape, &bound, model, input)?;
    Ok(PeelTrace::collect(&tape, &vars, input, &model.config.views))
}
