use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ContextModel, Dataset, GraphError, MultiViewSample, ViewGraph, VIEW_IDS};

/// Added to feature 0 of every motif node.
pub const MOTIF_TAG: f64 = 6.0;

/// Parameters of the planted additive label model `y = θ·c(x) + η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthScenario {
    pub theta: f64,
    /// Standard deviation of η.
    pub noise_sd: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub motif_size: usize,
    /// Scale of the label-coupled part of the batch context.
    pub context_strength: f64,
    /// Range of the per-batch gain on the sample's own label inside the context.
    pub context_gain: (f64, f64),
    pub context_noise_sd: f64,
    pub n_views: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthScenario {
    fn default() -> Self {
        Self {
            theta: 1.0,
            noise_sd: 0.75,
            min_nodes: 10,
            max_nodes: 16,
            motif_size: 4,
            context_strength: 1.0,
            context_gain: (0.0, 1.0),
            context_noise_sd: 0.5,
            n_views: 3,
            feature_dim: 8,
            seed: 0,
        }
    }
}

impl SynthScenario {
    /// Population Corr(c, y) with Var(c) = 1.
    pub fn kappa(&self) -> f64 {
        let var_y = self.theta * self.theta + self.noise_sd * self.noise_sd;
        if var_y == 0.0 {
            0.0
        } else {
            self.theta / var_y.sqrt()
        }
    }

    /// The noise level that makes Corr(c, y) = `kappa` for this θ (Var(c) = 1).
    pub fn noise_sd_for_kappa(theta: f64, kappa: f64) -> f64 {
        theta.abs() * (1.0 / (kappa * kappa) - 1.0).max(0.0).sqrt()
    }

    pub fn view_ids(&self) -> Vec<String> {
        VIEW_IDS[..self.n_views.min(VIEW_IDS.len())]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn context(&self) -> ContextModel {
        ContextModel {
            strength: self.context_strength,
            gain: self.context_gain,
            noise_sd: self.context_noise_sd,
        }
    }

    fn validate(&self, n: usize) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::DegenerateScenario(m));
        if n < 2 {
            return Err(GraphError::TooSmall(n));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return bad(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if self.motif_size == 0 && self.theta != 0.0 {
            return bad("motif_size 0 with nonzero theta".into());
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return bad(format!("node range {}..={}", self.min_nodes, self.max_nodes));
        }
        if self.motif_size > self.min_nodes {
            return bad(format!(
                "motif_size {} exceeds min_nodes {}",
                self.motif_size, self.min_nodes
            ));
        }
        if !(1..=VIEW_IDS.len()).contains(&self.n_views) {
            return bad(format!("n_views must be 1..=3, got {}", self.n_views));
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        if self.context_gain.0 > self.context_gain.1 || self.context_noise_sd < 0.0 {
            return bad("invalid context parameters".into());
        }
        Ok(())
    }
}

struct RawSample {
    features: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    positions: Vec<[f64; 3]>,
    motif: Vec<usize>,
    c_raw: f64,
    noise: f64,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit projection over the non-tag features that defines c(x).
fn projection(s: &SynthScenario) -> Vec<f64> {
    let mut rng = sample_rng(s.seed, 0);
    let mut w: Vec<f64> = (1..s.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut w {
        *v /= norm;
    }
    w
}

/// Column permutation applied to the second view's features.
fn view_permutation(s: &SynthScenario) -> Vec<usize> {
    let mut rng = sample_rng(s.seed, 1);
    let mut p: Vec<usize> = (0..s.feature_dim).collect();
    p.shuffle(&mut rng);
    p
}

fn raw_sample(s: &SynthScenario, w: &[f64], index: usize) -> RawSample {
    let mut rng = sample_rng(s.seed, index as u64 + 2);
    let n = rng.random_range(s.min_nodes..=s.max_nodes);
    let mut features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..s.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut motif = order[..s.motif_size].to_vec();
    motif.sort_unstable();
    for &m in &motif {
        features[m][0] += MOTIF_TAG;
    }
    let c_raw = if motif.is_empty() {
        0.0
    } else {
        motif
            .iter()
            .map(|&m| features[m][1..].iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>())
            .sum::<f64>()
            / motif.len() as f64
    };
    let p = if n > 1 {
        (2.0 * (n as f64).ln() / n as f64).min(1.0)
    } else {
        0.0
    };
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let positions = (0..n).map(|_| unit_ball_point(&mut rng)).collect();
    let noise = if s.noise_sd > 0.0 {
        Normal::new(0.0, s.noise_sd).expect("sd > 0").sample(&mut rng)
    } else {
        0.0
    };
    RawSample {
        features,
        edges,
        positions,
        motif,
        c_raw,
        noise,
    }
}

fn unit_ball_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p;
        }
    }
}

/// Generates `n` samples. Sample `i` depends only on (scenario seed, i),
/// except for the dataset-wide standardization of c(x).
pub fn generate_synthetic(s: &SynthScenario, n: usize) -> Result<Dataset, GraphError> {
    s.validate(n)?;
    let w = projection(s);
    let perm = view_permutation(s);
    let raws: Vec<RawSample> = (0..n).map(|i| raw_sample(s, &w, i)).collect();

    let mean = raws.iter().map(|r| r.c_raw).sum::<f64>() / n as f64;
    let var = raws.iter().map(|r| (r.c_raw - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    let views = s.view_ids();

    let samples = raws
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let c = if sd > 0.0 { (r.c_raw - mean) / sd } else { 0.0 };
            let y = s.theta * c + r.noise;
            let mut map = BTreeMap::new();
            for v in &views {
                let g = match v.as_str() {
                    "sm" => ViewGraph::new(r.features.clone(), r.edges.iter().copied(), None),
                    "pe" => {
                        let permuted = r
                            .features
                            .iter()
                            .map(|row| perm.iter().map(|&k| row[k]).collect())
                            .collect();
                        ViewGraph::new(permuted, r.edges.iter().copied(), None)
                    }
                    _ => ViewGraph::new(
                        r.features.clone(),
                        r.edges.iter().copied(),
                        Some(r.positions.clone()),
                    ),
                };
                map.insert(v.clone(), g);
            }
            MultiViewSample {
                id: format!("syn-{i:05}"),
                views: map,
                y,
                planted_c: Some(c),
                planted_noise: Some(r.noise),
                motif: Some(r.motif),
            }
        })
        .collect();
    Dataset::new(samples)
}

/// Motif nodes recovered from the tag on feature 0 of the first view.
pub fn tagged_motif(sample: &MultiViewSample) -> Vec<usize> {
    let Some(g) = sample.views.values().next() else {
        return Vec::new();
    };
    g.features
        .iter()
        .enumerate()
        .filter(|(_, f)| f[0] > MOTIF_TAG / 2.0)
        .map(|(i, _)| i)
        .collect()
}
