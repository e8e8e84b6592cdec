use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, GraphError};

const CONTEXT_STREAM: u64 = 0x5eed_c0de;

/// How the per-sample context value `q` is built from a batch.
///
/// For sample `i` in batch `e`:
/// `q_i = strength · (mean of the other labels in e + g_e · y_i) + noise_sd · ξ_i`
/// with `g_e ~ U(gain.0, gain.1)` drawn once per batch and `ξ_i ~ N(0, 1)`.
/// The within-batch association of `q` with `y` therefore changes from batch
/// to batch, and `q_i` changes when the batch around sample `i` changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextModel {
    pub strength: f64,
    pub gain: (f64, f64),
    pub noise_sd: f64,
}

impl ContextModel {
    /// Context disabled: `q ≡ 0`.
    pub fn none() -> Self {
        Self {
            strength: 0.0,
            gain: (0.0, 0.0),
            noise_sd: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.strength == 0.0 && self.noise_sd == 0.0
    }

    fn values(&self, labels: &[f64], members: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.is_none() {
            return vec![0.0; members.len()];
        }
        let g = if self.gain.1 > self.gain.0 {
            rng.random_range(self.gain.0..self.gain.1)
        } else {
            self.gain.0
        };
        let total: f64 = members.iter().map(|&i| labels[i]).sum();
        let others = (members.len() - 1) as f64;
        members
            .iter()
            .map(|&i| {
                let loo = (total - labels[i]) / others;
                let xi: f64 = rng.sample(StandardNormal);
                self.strength * (loo + g * labels[i]) + self.noise_sd * xi
            })
            .collect()
    }
}

/// A mini-batch: positions into the dataset plus the context values of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: usize,
    pub members: Vec<usize>,
    pub context: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Partitions the dataset into batches of `batch_size`. A trailing batch
/// smaller than 2 is merged into the previous one. With `shuffle`, the
/// permutation is a pure function of `seed`; context noise always is.
pub fn assemble_batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    context: &ContextModel,
) -> Result<Vec<Batch>, GraphError> {
    if batch_size < 2 {
        return Err(GraphError::BatchSize(batch_size));
    }
    if ds.len() < 2 {
        return Err(GraphError::TooSmall(ds.len()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let tail = groups.pop().expect("non-empty");
        groups.last_mut().expect("len > 1").extend(tail);
    }
    let labels = ds.labels();
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CONTEXT_STREAM);
            rng.set_stream(id as u64);
            let context = context.values(&labels, &members, &mut rng);
            Batch { id, members, context }
        })
        .collect())
}
