use serde::{Deserialize, Serialize};

use super::TheoryError;

/// Risk of the causal readout before and after adding the conditional-mean
/// residual correction `t*(x) = E[r | x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// E[Var(r | x)].
    pub noise_term: f64,
    /// E[(E[r | x])²].
    pub bias_term: f64,
    /// E[r²].
    pub risk_before: f64,
    /// E[(r − t*(x))²].
    pub risk_after: f64,
}

/// `bins[i]` is the discretized input of sample `i` and `r[i] = y_i − y_c,i`.
///
/// `t*` is fitted on the even-indexed samples and every risk is measured on
/// the odd-indexed ones, so `risk_after` is an out-of-sample estimate.
pub fn residual_decomposition(bins: &[usize], r: &[f64]) -> Result<ResidualReport, TheoryError> {
    if bins.len() != r.len() || r.len() < 4 {
        return Err(TheoryError::TooFewSamples {
            need: 4,
            got: bins.len().min(r.len()),
        });
    }
    let n_bins = bins.iter().max().map_or(0, |m| m + 1);
    let bin_means = |parity: usize| {
        let mut sum = vec![0.0; n_bins];
        let mut count = vec![0usize; n_bins];
        for (i, (&b, &v)) in bins.iter().zip(r).enumerate() {
            if i % 2 == parity {
                sum[b] += v;
                count[b] += 1;
            }
        }
        (sum, count)
    };
    let (fit_sum, fit_count) = bin_means(0);
    let (ev_sum, ev_count) = bin_means(1);
    let empty: Vec<usize> = (0..n_bins).filter(|&b| ev_count[b] > 0 && fit_count[b] == 0).collect();
    if !empty.is_empty() {
        return Err(TheoryError::EmptyBins(empty));
    }
    let t_star = |b: usize| fit_sum[b] / fit_count[b] as f64;
    let ev_mean = |b: usize| ev_sum[b] / ev_count[b] as f64;
    let (mut before, mut after, mut noise, mut bias, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&b, &v)) in bins.iter().zip(r).enumerate() {
        if i % 2 == 1 {
            before += v * v;
            after += (v - t_star(b)).powi(2);
            noise += (v - ev_mean(b)).powi(2);
            bias += t_star(b).powi(2);
            n += 1.0;
        }
    }
    Ok(ResidualReport {
        noise_term: noise / n,
        bias_term: bias / n,
        risk_before: before / n,
        risk_after: after / n,
    })
}
