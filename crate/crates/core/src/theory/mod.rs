//! Numerical witnesses for the batch-correlation analysis behind the causal
//! objective: the closed-form within-batch correlation of `s = a·c + b·q`,
//! its sensitivities, the leakage coefficient `b*`, the invariance gate and
//! the trivial-branch risk decomposition.

mod montecarlo;
mod report;
mod residual;

use serde::{Deserialize, Serialize};

pub use montecarlo::{monte_carlo_corr, sample_batch};
pub use report::{random_scenario, verify_theory, CheckRecord};
pub use residual::{residual_decomposition, ResidualReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("batch {batch}: degenerate predictor, D_e = 0")]
    Degenerate { batch: usize },
    #[error("sensitivity needs a ≠ 0 and b = 0 (a = {a}, b = {b})")]
    NotAtInvariantPoint { a: f64, b: f64 },
    #[error("no sensitivity: every Γ_e is 0")]
    NoSensitivity,
    #[error("batch {0} out of range")]
    BatchOutOfRange(usize),
    #[error("bins without fitting samples: {0:?}")]
    EmptyBins(Vec<usize>),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Within-batch moments of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMoments {
    /// Corr_e(q, y).
    pub alpha: f64,
    /// Corr_e(c, q).
    pub rho: f64,
    pub sigma_c: f64,
    pub sigma_q: f64,
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryScenario {
    pub a: f64,
    pub b: f64,
    /// Corr_e(c, y), the same in every batch.
    pub kappa: f64,
    pub batches: Vec<BatchMoments>,
    pub rho_star: f64,
    pub batch_size: usize,
    pub theta: f64,
    pub var_eta: f64,
}

impl TheoryScenario {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::InvalidScenario(m));
        if self.batches.is_empty() {
            return bad("no batches".into());
        }
        if !(self.kappa.abs() <= 1.0) {
            return bad(format!("|kappa| > 1: {}", self.kappa));
        }
        for (e, m) in self.batches.iter().enumerate() {
            if !(m.sigma_c > 0.0 && m.sigma_q > 0.0 && m.sigma_y > 0.0) {
                return bad(format!("batch {e}: standard deviations must be positive"));
            }
            if !(m.alpha.abs() <= 1.0 && m.rho.abs() <= 1.0) {
                return bad(format!("batch {e}: correlations must lie in [-1, 1]"));
            }
            if correlation_det(self.kappa, m.alpha, m.rho) < -1e-12 {
                return bad(format!(
                    "batch {e}: (kappa, alpha, rho) = ({}, {}, {}) is not a valid correlation structure",
                    self.kappa, m.alpha, m.rho
                ));
            }
        }
        if self.var_eta < 0.0 {
            return bad("var_eta must be >= 0".into());
        }
        Ok(())
    }

    fn batch(&self, e: usize) -> Result<&BatchMoments, TheoryError> {
        self.batches.get(e).ok_or(TheoryError::BatchOutOfRange(e))
    }
}

/// Determinant of the (c, q, y) correlation matrix.
fn correlation_det(kappa: f64, alpha: f64, rho: f64) -> f64 {
    1.0 - kappa * kappa - alpha * alpha - rho * rho + 2.0 * kappa * alpha * rho
}

/// `(A κ + B α) / D` with `D² = A² + B² + 2ABρ`, for explicit coefficients.
pub fn corr_with(s: &TheoryScenario, e: usize, a: f64, b: f64) -> Result<f64, TheoryError> {
    let m = s.batch(e)?;
    let (aa, bb) = (a * m.sigma_c, b * m.sigma_q);
    let d2 = aa * aa + bb * bb + 2.0 * aa * bb * m.rho;
    if !(d2 > 0.0) {
        return Err(TheoryError::Degenerate { batch: e });
    }
    Ok((aa * s.kappa + bb * m.alpha) / d2.sqrt())
}

/// Within-batch Pearson correlation of `s` with `y` in batch `e`.
pub fn corr_closed_form(s: &TheoryScenario, e: usize) -> Result<f64, TheoryError> {
    corr_with(s, e, s.a, s.b)
}

/// Γ_e: derivative of the batch correlation in `b` at the invariant point `b = 0`.
pub fn sensitivity_at_invariant(s: &TheoryScenario, e: usize) -> Result<f64, TheoryError> {
    if s.a == 0.0 || s.b != 0.0 {
        return Err(TheoryError::NotAtInvariantPoint { a: s.a, b: s.b });
    }
    let m = s.batch(e)?;
    Ok(m.sigma_q / (s.a * m.sigma_c).abs() * (m.alpha - s.kappa * m.rho))
}

/// ∂Corr_e/∂α_e = B_e / D_e.
pub fn alpha_slope(s: &TheoryScenario, e: usize) -> Result<f64, TheoryError> {
    let m = s.batch(e)?;
    let (aa, bb) = (s.a * m.sigma_c, s.b * m.sigma_q);
    let d2 = aa * aa + bb * bb + 2.0 * aa * bb * m.rho;
    if !(d2 > 0.0) {
        return Err(TheoryError::Degenerate { batch: e });
    }
    Ok(bb / d2.sqrt())
}

fn at_invariant(s: &TheoryScenario) -> TheoryScenario {
    TheoryScenario { b: 0.0, ..s.clone() }
}

fn gammas(s: &TheoryScenario) -> Result<Vec<f64>, TheoryError> {
    let s0 = at_invariant(s);
    (0..s.batches.len()).map(|e| sensitivity_at_invariant(&s0, e)).collect()
}

/// First-order minimizer of `Σ_e (Corr_e(b) − ρ*)²`: `−Σ δ_e(0) Γ_e / Σ Γ_e²`.
pub fn b_star(s: &TheoryScenario) -> Result<f64, TheoryError> {
    let g = gammas(s)?;
    let gg: f64 = g.iter().map(|v| v * v).sum();
    if gg == 0.0 {
        return Err(TheoryError::NoSensitivity);
    }
    let mut num = 0.0;
    for (e, ge) in g.iter().enumerate() {
        let delta0 = corr_with(s, e, s.a, 0.0)? - s.rho_star;
        num += delta0 * ge;
    }
    Ok(-num / gg)
}

/// `Σ_e (Corr_e(a, b) − ρ*)²`.
pub fn surrogate(s: &TheoryScenario, a: f64, b: f64) -> Result<f64, TheoryError> {
    (0..s.batches.len())
        .map(|e| corr_with(s, e, a, b).map(|c| (c - s.rho_star).powi(2)))
        .sum()
}

/// Slope of the surrogate in `b` at `b = 0`: `2(κ − ρ*) Σ Γ_e` for `a > 0`.
pub fn surrogate_slope_at_invariant(s: &TheoryScenario) -> Result<f64, TheoryError> {
    let g = gammas(s)?;
    let mut slope = 0.0;
    for (e, ge) in g.iter().enumerate() {
        slope += 2.0 * (corr_with(s, e, s.a, 0.0)? - s.rho_star) * ge;
    }
    Ok(slope)
}

/// Population Corr(c, y) under `y = θc + η`.
pub fn kappa_from_generative(theta: f64, var_c: f64, var_eta: f64) -> f64 {
    theta * var_c / (var_c * (theta * theta * var_c + var_eta)).sqrt()
}

/// Minimizes the surrogate over `b` alone on `[lo, hi]` by a grid scan
/// followed by golden-section refinement.
pub fn brute_force_b(s: &TheoryScenario, lo: f64, hi: f64) -> Result<f64, TheoryError> {
    const GRID: usize = 4001;
    let f = |b: f64| surrogate(s, s.a, b).unwrap_or(f64::INFINITY);
    let step = (hi - lo) / (GRID - 1) as f64;
    let (mut best, mut best_v) = (lo, f64::INFINITY);
    for k in 0..GRID {
        let b = lo + k as f64 * step;
        let v = f(b);
        if v < best_v {
            best = b;
            best_v = v;
        }
    }
    let (mut x0, mut x1) = ((best - step).max(lo), (best + step).min(hi));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = x1 - phi * (x1 - x0);
        let d = x0 + phi * (x1 - x0);
        if f(c) < f(d) {
            x1 = d;
        } else {
            x0 = c;
        }
    }
    Ok(0.5 * (x0 + x1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub a: f64,
    pub b: f64,
    pub ratio: f64,
    /// Population variance of Corr_e across batches at the final point.
    pub dispersion: f64,
    pub surrogate: f64,
    pub iterations: usize,
    /// False when the dispersion does not depend on `b`, so `b` is not pinned down.
    pub identifiable: bool,
}

fn gradient(s: &TheoryScenario, a: f64, b: f64) -> Result<(f64, f64), TheoryError> {
    let (mut ga, mut gb) = (0.0, 0.0);
    for (e, m) in s.batches.iter().enumerate() {
        let (aa, bb) = (a * m.sigma_c, b * m.sigma_q);
        let d2 = aa * aa + bb * bb + 2.0 * aa * bb * m.rho;
        if !(d2 > 0.0) {
            return Err(TheoryError::Degenerate { batch: e });
        }
        let d = d2.sqrt();
        let n = aa * s.kappa + bb * m.alpha;
        let r = 2.0 * (n / d - s.rho_star);
        ga += r * m.sigma_c * (s.kappa * d - n * (aa + bb * m.rho) / d) / d2;
        gb += r * m.sigma_q * (m.alpha * d - n * (bb + aa * m.rho) / d) / d2;
    }
    Ok((ga, gb))
}

fn dispersion(s: &TheoryScenario, a: f64, b: f64) -> Result<f64, TheoryError> {
    let c: Vec<f64> = (0..s.batches.len()).map(|e| corr_with(s, e, a, b)).collect::<Result<_, _>>()?;
    Ok(crate::stats::variance(&c))
}

/// Gradient descent with backtracking on the surrogate over `(a, b)`, from
/// the scenario's coefficients.
pub fn invariance_gate(s: &TheoryScenario, budget: usize) -> Result<GateReport, TheoryError> {
    s.validate()?;
    let (mut a, mut b) = (s.a, s.b);
    let mut f = surrogate(s, a, b)?;
    let mut lr = 1.0;
    let mut iterations = 0;
    for _ in 0..budget {
        iterations += 1;
        let (ga, gb) = gradient(s, a, b)?;
        let g2 = ga * ga + gb * gb;
        if g2 < 1e-30 {
            break;
        }
        lr *= 2.0;
        loop {
            let (na, nb) = (a - lr * ga, b - lr * gb);
            if let Ok(nf) = surrogate(s, na, nb) {
                if nf <= f - 0.5 * lr * g2 {
                    (a, b, f) = (na, nb, nf);
                    break;
                }
            }
            lr *= 0.5;
            if lr < 1e-20 {
                break;
            }
        }
        if lr < 1e-20 {
            break;
        }
    }
    let scale = a.abs().max(1e-12);
    let probe = [-0.5, 0.5].map(|k| dispersion(s, a, k * scale));
    let identifiable = probe.iter().any(|p| matches!(p, Ok(v) if *v > 1e-12));
    Ok(GateReport {
        a,
        b,
        ratio: b.abs() / scale,
        dispersion: dispersion(s, a, b)?,
        surrogate: f,
        iterations,
        identifiable,
    })
}

#[cfg(test)]
mod tests;
