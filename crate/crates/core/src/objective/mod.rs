//! Loss terms: batch-centered Pearson correlation, the depth target
//! schedule, correlation and monotonicity penalties, the detached trivial
//! residual, prediction error, cross-view consistency, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::peeling::StackVars;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("correlation needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid objective config: {0}")]
    Config(String),
}

/// Switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Drop every auxiliary term: plain regression on the prediction loss.
    pub no_split: bool,
    /// Every layer targets ρ_max.
    pub no_schedule: bool,
    /// No trivial branch: prediction is the causal readout alone.
    pub no_trivial: bool,
    pub no_mono: bool,
    /// Read the causal part of the prediction as the mean over layers.
    pub average_causal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub gamma: f64,
    pub eps: f64,
    pub lambda_caus: f64,
    pub lambda_mono: f64,
    pub lambda_unif: f64,
    pub lambda_cons: f64,
    pub ablations: Ablations,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            rho_min: 0.5,
            rho_max: 0.8,
            gamma: 0.0,
            eps: 1e-8,
            lambda_caus: 1.0,
            lambda_mono: 0.5,
            lambda_unif: 1.0,
            lambda_cons: 0.0,
            ablations: Ablations::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Config(m));
        let unit = -1.0..=1.0;
        if !unit.contains(&self.rho_min) || !unit.contains(&self.rho_max) {
            return bad(format!("targets must lie in [-1, 1], got {} and {}", self.rho_min, self.rho_max));
        }
        if self.rho_min > self.rho_max {
            return bad(format!("rho_min {} exceeds rho_max {}", self.rho_min, self.rho_max));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        for (name, v) in [
            ("lambda_caus", self.lambda_caus),
            ("lambda_mono", self.lambda_mono),
            ("lambda_unif", self.lambda_unif),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// (λ_caus, λ_mono, λ_unif, λ_cons) after ablation switches.
    pub fn effective_weights(&self) -> [f64; 4] {
        let a = &self.ablations;
        if a.no_split {
            return [0.0, 0.0, 0.0, self.lambda_cons];
        }
        [
            self.lambda_caus,
            if a.no_mono { 0.0 } else { self.lambda_mono },
            if a.no_trivial { 0.0 } else { self.lambda_unif },
            self.lambda_cons,
        ]
    }

    /// Per-layer targets for depth `depth`.
    pub fn targets(&self, depth: usize) -> Vec<f64> {
        (1..=depth)
            .map(|l| {
                if self.ablations.no_schedule {
                    self.rho_max
                } else {
                    rho_schedule(l, depth, self.rho_min, self.rho_max)
                }
            })
            .collect()
    }
}

/// Loss values of one batch. With `weights` = (λ_caus, λ_mono, λ_unif, λ_cons),
/// `total == pred + λ_caus·corr + λ_mono·mono + λ_unif·triv + λ_cons·cons`
/// bitwise, evaluated left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub corr: f64,
    pub mono: f64,
    pub triv: f64,
    pub cons: f64,
    pub total: f64,
    pub layer_corr: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: [f64; 4],
}

impl LossBreakdown {
    /// Elementwise mean of several breakdowns (`total` is recomputed so the
    /// additive identity still holds).
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let layers = first.layer_corr.len();
        let mut out = LossBreakdown {
            pred: avg(&|b| b.pred),
            corr: avg(&|b| b.corr),
            mono: avg(&|b| b.mono),
            triv: avg(&|b| b.triv),
            cons: avg(&|b| b.cons),
            total: 0.0,
            layer_corr: (0..layers).map(|l| avg(&|b| b.layer_corr[l])).collect(),
            targets: first.targets.clone(),
            weights: first.weights,
        };
        out.total = out.recompute_total();
        Some(out)
    }

    pub fn recompute_total(&self) -> f64 {
        let [lc, lm, lu, lk] = self.weights;
        self.pred + lc * self.corr + lm * self.mono + lu * self.triv + lk * self.cons
    }
}

/// Target correlation of layer `l` (1-based) out of `depth`. A single layer
/// faces `rho_max`.
pub fn rho_schedule(l: usize, depth: usize, rho_min: f64, rho_max: f64) -> f64 {
    if depth <= 1 {
        return rho_max;
    }
    // Interpolate from the nearer end so both endpoints are exact.
    let t = (l - 1) as f64 / (depth - 1) as f64;
    if t <= 0.5 {
        rho_min + t * (rho_max - rho_min)
    } else {
        rho_max - (1.0 - t) * (rho_max - rho_min)
    }
}

/// `<c̃, ỹ> / (‖c̃‖‖ỹ‖ + ε)` with both vectors centered over the batch.
pub fn pearson_batch(tape: &mut Tape, c: Var, y: Var, eps: f64) -> Result<Var, ObjectiveError> {
    let n = tape.value(c).len();
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall(n));
    }
    let center = |tape: &mut Tape, v: Var| -> Result<Var, AutodiffError> {
        let m = tape.mean(v)?;
        tape.sub(v, m)
    };
    let cc = center(tape, c)?;
    let yc = center(tape, y)?;
    let num = tape.dot(cc, yc)?;
    let norm = |tape: &mut Tape, v: Var| -> Result<Var, AutodiffError> {
        let s = tape.square(v)?;
        let s = tape.sum(s)?;
        tape.sqrt(s)
    };
    let nc = norm(tape, cc)?;
    let ny = norm(tape, yc)?;
    let den = tape.mul(nc, ny)?;
    Ok(tape.div_eps(num, den, eps)?)
}

/// `(1/L)·Σ (corr_ℓ − ρ_ℓ)²`; also returns the per-layer correlations.
pub fn corr_loss(
    tape: &mut Tape,
    cols: &[Var],
    y: Var,
    targets: &[f64],
    eps: f64,
) -> Result<(Var, Vec<Var>), ObjectiveError> {
    if cols.len() != targets.len() || cols.is_empty() {
        return Err(ObjectiveError::Config(format!(
            "{} layers but {} targets",
            cols.len(),
            targets.len()
        )));
    }
    let mut corrs = Vec::with_capacity(cols.len());
    let mut acc = None;
    for (&c, &rho) in cols.iter().zip(targets) {
        let r = pearson_batch(tape, c, y, eps)?;
        corrs.push(r);
        let d = tape.add_scalar(r, -rho)?;
        let sq = tape.square(d)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq)?,
        });
    }
    let loss = tape.scale(acc.expect("non-empty"), 1.0 / cols.len() as f64)?;
    Ok((loss, corrs))
}

/// `(1/(L−1))·Σ max(0, corr_ℓ − corr_{ℓ+1} + γ)`; zero for a single layer.
/// Both neighbors stay differentiable.
pub fn mono_loss(tape: &mut Tape, corrs: &[Var], gamma: f64) -> Result<Var, ObjectiveError> {
    if corrs.len() < 2 {
        return Ok(tape.scalar(0.0)?);
    }
    let mut acc = None;
    for w in corrs.windows(2) {
        let d = tape.sub(w[0], w[1])?;
        let d = tape.add_scalar(d, gamma)?;
        let h = tape.relu(d)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    Ok(tape.scale(acc.expect("L >= 2"), 1.0 / (corrs.len() - 1) as f64)?)
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var, AutodiffError> {
    let d = tape.sub(a, b)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

/// `MSE(t_sum, y − stop_gradient(y_c*))`.
pub fn triv_loss(tape: &mut Tape, t_sum: Var, y: Var, y_c_star: Var) -> Result<Var, ObjectiveError> {
    let detached = tape.stop_gradient(y_c_star)?;
    let r = tape.sub(y, detached)?;
    Ok(mse(tape, t_sum, r)?)
}

/// Mean over view pairs (and samples) of `1 − cos(z_a, z_b)`; zero for fewer than 2 views.
pub fn consistency_loss(tape: &mut Tape, zs: &[Var], eps: f64) -> Result<Var, ObjectiveError> {
    if zs.len() < 2 {
        return Ok(tape.scalar(0.0)?);
    }
    let mut norms = Vec::with_capacity(zs.len());
    for &z in zs {
        let sq = tape.square(z)?;
        let s = tape.sum_axis(sq, 1)?;
        norms.push(tape.sqrt(s)?);
    }
    let mut acc = None;
    let mut pairs = 0;
    for a in 0..zs.len() {
        for b in a + 1..zs.len() {
            let p = tape.mul(zs[a], zs[b])?;
            let dots = tape.sum_axis(p, 1)?;
            let den = tape.mul(norms[a], norms[b])?;
            let cos = tape.div_eps(dots, den, eps)?;
            let one_minus = tape.neg(cos)?;
            let one_minus = tape.add_scalar(one_minus, 1.0)?;
            let m = tape.mean(one_minus)?;
            acc = Some(match acc {
                None => m,
                Some(x) => tape.add(x, m)?,
            });
            pairs += 1;
        }
    }
    Ok(tape.scale(acc.expect("V >= 2"), 1.0 / pairs as f64)?)
}

/// Builds the full objective for one batch and reports every term.
pub fn total_loss(
    tape: &mut Tape,
    vars: &StackVars,
    y: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let yv = tape.constant(Tensor::vector(y.to_vec()))?;
    let targets = cfg.targets(vars.c.len());
    let weights = cfg.effective_weights();

    let pred = mse(tape, vars.y_hat, yv)?;
    let (corr, corrs) = corr_loss(tape, &vars.c, yv, &targets, cfg.eps)?;
    let mono = mono_loss(tape, &corrs, cfg.gamma)?;
    let triv = triv_loss(tape, vars.t_sum, yv, vars.causal_readout)?;
    let cons = consistency_loss(tape, &vars.view_z, cfg.eps)?;

    let mut total = pred;
    for (term, w) in [corr, mono, triv, cons].into_iter().zip(weights) {
        let scaled = tape.scale(term, w)?;
        total = tape.add(total, scaled)?;
    }
    let v = |x: Var| tape.value(x).item();
    let breakdown = LossBreakdown {
        pred: v(pred),
        corr: v(corr),
        mono: v(mono),
        triv: v(triv),
        cons: v(cons),
        total: v(total),
        layer_corr: corrs.iter().map(|&c| v(c)).collect(),
        targets,
        weights,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests;
