//! Plain descriptive statistics on slices.

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Batch-centered Pearson correlation with additive stabilizer:
/// `<x̃, ỹ> / (‖x̃‖·‖ỹ‖ + eps)`.
pub fn pearson(x: &[f64], y: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx.sqrt() * syy.sqrt() + eps)
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}
