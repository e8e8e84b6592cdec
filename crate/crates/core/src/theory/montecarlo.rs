use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{TheoryError, TheoryScenario};
use crate::rng::derive_seed;

/// Lower Cholesky factor of a 3×3 covariance; tolerates a singular matrix.
fn cholesky3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (m[i][i] - s).max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { (m[i][j] - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

/// `n` jointly Gaussian draws of `(c, q, y)` with batch `e`'s moments.
pub fn sample_batch(
    s: &TheoryScenario,
    e: usize,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TheoryError> {
    s.validate()?;
    let m = s.batches.get(e).ok_or(TheoryError::BatchOutOfRange(e))?;
    let sd = [m.sigma_c, m.sigma_q, m.sigma_y];
    let corr = [[1.0, m.rho, s.kappa], [m.rho, 1.0, m.alpha], [s.kappa, m.alpha, 1.0]];
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = corr[i][j] * sd[i] * sd[j];
        }
    }
    let l = cholesky3(cov);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, e as u64));
    let (mut c, mut q, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
        c.push(l[0][0] * z[0]);
        q.push(l[1][0] * z[0] + l[1][1] * z[1]);
        y.push(l[2][0] * z[0] + l[2][1] * z[1] + l[2][2] * z[2]);
    }
    Ok((c, q, y))
}

/// Sample Pearson correlation of `s = a·c + b·q` with `y` over `n` draws.
pub fn monte_carlo_corr(s: &TheoryScenario, e: usize, n: usize, seed: u64) -> Result<f64, TheoryError> {
    if n < 2 {
        return Err(TheoryError::TooFewSamples { need: 2, got: n });
    }
    let (c, q, y) = sample_batch(s, e, n, seed)?;
    let pred: Vec<f64> = c.iter().zip(&q).map(|(c, q)| s.a * c + s.b * q).collect();
    Ok(crate::stats::pearson(&pred, &y, 0.0))
}
