use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|, |numeric|) over checked coordinates.
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ± perturbation switched a hinge side; excluded from the max.
    pub skipped_at_kinks: usize,
    /// Some hinge input sits within `eps` of its kink at the base point.
    pub non_differentiable_point: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor], stops: &[Tensor]) -> Result<(f64, Vec<bool>), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::with_frozen_stops(stops.to_vec());
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    let sides = tape.hinge_margins().iter().map(|m| *m > 0.0).collect();
    Ok((v, sides))
}

/// Checks the gradient of the scalar built by `f` at `params`, over every coordinate.
///
/// `f` receives the bound parameter vars and must be deterministic. Values
/// behind `stop_gradient` are held at the base point in the perturbed
/// evaluations, so the reference is the derivative the tape claims to compute.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |k| (pi, k)))
        .collect();
    grad_check_at(f, params, eps, &coords)
}

/// Like [`grad_check`], restricted to the listed (parameter, flat index) coordinates.
pub fn grad_check_at<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let non_differentiable_point = tape.hinge_margins().iter().any(|m| m.abs() < eps);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    // Perturbed evaluations keep detached values at the base point.
    let stops = tape.stop_values();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped_at_kinks: 0,
        non_differentiable_point,
    };
    for &(pi, k) in coords {
        let orig = params[pi].data()[k];
        work[pi].data_mut()[k] = orig + eps;
        let (plus, sides_plus) = evaluate(&f, &work, &stops)?;
        work[pi].data_mut()[k] = orig - eps;
        let (minus, sides_minus) = evaluate(&f, &work, &stops)?;
        work[pi].data_mut()[k] = orig;
        if sides_plus != sides_minus {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi].data()[k];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((pi, k));
        }
    }
    Ok(report)
}
