//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor, drawn once uniformly and
    /// once from the nonzero analytic entries; tensors at or below this size
    /// are checked exhaustively.
    pub samples_per_param: usize,
    /// Use the fourth-order five-point central stencil instead of the
    /// two-point one.
    pub fourth_order: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 8,
            fourth_order: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: usize,
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate of each parameter tensor, in parameter order.
    pub worst: Vec<CoordinateCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against central differences of `loss_fn` around
/// `params` on sampled coordinates of every tensor.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &[Tensor],
    names: &[String],
    analytic: &[Tensor],
    options: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Tensor]) -> Result<f64, TensorError>,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = params.to_vec();
    let mut eval = |work: &mut Vec<Tensor>, p: usize, i: usize, delta: f64| {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + delta;
        let v = loss_fn(work);
        work[p].data_mut()[i] = orig;
        match v {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(TensorError::NonFinite { op: "grad_check loss" }),
            Err(e) => Err(e),
        }
    };
    let h = options.step;
    let mut worst = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for p in 0..params.len() {
        let n = params[p].len();
        if analytic[p].len() != n {
            return Err(TensorError::Shape {
                op: "grad_check",
                detail: format!("gradient {p} has {} values, parameter {n}", analytic[p].len()),
            });
        }
        let coords: Vec<usize> = if n <= options.samples_per_param {
            (0..n).collect()
        } else {
            // uniform draws plus draws from where the analytic gradient is
            // nonzero, so sparse gradients (embedding rows) are exercised
            let mut c = sample(&mut rng, n, options.samples_per_param).into_vec();
            let support: Vec<usize> = (0..n).filter(|&i| analytic[p].data()[i] != 0.0).collect();
            let m = options.samples_per_param.min(support.len());
            c.extend(sample(&mut rng, support.len(), m).into_iter().map(|j| support[j]));
            c.sort_unstable();
            c.dedup();
            c
        };
        let mut param_worst: Option<CoordinateCheck> = None;
        for i in coords {
            let numeric = if options.fourth_order {
                let f1 = eval(&mut work, p, i, h)?;
                let b1 = eval(&mut work, p, i, -h)?;
                let f2 = eval(&mut work, p, i, 2.0 * h)?;
                let b2 = eval(&mut work, p, i, -2.0 * h)?;
                (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h)
            } else {
                let f1 = eval(&mut work, p, i, h)?;
                let b1 = eval(&mut work, p, i, -h)?;
                (f1 - b1) / (2.0 * h)
            };
            let a = analytic[p].data()[i];
            let rel = relative_error(a, numeric);
            checked += 1;
            max_rel = max_rel.max(rel);
            if param_worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                param_worst = Some(CoordinateCheck {
                    param: p,
                    name: names.get(p).cloned().unwrap_or_else(|| format!("param{p}")),
                    coord: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        worst.extend(param_worst);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        worst,
    })
}
