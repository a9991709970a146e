//! Iterative baseline: unpreconditioned CG solves with a Hutchinson
//! estimate of the log-determinant gradient.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::{factor_khat, DENSE_CAP};
use super::{log_2pi_const, validate_data, Diagnostics, Objective};
use crate::error::{check_dim, GpError, Result};
use crate::kernels::{kernel_matrix_sym, kernel_vjp, HyperParams, Points};
use crate::pcg::{cg_with, Stopping};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeSettings {
    /// Number of Rademacher probe vectors.
    pub probes: usize,
    /// CG stops once `‖r‖₂ ≤ cg_tol · ‖b‖₂`.
    pub cg_tol: f64,
}

impl Default for IterativeSettings {
    fn default() -> Self {
        IterativeSettings {
            probes: 16,
            cg_tol: 1e-2,
        }
    }
}

/// `count` vectors of independent ±1 entries.
pub fn rademacher_probes<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
        .collect()
}

/// Draws fresh probes from `rng` and evaluates [`iterative_with_probes`].
pub fn iterative_lml_and_grad<R: Rng>(
    theta: &HyperParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    settings: &IterativeSettings,
    rng: &mut R,
) -> Result<Objective> {
    if settings.probes == 0 {
        return Err(GpError::InvalidArgument("at least one probe required".into()));
    }
    let probes = rademacher_probes(x.nrows(), settings.probes, rng);
    iterative_with_probes(theta, x, y, &probes, settings.cg_tol)
}

/// Stochastic gradient of the log marginal likelihood with the given
/// probes. The value is reported with a dense log-determinant.
pub fn iterative_with_probes(
    theta: &HyperParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    probes: &[DVector<f64>],
    cg_tol: f64,
) -> Result<Objective> {
    validate_data(theta, x, y)?;
    let n = x.nrows();
    if probes.is_empty() {
        return Err(GpError::InvalidArgument("at least one probe required".into()));
    }
    if n > DENSE_CAP {
        return Err(GpError::InvalidArgument(format!(
            "n = {n} exceeds the dense limit of {DENSE_CAP} used for the reported value"
        )));
    }
    for p in probes {
        check_dim(n, p.len(), "probe length")?;
    }
    if !(cg_tol > 0.0) {
        return Err(GpError::InvalidArgument(format!(
            "cg_tol must be positive, got {cg_tol}"
        )));
    }
    let mut k = kernel_matrix_sym(&theta.kernel(), x)?;
    k.add_diagonal(theta.noise());
    let khat = k.into_matrix();
    let max_iters = 2 * n;
    let solve = |b: &DVector<f64>| {
        cg_with(
            |v| &khat * v,
            |r| Ok(r.clone()),
            b,
            &DVector::zeros(n),
            Stopping::RelativeResidual { tol: cg_tol },
            max_iters,
        )
    };

    let yc = y.add_scalar(-theta.mean());
    let quad = solve(&yc)?;
    let alpha = quad.v;
    let solves: Vec<_> = probes.par_iter().map(solve).collect::<Result<_>>()?;
    let cg_iters = quad.iters + solves.iter().map(|s| s.iters).sum::<usize>();
    let converged = quad.converged && solves.iter().all(|s| s.converged);

    let kern = theta.kernel();
    let pts = Points::new(x);
    let np = theta.len();
    let dnoise = theta.noise_derivative();

    // per-probe estimates of Tr(K̂⁻¹ ∂K̂_j) = s_iᵀ ∂K̂_j p_i
    let samples: Vec<Vec<f64>> = solves
        .par_iter()
        .zip(probes)
        .map(|(s, p)| {
            let sv = &s.v;
            let vjp = kernel_vjp(&kern, &pts, &pts, |a, b| sv[a] * p[b], false);
            let mut out = vec![0.0; np];
            out[..vjp.params.len()].copy_from_slice(&vjp.params);
            out[theta.index_noise()] = sv.dot(p) * dnoise;
            out
        })
        .collect();
    let count = samples.len() as f64;
    let mut estimates = vec![0.0; np];
    for s in &samples {
        estimates.iter_mut().zip(s).for_each(|(e, v)| *e += v / count);
    }
    let std_errors: Vec<f64> = (0..np)
        .map(|j| {
            if samples.len() < 2 {
                return f64::NAN;
            }
            let var = samples.iter().map(|s| (s[j] - estimates[j]).powi(2)).sum::<f64>() / (count - 1.0);
            (var / count).sqrt()
        })
        .collect();

    let qvjp = kernel_vjp(&kern, &pts, &pts, |a, b| 0.5 * alpha[a] * alpha[b], false);
    let mut grad = vec![0.0; np];
    grad[..qvjp.params.len()].copy_from_slice(&qvjp.params);
    grad[theta.index_noise()] = 0.5 * alpha.norm_squared() * dnoise;
    for (g, e) in grad.iter_mut().zip(&estimates) {
        *g -= 0.5 * e;
    }
    grad[theta.index_mean()] = alpha.sum();

    let logdet = factor_khat(theta, x)?.logdet();
    let value = log_2pi_const(n) - 0.5 * yc.dot(&alpha) - 0.5 * logdet;

    Ok(Objective {
        value,
        grad,
        diagnostics: Diagnostics {
            cg_iters,
            cg_converged: converged,
            logdet: Some(logdet),
            trace_estimates: estimates,
            trace_std_errors: std_errors,
            ..Default::default()
        },
    })
}
