//! Exact GP regression by dense Cholesky.

use nalgebra::{DMatrix, DVector};

use super::{log_2pi_const, validate_data, Diagnostics, Objective, Prediction, VARIANCE_FLOOR};
use crate::error::{GpError, Result};
use crate::kernels::{kernel_diag, kernel_matrix, kernel_matrix_sym, kernel_vjp, HyperParams, Points};
use crate::linalg::{cholesky, tri_solve, CholFactor, JitterPolicy, Side};

/// Largest `n` for which a dense factorisation is attempted.
pub const DENSE_CAP: usize = 20_000;

fn guard(n: usize) -> Result<()> {
    if n > DENSE_CAP {
        return Err(GpError::InvalidArgument(format!(
            "n = {n} exceeds the dense limit of {DENSE_CAP}"
        )));
    }
    Ok(())
}

pub(crate) fn factor_khat(theta: &HyperParams, x: &DMatrix<f64>) -> Result<CholFactor> {
    let mut k = kernel_matrix_sym(&theta.kernel(), x)?;
    k.add_diagonal(theta.noise());
    cholesky(&k, &JitterPolicy::none())
}

fn centred(theta: &HyperParams, y: &DVector<f64>) -> DVector<f64> {
    y.add_scalar(-theta.mean())
}

/// Log marginal likelihood without its gradient.
pub fn exact_lml_value(theta: &HyperParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    validate_data(theta, x, y)?;
    guard(x.nrows())?;
    let chol = factor_khat(theta, x)?;
    let yc = centred(theta, y);
    let half = tri_solve(&chol, &yc, Side::Lower)?;
    Ok(log_2pi_const(x.nrows()) - 0.5 * half.norm_squared() - 0.5 * chol.logdet())
}

/// Log marginal likelihood and its gradient over the unconstrained
/// hyperparameters.
pub fn exact_lml(theta: &HyperParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Objective> {
    validate_data(theta, x, y)?;
    guard(x.nrows())?;
    let n = x.nrows();
    let chol = factor_khat(theta, x)?;
    let yc = centred(theta, y);
    let alpha = chol.solve_vec(&yc)?;
    let logdet = chol.logdet();
    let value = log_2pi_const(n) - 0.5 * yc.dot(&alpha) - 0.5 * logdet;

    // dL = ½ Σ (ααᵀ − K̂⁻¹)_ij dK̂_ij
    let kinv = chol.inverse();
    let pts = Points::new(x);
    let vjp = kernel_vjp(
        &theta.kernel(),
        &pts,
        &pts,
        |i, j| 0.5 * (alpha[i] * alpha[j] - kinv[(i, j)]),
        false,
    );
    let mut grad = vec![0.0; theta.len()];
    grad[..vjp.params.len()].copy_from_slice(&vjp.params);
    grad[theta.index_noise()] = 0.5 * (alpha.norm_squared() - kinv.trace()) * theta.noise_derivative();
    grad[theta.index_mean()] = alpha.sum();

    Ok(Objective {
        value,
        grad,
        diagnostics: Diagnostics {
            logdet: Some(logdet),
            ..Default::default()
        },
    })
}

/// Posterior mean and marginal variance at `xs`.
pub fn exact_predict(theta: &HyperParams, x: &DMatrix<f64>, y: &DVector<f64>, xs: &DMatrix<f64>) -> Result<Prediction> {
    validate_data(theta, x, y)?;
    guard(x.nrows())?;
    crate::error::check_dim(theta.input_dim(), xs.ncols(), "test input columns")?;
    let chol = factor_khat(theta, x)?;
    let k = theta.kernel();
    let alpha = chol.solve_vec(&centred(theta, y))?;
    let kfs = kernel_matrix(&k, x, xs)?;
    let mean = kfs.tr_mul(&alpha).add_scalar(theta.mean());
    let half = tri_solve(&chol, &kfs, Side::Lower)?;
    let prior = kernel_diag(&k, xs)?;
    let variance = DVector::from_fn(xs.nrows(), |i, _| {
        (prior[i] - half.column(i).norm_squared()).max(VARIANCE_FLOOR)
    });
    Ok(Prediction {
        mean,
        variance,
        noise: theta.noise(),
    })
}
