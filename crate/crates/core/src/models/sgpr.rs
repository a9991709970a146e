//! Sparse variational regression: the collapsed evidence lower bound and
//! its predictive distribution.

use nalgebra::{DMatrix, DVector};

use super::{
    log_2pi_const, nystrom_adjoint, sparse_mean_weights, sparse_variance, validate_data, validate_inducing,
    Diagnostics, Objective, Prediction,
};
use crate::error::{check_dim, Result};
use crate::kernels::{kernel_matrix, HyperParams};
use crate::nystrom::NystromFactor;

/// Evidence lower bound with gradients over the hyperparameters and the
/// inducing inputs, in the packed layout.
pub fn elbo(theta: &HyperParams, z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Objective> {
    validate_data(theta, x, y)?;
    validate_inducing(theta, z)?;
    let f = NystromFactor::build(x, z, theta)?;
    let n = x.nrows();
    let noise = f.noise();
    let yc = y.add_scalar(-theta.mean());
    let c = f.solve_q(&yc)?;
    let logdet = f.logdet_q();
    let t = f.trace_residual();
    let value = log_2pi_const(n) - 0.5 * yc.dot(&c) - 0.5 * (logdet + t / noise);

    let adj = nystrom_adjoint(theta, &f, x, z, &c, 1.0)?;
    let mut grad = vec![0.0; theta.len() + z.len()];
    grad[..adj.params.len()].copy_from_slice(&adj.params);
    grad[theta.index_noise()] = (0.5 * c.norm_squared() + adj.noise_logdet) * theta.noise_derivative();
    grad[theta.index_mean()] = c.sum();
    write_z_grad(&mut grad[theta.len()..], &adj.z);

    Ok(Objective {
        value,
        grad,
        diagnostics: Diagnostics {
            logdet: Some(logdet + t / noise),
            trace_residual: Some(t),
            ..Default::default()
        },
    })
}

pub(crate) fn write_z_grad(out: &mut [f64], zg: &DMatrix<f64>) {
    let d = zg.ncols();
    for i in 0..zg.nrows() {
        for j in 0..d {
            out[i * d + j] = zg[(i, j)];
        }
    }
}

/// Predictive mean and marginal variance of the sparse posterior.
pub fn sgpr_predict(
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> Result<Prediction> {
    validate_data(theta, x, y)?;
    validate_inducing(theta, z)?;
    check_dim(theta.input_dim(), xs.ncols(), "test input columns")?;
    let f = NystromFactor::build(x, z, theta)?;
    let kus = kernel_matrix(&theta.kernel(), z, xs)?;
    let w = sparse_mean_weights(&f, &y.add_scalar(-theta.mean()))?;
    Ok(Prediction {
        mean: kus.tr_mul(&w).add_scalar(theta.mean()),
        variance: sparse_variance(theta, &f, &kus, xs)?,
        noise: theta.noise(),
    })
}
