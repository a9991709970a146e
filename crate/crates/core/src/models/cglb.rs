//! Conjugate-gradient lower bound on the log marginal likelihood.
//!
//! The bound holds for any candidate solution `v`; `v` comes from
//! Nyström-preconditioned CG warm-started at the previous evaluation's
//! solution, and is treated as a constant when differentiating.

use nalgebra::{DMatrix, DVector};

use super::sgpr::write_z_grad;
use super::{
    log_2pi_const, nystrom_adjoint, sparse_mean_weights, sparse_variance, validate_data, validate_inducing,
    Diagnostics, Objective, Prediction,
};
use crate::error::{check_dim, Result};
use crate::kernels::{kernel_matrix, kernel_matrix_sym, kernel_vjp, HyperParams, Points};
use crate::nystrom::NystromFactor;
use crate::pcg::{default_max_iters, fingerprint, pcg_solve, warm_start, CgState, VCache};

struct Setup {
    f: NystromFactor,
    khat: DMatrix<f64>,
    yc: DVector<f64>,
}

fn setup(theta: &HyperParams, z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Setup> {
    validate_data(theta, x, y)?;
    validate_inducing(theta, z)?;
    let f = NystromFactor::build(x, z, theta)?;
    let mut k = kernel_matrix_sym(&theta.kernel(), x)?;
    k.add_diagonal(theta.noise());
    Ok(Setup {
        f,
        khat: k.into_matrix(),
        yc: y.add_scalar(-theta.mean()),
    })
}

fn solve(s: &Setup, v0: &DVector<f64>, epsilon: f64) -> Result<CgState> {
    pcg_solve(
        |v| &s.khat * v,
        |r| s.f.solve_q(r),
        &s.yc,
        v0,
        epsilon,
        default_max_iters(s.yc.len()),
    )
}

fn bound(
    theta: &HyperParams,
    s: &Setup,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    v: &DVector<f64>,
    r: &DVector<f64>,
    zr: &DVector<f64>,
) -> Result<Objective> {
    let f = &s.f;
    let n = x.nrows();
    let noise = f.noise();
    let gap = r.dot(zr).max(0.0);
    let quad = gap + 2.0 * s.yc.dot(v) - v.dot(&(&s.yc - r));
    let t = f.trace_residual();
    let ratio = t / (n as f64 * noise);
    let logdet = f.logdet_q() + n as f64 * ratio.ln_1p();
    let value = log_2pi_const(n) - 0.5 * quad - 0.5 * logdet;

    let kappa = 1.0 / (1.0 + ratio);
    let adj = nystrom_adjoint(theta, f, x, z, zr, kappa)?;
    // K̂ enters through r = y − K̂v and vᵀK̂v: adjoint ½ (2z + v) vᵀ
    let u = zr * 2.0 + v;
    let pts = Points::new(x);
    let kff = kernel_vjp(&theta.kernel(), &pts, &pts, |i, j| 0.5 * u[i] * v[j], false);

    let mut grad = vec![0.0; theta.len() + z.len()];
    for (p, (a, b)) in adj.params.iter().zip(&kff.params).enumerate() {
        grad[p] = a + b;
    }
    grad[theta.index_noise()] =
        (0.5 * zr.norm_squared() + 0.5 * u.dot(v) + adj.noise_logdet) * theta.noise_derivative();
    grad[theta.index_mean()] = zr.sum() + v.sum();
    write_z_grad(&mut grad[theta.len()..], &adj.z);

    Ok(Objective {
        value,
        grad,
        diagnostics: Diagnostics {
            quad_gap: Some(gap),
            logdet: Some(logdet),
            trace_residual: Some(t),
            ..Default::default()
        },
    })
}

/// The bound and its gradient at a fixed candidate solution `v`.
pub fn cglb_at(
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<Objective> {
    let s = setup(theta, z, x, y)?;
    check_dim(x.nrows(), v.len(), "candidate solution")?;
    let r = &s.yc - &s.khat * v;
    let zr = s.f.solve_q(&r)?;
    bound(theta, &s, x, z, v, &r, &zr)
}

/// Runs CG to `rᵀQ̂⁻¹r ≤ 2ε` from the cached solution, stores the new
/// solution in `cache`, and returns the bound at it.
pub fn cglb_objective(
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cache: &mut VCache,
    epsilon: f64,
) -> Result<Objective> {
    let s = setup(theta, z, x, y)?;
    let v0 = warm_start(cache, x.nrows());
    let state = solve(&s, &v0, epsilon)?;
    let mut obj = bound(theta, &s, x, z, &state.v, &state.r, &state.z)?;
    obj.diagnostics.cg_iters = state.iters;
    obj.diagnostics.cg_converged = state.converged;
    let mut key = theta.to_unconstrained();
    key.extend(z.iter());
    cache.store(state.v, fingerprint(&key));
    Ok(obj)
}

/// CG solution used for prediction, typically at a tighter tolerance than
/// training.
pub fn cglb_predictive_v(
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v0: Option<&DVector<f64>>,
    epsilon: f64,
) -> Result<CgState> {
    let s = setup(theta, z, x, y)?;
    let zeros = DVector::zeros(x.nrows());
    solve(&s, v0.unwrap_or(&zeros), epsilon)
}

/// Mean `K_*f v + K_*u K_uu⁻¹ K_uf Q̂⁻¹ (y − K̂v)`; variance as in the sparse
/// variational posterior.
pub fn cglb_predict(
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> Result<Prediction> {
    let s = setup(theta, z, x, y)?;
    check_dim(x.nrows(), v.len(), "candidate solution")?;
    check_dim(theta.input_dim(), xs.ncols(), "test input columns")?;
    let k = theta.kernel();
    let r = &s.yc - &s.khat * v;
    let kfs = kernel_matrix(&k, x, xs)?;
    let kus = kernel_matrix(&k, z, xs)?;
    let w = sparse_mean_weights(&s.f, &r)?;
    let mean = (kfs.tr_mul(v) + kus.tr_mul(&w)).add_scalar(theta.mean());
    Ok(Prediction {
        mean,
        variance: sparse_variance(theta, &s.f, &kus, xs)?,
        noise: theta.noise(),
    })
}
