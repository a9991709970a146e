//! Objectives and predictive distributions for the four regression models.
//!
//! Flat parameter layout: the unconstrained hyperparameters
//! `[variance, lengthscale_1..d, noise, mean]`, followed for sparse models by
//! the inducing inputs flattened row-major.

pub mod cglb;
pub mod exact;
pub mod iterative;
pub mod sgpr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::kernels::{kernel_vjp, HyperParams, Kernel, Points};
use crate::linalg::{tri_solve, Side};
use crate::nystrom::NystromFactor;

pub use cglb::{cglb_at, cglb_objective, cglb_predict, cglb_predictive_v};
pub use exact::{exact_lml, exact_lml_value, exact_predict, DENSE_CAP};
pub use iterative::{iterative_lml_and_grad, iterative_with_probes, rademacher_probes, IterativeSettings};
pub use sgpr::{elbo, sgpr_predict};

/// Predictive variances are clamped at this value.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cg_iters: usize,
    pub cg_converged: bool,
    /// `rᵀQ̂⁻¹r`, the width of the quadratic-term sandwich.
    pub quad_gap: Option<f64>,
    /// The log-determinant term (exact, or the bound in use).
    pub logdet: Option<f64>,
    /// `Tr(K̂ − Q̂)`, clamped.
    pub trace_residual: Option<f64>,
    /// Hutchinson estimates of `Tr(K̂⁻¹ ∂K̂/∂u_j)` per hyperparameter.
    pub trace_estimates: Vec<f64>,
    pub trace_std_errors: Vec<f64>,
}

/// Objective value and gradient over the flat unconstrained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    /// Latent (noise-free) marginal variance.
    pub variance: DVector<f64>,
    pub noise: f64,
}

impl Prediction {
    /// Marginal variance of a new observation.
    pub fn variance_noisy(&self) -> DVector<f64> {
        self.variance.add_scalar(self.noise)
    }
}

/// Concatenates hyperparameters and row-major inducing inputs.
pub fn pack(theta: &HyperParams, z: Option<&DMatrix<f64>>) -> Vec<f64> {
    let mut out = theta.to_unconstrained();
    if let Some(z) = z {
        for i in 0..z.nrows() {
            out.extend(z.row(i).iter());
        }
    }
    out
}

/// Inverse of [`pack`] for an `input_dim`-dimensional model.
pub fn unpack(
    raw: &[f64],
    input_dim: usize,
    floors: crate::kernels::Floors,
) -> Result<(HyperParams, Option<DMatrix<f64>>)> {
    let nt = input_dim + 3;
    if raw.len() < nt || !(raw.len() - nt).is_multiple_of(input_dim.max(1)) {
        return Err(GpError::DimensionMismatch {
            expected: nt,
            got: raw.len(),
            context: "flat parameter vector",
        });
    }
    let theta = HyperParams::from_unconstrained(&raw[..nt], floors)?;
    let rest = &raw[nt..];
    let z = (!rest.is_empty()).then(|| DMatrix::from_row_slice(rest.len() / input_dim, input_dim, rest));
    Ok((theta, z))
}

pub(crate) fn validate_data(theta: &HyperParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    check_dim(theta.input_dim(), x.ncols(), "X columns")?;
    check_dim(x.nrows(), y.len(), "targets")?;
    if x.nrows() == 0 {
        return Err(GpError::InvalidArgument("no training points".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("training data".into()));
    }
    Ok(())
}

pub(crate) fn validate_inducing(theta: &HyperParams, z: &DMatrix<f64>) -> Result<()> {
    check_dim(theta.input_dim(), z.ncols(), "Z columns")?;
    if z.nrows() == 0 {
        return Err(GpError::InvalidArgument("at least one inducing point required".into()));
    }
    Ok(())
}

pub(crate) fn log_2pi_const(n: usize) -> f64 {
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Gradient pieces that depend on `Q̂` through the Nyström factor, for an
/// objective whose sensitivity to `Q_ff` is
/// `½ q qᵀ − ½ Q̂⁻¹ + ½ κ I / σ²`, plus `−½ κ / σ²` on each `K_ff` diagonal.
pub(crate) struct NystromAdjoint {
    /// Kernel parameter gradient.
    pub params: Vec<f64>,
    /// Gradient with respect to the inducing inputs.
    pub z: DMatrix<f64>,
    /// `−½ Tr(Q̂⁻¹) + ½ κ t / σ⁴`, the direct noise-variance sensitivity of
    /// the log-determinant and trace terms.
    pub noise_logdet: f64,
}

pub(crate) fn nystrom_adjoint(
    theta: &HyperParams,
    f: &NystromFactor,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    q: &DVector<f64>,
    kappa: f64,
) -> Result<NystromAdjoint> {
    let noise = f.noise();
    let (Some(lu), Some(lb)) = (f.kuu_chol(), f.b_chol()) else {
        return Err(GpError::InvalidArgument("sparse gradient needs inducing points".into()));
    };
    let a = f.a();
    let m = f.m();
    let n = f.n();

    // W = (σ²I + AAᵀ)⁻¹ A = A Q̂⁻¹
    let w = lb.solve(a)? / noise;
    let aq = a * q;
    // A Ḡ
    let mut ag = &aq * q.transpose() * 0.5;
    ag -= &w * 0.5;
    ag += a * (0.5 * kappa / noise);
    // H = L⁻ᵀ A Ḡ, adjoints: K_uf ← 2H, K_uu ← −H Aᵀ L⁻¹
    let h = tri_solve(lu, &ag, Side::LowerTransposed)?;
    let hat = &h * a.transpose();
    let guu_t = tri_solve(lu, &hat.transpose(), Side::LowerTransposed)?;
    let guu = DMatrix::from_fn(m, m, |i, j| -0.5 * (guu_t[(i, j)] + guu_t[(j, i)]));

    let k = theta.kernel();
    let zp = Points::new(z);
    let xp = Points::new(x);
    let uf = kernel_vjp(&k, &zp, &xp, |i, j| 2.0 * h[(i, j)], true);
    let uu = kernel_vjp(&k, &zp, &zp, |i, j| guu[(i, j)], true);

    let mut params: Vec<f64> = uf.params.iter().zip(&uu.params).map(|(a, b)| a + b).collect();
    let diag_weight = -0.5 * kappa / noise;
    let mut diag_grad = vec![0.0; k.n_params()];
    for i in 0..n {
        k.accumulate_diag_param_grad(xp.row(i), diag_weight, &mut diag_grad);
    }
    params.iter_mut().zip(&diag_grad).for_each(|(p, g)| *p += g);

    let zg = uf.inputs.expect("requested") + uu.inputs.expect("requested") * 2.0;

    // Tr(Q̂⁻¹) = (n − Tr(M⁻¹ A Aᵀ)) / σ², M = σ²I + AAᵀ
    let tr_minv_aat = (lb.solve(f.aat())? / noise).trace();
    let tr_qinv = (n as f64 - tr_minv_aat) / noise;
    let noise_logdet = -0.5 * tr_qinv + 0.5 * kappa * f.trace_residual_raw() / (noise * noise);

    Ok(NystromAdjoint {
        params,
        z: zg,
        noise_logdet,
    })
}

/// Latent variance under the sparse posterior,
/// `k(x,x) − ‖L⁻¹k_u‖² + ‖L_B⁻¹ L⁻¹ k_u‖²`, shared by SGPR and CGLB.
pub(crate) fn sparse_variance(
    theta: &HyperParams,
    f: &NystromFactor,
    kus: &DMatrix<f64>,
    xs: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (Some(lu), Some(lb)) = (f.kuu_chol(), f.b_chol()) else {
        return Ok(DVector::from_element(xs.nrows(), theta.variance()));
    };
    let k = theta.kernel();
    let bx = tri_solve(lu, kus, Side::Lower)?;
    let cx = tri_solve(lb, &bx, Side::Lower)?;
    let pts = Points::new(xs);
    Ok(DVector::from_fn(xs.nrows(), |i, _| {
        let v = k.diag(pts.row(i)) - bx.column(i).norm_squared() + cx.column(i).norm_squared();
        v.max(VARIANCE_FLOOR)
    }))
}

/// `w` such that the sparse posterior mean given targets `b` is `K_*u w`:
/// `w = L⁻ᵀ B⁻¹ (A b) / σ²`.
pub(crate) fn sparse_mean_weights(f: &NystromFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (Some(lu), Some(lb)) = (f.kuu_chol(), f.b_chol()) else {
        return Ok(DVector::zeros(f.m()));
    };
    let inner = lb.solve_vec(&(f.a() * b))? / f.noise();
    tri_solve(lu, &inner, Side::LowerTransposed)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Floors;

    #[test]
    fn pack_round_trip() {
        let t = HyperParams::from_constrained(1.5, &[0.3, 2.0], 0.1, 0.4, Floors::default()).unwrap();
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let raw = pack(&t, Some(&z));
        assert_eq!(raw.len(), 5 + 6);
        assert_eq!(&raw[5..7], &[1.0, 2.0]);
        let (t2, z2) = unpack(&raw, 2, Floors::default()).unwrap();
        assert_eq!(t2, t);
        assert_eq!(z2.unwrap(), z);
        let (_, none) = unpack(&pack(&t, None), 2, Floors::default()).unwrap();
        assert!(none.is_none());
        assert!(unpack(&raw[..10], 2, Floors::default()).is_err());
    }

    #[test]
    fn noisy_variance_adds_noise_exactly() {
        let p = Prediction {
            mean: DVector::zeros(2),
            variance: DVector::from_vec(vec![0.25, 1.0]),
            noise: 0.5,
        };
        assert_eq!(p.variance_noisy(), DVector::from_vec(vec![0.75, 1.5]));
    }
}
