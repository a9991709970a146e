//! Matérn 3/2 covariance with per-dimension lengthscales, and the
//! unconstrained parameterisation used by every objective.
//!
//! Constrained quantities (kernel variance, lengthscales, noise variance) are
//! stored as unconstrained reals `u` and mapped through
//! `floor + softplus(u)`. The constant prior mean is stored as is.
//!
//! The flat parameter layout shared with the optimiser is
//! `[variance, lengthscale_1 .. lengthscale_d, noise, mean]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::linalg::SymMatrix;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `floor + softplus(u)`, a smooth strictly increasing map onto `(floor, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub floor: f64,
}

impl Positive {
    pub fn new(floor: f64) -> Self {
        Positive { floor }
    }

    pub fn forward(&self, u: f64) -> f64 {
        self.floor + softplus(u)
    }

    pub fn inverse(&self, x: f64) -> Result<f64> {
        let shifted = x - self.floor;
        if !(shifted > 0.0) || !shifted.is_finite() {
            return Err(GpError::InvalidArgument(format!(
                "value {x} is not above positivity floor {}",
                self.floor
            )));
        }
        Ok(softplus_inverse(shifted))
    }

    /// d forward / du.
    pub fn derivative(&self, u: f64) -> f64 {
        sigmoid(u)
    }
}

pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

pub fn softplus_inverse(x: f64) -> f64 {
    // log(exp(x) - 1) = x + log(1 - exp(-x))
    x + (-(-x).exp_m1()).ln()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Positivity floors for the constrained hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Floors {
    pub variance: f64,
    pub lengthscale: f64,
    pub noise: f64,
}

impl Floors {
    pub fn uniform(floor: f64) -> Self {
        Floors {
            variance: floor,
            lengthscale: floor,
            noise: floor,
        }
    }
}

impl Default for Floors {
    fn default() -> Self {
        Floors::uniform(1e-6)
    }
}

/// Kernel and likelihood hyperparameters in unconstrained form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    raw_variance: f64,
    raw_lengthscales: Vec<f64>,
    raw_noise: f64,
    mean: f64,
    floors: Floors,
}

impl HyperParams {
    /// Kernel variance, every lengthscale and the noise variance at 1.0,
    /// prior mean at 0.
    pub fn initial(input_dim: usize, floors: Floors) -> Self {
        Self::from_constrained(1.0, &vec![1.0; input_dim], 1.0, 0.0, floors).expect("1.0 lies above any sensible floor")
    }

    pub fn from_constrained(
        variance: f64,
        lengthscales: &[f64],
        noise: f64,
        mean: f64,
        floors: Floors,
    ) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(GpError::InvalidArgument("at least one lengthscale required".into()));
        }
        Ok(HyperParams {
            raw_variance: Positive::new(floors.variance).inverse(variance)?,
            raw_lengthscales: lengthscales
                .iter()
                .map(|&l| Positive::new(floors.lengthscale).inverse(l))
                .collect::<Result<_>>()?,
            raw_noise: Positive::new(floors.noise).inverse(noise)?,
            mean,
            floors,
        })
    }

    /// Rebuilds from the flat unconstrained layout.
    pub fn from_unconstrained(raw: &[f64], floors: Floors) -> Result<Self> {
        if raw.len() < 4 {
            return Err(GpError::DimensionMismatch {
                expected: 4,
                got: raw.len(),
                context: "hyperparameter vector needs at least 4 entries",
            });
        }
        let d = raw.len() - 3;
        Ok(HyperParams {
            raw_variance: raw[0],
            raw_lengthscales: raw[1..=d].to_vec(),
            raw_noise: raw[d + 1],
            mean: raw[d + 2],
            floors,
        })
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.raw_variance);
        out.extend_from_slice(&self.raw_lengthscales);
        out.push(self.raw_noise);
        out.push(self.mean);
        out
    }

    /// Number of unconstrained parameters (`d + 3`).
    pub fn len(&self) -> usize {
        self.raw_lengthscales.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.raw_lengthscales.len()
    }

    pub fn floors(&self) -> Floors {
        self.floors
    }

    pub fn variance(&self) -> f64 {
        Positive::new(self.floors.variance).forward(self.raw_variance)
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        let t = Positive::new(self.floors.lengthscale);
        self.raw_lengthscales.iter().map(|&u| t.forward(u)).collect()
    }

    pub fn noise(&self) -> f64 {
        Positive::new(self.floors.noise).forward(self.raw_noise)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn set_mean(&mut self, mean: f64) {
        self.mean = mean;
    }

    /// d noise / d raw_noise.
    pub fn noise_derivative(&self) -> f64 {
        sigmoid(self.raw_noise)
    }

    pub fn index_noise(&self) -> usize {
        self.input_dim() + 1
    }

    pub fn index_mean(&self) -> usize {
        self.input_dim() + 2
    }

    pub fn kernel(&self) -> Matern32 {
        Matern32::new(self)
    }
}

/// A covariance function over `R^d` with differentiable parameters.
///
/// Parameter gradients are taken with respect to the kernel's own
/// unconstrained parameters, which occupy the leading slots of the flat
/// hyperparameter layout.
pub trait Kernel: Sync {
    fn input_dim(&self) -> usize;

    fn n_params(&self) -> usize;

    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// `k(x, x)`.
    fn diag(&self, x: &[f64]) -> f64;

    /// `out[p] += weight · ∂k(a, b)/∂u_p`.
    fn accumulate_param_grad(&self, a: &[f64], b: &[f64], weight: f64, out: &mut [f64]);

    /// `out[j] += weight · ∂k(a, b)/∂a_j`.
    fn accumulate_input_grad(&self, a: &[f64], b: &[f64], weight: f64, out: &mut [f64]);

    /// `out[p] += weight · ∂k(x, x)/∂u_p`.
    fn accumulate_diag_param_grad(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        self.accumulate_param_grad(x, x, weight, out);
    }
}

#[derive(Debug, Clone)]
pub struct Matern32 {
    variance: f64,
    inv_lengthscales: Vec<f64>,
    dvariance: f64,
    dlengthscales: Vec<f64>,
}

impl Matern32 {
    pub fn new(theta: &HyperParams) -> Self {
        let ls = theta.lengthscales();
        Matern32 {
            variance: theta.variance(),
            inv_lengthscales: ls.iter().map(|l| 1.0 / l).collect(),
            dvariance: sigmoid(theta.raw_variance),
            dlengthscales: theta.raw_lengthscales.iter().map(|&u| sigmoid(u)).collect(),
        }
    }

    #[inline]
    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), il) in a.iter().zip(b).zip(&self.inv_lengthscales) {
            let t = (x - y) * il;
            r2 += t * t;
        }
        r2.sqrt()
    }
}

impl Kernel for Matern32 {
    fn input_dim(&self) -> usize {
        self.inv_lengthscales.len()
    }

    fn n_params(&self) -> usize {
        1 + self.inv_lengthscales.len()
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let s = SQRT3 * self.scaled_distance(a, b);
        self.variance * (1.0 + s) * (-s).exp()
    }

    fn diag(&self, _x: &[f64]) -> f64 {
        self.variance
    }

    #[inline]
    fn accumulate_param_grad(&self, a: &[f64], b: &[f64], weight: f64, out: &mut [f64]) {
        let s = SQRT3 * self.scaled_distance(a, b);
        let e = (-s).exp();
        out[0] += weight * (1.0 + s) * e * self.dvariance;
        // ∂k/∂ℓ_j = 3 σ² e^{-s} Δ_j² / ℓ_j³
        let c = weight * 3.0 * self.variance * e;
        for j in 0..self.inv_lengthscales.len() {
            let il = self.inv_lengthscales[j];
            let delta = a[j] - b[j];
            out[1 + j] += c * delta * delta * il * il * il * self.dlengthscales[j];
        }
    }

    #[inline]
    fn accumulate_input_grad(&self, a: &[f64], b: &[f64], weight: f64, out: &mut [f64]) {
        let s = SQRT3 * self.scaled_distance(a, b);
        let c = -weight * 3.0 * self.variance * (-s).exp();
        for j in 0..self.inv_lengthscales.len() {
            let il = self.inv_lengthscales[j];
            out[j] += c * (a[j] - b[j]) * il * il;
        }
    }

    fn accumulate_diag_param_grad(&self, _x: &[f64], weight: f64, out: &mut [f64]) {
        out[0] += weight * self.dvariance;
    }
}

/// Points of an `n×d` matrix as a contiguous row-major buffer.
#[derive(Debug, Clone)]
pub struct Points {
    data: Vec<f64>,
    d: usize,
}

impl Points {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let d = x.ncols();
        let t = x.transpose();
        Points {
            data: t.as_slice().to_vec(),
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.d).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Matérn 3/2 covariance between two points.
pub fn matern32(x: &[f64], x2: &[f64], theta: &HyperParams) -> Result<f64> {
    check_dim(theta.input_dim(), x.len(), "first point dimension")?;
    check_dim(theta.input_dim(), x2.len(), "second point dimension")?;
    Ok(theta.kernel().eval(x, x2))
}

/// Cross-covariance `K(X1, X2)` of shape `n1×n2`.
pub fn kernel_matrix<K: Kernel>(k: &K, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(k.input_dim(), x1.ncols(), "X1 columns")?;
    check_dim(k.input_dim(), x2.ncols(), "X2 columns")?;
    let (p1, p2) = (Points::new(x1), Points::new(x2));
    let n1 = p1.len();
    let n2 = p2.len();
    // column-major: fill one column (fixed X2 row) per task
    let mut out = DMatrix::zeros(n1, n2);
    out.as_mut_slice()
        .par_chunks_mut(n1.max(1))
        .enumerate()
        .for_each(|(j, col)| {
            let b = p2.row(j);
            for (i, c) in col.iter_mut().enumerate() {
                *c = k.eval(p1.row(i), b);
            }
        });
    Ok(out)
}

/// `K(X, X)` as a symmetric matrix; only the lower triangle is evaluated.
pub fn kernel_matrix_sym<K: Kernel>(k: &K, x: &DMatrix<f64>) -> Result<SymMatrix> {
    check_dim(k.input_dim(), x.ncols(), "X columns")?;
    let p = Points::new(x);
    let n = p.len();
    if n == 0 {
        return Err(GpError::InvalidArgument("no input points".into()));
    }
    let mut out = DMatrix::zeros(n, n);
    out.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        let b = p.row(j);
        for (i, c) in col.iter_mut().enumerate().skip(j) {
            *c = if i == j { k.diag(b) } else { k.eval(p.row(i), b) };
        }
    });
    SymMatrix::from_lower(out)
}

/// `diag K(X, X)` without forming off-diagonal entries.
pub fn kernel_diag<K: Kernel>(k: &K, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim(k.input_dim(), x.ncols(), "X columns")?;
    let p = Points::new(x);
    Ok(DVector::from_iterator(p.len(), (0..p.len()).map(|i| k.diag(p.row(i)))))
}

/// Partial derivatives of `k(x, x2)` with respect to every entry of the
/// flat unconstrained hyperparameter vector (noise and mean entries are 0).
pub fn param_gradients(x: &[f64], x2: &[f64], theta: &HyperParams) -> Result<Vec<f64>> {
    check_dim(theta.input_dim(), x.len(), "first point dimension")?;
    check_dim(theta.input_dim(), x2.len(), "second point dimension")?;
    let k = theta.kernel();
    let mut out = vec![0.0; theta.len()];
    if x == x2 {
        k.accumulate_diag_param_grad(x, 1.0, &mut out);
    } else {
        k.accumulate_param_grad(x, x2, 1.0, &mut out);
    }
    Ok(out)
}

/// One dense `∂K(X, X)/∂u_p` matrix per kernel parameter.
pub fn kernel_matrix_param_grads<K: Kernel>(k: &K, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_dim(k.input_dim(), x.ncols(), "X columns")?;
    let p = Points::new(x);
    let n = p.len();
    let np = k.n_params();
    let mut mats = vec![DMatrix::zeros(n, n); np];
    let mut buf = vec![0.0; np];
    for j in 0..n {
        for i in j..n {
            buf.iter_mut().for_each(|b| *b = 0.0);
            if i == j {
                k.accumulate_diag_param_grad(p.row(i), 1.0, &mut buf);
            } else {
                k.accumulate_param_grad(p.row(i), p.row(j), 1.0, &mut buf);
            }
            for (m, &g) in mats.iter_mut().zip(&buf) {
                m[(i, j)] = g;
                m[(j, i)] = g;
            }
        }
    }
    Ok(mats)
}

/// Result of pulling a matrix adjoint back through `K(X1, X2)`.
#[derive(Debug, Clone)]
pub struct KernelVjp {
    /// `Σ_ij W_ij ∂k(x1_i, x2_j)/∂u_p` for each kernel parameter.
    pub params: Vec<f64>,
    /// `Σ_j W_ij ∂k(x1_i, x2_j)/∂x1_i`, shape `n1×d`, when requested.
    pub inputs: Option<DMatrix<f64>>,
}

/// Vector-Jacobian product of `K(X1, X2)` against the adjoint `W(i, j)`.
///
/// Rows of `X1` are processed in parallel; per-row partial sums are reduced
/// in row order, so results do not depend on the thread count.
pub fn kernel_vjp<K, W>(k: &K, x1: &Points, x2: &Points, weight: W, want_inputs: bool) -> KernelVjp
where
    K: Kernel,
    W: Fn(usize, usize) -> f64 + Sync,
{
    let np = k.n_params();
    let d = x1.dim();
    let n2 = x2.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..x1.len())
        .into_par_iter()
        .map(|i| {
            let a = x1.row(i);
            let mut gp = vec![0.0; np];
            let mut gx = vec![0.0; if want_inputs { d } else { 0 }];
            for j in 0..n2 {
                let w = weight(i, j);
                if w == 0.0 {
                    continue;
                }
                let b = x2.row(j);
                k.accumulate_param_grad(a, b, w, &mut gp);
                if want_inputs {
                    k.accumulate_input_grad(a, b, w, &mut gx);
                }
            }
            (gp, gx)
        })
        .collect();
    let mut params = vec![0.0; np];
    let mut inputs = want_inputs.then(|| DMatrix::zeros(x1.len(), d));
    for (i, (gp, gx)) in rows.into_iter().enumerate() {
        for (p, g) in params.iter_mut().zip(gp) {
            *p += g;
        }
        if let Some(m) = inputs.as_mut() {
            for (j, g) in gx.into_iter().enumerate() {
                m[(i, j)] = g;
            }
        }
    }
    KernelVjp { params, inputs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, JitterPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta_1d() -> HyperParams {
        HyperParams::initial(1, Floors::default())
    }

    #[test]
    fn zero_distance_gives_variance() {
        let t = HyperParams::from_constrained(2.5, &[0.3, 4.0], 0.1, 0.0, Floors::default()).unwrap();
        let v = matern32(&[0.2, -1.0], &[0.2, -1.0], &t).unwrap();
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unit_distance_closed_form() {
        let v = matern32(&[0.0], &[1.0], &theta_1d()).unwrap();
        let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.483_357_72).abs() < 1e-8);
    }

    #[test]
    fn decays_monotonically() {
        let t = theta_1d();
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let v = matern32(&[0.0], &[i as f64 * 0.5], &t).unwrap();
            assert!(v < prev || i == 0);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn dimension_mismatch() {
        let t = theta_1d();
        assert!(matches!(
            matern32(&[0.0, 1.0], &[1.0], &t),
            Err(GpError::DimensionMismatch { .. })
        ));
        let x = DMatrix::zeros(3, 2);
        assert!(kernel_matrix(&t.kernel(), &x, &x).is_err());
    }

    #[test]
    fn single_point_matrix() {
        let t = HyperParams::from_constrained(1.7, &[1.0], 1.0, 0.0, Floors::default()).unwrap();
        let x = DMatrix::from_element(1, 1, 0.3);
        let k = kernel_matrix_sym(&t.kernel(), &x).unwrap();
        assert_eq!(k.as_matrix().as_slice(), &[t.variance()]);
    }

    #[test]
    fn random_matrix_is_symmetric_psd_and_diag_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-2.0..2.0));
        let t = HyperParams::from_constrained(1.3, &[0.5, 1.0, 2.0], 0.1, 0.0, Floors::default()).unwrap();
        let k = t.kernel();
        let kmat = kernel_matrix(&k, &x, &x).unwrap();
        assert_eq!(kmat, kmat.transpose());
        let ksym = kernel_matrix_sym(&k, &x).unwrap();
        assert!((ksym.as_matrix() - &kmat).amax() < 1e-15);
        let mut jittered = ksym.clone();
        jittered.add_diagonal(1e-10);
        assert!(cholesky(&jittered, &JitterPolicy::none()).is_ok());
        let diag = kernel_diag(&k, &x).unwrap();
        assert_eq!(diag, ksym.as_matrix().diagonal());
    }

    #[test]
    fn diag_gradient_ignores_lengthscale_and_mean() {
        let t = HyperParams::from_constrained(2.0, &[0.7], 0.1, 3.0, Floors::default()).unwrap();
        let g = param_gradients(&[0.4], &[0.4], &t).unwrap();
        let dvar = Positive::new(1e-6).derivative(t.to_unconstrained()[0]);
        assert!((g[0] - dvar).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[t.index_noise()], 0.0);
        assert_eq!(g[t.index_mean()], 0.0);
    }

    fn fd_check(raw: &[f64], a: f64, b: f64) -> f64 {
        let floors = Floors::default();
        let t = HyperParams::from_unconstrained(raw, floors).unwrap();
        let g = param_gradients(&[a], &[b], &t).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for p in 0..raw.len() {
            let mut up = raw.to_vec();
            let mut dn = raw.to_vec();
            up[p] += h;
            dn[p] -= h;
            let fu = matern32(&[a], &[b], &HyperParams::from_unconstrained(&up, floors).unwrap()).unwrap();
            let fl = matern32(&[a], &[b], &HyperParams::from_unconstrained(&dn, floors).unwrap()).unwrap();
            let fd = (fu - fl) / (2.0 * h);
            // central-difference roundoff scales with |k|, not with the derivative
            let k0 = matern32(&[a], &[b], &t).unwrap().abs();
            let scale = fd.abs().max(g[p].abs()).max(1e-4 * k0).max(1e-12);
            worst = worst.max((fd - g[p]).abs() / scale);
        }
        worst
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let raw = [
                rng.random_range(-1.0..1.5),
                rng.random_range(-1.0..1.5),
                rng.random_range(-2.0..0.0),
                rng.random_range(-1.0..1.0),
            ];
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert!(fd_check(&raw, a, b) <= 1e-5);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let t = HyperParams::from_constrained(1.4, &[0.6, 1.3], 0.1, 0.0, Floors::default()).unwrap();
        let k = t.kernel();
        let a = [0.3, -0.2];
        let b = [-0.5, 0.4];
        let mut g = [0.0; 2];
        k.accumulate_input_grad(&a, &b, 1.0, &mut g);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = a;
            let mut dn = a;
            up[j] += h;
            dn[j] -= h;
            let fd = (k.eval(&up, &b) - k.eval(&dn, &b)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn vjp_matches_dense_gradient_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let t = HyperParams::from_constrained(0.8, &[0.5, 1.5], 0.1, 0.0, Floors::default()).unwrap();
        let k = t.kernel();
        let w = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let p = Points::new(&x);
        let vjp = kernel_vjp(&k, &p, &p, |i, j| w[(i, j)], false);
        let mats = kernel_matrix_param_grads(&k, &x).unwrap();
        for (g, m) in vjp.params.iter().zip(&mats) {
            let dense: f64 = w.component_mul(m).sum();
            assert!((g - dense).abs() < 1e-12 * (1.0 + dense.abs()));
        }
    }

    proptest! {
        #[test]
        fn transform_round_trip_and_floor(u in -30.0f64..30.0, floor in prop::sample::select(vec![1e-6, 1e-4, 0.0])) {
            let t = Positive::new(floor);
            let x = t.forward(u);
            prop_assert!(x >= floor);
            prop_assert!(t.derivative(u) > 0.0);
            if x - floor > 1e-10 {
                let back = t.inverse(x).unwrap();
                let again = t.forward(back);
                prop_assert!((again - x).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn kernel_bounded_by_variance(a in -5.0f64..5.0, b in -5.0f64..5.0, var in 0.01f64..10.0, ls in 0.01f64..10.0) {
            let t = HyperParams::from_constrained(var, &[ls], 0.1, 0.0, Floors::default()).unwrap();
            let v = matern32(&[a], &[b], &t).unwrap();
            prop_assert!(v <= t.variance() * (1.0 + 1e-15));
            prop_assert!((v - matern32(&[b], &[a], &t).unwrap()).abs() == 0.0);
        }

        #[test]
        fn gradient_check_random_theta(rv in -2.0f64..2.0, rl in -2.0f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assert!(fd_check(&[rv, rl, -1.0, 0.0], a, b) <= 1e-5);
        }
    }
}
