//! Bounds on `log|K̂|` and `yᵀK̂⁻¹y` computable from a [`NystromFactor`]
//! plus, for the quadratic term, one candidate solution `v` and its residual.
//!
//! With `t = Tr(K̂ − Q̂) ≥ 0` and `ℓ_i` the eigenvalues of `Q̂`:
//!
//! | bound            | value                                  |
//! |------------------|----------------------------------------|
//! | `trace`          | `log|Q̂| + t/σ²`                        |
//! | `amgm`           | `log|Q̂| + n log(1 + t/(nσ²))`          |
//! | `waterfill`      | `sup Σ log(ℓ_i + e_i)`, `e ≥ 0, Σe = t` |
//! | `lower_top`      | `log|Q̂| + log(1 + t/ℓ_1)`              |
//!
//! and `lower_top ≤ log|K̂| ≤ waterfill ≤ amgm ≤ trace`.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::nystrom::NystromFactor;

/// AM-GM tightened upper bound on `log|K̂|`; the one used for training.
pub fn logdet_upper_amgm(f: &NystromFactor) -> f64 {
    let n = f.n() as f64;
    f.logdet_q() + n * (f.trace_residual() / (n * f.noise())).ln_1p()
}

/// The SGPR upper bound on `log|K̂|`.
pub fn logdet_upper_trace(f: &NystromFactor) -> f64 {
    f.logdet_q() + f.trace_residual() / f.noise()
}

/// Tightest upper bound on `log|K̂|` given the spectrum of `Q̂` and `Tr K̂`.
pub fn logdet_upper_waterfill(f: &NystromFactor) -> Result<f64> {
    let budget = f.trace_residual();
    if budget == 0.0 {
        return Ok(f.logdet_q());
    }
    let levels = f.eig_q()?;
    Ok(f.logdet_q() + water_fill(levels.as_slice(), budget).gain)
}

/// Greatest lower bound on `log|K̂|` given the spectrum of `Q̂` and `Tr K̂`.
pub fn logdet_lower_top(f: &NystromFactor) -> Result<f64> {
    let budget = f.trace_residual();
    if budget == 0.0 {
        return Ok(f.logdet_q());
    }
    Ok(f.logdet_q() + (budget / f.top_eigenvalue()?).ln_1p())
}

/// Solution of `max Σ log(ℓ_i + e_i)` over `e_i ≥ 0`, `Σ e_i = budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterFill {
    /// Water level `ν`; `e_i = max(0, ν − ℓ_i)`.
    pub level: f64,
    /// Allocation, in the order of the input levels.
    pub allocation: Vec<f64>,
    /// `Σ log((ℓ_i + e_i) / ℓ_i)`.
    pub gain: f64,
}

/// Exact water-filling by sorting the levels and scanning the piecewise-linear
/// fill function. Levels must be positive.
pub fn water_fill(levels: &[f64], budget: f64) -> WaterFill {
    let n = levels.len();
    if n == 0 || budget <= 0.0 {
        return WaterFill {
            level: levels.iter().copied().fold(f64::NAN, f64::min),
            allocation: vec![0.0; n],
            gain: 0.0,
        };
    }
    let mut sorted: Vec<f64> = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Fill the k lowest levels to ν = (budget + Σ_{i<k} ℓ_i) / k; the first k
    // with ν ≤ ℓ_k (next level) is the KKT point.
    let mut prefix = 0.0;
    let mut level = 0.0;
    let mut filled = n;
    for k in 0..n {
        prefix += sorted[k];
        level = (budget + prefix) / (k + 1) as f64;
        if k + 1 == n || level <= sorted[k + 1] {
            filled = k + 1;
            break;
        }
    }
    let gain = sorted[..filled].iter().map(|&l| (level / l).ln()).sum();
    let allocation = levels.iter().map(|&l| (level - l).max(0.0)).collect();
    WaterFill {
        level,
        allocation,
        gain,
    }
}

/// Two-sided bound on `yᵀK̂⁻¹y` from a candidate `v` with residual `r = y − K̂v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadBounds {
    /// `2yᵀv − vᵀK̂v`.
    pub lower: f64,
    /// `lower + rᵀQ̂⁻¹r`.
    pub upper: f64,
    /// `rᵀQ̂⁻¹r`, the sandwich width.
    pub gap: f64,
}

/// Quadratic-form bounds. `vᵀK̂v` is evaluated as `vᵀ(y − r)`.
pub fn quad_bounds(f: &NystromFactor, y: &DVector<f64>, v: &DVector<f64>, r: &DVector<f64>) -> Result<QuadBounds> {
    check_dim(f.n(), y.len(), "y")?;
    check_dim(f.n(), v.len(), "v")?;
    check_dim(f.n(), r.len(), "r")?;
    let z = f.solve_q(r)?;
    Ok(quad_bounds_with(y, v, r, &z))
}

/// As [`quad_bounds`] with `z = Q̂⁻¹r` already available.
pub fn quad_bounds_with(y: &DVector<f64>, v: &DVector<f64>, r: &DVector<f64>, z: &DVector<f64>) -> QuadBounds {
    let ytv = y.dot(v);
    let vkv = v.dot(y) - v.dot(r);
    let lower = 2.0 * ytv - vkv;
    let gap = r.dot(z).max(0.0);
    QuadBounds {
        lower,
        upper: lower + gap,
        gap,
    }
}

/// Every bound for one `(θ, Z, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub logdet_amgm: f64,
    pub logdet_trace: f64,
    pub logdet_waterfill: f64,
    pub logdet_lower: f64,
    pub quad_upper: f64,
    pub quad_lower: f64,
    /// `c − ½ quad_upper − ½ logdet_amgm`.
    pub assembled_cglb: f64,
    /// `c − ½ yᵀQ̂⁻¹y − ½ logdet_trace`.
    pub assembled_elbo: f64,
}

pub fn bound_report(f: &NystromFactor, y: &DVector<f64>, v: &DVector<f64>, r: &DVector<f64>) -> Result<BoundReport> {
    let quad = quad_bounds(f, y, v, r)?;
    let c = -0.5 * f.n() as f64 * (2.0 * PI).ln();
    let logdet_amgm = logdet_upper_amgm(f);
    let logdet_trace = logdet_upper_trace(f);
    let sgpr_quad = y.dot(&f.solve_q(y)?);
    Ok(BoundReport {
        logdet_amgm,
        logdet_trace,
        logdet_waterfill: logdet_upper_waterfill(f)?,
        logdet_lower: logdet_lower_top(f)?,
        quad_upper: quad.upper,
        quad_lower: quad.lower,
        assembled_cglb: c - 0.5 * quad.upper - 0.5 * logdet_amgm,
        assembled_elbo: c - 0.5 * sgpr_quad - 0.5 * logdet_trace,
    })
}
