//! Preconditioned conjugate gradients for `K̂ v = y`.
//!
//! The default stopping rule is on the preconditioned residual
//! `rᵀQ̂⁻¹r ≤ 2ε`, which is exactly the width of the quadratic-term sandwich,
//! so stopping leaves at most `ε` of slack in the half-scaled objective.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::DVector;

use crate::error::{check_dim, GpError, Result};

pub const EPS_TRAIN: f64 = 1.0;
pub const EPS_PREDICT: f64 = 1e-3;

/// `min(n, 1000)`.
pub fn default_max_iters(n: usize) -> usize {
    n.min(1000)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stopping {
    /// `rᵀ M⁻¹ r ≤ 2ε` where `M` is the preconditioner.
    PreconditionedGap { epsilon: f64 },
    /// `‖r‖₂ ≤ tol · ‖y‖₂`.
    RelativeResidual { tol: f64 },
}

#[derive(Debug, Clone)]
pub struct CgState {
    pub v: DVector<f64>,
    /// `y − K̂v`, recomputed explicitly from `v` on exit.
    pub r: DVector<f64>,
    /// Preconditioned residual `M⁻¹r`.
    pub z: DVector<f64>,
    /// `rᵀ M⁻¹ r`, clamped at 0.
    pub gap: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Preconditioned CG stopping when `rᵀ precond(r) ≤ 2ε`.
pub fn pcg_solve<M, P>(
    matvec: M,
    precond: P,
    y: &DVector<f64>,
    v0: &DVector<f64>,
    epsilon: f64,
    max_iters: usize,
) -> Result<CgState>
where
    M: FnMut(&DVector<f64>) -> DVector<f64>,
    P: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(epsilon > 0.0) {
        return Err(GpError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    cg_with(
        matvec,
        precond,
        y,
        v0,
        Stopping::PreconditionedGap { epsilon },
        max_iters,
    )
}

/// CG with an arbitrary stopping rule.
pub fn cg_with<M, P>(
    mut matvec: M,
    mut precond: P,
    y: &DVector<f64>,
    v0: &DVector<f64>,
    stopping: Stopping,
    max_iters: usize,
) -> Result<CgState>
where
    M: FnMut(&DVector<f64>) -> DVector<f64>,
    P: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    check_dim(y.len(), v0.len(), "initial guess")?;
    let y_norm = y.norm();
    let done = |r: &DVector<f64>, gap: f64| match stopping {
        Stopping::PreconditionedGap { epsilon } => gap <= 2.0 * epsilon,
        Stopping::RelativeResidual { tol } => r.norm() <= tol * y_norm,
    };

    let mut v = v0.clone();
    let mut r = y - matvec(&v);
    check_dim(y.len(), r.len(), "matvec output")?;
    let mut z = precond(&r)?;
    let mut gap = r.dot(&z);
    let mut iters = 0;
    let mut converged = done(&r, gap.max(0.0));
    let mut p = z.clone();

    while !converged && iters < max_iters {
        let q = matvec(&p);
        let curvature = p.dot(&q);
        if !(curvature > 0.0) {
            return Err(GpError::BreakdownDetected {
                iteration: iters,
                curvature,
            });
        }
        let alpha = gap / curvature;
        v.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        z = precond(&r)?;
        let new_gap = r.dot(&z);
        iters += 1;
        converged = done(&r, new_gap.max(0.0));
        let beta = new_gap / gap;
        gap = new_gap;
        p = &z + p * beta;
    }

    if iters > 0 {
        // replace the recursively updated residual by the true one
        r = y - matvec(&v);
        z = precond(&r)?;
        gap = r.dot(&z);
        converged = done(&r, gap.max(0.0));
    }
    Ok(CgState {
        v,
        r,
        z,
        gap: gap.max(0.0),
        iters,
        converged,
    })
}

/// Last accepted CG solution, reused as the next initial guess.
#[derive(Debug, Clone, Default)]
pub struct VCache {
    last_v: Option<DVector<f64>>,
    last_fingerprint: Option<u64>,
}

impl VCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, v: DVector<f64>, fingerprint: u64) {
        self.last_v = Some(v);
        self.last_fingerprint = Some(fingerprint);
    }

    pub fn last_v(&self) -> Option<&DVector<f64>> {
        self.last_v.as_ref()
    }

    pub fn last_fingerprint(&self) -> Option<u64> {
        self.last_fingerprint
    }

    pub fn clear(&mut self) {
        self.last_v = None;
        self.last_fingerprint = None;
    }
}

/// Cached `v` when its length is `n`, otherwise zeros. A cache holding a
/// vector of another length is cleared.
pub fn warm_start(cache: &mut VCache, n: usize) -> DVector<f64> {
    match cache.last_v() {
        Some(v) if v.len() == n => v.clone(),
        Some(_) => {
            cache.clear();
            DVector::zeros(n)
        }
        None => DVector::zeros(n),
    }
}

/// Hash of a parameter vector's bit patterns.
pub fn fingerprint(params: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    params.len().hash(&mut h);
    for p in params {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}
