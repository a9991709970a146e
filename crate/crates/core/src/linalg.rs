//! Dense symmetric linear algebra on top of `nalgebra`.
//!
//! Everything here works on small-to-moderate dense matrices: the m×m
//! inducing-point blocks, and the full n×n kernel matrix only for the exact
//! model and the test oracles.

use nalgebra::{allocator::Allocator, DMatrix, DVector, DefaultAllocator, Dim, Dyn, OMatrix};

use crate::error::{check_dim, GpError, Result};

/// A dense symmetric matrix.
///
/// Storage is a full column-major `DMatrix`; both triangles are kept and are
/// bitwise equal. Constructors either copy the lower triangle onto the upper
/// one or build entries from a symmetric generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from the lower triangle of `m`.
    pub fn from_lower(mut m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        check_dim(n, m.ncols(), "SymMatrix must be square")?;
        if n == 0 {
            return Err(GpError::InvalidArgument("empty matrix".into()));
        }
        for j in 0..n {
            for i in 0..j {
                m[(i, j)] = m[(j, i)];
            }
        }
        Ok(SymMatrix(m))
    }

    /// Builds `n×n` entries from `f(i, j)` evaluated for `i >= j` only.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(GpError::InvalidArgument("empty matrix".into()));
        }
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim() {
            self.0[(i, i)] += value;
        }
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Relative diagonal boosts tried, in order, after an unjittered attempt
/// fails. Each entry is scaled by the mean of the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterPolicy {
    pub ladder: Vec<f64>,
}

impl JitterPolicy {
    /// Only the unjittered factorisation is attempted.
    pub fn none() -> Self {
        JitterPolicy { ladder: Vec::new() }
    }
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            ladder: vec![1e-12, 1e-10, 1e-8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    LowerTransposed,
}

/// Lower Cholesky factor `L` with `L Lᵀ = A + jitter_used · I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter_used: f64,
}

/// Factorises `a`, escalating through `policy` on failure.
pub fn cholesky(a: &SymMatrix, policy: &JitterPolicy) -> Result<CholFactor> {
    let n = a.dim();
    let mean_diag = a.0.diagonal().mean().abs();
    let attempts = std::iter::once(0.0).chain(policy.ladder.iter().map(|r| r * mean_diag));
    for jitter in attempts {
        let mut m = a.0.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            let l = chol.unpack();
            if l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(CholFactor { l, jitter_used: jitter });
            }
        }
    }
    Err(GpError::NotPositiveDefinite { dim: n })
}

/// Solves `L x = b` or `Lᵀ x = b` for a vector or a matrix right-hand side.
pub fn tri_solve<C>(l: &CholFactor, b: &OMatrix<f64, Dyn, C>, side: Side) -> Result<OMatrix<f64, Dyn, C>>
where
    C: Dim,
    DefaultAllocator: Allocator<Dyn, C>,
{
    check_dim(l.dim(), b.nrows(), "triangular solve right-hand side")?;
    let mut x = b.clone();
    let ok = match side {
        Side::Lower => l.l.solve_lower_triangular_mut(&mut x),
        Side::LowerTransposed => l.l.tr_solve_lower_triangular_mut(&mut x),
    };
    if ok {
        Ok(x)
    } else {
        Err(GpError::NotPositiveDefinite { dim: l.dim() })
    }
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// `log |A + jitter I|`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `A⁻¹ b` via two triangular solves.
    pub fn solve<C>(&self, b: &OMatrix<f64, Dyn, C>) -> Result<OMatrix<f64, Dyn, C>>
    where
        C: Dim,
        DefaultAllocator: Allocator<Dyn, C>,
    {
        let half = tri_solve(self, b, Side::Lower)?;
        tri_solve(self, &half, Side::LowerTransposed)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve(b)
    }

    /// Explicit inverse; only used where the full matrix is genuinely needed.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::identity(n, n);
        self.l.solve_lower_triangular_mut(&mut inv);
        self.l.tr_solve_lower_triangular_mut(&mut inv);
        // symmetrise round-off
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
/// Column `i` of the returned matrix is the eigenvector for eigenvalue `i`.
pub fn sym_eig(a: &SymMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.dim();
    let eig = nalgebra::SymmetricEigen::try_new(a.0.clone(), f64::EPSILON, 100 * n.max(10))
        .ok_or(GpError::ConvergenceFailure { dim: n })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}
