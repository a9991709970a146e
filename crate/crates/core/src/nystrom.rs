//! Low-rank-plus-diagonal structure `Q̂ = Q_ff + σ²I` with
//! `Q_ff = K_ufᵀ K_uu⁻¹ K_uf`, held as the half factor `A = L_uu⁻¹ K_uf`.
//!
//! Every operation here is `O(nm²)` or cheaper; no `n×n` matrix is formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, GpError, Result};
use crate::kernels::{kernel_diag, kernel_matrix, kernel_matrix_sym, HyperParams, Kernel, Points};
use crate::linalg::{cholesky, sym_eig, tri_solve, CholFactor, JitterPolicy, Side, SymMatrix};

#[derive(Debug, Clone)]
pub struct NystromFactor {
    n: usize,
    noise: f64,
    /// `m×n`, `Q_ff = AᵀA`. Zero rows for the noise-only factor.
    a: DMatrix<f64>,
    /// `A Aᵀ`, `m×m`.
    aat: DMatrix<f64>,
    kuu_chol: Option<CholFactor>,
    /// Cholesky of `I_m + A Aᵀ / σ²`.
    b_chol: Option<CholFactor>,
    trace_kff: f64,
    trace_qff: f64,
}

impl NystromFactor {
    /// Builds the factor for training inputs `x` (n×d) and inducing inputs `z` (m×d).
    pub fn build(x: &DMatrix<f64>, z: &DMatrix<f64>, theta: &HyperParams) -> Result<Self> {
        let k = theta.kernel();
        let kuu = kernel_matrix_sym(&k, z)?;
        let kuf = kernel_matrix(&k, z, x)?;
        let trace_kff = kernel_diag(&k, x)?.sum();
        Self::from_blocks(&kuu, kuf, trace_kff, theta.noise())
    }

    /// Builds the factor from precomputed `K_uu`, `K_uf` and `Tr K_ff`.
    pub fn from_blocks(kuu: &SymMatrix, kuf: DMatrix<f64>, trace_kff: f64, noise: f64) -> Result<Self> {
        check_dim(kuu.dim(), kuf.nrows(), "K_uf rows vs K_uu")?;
        if !(noise > 0.0) {
            return Err(GpError::InvalidArgument(format!(
                "noise variance {noise} must be positive"
            )));
        }
        let n = kuf.ncols();
        let m = kuu.dim();
        let kuu_chol = cholesky(kuu, &JitterPolicy::default())?;
        let a = tri_solve(&kuu_chol, &kuf, Side::Lower)?;
        let aat = &a * a.transpose();
        let mut b = aat.clone() / noise;
        for i in 0..m {
            b[(i, i)] += 1.0;
        }
        let b_chol = cholesky(&SymMatrix::from_lower(b)?, &JitterPolicy::default())?;
        let trace_qff = a.norm_squared();
        Ok(NystromFactor {
            n,
            noise,
            a,
            aat,
            kuu_chol: Some(kuu_chol),
            b_chol: Some(b_chol),
            trace_kff,
            trace_qff,
        })
    }

    /// The `m = 0` case, `Q̂ = σ²I`.
    pub fn noise_only(n: usize, noise: f64, trace_kff: f64) -> Self {
        NystromFactor {
            n,
            noise,
            a: DMatrix::zeros(0, n),
            aat: DMatrix::zeros(0, 0),
            kuu_chol: None,
            b_chol: None,
            trace_kff,
            trace_qff: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn aat(&self) -> &DMatrix<f64> {
        &self.aat
    }

    pub fn kuu_chol(&self) -> Option<&CholFactor> {
        self.kuu_chol.as_ref()
    }

    pub fn b_chol(&self) -> Option<&CholFactor> {
        self.b_chol.as_ref()
    }

    pub fn trace_kff(&self) -> f64 {
        self.trace_kff
    }

    pub fn trace_qff(&self) -> f64 {
        self.trace_qff
    }

    /// `Tr(K_ff − Q_ff) = Tr(K̂ − Q̂)` before clamping.
    pub fn trace_residual_raw(&self) -> f64 {
        self.trace_kff - self.trace_qff
    }

    /// `Tr(K̂ − Q̂)` clamped at zero.
    pub fn trace_residual(&self) -> f64 {
        self.trace_residual_raw().max(0.0)
    }

    /// `Q̂⁻¹ b` via Woodbury.
    pub fn solve_q(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n, b.len(), "solve_q right-hand side")?;
        let Some(bc) = &self.b_chol else {
            return Ok(b / self.noise);
        };
        let ab = &self.a * b;
        let inner = bc.solve_vec(&ab)? / self.noise;
        Ok((b - self.a.tr_mul(&inner)) / self.noise)
    }

    /// `Q̂ b`, used by tests and diagnostics.
    pub fn mul_q(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n, b.len(), "mul_q vector")?;
        let ab = &self.a * b;
        Ok(self.a.tr_mul(&ab) + b * self.noise)
    }

    /// `log |Q̂|`.
    pub fn logdet_q(&self) -> f64 {
        let base = self.n as f64 * self.noise.ln();
        match &self.b_chol {
            Some(b) => base + b.logdet(),
            None => base,
        }
    }

    /// Eigenvalues of the nontrivial block, `σ² + eig(A Aᵀ)`, descending.
    pub fn eig_q_nontrivial(&self) -> Result<DVector<f64>> {
        if self.m() == 0 {
            return Ok(DVector::zeros(0));
        }
        let (vals, _) = sym_eig(&SymMatrix::from_lower(self.aat.clone())?)?;
        Ok(vals.map(|v| v.max(0.0) + self.noise))
    }

    /// All `n` eigenvalues of `Q̂`, descending: the `m` nontrivial ones
    /// followed by `n − m` copies of `σ²`.
    pub fn eig_q(&self) -> Result<DVector<f64>> {
        let top = self.eig_q_nontrivial()?;
        let mut all: Vec<f64> = top.iter().copied().collect();
        all.resize(self.n.max(all.len()), self.noise);
        all.sort_by(|a, b| b.total_cmp(a));
        Ok(DVector::from_vec(all))
    }

    /// Largest eigenvalue of `Q̂`.
    pub fn top_eigenvalue(&self) -> Result<f64> {
        Ok(self.eig_q_nontrivial()?.iter().copied().fold(self.noise, f64::max))
    }

    /// Dense `Q̂`; for small-instance checks only.
    pub fn dense_q(&self) -> DMatrix<f64> {
        let mut q = self.a.tr_mul(&self.a);
        for i in 0..self.n {
            q[(i, i)] += self.noise;
        }
        q
    }
}

/// Inducing inputs chosen from the training set.
#[derive(Debug, Clone)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
    /// Indices into the training inputs, in selection order.
    pub selection_order: Vec<usize>,
    /// Set when the residual diagonal ran out before `m` points were chosen.
    pub degenerate: bool,
    /// Residual diagonal `diag(K_ff − Q_ff)` after the last pick.
    pub residual_diag: Vec<f64>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.selection_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selection_order.is_empty()
    }
}

/// Greedy (pivoted-Cholesky) selection of `m` inducing points from `x`.
///
/// Starts at `seed_index`, then repeatedly takes the point with the largest
/// residual diagonal, lowest index on ties. Stops early, flagging
/// `degenerate`, once every remaining residual is numerically zero.
pub fn greedy_select(x: &DMatrix<f64>, theta: &HyperParams, m: usize, seed_index: usize) -> Result<InducingSet> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(GpError::InvalidArgument(format!("need 1 <= m <= n, got m={m}, n={n}")));
    }
    if seed_index >= n {
        return Err(GpError::InvalidArgument(format!(
            "seed index {seed_index} out of range"
        )));
    }
    let k = theta.kernel();
    check_dim(k.input_dim(), x.ncols(), "X columns")?;
    let pts = Points::new(x);
    let mut diag: Vec<f64> = (0..n).map(|i| k.diag(pts.row(i))).collect();
    let tol = 1e-12 * diag.iter().cloned().fold(0.0, f64::max);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut order = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut degenerate = false;

    for step in 0..m {
        let pivot = if step == 0 {
            seed_index
        } else {
            let mut best = None;
            for (i, &d) in diag.iter().enumerate() {
                if chosen[i] {
                    continue;
                }
                match best {
                    Some((_, bd)) if d <= bd => {}
                    _ => best = Some((i, d)),
                }
            }
            match best {
                Some((i, d)) if d > tol => i,
                _ => {
                    degenerate = true;
                    break;
                }
            }
        };
        let dp = diag[pivot];
        if dp <= tol {
            degenerate = true;
            break;
        }
        let root = dp.sqrt();
        let p_row = pts.row(pivot);
        let col: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = k.eval(pts.row(i), p_row);
                for c in &cols {
                    v -= c[i] * c[pivot];
                }
                v / root
            })
            .collect();
        for i in 0..n {
            diag[i] -= col[i] * col[i];
        }
        diag[pivot] = 0.0;
        chosen[pivot] = true;
        order.push(pivot);
        cols.push(col);
    }

    let z = DMatrix::from_fn(order.len(), x.ncols(), |r, c| x[(order[r], c)]);
    Ok(InducingSet {
        z,
        selection_order: order,
        degenerate,
        residual_diag: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Floors;
    use crate::linalg::cholesky;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    fn theta(d: usize, noise: f64) -> HyperParams {
        HyperParams::from_constrained(1.2, &vec![0.8; d], noise, 0.0, Floors::default()).unwrap()
    }

    fn dense_khat(x: &DMatrix<f64>, t: &HyperParams) -> DMatrix<f64> {
        let mut k = kernel_matrix_sym(&t.kernel(), x).unwrap();
        k.add_diagonal(t.noise());
        k.into_matrix()
    }

    #[test]
    fn exact_at_own_points() {
        let x = random_x(30, 2, 1);
        let t = theta(2, 0.1);
        let f = NystromFactor::build(&x, &x, &t).unwrap();
        assert!(f.trace_residual_raw().abs() <= 1e-8 * 30.0);
        let exact = cholesky(
            &SymMatrix::from_lower(dense_khat(&x, &t)).unwrap(),
            &JitterPolicy::none(),
        )
        .unwrap()
        .logdet();
        assert!((f.logdet_q() - exact).abs() <= 1e-7);
    }

    #[test]
    fn qff_matches_dense_oracle() {
        let x = random_x(100, 2, 2);
        let z = random_x(10, 2, 3);
        let t = theta(2, 0.1);
        let f = NystromFactor::build(&x, &z, &t).unwrap();
        let k = t.kernel();
        let kuu = kernel_matrix(&k, &z, &z).unwrap();
        let kuf = kernel_matrix(&k, &z, &x).unwrap();
        let kuu_inv = kuu.clone().try_inverse().unwrap();
        let qff = kuf.transpose() * kuu_inv * &kuf;
        let ours = f.a().tr_mul(f.a());
        assert!((qff - ours).amax() <= 1e-8);
    }

    #[test]
    fn noise_only_factor() {
        let f = NystromFactor::noise_only(5, 0.5, 5.0);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(f.solve_q(&b).unwrap(), &b / 0.5);
        assert!((f.logdet_q() - 5.0 * 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(f.eig_q().unwrap().as_slice(), &[0.5; 5]);
    }

    #[test]
    fn zero_half_factor_unit_noise() {
        let kuu = SymMatrix::identity(2);
        let f = NystromFactor::from_blocks(&kuu, DMatrix::zeros(2, 4), 0.0, 1.0).unwrap();
        assert_eq!(f.logdet_q(), 0.0);
        assert_eq!(f.eig_q().unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn solve_q_is_inverse_action() {
        let x = random_x(40, 2, 4);
        let z = random_x(6, 2, 5);
        let t = theta(2, 0.05);
        let f = NystromFactor::build(&x, &z, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let sol = f.solve_q(&b).unwrap();
        let back = f.dense_q() * sol;
        assert!((back - &b).norm() <= 1e-9 * b.norm());
        assert_eq!(f.solve_q(&DVector::zeros(40)).unwrap(), DVector::zeros(40));
        assert!(matches!(
            f.solve_q(&DVector::zeros(3)),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eigenvalues_match_dense() {
        let x = random_x(30, 1, 7);
        let z = random_x(5, 1, 8);
        let t = theta(1, 0.2);
        let f = NystromFactor::build(&x, &z, &t).unwrap();
        let ours = f.eig_q().unwrap();
        let (dense, _) = sym_eig(&SymMatrix::from_lower(f.dense_q()).unwrap()).unwrap();
        assert!((ours.clone() - dense).amax() <= 1e-8);
        assert!((ours.sum() - (f.trace_qff() + 30.0 * 0.2)).abs() <= 1e-8);
        // trailing n − m entries are σ² exactly
        assert!(ours.iter().skip(5).all(|&v| v == 0.2));
    }

    #[test]
    fn psd_ordering_and_eigen_domination() {
        for seed in 0..10 {
            let x = random_x(25, 2, 100 + seed);
            let z = random_x(4, 2, 200 + seed);
            let t = theta(2, 0.1);
            let f = NystromFactor::build(&x, &z, &t).unwrap();
            let khat = dense_khat(&x, &t);
            let qhat = f.dense_q();
            let diff = qhat.clone().try_inverse().unwrap() - khat.clone().try_inverse().unwrap();
            let (vals, _) = sym_eig(&SymMatrix::from_lower(diff).unwrap()).unwrap();
            assert!(vals.min() >= -1e-8);
            let (lk, _) = sym_eig(&SymMatrix::from_lower(khat).unwrap()).unwrap();
            let (lq, _) = sym_eig(&SymMatrix::from_lower(qhat).unwrap()).unwrap();
            for (a, b) in lk.iter().zip(lq.iter()) {
                assert!(*a >= *b - 1e-8);
            }
            assert!(f.trace_residual_raw() >= -1e-9 * 25.0 * 1.2);
        }
    }

    #[test]
    fn greedy_full_selection_is_permutation() {
        let x = random_x(20, 2, 9);
        let t = theta(2, 0.1);
        let set = greedy_select(&x, &t, 20, 3).unwrap();
        assert!(!set.degenerate);
        assert_eq!(set.selection_order[0], 3);
        let mut order = set.selection_order.clone();
        order.sort_unstable();
        assert_eq!(order, (0..20).collect::<Vec<_>>());
        assert!(set.residual_diag.iter().all(|&d| d.abs() <= 1e-8));
    }

    #[test]
    fn greedy_skips_duplicates() {
        let mut x = random_x(6, 1, 10);
        let dup = x[(0, 0)];
        x[(1, 0)] = dup;
        let t = theta(1, 0.1);
        let set = greedy_select(&x, &t, 6, 0).unwrap();
        assert!(set.degenerate);
        assert_eq!(set.len(), 5);
        assert!(!set.selection_order.contains(&1));
    }

    #[test]
    fn greedy_beats_random_selection() {
        let x = random_x(50, 2, 11);
        let t = theta(2, 0.1);
        let residual = |z: &DMatrix<f64>| NystromFactor::build(&x, z, &t).unwrap().trace_residual();
        let greedy = greedy_select(&x, &t, 5, 0).unwrap();
        let g = residual(&greedy.z);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut random: Vec<f64> = (0..20)
            .map(|_| {
                let idx = sample(&mut rng, 50, 5).into_vec();
                residual(&DMatrix::from_fn(5, 2, |r, c| x[(idx[r], c)]))
            })
            .collect();
        random.sort_by(f64::total_cmp);
        let median = 0.5 * (random[9] + random[10]);
        assert!(g <= median, "greedy {g} vs random median {median}");
    }
}
