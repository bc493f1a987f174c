//! Numerical linear algebra for semistable LTI systems.
//!
//! Grid dynamics carry a structural zero eigenvalue (power conservation), so
//! the usual Lyapunov-based machinery only applies after deflating the zero
//! modes. This module provides the deflation ([`stable_subspace`]), Lyapunov
//! solvers (Bartels-Stewart plus a dense Kronecker cross-check), semistable
//! Gramians, PSD factorization, H2 norms and the PBH observability test.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LtiError {
    #[error("matrix is not semistable: {0}")]
    NotSemistable(String),
    #[error("subspace basis is ill-conditioned (sigma_min = {0:.3e})")]
    IllConditioned(f64),
    #[error("coefficient matrix is not strictly stable (max Re = {0:.3e})")]
    NotStable(f64),
    #[error("Lyapunov solve failed: {0}")]
    SolveFailed(String),
    #[error("matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LtiError>;

/// State-space model with the closed-loop matrix `A` (the plant seen by the
/// estimator) and measurement map `C`. `B` and `K` are kept for the optional
/// output-feedback configuration; with `K = 0` the closed loop equals the
/// open loop.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl LtiSystem {
    /// System without actuation feedback (`K = 0`, no attack feedthrough).
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let b = DMatrix::zeros(n, 0);
        let k = DMatrix::zeros(0, c.nrows());
        Self::with_feedback(a, b, k, c)
    }

    /// Closed-loop system `A + B K C` with measurement map `C`.
    pub fn with_feedback(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        k: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LtiError::DimensionMismatch("A must be square".into()));
        }
        if c.ncols() != n {
            return Err(LtiError::DimensionMismatch(format!(
                "C must have {n} columns, got {}",
                c.ncols()
            )));
        }
        if b.nrows() != n || k.nrows() != b.ncols() || k.ncols() != c.nrows() {
            return Err(LtiError::DimensionMismatch(
                "B is n x p, K is p x m".into(),
            ));
        }
        let a_cl = if b.ncols() > 0 { &a + &b * &k * &c } else { a };
        for mat in [&a_cl, &b, &k, &c] {
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(LtiError::DimensionMismatch(
                    "matrices must be finite".into(),
                ));
            }
        }
        Ok(Self { a: a_cl, b, k, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Closed-loop system matrix.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Attack feedthrough into the dynamics (`B K`); zero-width when `K = 0`.
    pub fn attack_feedthrough(&self) -> DMatrix<f64> {
        &self.b * &self.k
    }

    /// Default zero-eigenvalue tolerance, scaled by the matrix norm.
    pub fn default_tol_zero(&self) -> f64 {
        default_tol_zero(&self.a)
    }
}

pub fn default_tol_zero(a: &DMatrix<f64>) -> f64 {
    1e-7 * a.norm().max(1.0)
}

/// Oblique decomposition of a semistable matrix into its strictly stable part
/// and the (semisimple) zero modes.
///
/// `A ≈ U_bar * A_bar * V_bar^T + zero part`, with `V_bar^T U_bar = I`,
/// `A u_max ≈ 0` and `v_max^T A ≈ 0`.
#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    pub u_bar: DMatrix<f64>,
    pub v_bar: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub u_max: DMatrix<f64>,
    pub v_max: DMatrix<f64>,
    pub z: usize,
}

impl SubspaceDecomposition {
    /// Reduced measurement map `C * U_bar`.
    pub fn reduce_output(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        c * &self.u_bar
    }
}

const SUBSPACE_COND_LIMIT: f64 = 1e12;

/// Split a semistable matrix into zero modes and the strictly stable
/// invariant subspace. `z` is the number of eigenvalues with `|λ| <= tol_zero`.
pub fn stable_subspace(sys: &LtiSystem, tol_zero: f64) -> Result<SubspaceDecomposition> {
    decompose_semistable(sys.a(), tol_zero)
}

pub fn decompose_semistable(a: &DMatrix<f64>, tol_zero: f64) -> Result<SubspaceDecomposition> {
    let n = a.nrows();
    let a_norm = a.norm().max(1.0);
    let eigs = a.complex_eigenvalues();
    let mut z = 0usize;
    for ev in eigs.iter() {
        if ev.norm() <= tol_zero {
            z += 1;
        } else if ev.re > tol_zero {
            return Err(LtiError::NotSemistable(format!(
                "eigenvalue {:.6e}{:+.6e}i has positive real part",
                ev.re, ev.im
            )));
        }
    }

    if z == 0 {
        let dec = SubspaceDecomposition {
            u_bar: DMatrix::identity(n, n),
            v_bar: DMatrix::identity(n, n),
            a_bar: a.clone(),
            u_max: DMatrix::zeros(n, 0),
            v_max: DMatrix::zeros(n, 0),
            z: 0,
        };
        return Ok(dec);
    }

    // Null bases from the SVD of A: right/left singular vectors of the z
    // smallest singular values. For a semisimple, well separated zero
    // eigenvalue these span the zero eigenspaces.
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap()
    });
    let mut u_max = DMatrix::zeros(n, z);
    let mut v_max = DMatrix::zeros(n, z);
    for (col, &idx) in order.iter().take(z).enumerate() {
        u_max.set_column(col, &vt.row(idx).transpose());
        v_max.set_column(col, &u.column(idx));
    }
    if (a * &u_max).norm() > 1e-8 * a_norm || (a.transpose() * &v_max).norm() > 1e-8 * a_norm {
        return Err(LtiError::NotSemistable(
            "zero eigenvalue is defective (null space smaller than multiplicity)".into(),
        ));
    }

    // v_max^T u_max singular <=> left/right zero eigenspaces are orthogonal,
    // which only happens for a defective zero eigenvalue.
    let m = v_max.transpose() * &u_max;
    let m_svals = m.clone().singular_values();
    let m_min = m_svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if m_min < 1e-8 {
        return Err(LtiError::NotSemistable(
            "zero eigenvalue is defective (v_max^T u_max singular)".into(),
        ));
    }
    let m_inv = m
        .lu()
        .try_inverse()
        .ok_or_else(|| LtiError::NotSemistable("v_max^T u_max singular".into()))?;

    if z == n {
        return Ok(SubspaceDecomposition {
            u_bar: DMatrix::zeros(n, 0),
            v_bar: DMatrix::zeros(n, 0),
            a_bar: DMatrix::zeros(0, 0),
            u_max,
            v_max,
            z,
        });
    }

    // Spectral projector onto the stable subspace along the zero eigenspace.
    let proj = DMatrix::identity(n, n) - &u_max * m_inv * v_max.transpose();
    let psvd = proj.clone().svd(true, true);
    let pu = psvd.u.as_ref().expect("svd with u");
    let pvt = psvd.v_t.as_ref().expect("svd with v_t");
    let r = n - z;
    // Singular values of a projector are >= 1 on its range; take the leading
    // r singular directions (nalgebra sorts them descending).
    let mut sv_order: Vec<usize> = (0..n).collect();
    sv_order.sort_by(|&i, &j| {
        psvd.singular_values[j]
            .partial_cmp(&psvd.singular_values[i])
            .unwrap()
    });
    let mut u_bar = DMatrix::zeros(n, r);
    let mut v_tilde = DMatrix::zeros(n, r);
    for (col, &idx) in sv_order.iter().take(r).enumerate() {
        u_bar.set_column(col, &pu.column(idx));
        v_tilde.set_column(col, &pvt.row(idx).transpose());
    }

    let g = u_bar.transpose() * &v_tilde;
    let g_svals = g.clone().singular_values();
    let g_max = g_svals.iter().cloned().fold(0.0f64, f64::max);
    let g_min = g_svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if g_min <= 0.0 || g_max / g_min > SUBSPACE_COND_LIMIT {
        return Err(LtiError::IllConditioned(g_min));
    }
    let g_inv = g
        .lu()
        .try_inverse()
        .ok_or(LtiError::IllConditioned(g_min))?;
    let v_bar = v_tilde * g_inv;
    let a_bar = v_bar.transpose() * a * &u_bar;

    // Invariance residual: A restricted to range(U_bar) must equal U_bar A_bar.
    if (a * &u_bar - &u_bar * &a_bar).norm() > 1e-8 * a_norm {
        return Err(LtiError::NotSemistable(
            "stable subspace is not invariant (zero mode count mismatch?)".into(),
        ));
    }
    let max_re = a_bar
        .complex_eigenvalues()
        .iter()
        .map(|ev| ev.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if r > 0 && max_re >= 0.0 {
        return Err(LtiError::NotSemistable(format!(
            "reduced matrix has eigenvalue with Re = {max_re:.3e} >= 0"
        )));
    }

    Ok(SubspaceDecomposition {
        u_bar,
        v_bar,
        a_bar,
        u_max,
        v_max,
        z,
    })
}

/// Solve `A W + W A^T + Q = 0` for strictly stable `A` (Bartels-Stewart on
/// the real Schur form). For the observability-side equation call with `A^T`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(LtiError::DimensionMismatch(
            "Lyapunov: A and Q must be square of equal size".into(),
        ));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let q_sym = (q + q.transpose()) * 0.5;

    let (u, t) = a.clone().schur().unpack();
    let max_re = quasi_triangular_eigenvalues(&t)
        .iter()
        .map(|ev| ev.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_re >= 0.0 {
        return Err(LtiError::NotStable(max_re));
    }

    let rhs = -(u.transpose() * &q_sym * &u);
    let y = solve_triangular_lyapunov(&t, &rhs)?;
    let mut w = &u * y * u.transpose();
    w = (&w + w.transpose()) * 0.5;

    let resid = (a * &w + &w * a.transpose() + &q_sym).norm();
    let bound = 1e-10 * (a.norm() * w.norm() + q_sym.norm()).max(f64::MIN_POSITIVE);
    if resid > bound {
        return Err(LtiError::SolveFailed(format!(
            "residual {resid:.3e} exceeds bound {bound:.3e}"
        )));
    }
    Ok(w)
}

/// Dense Kronecker (vec) Lyapunov solve; O(n^6), intended as an independent
/// cross-check for small systems.
pub fn solve_lyapunov_kron(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n > 30 {
        return Err(LtiError::DimensionMismatch(
            "Kronecker solver is limited to n <= 30".into(),
        ));
    }
    let q_sym = (q + q.transpose()) * 0.5;
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_column_slice(q_sym.as_slice());
    let sol = big
        .lu()
        .solve(&(-rhs))
        .ok_or_else(|| LtiError::SolveFailed("singular Kronecker system".into()))?;
    let w = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&w + w.transpose()) * 0.5)
}

/// Solve `T Y + Y T^T = R` for quasi-upper-triangular `T` by block
/// back-substitution (blocks of size 1 or 2 from the real Schur form).
fn solve_triangular_lyapunov(t: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let blocks = schur_blocks(t);
    let nb = blocks.len();
    let mut y = DMatrix::<f64>::zeros(n, n);

    for bi in (0..nb).rev() {
        let (i0, isz) = blocks[bi];
        for bj in (0..nb).rev() {
            let (j0, jsz) = blocks[bj];
            // R_ij minus the already-solved couplings.
            let mut r = rhs.view((i0, j0), (isz, jsz)).into_owned();
            for bk in bi + 1..nb {
                let (k0, ksz) = blocks[bk];
                r -= t.view((i0, k0), (isz, ksz)) * y.view((k0, j0), (ksz, jsz));
            }
            for bk in bj + 1..nb {
                let (k0, ksz) = blocks[bk];
                r -= y.view((i0, k0), (isz, ksz)) * t.view((j0, k0), (jsz, ksz)).transpose();
            }
            let tii = t.view((i0, i0), (isz, isz)).into_owned();
            let tjj = t.view((j0, j0), (jsz, jsz)).into_owned();
            let sol = solve_small_sylvester(&tii, &tjj, &r)?;
            y.view_mut((i0, j0), (isz, jsz)).copy_from(&sol);
        }
    }
    Ok(y)
}

/// Solve `P Y + Y Q^T = R` for blocks of size at most 2 via the Kronecker
/// form.
fn solve_small_sylvester(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (pr, qr) = (p.nrows(), q.nrows());
    let eye_p = DMatrix::<f64>::identity(pr, pr);
    let eye_q = DMatrix::<f64>::identity(qr, qr);
    let big = eye_q.kronecker(p) + q.kronecker(&eye_p);
    let rhs = DVector::from_column_slice(r.as_slice());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LtiError::SolveFailed("elimination breakdown in Schur blocks".into()))?;
    Ok(DMatrix::from_column_slice(pr, qr, sol.as_slice()))
}

/// Diagonal block layout `(offset, size)` of a real Schur form.
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let two = i + 1 < n && {
            let sub = t[(i + 1, i)].abs();
            sub > 1e-300 && sub > 1e-15 * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs())
        };
        if two {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

fn quasi_triangular_eigenvalues(t: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut out = Vec::new();
    for (i0, sz) in schur_blocks(t) {
        if sz == 1 {
            out.push(Complex::new(t[(i0, i0)], 0.0));
        } else {
            let (a, b, c, d) = (
                t[(i0, i0)],
                t[(i0, i0 + 1)],
                t[(i0 + 1, i0)],
                t[(i0 + 1, i0 + 1)],
            );
            let tr = a + d;
            let det = a * d - b * c;
            let disc = tr * tr / 4.0 - det;
            if disc >= 0.0 {
                out.push(Complex::new(tr / 2.0 + disc.sqrt(), 0.0));
                out.push(Complex::new(tr / 2.0 - disc.sqrt(), 0.0));
            } else {
                out.push(Complex::new(tr / 2.0, (-disc).sqrt()));
                out.push(Complex::new(tr / 2.0, -(-disc).sqrt()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramianSide {
    Observability,
    Controllability,
}

/// Gramian of a semistable system: full-size `W = U_bar W_bar U_bar^T` with
/// the reduced Gramian kept alongside.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub w: DMatrix<f64>,
    pub w_bar: DMatrix<f64>,
    pub side: GramianSide,
}

impl Gramian {
    /// PSD factor `W_L` with `W = W_L W_L^T`; column count equals the
    /// numerical rank of `W`.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        psd_factor(&self.w)
    }
}

/// Gramian of a semistable system restricted to its stable subspace
/// (the integral deflated by the zero modes).
///
/// Observability side: `A_bar^T W + W A_bar + (C U_bar)^T (C U_bar) = 0`.
/// Controllability side (unit disturbance input on every state):
/// `A_bar W + W A_bar^T + V_bar^T V_bar = 0`.
pub fn semistable_gramian(
    sys: &LtiSystem,
    side: GramianSide,
    dec: &SubspaceDecomposition,
) -> Result<Gramian> {
    let w_bar = match side {
        GramianSide::Observability => {
            let c_bar = dec.reduce_output(sys.c());
            solve_lyapunov(&dec.a_bar.transpose(), &(c_bar.transpose() * &c_bar))?
        }
        GramianSide::Controllability => {
            let q = dec.v_bar.transpose() * &dec.v_bar;
            solve_lyapunov(&dec.a_bar, &q)?
        }
    };
    let mut w = &dec.u_bar * &w_bar * dec.u_bar.transpose();
    w = (&w + w.transpose()) * 0.5;
    Ok(Gramian { w, w_bar, side })
}

/// Factor a PSD matrix as `W = W_L W_L^T` via symmetric eigendecomposition,
/// keeping only eigenvalues above the rank threshold. Works for the
/// structurally rank-deficient Gramians where a triangular Cholesky breaks.
pub fn psd_factor(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (w + w.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let neg_tol = 1e-10 * lam_max.max(f64::MIN_POSITIVE);
    let rank_tol = 1e-12 * lam_max;
    let mut cols: Vec<usize> = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -neg_tol {
            return Err(LtiError::NotPsd(lam));
        }
        if lam > rank_tol {
            cols.push(i);
        }
    }
    // Deterministic column order: descending eigenvalue.
    cols.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut wl = DMatrix::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        let scaled = eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt();
        wl.set_column(k, &scaled);
    }
    Ok(wl)
}

/// H2 norm of the strictly stable realization `(A, B, C)`:
/// `sqrt(tr(B^T W_o B))` with `W_o` the observability Gramian.
pub fn h2_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let w_o = solve_lyapunov(&a.transpose(), &(c.transpose() * c))?;
    let prod = b.transpose() * w_o * b;
    Ok(prod.trace().max(0.0).sqrt())
}

#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    /// Minimum over eigenvalues of the numerical rank of `[A - λI; C]`.
    pub rank: usize,
    pub is_observable: bool,
    /// Smallest `σ_min / σ_max` of the PBH matrix over all eigenvalues.
    pub min_sigma_ratio: f64,
    /// Eigenvalue attaining the minimum rank.
    pub critical_eigenvalue: Complex<f64>,
}

/// Singular values of the PBH pencil `[A - λI; C]` at one eigenvalue.
pub fn pbh_singular_values(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    lambda: Complex<f64>,
) -> Vec<f64> {
    let n = a.nrows();
    let m = c.nrows();
    let mut pbh = DMatrix::<Complex<f64>>::zeros(n + m, n);
    for i in 0..n {
        for j in 0..n {
            pbh[(i, j)] = Complex::new(a[(i, j)], 0.0);
        }
        pbh[(i, i)] -= lambda;
    }
    for i in 0..m {
        for j in 0..n {
            pbh[(n + i, j)] = Complex::new(c[(i, j)], 0.0);
        }
    }
    pbh.singular_values().iter().cloned().collect()
}

/// PBH observability test: numerical rank of `[A - λI; C]` at every
/// eigenvalue of `A` (SVD, threshold `tol * σ_max`).
pub fn observability_rank(a: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> ObservabilityReport {
    let n = a.nrows();
    if n == 0 {
        return ObservabilityReport {
            rank: 0,
            is_observable: true,
            min_sigma_ratio: 1.0,
            critical_eigenvalue: Complex::new(0.0, 0.0),
        };
    }
    let eigs = a.complex_eigenvalues();
    let mut min_rank = n;
    let mut min_ratio = f64::INFINITY;
    let mut critical = Complex::new(0.0, 0.0);
    for ev in eigs.iter() {
        if ev.im < 0.0 {
            // conjugate pair has identical singular values
            continue;
        }
        let svals = pbh_singular_values(a, c, *ev);
        let smax = svals.iter().cloned().fold(0.0f64, f64::max);
        if smax == 0.0 {
            min_rank = 0;
            min_ratio = 0.0;
            critical = *ev;
            continue;
        }
        let rank = svals.iter().filter(|&&s| s > tol * smax).count();
        let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        let ratio = smin / smax;
        if rank < min_rank || (rank == min_rank && ratio < min_ratio) {
            min_rank = rank;
            critical = *ev;
        }
        min_ratio = min_ratio.min(ratio);
    }
    ObservabilityReport {
        rank: min_rank,
        is_observable: min_rank == n,
        min_sigma_ratio: min_ratio,
        critical_eigenvalue: critical,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_laplacian3() -> DMatrix<f64> {
        // 3-node path graph, unit weights
        DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
    }

    #[test]
    fn stable_subspace_pure_zero_mode() {
        let sys = LtiSystem::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        assert_eq!(dec.z, 1);
        assert_eq!(dec.a_bar.nrows(), 0);
    }

    #[test]
    fn stable_subspace_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -1.0]));
        let sys = LtiSystem::new(a, DMatrix::identity(2, 2)).unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        assert_eq!(dec.z, 1);
        assert!((dec.a_bar[(0, 0)] + 1.0).abs() < 1e-12);
        assert!((dec.u_max[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(dec.u_max[(1, 0)].abs() < 1e-12);
        assert!((dec.v_max[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_subspace_path_laplacian() {
        // eigenvalues of -L are {0, -1, -3}
        let a = -path_laplacian3();
        let sys = LtiSystem::new(a.clone(), DMatrix::identity(3, 3)).unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        assert_eq!(dec.z, 1);
        let mut evs: Vec<f64> = dec.a_bar.complex_eigenvalues().iter().map(|e| e.re).collect();
        evs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((evs[0] + 3.0).abs() < 1e-10);
        assert!((evs[1] + 1.0).abs() < 1e-10);
        // biorthonormality and reconstruction
        let r = dec.v_bar.transpose() * &dec.u_bar - DMatrix::identity(2, 2);
        assert!(r.norm() < 1e-10);
        let recon = &dec.u_bar * &dec.a_bar * dec.v_bar.transpose();
        assert!((&a - recon).norm() < 1e-8 * a.norm());
    }

    #[test]
    fn stable_subspace_rejects_unstable() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -1.0]));
        let sys = LtiSystem::new(a, DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            stable_subspace(&sys, 1e-9),
            Err(LtiError::NotSemistable(_))
        ));
    }

    #[test]
    fn stable_subspace_rejects_defective_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let sys = LtiSystem::new(a, DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            stable_subspace(&sys, 1e-9),
            Err(LtiError::NotSemistable(_))
        ));
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let w = solve_lyapunov(&a, &q).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let w = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((w[(1, 1)] - 0.25).abs() < 1e-14);
        assert!(w[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 0.0);
        assert!(matches!(
            solve_lyapunov(&a, &DMatrix::identity(1, 1)),
            Err(LtiError::NotStable(_))
        ));
    }

    #[test]
    fn lyapunov_matches_quadrature() {
        // fixed "random" stable 5x5
        let m = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.2, -0.7, 0.5, 0.1, -0.3, 0.4, 0.3, -0.2, 0.6, 0.2, -0.5, 0.1, 0.0, -0.4, 0.7,
                0.3, -0.6, 0.2, 0.5, -0.1, 0.1, 0.4, -0.3, 0.2, 0.6,
            ],
        );
        let shift = m.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        let a = m - DMatrix::identity(5, 5) * (shift + 0.5);
        let q = DMatrix::identity(5, 5);
        let w = solve_lyapunov(&a, &q).unwrap();

        // quadrature of int exp(At) Q exp(A^T t) dt on [0, 50], step 1e-3 (Simpson)
        let h = 1e-3;
        let steps = 50_000usize;
        let e = (a.clone() * h).exp();
        let mut x = DMatrix::<f64>::identity(5, 5); // exp(A t_k)
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        for k in 0..=steps {
            let weight = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += (&x * &q * x.transpose()) * weight;
            if k < steps {
                x = &e * x;
            }
        }
        let w_quad = acc * (h / 3.0);
        assert!((w - w_quad).norm() < 1e-6);
    }

    #[test]
    fn lyapunov_schur_vs_kronecker() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.3, -0.2, 0.8, 0.1, 0.5, 0.4, -0.6, 0.2, -0.1, 0.7, 0.2, -0.3, 0.6, -0.5, 0.1,
                0.4,
            ],
        );
        let shift = m.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        let a = m - DMatrix::identity(4, 4) * (shift + 1.0);
        let q = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).sin());
        let w1 = solve_lyapunov(&a, &q).unwrap();
        let w2 = solve_lyapunov_kron(&a, &q).unwrap();
        assert!((w1 - w2).norm() < 1e-10 * (1.0 + a.norm()));
    }

    #[test]
    fn gramian_scalar() {
        let sys = LtiSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        let g = semistable_gramian(&sys, GramianSide::Observability, &dec).unwrap();
        assert!((g.w[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gramian_zero_mode_contributes_nothing() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -2.0]));
        let sys = LtiSystem::new(a, DMatrix::identity(2, 2)).unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        let g = semistable_gramian(&sys, GramianSide::Observability, &dec).unwrap();
        assert!(g.w[(0, 0)].abs() < 1e-12);
        assert!((g.w[(1, 1)] - 0.25).abs() < 1e-12);
        assert!(g.w[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn gramian_path_laplacian_matches_quadrature() {
        let a = -path_laplacian3();
        let c = DMatrix::identity(3, 3);
        let sys = LtiSystem::new(a.clone(), c.clone()).unwrap();
        let dec = stable_subspace(&sys, 1e-9).unwrap();
        let g = semistable_gramian(&sys, GramianSide::Observability, &dec).unwrap();

        // quadrature on the deflated (stable) subspace
        let c_bar = dec.reduce_output(&c);
        let q = c_bar.transpose() * &c_bar;
        let h = 1e-3;
        let steps = 50_000usize;
        let e = (dec.a_bar.transpose() * h).exp();
        let mut x = DMatrix::<f64>::identity(2, 2);
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for k in 0..=steps {
            let weight = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += (&x * &q * x.transpose()) * weight;
            if k < steps {
                x = &e * x;
            }
        }
        let w_bar_quad = acc * (h / 3.0);
        let w_quad = &dec.u_bar * w_bar_quad * dec.u_bar.transpose();
        assert!((&g.w - w_quad).norm() < 1e-6);
    }

    #[test]
    fn psd_factor_identity() {
        let wl = psd_factor(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(wl.ncols(), 2);
        assert!((&wl * wl.transpose() - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn psd_factor_rank_one() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0]));
        let wl = psd_factor(&w).unwrap();
        assert_eq!(wl.ncols(), 1);
        assert!((&wl * wl.transpose() - w).norm() < 1e-12);
    }

    #[test]
    fn psd_factor_rank_deficient_reconstruction() {
        // W = G G^T with a fixed full-rank 6x4 Vandermonde G
        let g = DMatrix::from_fn(6, 4, |i, j| (0.3 + 0.4 * i as f64).powi(j as i32));
        let w = &g * g.transpose();
        let wl = psd_factor(&w).unwrap();
        assert_eq!(wl.ncols(), 4);
        assert!((&wl * wl.transpose() - &w).norm() <= 1e-10 * w.norm());
    }

    #[test]
    fn psd_factor_rejects_indefinite() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(psd_factor(&w), Err(LtiError::NotPsd(_))));
    }

    #[test]
    fn h2_first_order() {
        // g(s) = 1/(s+1) -> 1/sqrt(2)
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let h = h2_norm(&a, &b, &c).unwrap();
        assert!((h - 0.5f64.sqrt()).abs() < 1e-12);
        // g(s) = 2/(s+1) scales linearly
        let c2 = DMatrix::from_element(1, 1, 2.0);
        let h2 = h2_norm(&a, &b, &c2).unwrap();
        assert!((h2 - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn h2_matches_quadrature_siso() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.1, -0.4, 0.2, 0.5, 0.3, 0.2, -0.1, 0.4, -0.2, 0.6, 0.3, -0.5, 0.4, 0.1, -0.3,
                0.2,
            ],
        );
        let shift = m.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        let a = m - DMatrix::identity(4, 4) * (shift + 0.8);
        let b = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, -1.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 4, &[0.3, -0.2, 0.5, 0.1]);
        let h = h2_norm(&a, &b, &c).unwrap();

        let dt = 1e-3;
        let steps = 50_000usize;
        let e = (a.clone() * dt).exp();
        let mut x = b.clone();
        let mut acc = 0.0;
        for k in 0..=steps {
            let weight = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let ht = (&c * &x)[(0, 0)];
            acc += weight * ht * ht;
            if k < steps {
                x = &e * x;
            }
        }
        let h_quad = (acc * dt / 3.0).sqrt();
        assert!((h - h_quad).abs() < 1e-6);
    }

    #[test]
    fn trace_additivity_of_h2() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let b = DMatrix::identity(2, 2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let total = h2_norm(&a, &b, &c).unwrap();
        let mut sum_sq = 0.0;
        for i in 0..2 {
            let row = DMatrix::from_row_slice(1, 2, c.row(i).transpose().as_slice());
            let h = h2_norm(&a, &b, &row).unwrap();
            sum_sq += h * h;
        }
        assert!((total * total - sum_sq).abs() < 1e-12);
    }

    #[test]
    fn pbh_unseen_mode() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let rep = observability_rank(&a, &c, 1e-8);
        assert!(!rep.is_observable);
        assert_eq!(rep.rank, 1);
        assert!((rep.critical_eigenvalue.re + 2.0).abs() < 1e-10);
    }

    #[test]
    fn pbh_chain_observable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let rep = observability_rank(&a, &c, 1e-8);
        assert!(rep.is_observable);
        assert_eq!(rep.rank, 2);
    }

    #[test]
    fn decomposition_reconstruction_invariant() {
        // semistable system with one zero mode built from a similarity
        let t = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.2, -0.3, 0.1, 1.0, 0.4, -0.2, 0.3, 1.0],
        );
        let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -1.5, -0.7]));
        let a = &t * lam * t.clone().lu().try_inverse().unwrap();
        let sys = LtiSystem::new(a.clone(), DMatrix::identity(3, 3)).unwrap();
        let dec = stable_subspace(&sys, default_tol_zero(&a)).unwrap();
        assert_eq!(dec.z, 1);
        let sigma_zero =
            &dec.u_max * (dec.v_max.transpose() * &a * &dec.u_max) * dec.v_max.transpose();
        let recon = &dec.u_bar * &dec.a_bar * dec.v_bar.transpose() + sigma_zero;
        assert!((&a - recon).norm() <= 1e-8 * a.norm());
        assert!((&a * &dec.u_max).norm() <= 1e-8 * a.norm());
        assert!((dec.v_max.transpose() * &a).norm() <= 1e-8 * a.norm());
    }
}
