//! Luenberger observer design and the aggregated error-system analysis.
//!
//! The gain comes from a filter-type Riccati equation with unit weights on
//! the margin-shifted matrix `𝒜 + margin·I`: stabilizing
//! `𝒜 + margin·I − LC` pushes every observable eigenvalue of `𝒜 − LC` left
//! of `−margin`. The Riccati equation is solved by the matrix-sign method on
//! the associated Hamiltonian, then polished by Newton (Kleinman) iteration.
//! Modes unobservable through `C` cannot be moved, so the shift is capped
//! below their own decay rate.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::lti::{
    decompose_semistable, default_tol_zero, pbh_singular_values, solve_lyapunov, LtiError,
    LtiSystem,
};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("pair is not detectable: unobservable mode at {re:.3e}{im:+.3e}i")]
    NotDetectable { re: f64, im: f64 },
    #[error("gain iteration failed: {0}")]
    DesignFailed(String),
    #[error("measurement stream has {got} rows, design expects {expected}")]
    GridMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Lti(#[from] LtiError),
}

pub type Result<T> = std::result::Result<T, ObserverError>;

/// A designed observer gain and the margin it achieves.
#[derive(Debug, Clone)]
pub struct ObserverDesign {
    /// Gain, `n x m_used`.
    pub l: DMatrix<f64>,
    /// Measurement matrix the gain was designed for.
    pub c_used: DMatrix<f64>,
    /// Achieved margin: `-max Re eig(𝒜 - L C_used)`.
    pub stability_margin: f64,
    /// The spectral shift actually used (requested margin, capped by the
    /// decay of unobservable modes).
    pub margin_used: f64,
}

/// Eigenvalues of `a` that fail the PBH test with `c` (one per conjugate
/// pair, the `Im >= 0` representative).
fn unobservable_modes(a: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> Vec<Complex<f64>> {
    let eigs = a.complex_eigenvalues();
    let mut out = Vec::new();
    for ev in eigs.iter() {
        if ev.im < 0.0 {
            continue;
        }
        let svals = pbh_singular_values(a, c, *ev);
        let smax = svals.iter().cloned().fold(0.0f64, f64::max);
        let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        if smax == 0.0 || smin <= tol * smax {
            out.push(*ev);
        }
    }
    out
}

fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|ev| ev.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Matrix sign function by scaled Newton iteration `Z ← (μZ + (μZ)⁻¹)/2`
/// with determinant scaling. Fails (`None`) when `Z` becomes singular or the
/// iteration stalls, which happens exactly when the input has eigenvalues on
/// (or numerically hugging) the imaginary axis.
fn matrix_sign(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let mut z = h.clone();
    for _ in 0..120 {
        let lu = z.clone().lu();
        // |det|^(1/n) via the log of the diagonal of U, to avoid overflow
        let mut logdet = 0.0f64;
        for i in 0..n {
            let d = lu.u()[(i, i)].abs();
            if d == 0.0 || !d.is_finite() {
                return None;
            }
            logdet += d.ln();
        }
        let zinv = lu.try_inverse()?;
        let mu = (-logdet / n as f64).exp().clamp(1e-8, 1e8);
        let z_next = (&z * mu + zinv / mu) * 0.5;
        let diff = (&z_next - &z).norm();
        let done = diff <= 1e-13 * z_next.norm().max(1.0);
        z = z_next;
        if done {
            return Some(z);
        }
    }
    None
}

/// Stabilizing solution `P` of the filter Riccati equation
/// `A P + P Aᵀ − P CᵀC P + I = 0`, from the stable invariant subspace of the
/// Hamiltonian `H = [[Aᵀ, −CᵀC], [−I, −A]]` extracted via `sign(H)`: the
/// subspace is spanned by `[I; P]`, on which the sign acts as `−I`, giving
/// the overdetermined linear system `[S₁₂; S₂₂+I] P = [−(S₁₁+I); −S₂₁]`.
fn solve_filter_are(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let ctc = c.transpose() * c;
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a.transpose());
    h.view_mut((0, n), (n, n)).copy_from(&(-&ctc));
    h.view_mut((n, 0), (n, n))
        .copy_from(&(-DMatrix::<f64>::identity(n, n)));
    h.view_mut((n, n), (n, n)).copy_from(&(-a));
    let s = matrix_sign(&h)?;

    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&s.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(s.view((n, n), (n, n)) + DMatrix::<f64>::identity(n, n)));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(s.view((0, 0), (n, n)) + DMatrix::<f64>::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-s.view((n, 0), (n, n))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-12).ok()?;
    // enforce the symmetry the exact solution has
    Some((&p + p.transpose()) * 0.5)
}

/// Design `L` so that every observable eigenvalue of `𝒜 - L C_used` has
/// `Re <= -margin`. Unobservable modes must already be strictly stable
/// (otherwise `NotDetectable`); they cap the usable shift at 90% of their
/// slowest decay.
pub fn design_gain(sys: &LtiSystem, c_used: &DMatrix<f64>, margin: f64) -> Result<ObserverDesign> {
    let a = sys.a();
    let n = a.nrows();
    if c_used.ncols() != n {
        return Err(ObserverError::GridMismatch {
            got: c_used.ncols(),
            expected: n,
        });
    }
    let pbh_tol = 1e-8;
    let unobs = unobservable_modes(a, c_used, pbh_tol);
    let zero_tol = default_tol_zero(a);
    let mut max_shift = f64::INFINITY;
    for ev in &unobs {
        if ev.re >= -zero_tol {
            return Err(ObserverError::NotDetectable {
                re: ev.re,
                im: ev.im,
            });
        }
        max_shift = max_shift.min(0.9 * (-ev.re));
    }
    let mut margin_used = margin.min(max_shift).max(0.0);

    // Initial stabilizing gain from the shifted filter Riccati equation
    // A_s P + P A_sᵀ − P CᵀC P + I = 0 with A_s = A + margin·I, solved by
    // the matrix-sign method. A stabilizing solution exists whenever the
    // shifted pair keeps its unobservable modes strictly stable, which the
    // margin cap guarantees; if the sign iteration stalls (weakly observable
    // modes ending up near the imaginary axis after the shift), halve the
    // shift and retry, reporting the shift actually used.
    let mut l0 = None;
    let mut a_shift = DMatrix::zeros(n, n);
    for _ in 0..12 {
        a_shift = a + DMatrix::<f64>::identity(n, n) * margin_used;
        if let Some(p) = solve_filter_are(&a_shift, c_used) {
            let cand = &p * c_used.transpose();
            if spectral_abscissa(&(&a_shift - &cand * c_used)) < 0.0 {
                l0 = Some(cand);
                break;
            }
        }
        margin_used *= 0.5;
        if margin_used < 1e-6 {
            margin_used = 0.0;
        }
    }
    let mut l = l0.ok_or_else(|| {
        ObserverError::DesignFailed("no stabilizing initial gain found".into())
    })?;

    // Newton (Kleinman) polish toward the exact filter Riccati solution:
    // F P + P Fᵀ + I + L Lᵀ = 0 with F = A_s − LC, then L ← P Cᵀ. The sign
    // solution is already stabilizing, so the polish is best-effort: keep
    // the last iterate that still stabilizes the shifted matrix and stop on
    // stall instead of failing (badly conditioned low-rank `C_used` can keep
    // the fixed-point delta above tight tolerances indefinitely).
    let eye = DMatrix::<f64>::identity(n, n);
    let mut best = l.clone();
    for _ in 0..100 {
        let f = &a_shift - &l * c_used;
        let q = &eye + &l * l.transpose();
        let Ok(p) = solve_lyapunov(&f, &q) else { break };
        let l_next = &p * c_used.transpose();
        let delta = (&l_next - &l).norm() / l_next.norm().max(1.0);
        l = l_next;
        if spectral_abscissa(&(&a_shift - &l * c_used)) < 0.0 {
            best = l.clone();
        }
        if delta < 1e-11 {
            break;
        }
    }
    let l = best;

    let closed = a - &l * c_used;
    let achieved = -spectral_abscissa(&closed);
    if achieved <= 0.0 {
        return Err(ObserverError::DesignFailed(format!(
            "closed observer matrix not stable (max Re = {:.3e})",
            -achieved
        )));
    }
    Ok(ObserverDesign {
        l,
        c_used: c_used.clone(),
        stability_margin: achieved,
        margin_used,
    })
}

/// Estimate/residual trajectories from a recorded measurement stream.
#[derive(Debug, Clone)]
pub struct ObserverRun {
    /// Estimates per step, `n x (steps+1)`.
    pub x_hat: DMatrix<f64>,
    /// Residual `C_used x̂ - y` per step, `m_used x (steps+1)`.
    pub residual: DMatrix<f64>,
}

/// Integrate `dx̂/dt = 𝒜 x̂ + L (y - C_used x̂)` over a uniform stream
/// (columns of `y_stream`, spacing `dt`) with the same fixed-step scheme as
/// the plant. Off-grid stage values of `y` are linearly interpolated.
pub fn run_observer(
    sys: &LtiSystem,
    design: &ObserverDesign,
    y_stream: &DMatrix<f64>,
    x_hat0: &DVector<f64>,
    dt: f64,
) -> Result<ObserverRun> {
    let n = sys.n();
    let m = design.c_used.nrows();
    if y_stream.nrows() != m {
        return Err(ObserverError::GridMismatch {
            got: y_stream.nrows(),
            expected: m,
        });
    }
    if x_hat0.len() != n {
        return Err(ObserverError::GridMismatch {
            got: x_hat0.len(),
            expected: n,
        });
    }
    let steps = y_stream.ncols().saturating_sub(1);
    let f = sys.a() - &design.l * &design.c_used;

    let mut x_hat = DMatrix::zeros(n, steps + 1);
    let mut residual = DMatrix::zeros(m, steps + 1);
    let mut x = x_hat0.clone();
    for step in 0..=steps {
        x_hat.set_column(step, &x);
        let y = y_stream.column(step).into_owned();
        residual.set_column(step, &(&design.c_used * &x - &y));
        if step == steps {
            break;
        }
        let y1 = y_stream.column(step + 1).into_owned();
        let y_mid = (&y + &y1) * 0.5;
        // classic RK4 on dx = F x + L y(t)
        let k1 = &f * &x + &design.l * &y;
        let k2 = &f * (&x + &k1 * (dt / 2.0)) + &design.l * &y_mid;
        let k3 = &f * (&x + &k2 * (dt / 2.0)) + &design.l * &y_mid;
        let k4 = &f * (&x + &k3 * dt) + &design.l * &y1;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    Ok(ObserverRun { x_hat, residual })
}

/// Poles and zero-mode residue of the aggregated error transfer function
/// `g_e(s) = (I - ΠᵀΠ) C (sI - 𝒜)⁻¹`.
#[derive(Debug, Clone)]
pub struct ErrorSystemReport {
    /// Poles of the minimal realization (zero modes dropped when cancelled).
    pub poles: Vec<Complex<f64>>,
    pub max_real_part: f64,
    /// `‖(I - ΠᵀΠ) C u_max v_maxᵀ‖` — magnitude of the residue at s = 0.
    pub zero_mode_residue: f64,
    /// `‖(I - ΠᵀΠ) C u_max‖ / ‖C u_max‖` — how far the zero-mode output
    /// direction falls outside the cluster row space (0 = perfectly covered).
    pub vmax_alignment_defect: f64,
}

/// Analyze whether cluster aggregation cancels the marginal zero mode: when
/// `C u_max` lies in the row space of `Π`, the `s = 0` pole of `g_e` is
/// cancelled and the aggregated error dynamics are asymptotically stable.
pub fn error_system_poles(sys: &LtiSystem, pi: &DMatrix<f64>) -> Result<ErrorSystemReport> {
    let a = sys.a();
    let c = sys.c();
    let tol = default_tol_zero(a);
    let dec = decompose_semistable(a, tol)?;

    let proj_c = c - pi.transpose() * (pi * c);
    let cu = c * &dec.u_max;
    let proj_cu = &proj_c * &dec.u_max;
    let residue = (&proj_cu * dec.v_max.transpose()).norm();
    let defect = if cu.norm() > 0.0 {
        proj_cu.norm() / cu.norm()
    } else {
        0.0
    };

    let cancel_tol = 1e-8 * c.norm().max(1.0);
    let cancelled = proj_cu.norm() <= cancel_tol;
    let mut poles: Vec<Complex<f64>> = Vec::new();
    let mut dropped = 0usize;
    for ev in a.complex_eigenvalues().iter() {
        if cancelled && dropped < dec.z && ev.norm() <= tol {
            dropped += 1;
            continue;
        }
        poles.push(*ev);
    }
    poles.sort_by(|x, y| {
        y.re.partial_cmp(&x.re)
            .unwrap()
            .then(y.im.partial_cmp(&x.im).unwrap())
    });
    let max_real_part = poles
        .iter()
        .map(|p| p.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ErrorSystemReport {
        poles,
        max_real_part,
        zero_mode_residue: residue,
        vmax_alignment_defect: defect,
    })
}
