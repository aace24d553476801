//! Sylvester/Lyapunov solves and the dual-Riccati construction that produces
//! a feasible P for the design inequality.

use nalgebra::{Complex, DMatrix, DVector};

use super::{
    eigenvalues, is_hurwitz, is_observable, is_positive_definite, lambda_max_symmetric,
    lambda_min_symmetric, lmi_residual,
};
use crate::error::{Error, Result};

/// Strictness margin: a residual counts as negative definite only when
/// λ_max < −STRICTNESS_REL · ‖R‖_F.
pub const STRICTNESS_REL: f64 = 1e-8;

const SYLVESTER_RES_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 60;
const NEWTON_TOL: f64 = 1e-12;

/// Solve AX + XB = C by Kronecker vectorization.
///
/// Unique solvability requires the spectra of A and −B to be disjoint; a
/// singular operator (shared eigenvalues) is reported as a numerical error.
pub fn solve_sylvester(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.nrows();
    if a.ncols() != n || b.ncols() != m {
        return Err(Error::Dimension("Sylvester A and B must be square".into()));
    }
    if c.nrows() != n || c.ncols() != m {
        return Err(Error::Dimension(format!(
            "Sylvester C must be {n}x{m}, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    // (I_m ⊗ A + Bᵀ ⊗ I_n) vec(X) = vec(C), column-major vec
    let mut op = DMatrix::zeros(n * m, n * m);
    for blk in 0..m {
        op.view_mut((blk * n, blk * n), (n, n)).copy_from(a);
    }
    for i in 0..m {
        for j in 0..m {
            let bt_ij = b[(j, i)];
            if bt_ij != 0.0 {
                for k in 0..n {
                    op[(i * n + k, j * n + k)] += bt_ij;
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = op.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical("singular Sylvester equation (A and -B share eigenvalues?)".into())
    })?;
    let x = DMatrix::from_column_slice(n, m, x.as_slice());
    let residual = (a * &x + &x * b - c).norm();
    if residual > SYLVESTER_RES_TOL * (1.0 + c.norm()) {
        return Err(Error::Numerical(format!(
            "Sylvester residual {residual:.3e} exceeds tolerance (near-singular equation?)"
        )));
    }
    Ok(x)
}

/// Solve QA_cl + A_clᵀQ = −I for a Hurwitz A_cl, optionally rescaled so that
/// Q ≻ I. Scaling by a positive constant preserves the sign of the residual
/// Q·A_cl + A_clᵀ·Q, so the rescaled Q still satisfies the inequality.
pub fn solve_lyapunov_gain(a_cl: &DMatrix<f64>, rescale_above_identity: bool) -> Result<DMatrix<f64>> {
    if !is_hurwitz(a_cl)? {
        return Err(Error::Infeasible(
            "closed-loop matrix is not Hurwitz; the Lyapunov gain equation has no positive solution"
                .into(),
        ));
    }
    let n = a_cl.nrows();
    let neg_i = DMatrix::<f64>::identity(n, n) * -1.0;
    // Q A_cl + A_clᵀ Q = -I  is a Sylvester equation in Q
    let q = solve_sylvester(&a_cl.transpose(), a_cl, &neg_i)?;
    let mut q = (&q + q.transpose()) * 0.5;
    if rescale_above_identity {
        let lmin = lambda_min_symmetric(&q)?;
        if lmin <= 0.0 {
            return Err(Error::Numerical("Lyapunov solution is not positive definite".into()));
        }
        if lmin <= 1.0 {
            q *= 1.01 / lmin;
        }
    }
    Ok(q)
}

/// Produce P ≻ 0 with PA_T + A_TᵀP + μP − 2TᵀT ≺ 0 (strictly).
///
/// Route: set Â = A_T + (μ/2)I and solve the dual filter Riccati equation
/// ÂΣ + ΣÂᵀ − ΣTᵀTΣ + I = 0 by Newton–Kleinman iteration (each step one
/// Lyapunov solve, initial stabilizing observer gain from pole placement on
/// the dual pair), then P = Σ⁻¹. Multiplying the Riccati identity by Σ⁻¹ on
/// both sides gives PÂ + ÂᵀP − TᵀT = −P², so the target inequality holds
/// with margin P² + TᵀT.
pub fn solve_design_lmi(
    a_t: &DMatrix<f64>,
    t_mat: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>> {
    if a_t.nrows() != a_t.ncols() {
        return Err(Error::Dimension("A_T must be square".into()));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::Parameter(format!("mu must be finite and >= 0, got {mu}")));
    }
    let q = a_t.nrows();
    let a_hat = a_t + DMatrix::<f64>::identity(q, q) * (mu / 2.0);
    if !is_observable(&a_hat, t_mat)? {
        return Err(Error::Infeasible(
            "(A_T + (mu/2)I, T) is not observable; the design inequality is infeasible".into(),
        ));
    }

    // Stabilizing initial observer gain from pole placement on the dual pair.
    let radius = eigenvalues(&a_hat)?
        .iter()
        .map(|l| l.norm())
        .fold(0.0_f64, f64::max);
    let desired: Vec<Complex<f64>> = (0..q)
        .map(|k| Complex::new(-(radius + 1.0 + k as f64), 0.0))
        .collect();
    let k_dual = super::pole_place(&a_hat.transpose(), &t_mat.transpose(), &desired)?;
    let mut l_gain = -k_dual.transpose();

    let eye = DMatrix::<f64>::identity(q, q);
    let mut sigma = DMatrix::<f64>::zeros(q, q);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let a_cl = &a_hat - &l_gain * t_mat;
        let w = -(&eye + &l_gain * l_gain.transpose());
        sigma = solve_sylvester(&a_cl, &a_cl.transpose(), &w)?;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        let res = &a_hat * &sigma + &sigma * a_hat.transpose()
            - &sigma * t_mat.transpose() * t_mat * &sigma
            + &eye;
        if res.norm() <= NEWTON_TOL * (1.0 + sigma.norm()) {
            converged = true;
            break;
        }
        l_gain = &sigma * t_mat.transpose();
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Newton iteration for the dual Riccati equation did not converge in {NEWTON_MAX_ITER} steps"
        )));
    }

    let p = sigma.clone().try_inverse().ok_or_else(|| {
        Error::Numerical("Riccati solution is singular; cannot invert for P".into())
    })?;
    let p = (&p + p.transpose()) * 0.5;

    // Certify the construction before handing P out.
    if !is_positive_definite(&p)? {
        return Err(Error::Numerical("constructed P failed the definiteness check".into()));
    }
    let residual = lmi_residual(&p, a_t, t_mat, mu)?;
    let lmax = lambda_max_symmetric(&residual)?;
    if lmax >= -STRICTNESS_REL * residual.norm() {
        return Err(Error::Numerical(format!(
            "constructed P is not strictly feasible: lambda_max(residual) = {lmax:.3e}"
        )));
    }
    Ok(p)
}
