//! Dense real-matrix numerics at desk scale (state dimensions ≲ 10).
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<f64>`; construction from untrusted data should go
//! through [`from_rows`], which rejects non-finite entries.

mod equations;
mod placement;
pub mod serde_matrix;

pub use equations::{solve_design_lmi, solve_lyapunov_gain, solve_sylvester};
pub use placement::pole_place;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues with multiplicity, as returned by [`eigenvalues`].
pub type Spectrum = Vec<Complex<f64>>;

/// Relative rank tolerance (scaled by the largest singular value).
const RANK_REL_TOL: f64 = 1e-9;
/// Cholesky pivot threshold for positive-definiteness tests.
const PD_PIVOT_TOL: f64 = 1e-12;
/// Real-part threshold for the Hurwitz test.
const HURWITZ_MARGIN: f64 = 1e-9;

/// Build a matrix from row slices, rejecting ragged shapes and non-finite
/// entries.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Dimension("matrix must have at least one row".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Dimension("matrix must have at least one column".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
        if let Some(v) = r.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite entry {v} in row {i}")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Matrix contents as nested row vectors (the JSON wire form).
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// e^{Mt} by scaling-and-squaring with a Padé approximant.
pub fn mat_exp(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    require_square(m, "mat_exp input")?;
    if !t.is_finite() {
        return Err(Error::Parameter(format!("mat_exp time must be finite, got {t}")));
    }
    Ok((m * t).exp())
}

/// All eigenvalues of a square matrix, via Hessenberg reduction and the
/// shifted QR iteration.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Spectrum> {
    require_square(m, "eigenvalue input")?;
    let max_iter = 100 * m.nrows().max(10);
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, max_iter)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "QR eigenvalue iteration did not converge within {max_iter} iterations"
            ))
        })?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// True iff the symmetric part (M + Mᵀ)/2 has a Cholesky factorization with
/// every pivot above [`PD_PIVOT_TOL`].
pub fn is_positive_definite(m: &DMatrix<f64>) -> Result<bool> {
    require_square(m, "definiteness input")?;
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    let sym = (m + m.transpose()) * 0.5;
    for j in 0..n {
        let mut d = sym[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= PD_PIVOT_TOL {
            return Ok(false);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = sym[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(true)
}

/// True iff every eigenvalue has real part below −[`HURWITZ_MARGIN`].
pub fn is_hurwitz(m: &DMatrix<f64>) -> Result<bool> {
    let spec = eigenvalues(m)?;
    Ok(spec.iter().all(|l| l.re < -HURWITZ_MARGIN))
}

/// R = PA_T + A_TᵀP + μP − 2TᵀT, the residual whose maximal eigenvalue must
/// be negative for the design inequality to hold.
pub fn lmi_residual(
    p: &DMatrix<f64>,
    a_t: &DMatrix<f64>,
    t_mat: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>> {
    require_square(p, "P")?;
    require_square(a_t, "A_T")?;
    if p.nrows() != a_t.nrows() || t_mat.ncols() != a_t.nrows() {
        return Err(Error::Dimension(format!(
            "LMI residual shapes do not conform: P {}x{}, A_T {}x{}, T {}x{}",
            p.nrows(),
            p.ncols(),
            a_t.nrows(),
            a_t.ncols(),
            t_mat.nrows(),
            t_mat.ncols()
        )));
    }
    Ok(p * a_t + a_t.transpose() * p + p * mu - t_mat.transpose() * t_mat * 2.0)
}

/// Rank of the stacked observability matrix [C; CA; …; CA^{n−1}] equals n.
pub fn is_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<bool> {
    require_square(a, "A")?;
    let n = a.nrows();
    if c.ncols() != n {
        return Err(Error::Dimension(format!(
            "C has {} columns, expected {n}",
            c.ncols()
        )));
    }
    let mut stacked = DMatrix::zeros(c.nrows() * n, n);
    let mut block = c.clone();
    for k in 0..n {
        stacked
            .view_mut((k * c.nrows(), 0), (c.nrows(), n))
            .copy_from(&block);
        block = &block * a;
    }
    Ok(rank(&stacked) == n)
}

/// Rank of [B, AB, …, A^{n−1}B] equals n.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<bool> {
    require_square(a, "A")?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "B has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let mut stacked = DMatrix::zeros(n, b.ncols() * n);
    let mut block = b.clone();
    for k in 0..n {
        stacked
            .view_mut((0, k * b.ncols()), (n, b.ncols()))
            .copy_from(&block);
        block = a * &block;
    }
    Ok(rank(&stacked) == n)
}

/// Numerical rank with a tolerance relative to the largest singular value.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_REL_TOL * smax).count()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0_f64, f64::max)
}

/// Smallest singular value.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    m.singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalue range of the symmetric part of `m`, as (λ_min, λ_max).
pub fn symmetric_eig_range(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    require_square(m, "symmetric eigenvalue input")?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// λ_max of the symmetric part.
pub fn lambda_max_symmetric(m: &DMatrix<f64>) -> Result<f64> {
    symmetric_eig_range(m).map(|(_, hi)| hi)
}

/// λ_min of the symmetric part.
pub fn lambda_min_symmetric(m: &DMatrix<f64>) -> Result<f64> {
    symmetric_eig_range(m).map(|(lo, _)| lo)
}

/// Match two spectra as multisets; returns the largest pairing distance, or
/// `None` if the lengths differ.
pub fn spectrum_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut remaining: Vec<Complex<f64>> = b.to_vec();
    let mut worst = 0.0_f64;
    for &la in a {
        let (idx, d) = remaining
            .iter()
            .enumerate()
            .map(|(i, &lb)| (i, (la - lb).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))?;
        worst = worst.max(d);
        remaining.swap_remove(idx);
    }
    Some(worst)
}

/// Spectral-norm of ∫_{−τ}^{0} e^{As} ds via composite Simpson quadrature.
pub fn integral_exp_norm(a: &DMatrix<f64>, tau: f64) -> Result<f64> {
    require_square(a, "A")?;
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("tau must be nonnegative, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(0.0);
    }
    let panels = 200;
    let h = tau / (2 * panels) as f64;
    let mut acc: DMatrix<f64> = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..=(2 * panels) {
        let s = -tau + k as f64 * h;
        let w = if k == 0 || k == 2 * panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += mat_exp(a, s)? * w;
    }
    acc *= h / 3.0;
    Ok(spectral_norm(&acc))
}

/// Kronecker product helper used by tests and the error-stacking identity.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    DMatrix::from_fn(ra * rb, ca * cb, |i, j| {
        a[(i / rb, j / cb)] * b[(i % rb, j % cb)]
    })
}

/// Stack a column vector list into one long vector.
pub fn stack_vectors(vs: &[DVector<f64>]) -> DVector<f64> {
    let total = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn a1() -> DMatrix<f64> {
        from_rows(&[vec![-4.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let e = mat_exp(&z, 0.7).unwrap();
        assert_relative_eq!(e, DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn exp_of_diagonal() {
        let d = from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let e = mat_exp(&d, 1.0).unwrap();
        assert_relative_eq!(e[(0, 0)], 1.0_f64.exp(), epsilon = 1e-12);
        assert_relative_eq!(e[(1, 1)], 2.0_f64.exp(), epsilon = 1e-12);
        assert_relative_eq!(e[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn exp_determinant_equals_exp_trace() {
        // tr(A1) = -4, so det(e^{A1 * 0.09}) = e^{-0.36}
        let e = mat_exp(&a1(), 0.09).unwrap();
        assert_relative_eq!(e.determinant(), (-0.36_f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn exp_rejects_non_square() {
        let m = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(mat_exp(&m, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn eigenvalues_of_example_plant() {
        // -2 ± sqrt(5), printed in the source material as -4.2361 / 0.2361
        let mut eig: Vec<f64> = eigenvalues(&a1()).unwrap().iter().map(|l| l.re).collect();
        eig.sort_by(f64::total_cmp);
        assert_relative_eq!(eig[0], -2.0 - 5.0_f64.sqrt(), epsilon = 1e-10);
        assert_relative_eq!(eig[1], -2.0 + 5.0_f64.sqrt(), epsilon = 1e-10);
        assert_relative_eq!(eig[0], -4.2361, epsilon = 5e-5);
        assert_relative_eq!(eig[1], 0.2361, epsilon = 5e-5);
    }

    #[test]
    fn eigenvalues_of_identity() {
        let spec = eigenvalues(&DMatrix::identity(2, 2)).unwrap();
        for l in spec {
            assert_relative_eq!(l.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(l.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigenvalues_of_rotation_are_imaginary() {
        let s = from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let mut spec = eigenvalues(&s).unwrap();
        spec.sort_by(|a, b| a.im.total_cmp(&b.im));
        assert_relative_eq!(spec[0].im, -1.0, epsilon = 1e-12);
        assert_relative_eq!(spec[1].im, 1.0, epsilon = 1e-12);
        assert_relative_eq!(spec[0].re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn definiteness_basics() {
        assert!(is_positive_definite(&DMatrix::identity(4, 4)).unwrap());
        let neg = DMatrix::<f64>::identity(2, 2) * -1.0;
        assert!(!is_positive_definite(&neg).unwrap());
        // positive semidefinite but singular
        let psd = from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(!is_positive_definite(&psd).unwrap());
    }

    #[test]
    fn hurwitz_checks() {
        let d = from_rows(&[vec![-5.0, 0.0], vec![0.0, -10.0]]).unwrap();
        assert!(is_hurwitz(&d).unwrap());
        let s = from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(!is_hurwitz(&s).unwrap());
        assert!(!is_hurwitz(&a1()).unwrap()); // has the unstable root 0.2361
    }

    #[test]
    fn residual_of_trivial_lmi() {
        // P = I, A_T = 0, T = I, mu = 0  =>  R = -2I
        let p = DMatrix::identity(2, 2);
        let z = DMatrix::zeros(2, 2);
        let t = DMatrix::identity(2, 2);
        let r = lmi_residual(&p, &z, &t, 0.0).unwrap();
        assert_relative_eq!(r, DMatrix::identity(2, 2) * -2.0, epsilon = 1e-14);
    }

    #[test]
    fn observability_and_controllability() {
        let b1 = from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let s = from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        // (S, E) with E = B (F = I) is observable per the worked example
        assert!(is_observable(&s, &b1).unwrap());
        assert!(is_controllable(&a1(), &b1).unwrap());
        let zero_c = DMatrix::zeros(2, 2);
        assert!(!is_observable(&a1(), &zero_c).unwrap());
        assert!(!is_controllable(&a1(), &zero_c).unwrap());
    }

    #[test]
    fn integral_exp_norm_of_zero_matrix() {
        // integrand is the identity; the integral is tau * I
        let z = DMatrix::<f64>::zeros(2, 2);
        let nrm = integral_exp_norm(&z, 0.3).unwrap();
        assert_relative_eq!(nrm, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn from_rows_rejects_bad_input() {
        assert!(matches!(
            from_rows(&[vec![1.0, 2.0], vec![3.0]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            from_rows(&[vec![f64::NAN]]),
            Err(Error::Parameter(_))
        ));
    }
}
