//! MIMO pole placement by the Sylvester-seed method.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{eigenvalues, is_controllable, sigma_min, spectral_norm, spectrum_distance};
use crate::error::{Error, Result};

const SEED_BASE: u64 = 0x706c_6163_655f_6b31; // deterministic seed for G draws
const MAX_ATTEMPTS: u64 = 8;
const COND_LIMIT: f64 = 1e8;
const CONJUGATE_TOL: f64 = 1e-9;
const PLACEMENT_TOL: f64 = 1e-8;

/// Find K such that the spectrum of A + BK equals `desired` (as a multiset).
///
/// Construction: build Λ as the real block-diagonal form of the desired
/// poles, draw a deterministic full-rank seed G, solve AX − XΛ = −BG, and
/// set K = GX⁻¹ so that (A + BK)X = XΛ. Seeds with cond(X) beyond 1e8 are
/// retried. If A already has exactly the desired spectrum, K = 0 is a valid
/// answer and is returned directly (the Sylvester route needs the spectra of
/// A and Λ to be disjoint).
pub fn pole_place(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    desired: &[Complex<f64>],
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("A must be square".into()));
    }
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
    }
    let p = b.ncols();
    if desired.len() != n {
        return Err(Error::Parameter(format!(
            "expected {n} desired poles, got {}",
            desired.len()
        )));
    }
    let lambda = real_block_diagonal(desired)?;

    let open_loop = eigenvalues(a)?;
    if let Some(d) = spectrum_distance(&open_loop, desired) {
        if d <= CONJUGATE_TOL {
            return Ok(DMatrix::zeros(p, n));
        }
    }
    if !is_controllable(a, b)? {
        return Err(Error::Infeasible("(A, B) is not controllable".into()));
    }
    if open_loop
        .iter()
        .any(|la| desired.iter().any(|ld| (la - ld).norm() <= CONJUGATE_TOL))
    {
        return Err(Error::Infeasible(
            "desired poles overlap the open-loop spectrum; the Sylvester-seed construction needs disjoint spectra"
                .into(),
        ));
    }

    let neg_lambda = -&lambda;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED_BASE.wrapping_add(attempt));
        let g = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let rhs = -(b * &g);
        let x = match super::solve_sylvester(a, &neg_lambda, &rhs) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let smin = sigma_min(&x);
        if smin <= 0.0 || spectral_norm(&x) / smin > COND_LIMIT {
            continue;
        }
        let x_inv = match x.try_inverse() {
            Some(inv) => inv,
            None => continue,
        };
        let k = &g * x_inv;
        let closed = eigenvalues(&(a + b * &k))?;
        match spectrum_distance(&closed, desired) {
            Some(d) if d <= PLACEMENT_TOL => return Ok(k),
            _ => continue,
        }
    }
    Err(Error::Numerical(format!(
        "pole placement failed after {MAX_ATTEMPTS} seeds (repeated ill-conditioning)"
    )))
}

/// Real block-diagonal matrix with the given self-conjugate spectrum: one
/// 1x1 block per real pole, one [[re, im], [−im, re]] block per conjugate
/// pair.
fn real_block_diagonal(desired: &[Complex<f64>]) -> Result<DMatrix<f64>> {
    let n = desired.len();
    let mut reals: Vec<f64> = Vec::new();
    let mut uppers: Vec<Complex<f64>> = Vec::new();
    let mut lowers: Vec<Complex<f64>> = Vec::new();
    for &l in desired {
        if !l.re.is_finite() || !l.im.is_finite() {
            return Err(Error::Parameter("desired poles must be finite".into()));
        }
        if l.im.abs() <= CONJUGATE_TOL {
            reals.push(l.re);
        } else if l.im > 0.0 {
            uppers.push(l);
        } else {
            lowers.push(l);
        }
    }
    if uppers.len() != lowers.len() {
        return Err(Error::Parameter("desired pole set is not self-conjugate".into()));
    }
    uppers.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    lowers.sort_by(|a, b| (a.re, -a.im).partial_cmp(&(b.re, -b.im)).unwrap());
    for (u, l) in uppers.iter().zip(&lowers) {
        if (u.re - l.re).abs() > CONJUGATE_TOL || (u.im + l.im).abs() > CONJUGATE_TOL {
            return Err(Error::Parameter("desired pole set is not self-conjugate".into()));
        }
    }
    reals.sort_by(f64::total_cmp);

    let mut lambda = DMatrix::zeros(n, n);
    let mut at = 0;
    for r in reals {
        lambda[(at, at)] = r;
        at += 1;
    }
    for u in uppers {
        lambda[(at, at)] = u.re;
        lambda[(at, at + 1)] = u.im;
        lambda[(at + 1, at)] = -u.im;
        lambda[(at + 1, at + 1)] = u.re;
        at += 2;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::from_rows;
    use approx::assert_relative_eq;

    fn real_poles(vals: &[f64]) -> Vec<Complex<f64>> {
        vals.iter().map(|&v| Complex::new(v, 0.0)).collect()
    }

    #[test]
    fn places_example_plant_at_minus_5_minus_10() {
        let a = from_rows(&[vec![-4.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let k = pole_place(&a, &b, &real_poles(&[-5.0, -10.0])).unwrap();
        let closed = eigenvalues(&(&a + &b * &k)).unwrap();
        let d = spectrum_distance(&closed, &real_poles(&[-5.0, -10.0])).unwrap();
        assert!(d <= 1e-8, "pole mismatch {d}");
    }

    #[test]
    fn identity_request_returns_zero_gain() {
        let a = from_rows(&[vec![-5.0, 0.0], vec![0.0, -10.0]]).unwrap();
        let b = from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let k = pole_place(&a, &b, &real_poles(&[-5.0, -10.0])).unwrap();
        assert_relative_eq!(k, DMatrix::zeros(1, 2), epsilon = 0.0);
    }

    #[test]
    fn complex_conjugate_poles() {
        let a = from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let desired = vec![Complex::new(-1.0, 2.0), Complex::new(-1.0, -2.0)];
        let k = pole_place(&a, &b, &desired).unwrap();
        let closed = eigenvalues(&(&a + &b * &k)).unwrap();
        assert!(spectrum_distance(&closed, &desired).unwrap() <= 1e-8);
    }

    #[test]
    fn rejects_non_self_conjugate() {
        let a = from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let desired = vec![Complex::new(-1.0, 2.0), Complex::new(-1.0, 3.0)];
        assert!(matches!(
            pole_place(&a, &b, &desired),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn rejects_uncontrollable_pair() {
        let a = from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        assert!(matches!(
            pole_place(&a, &b, &real_poles(&[-1.0, -2.0])),
            Err(Error::Infeasible(_))
        ));
    }
}
