//! Dense small-matrix solves and scalar convex minimisation.
//!
//! Everything here targets state dimensions of a handful (n <= 4 in the
//! shipped experiments), so the solvers favour simplicity over asymptotic
//! cost: the Lyapunov equation is solved through its Kronecker
//! vectorisation, and the continuous algebraic Riccati equation through a
//! matrix-sign-function Newton iteration on the Hamiltonian, which needs
//! nothing beyond LU solves. All residual tolerances are relative, scaled
//! by (1 + norm of the data).

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::{Error, Result};

/// Stabilizing solution of the continuous algebraic Riccati equation
/// together with the associated state-feedback gain `K = R^-1 b^T P`.
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: RowDVector<f64>,
}

/// Solve `A^T P + P A + Q = 0` for symmetric `P`.
///
/// Uses the Kronecker vectorisation `(I (x) A^T + A^T (x) I) vec(P) = -vec(Q)`
/// and a dense LU solve. Fails if the Kronecker system is singular, which
/// happens exactly when `A` has a pair of eigenvalues summing to zero
/// (in particular whenever `A` is not Hurwitz but has mirrored modes), or
/// if the residual exceeds `1e-10 * (1 + ||Q||)`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_lyapunov",
            expected: format!("A and Q square {n}x{n}"),
            actual: format!("A {}x{}, Q {}x{}", a.nrows(), a.ncols(), q.nrows(), q.ncols()),
        });
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = system.lu();
    let solve_for = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let vec_rhs = DVector::from_column_slice(rhs.as_slice());
        let sol = lu
            .solve(&(-vec_rhs))
            .ok_or(Error::SingularSystem("solve_lyapunov"))?;
        let p = DMatrix::from_column_slice(n, n, sol.as_slice());
        Ok((&p + p.transpose()) * 0.5)
    };

    let mut p = solve_for(q)?;
    // Iterative refinement against the original data recovers the digits
    // lost to conditioning of the Kronecker system.
    for _ in 0..2 {
        let residual_mat = &at * &p + &p * a + q;
        if residual_mat.norm() <= 1e-13 * (1.0 + q.norm()) {
            break;
        }
        p += solve_for(&residual_mat)?;
    }

    let residual = (&at * &p + &p * a + q).norm();
    if residual > 1e-10 * (1.0 + q.norm()) {
        return Err(Error::ResidualCheck("solve_lyapunov"));
    }
    Ok(p)
}

/// Whether all eigenvalues of `a` have negative real part, certified via
/// Lyapunov solvability: `A^T P + P A + I = 0` must have a positive-definite
/// solution.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    match solve_lyapunov(a, &DMatrix::identity(n, n)) {
        Ok(p) => p.cholesky().is_some(),
        Err(_) => false,
    }
}

const SIGN_MAX_ITER: usize = 100;

/// Matrix sign function via the scaled Newton iteration
/// `H <- (c H + (c H)^-1) / 2`, `c = |det H|^(-1/m)`.
fn matrix_sign(h0: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h0.nrows();
    let mut h = h0;
    for _ in 0..SIGN_MAX_ITER {
        let lu = h.clone().lu();
        let det: f64 = lu.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SingularSystem("matrix_sign"));
        }
        let h_inv = lu
            .try_inverse()
            .ok_or(Error::SingularSystem("matrix_sign"))?;
        let c = det.abs().powf(-1.0 / m as f64);
        let next = (&h * c + h_inv / c) * 0.5;
        let delta = (&next - &h).norm();
        h = next;
        if delta <= 1e-12 * (1.0 + h.norm()) {
            return Ok(h);
        }
    }
    Err(Error::NoStabilizingSolution(SIGN_MAX_ITER))
}

/// Solve the continuous algebraic Riccati equation
/// `A^T P + P A - P b R^-1 b^T P + Q = 0` for the stabilizing `P` and the
/// LQR gain `K = R^-1 b^T P` (SISO: `R` is a positive scalar).
///
/// The stable invariant subspace of the Hamiltonian is extracted from the
/// matrix sign function, followed by one defect-correction step through the
/// closed-loop Lyapunov equation to push the residual down to rounding
/// level. Verifies the residual bound `1e-8 * (1 + ||P||)` and that
/// `A - b K` is Hurwitz.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<CareSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_care",
            expected: format!("A {n}x{n}, b {n}, Q {n}x{n}"),
            actual: format!("A {}x{}, b {}, Q {}x{}", a.nrows(), a.ncols(), b.len(), q.nrows(), q.ncols()),
        });
    }
    if r <= 0.0 {
        return Err(Error::Domain {
            name: "R",
            constraint: "R > 0",
        });
    }

    let g = b * b.transpose() / r;
    let mut ham = DMatrix::<f64>::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&g));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let z = matrix_sign(ham)? + DMatrix::identity(2 * n, 2 * n);

    // (sign(H) + I) [I; P] = 0: stack the second block-column against the
    // first and solve the (consistent) overdetermined system via normal
    // equations.
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, n), (n, n)));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, 0), (n, n)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, 0), (n, n)));

    let normal = lhs.transpose() * &lhs;
    let p0 = normal
        .lu()
        .solve(&(-(lhs.transpose() * rhs)))
        .ok_or(Error::SingularSystem("solve_care"))?;
    let mut p = (&p0 + p0.transpose()) * 0.5;

    // Defect correction: the residual of the quadratic equation satisfies a
    // Lyapunov equation in the closed-loop matrix. Repeat while it helps.
    for _ in 0..3 {
        let residual_mat = a.transpose() * &p + &p * a - &p * &g * &p + q;
        if residual_mat.norm() <= 1e-13 * (1.0 + p.norm()) {
            break;
        }
        let a_cl = a - &g * &p;
        match solve_lyapunov(&a_cl, &residual_mat) {
            Ok(correction) => {
                p += correction;
                p = (&p + p.transpose()) * 0.5;
            }
            Err(_) => break,
        }
    }

    let residual = (a.transpose() * &p + &p * a - &p * &g * &p + q).norm();
    if residual > 1e-8 * (1.0 + p.norm()) {
        return Err(Error::ResidualCheck("solve_care"));
    }
    let k = RowDVector::from_iterator(n, (b.transpose() * &p / r).iter().copied());
    let closed_loop = a - b * &k;
    if !is_hurwitz(&closed_loop) {
        return Err(Error::NotHurwitz("solve_care closed loop"));
    }
    Ok(CareSolution { p, k })
}

/// Left pseudo-inverse of a nonzero column vector: `b^T / (b^T b)`,
/// so that `pseudo_left_inverse(b) * b = 1`.
pub fn pseudo_left_inverse(b: &DVector<f64>) -> Result<RowDVector<f64>> {
    let nsq = b.norm_squared();
    if nsq == 0.0 {
        return Err(Error::Domain {
            name: "b",
            constraint: "||b|| > 0",
        });
    }
    Ok(b.transpose() / nsq)
}

const GOLDEN_MAX_ITER: usize = 500;

/// Golden-section minimisation of a convex scalar function over `[lo, hi]`.
///
/// Returns the midpoint of the final bracket, which is within `tol` of a
/// true minimiser by the contraction guarantee (for convex plateaus any
/// point of the flat minimum is acceptable and the midpoint is returned).
pub fn minimize_scalar_convex<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain {
            name: "bracket",
            constraint: "lo < hi, both finite",
        });
    }
    if !(tol > 0.0) {
        return Err(Error::Domain {
            name: "tol",
            constraint: "tol > 0",
        });
    }
    let eval = |u: f64| -> Result<f64> {
        let v = f(u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("minimize_scalar_convex objective"))
        }
    };
    let ratio = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (lo, hi);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    for _ in 0..GOLDEN_MAX_ITER {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2)?;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn f16_a() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[-1.0189, 0.9051, 0.0, 0.8223, -1.0774, 0.0, 1.0, 0.0, 0.0],
        )
    }

    fn f16_b() -> DVector<f64> {
        DVector::from_column_slice(&[-0.0022, -0.1756, 0.0])
    }

    /// Frozen LQR gain for the preset plant, cross-checked against an
    /// external Riccati solver.
    const F16_KM: [f64; 3] = [-10.875607026734661, -6.05647218566855, -10.000000000000023];

    #[test]
    fn lyapunov_identity_cases() {
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -1.0]));
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 2.0]));
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!((p - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);

        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let q = DMatrix::from_row_slice(1, 1, &[2.0]);
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_f16_high_gain_residual() {
        let km = DVector::from_column_slice(&F16_KM);
        let a_m = f16_a() - f16_b() * km.transpose();
        let a = a_m - DMatrix::<f64>::identity(3, 3) * 100.0;
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 800.0, 0.1]));
        let p = solve_lyapunov(&a, &q).unwrap();
        let residual = (a.transpose() * &p + &p * &a + &q).norm();
        assert!(residual <= 1e-10 * (1.0 + q.norm()), "residual {residual}");
    }

    #[test]
    fn lyapunov_rejects_mirrored_spectrum() {
        // Eigenvalues +1 and -1 make the Kronecker system singular.
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1.0]));
        let q = DMatrix::<f64>::identity(2, 2);
        assert!(solve_lyapunov(&a, &q).is_err());
    }

    fn random_hurwitz(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        // Stable diagonal conjugated by a random similarity of bounded
        // condition number (an ill-conditioned similarity makes the residual
        // of *any* solver exceed an absolute bound simply through the
        // rounding of A^T P + P A itself).
        loop {
            let d = DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                (0..n).map(|_| -rng.gen_range(0.2..3.0)),
            ));
            let t = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            if let Some(t_inv) = t.clone().try_inverse() {
                if t.norm() * t_inv.norm() < 10.0 {
                    return &t * d * t_inv;
                }
            }
        }
    }

    fn random_psd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose()
    }

    #[test]
    fn lyapunov_random_residual_sweep() {
        let mut rng = StdRng::seed_from_u64(0x5EED_1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=4);
            let a = random_hurwitz(&mut rng, n);
            let q = random_psd(&mut rng, n);
            let p = solve_lyapunov(&a, &q).unwrap();
            let residual = (a.transpose() * &p + &p * &a + &q).norm();
            assert!(residual <= 1e-10 * (1.0 + q.norm()));
        }
    }

    #[test]
    fn care_scalar_case() {
        // 0 = 1 - P^2 -> P = 1, K = 1.
        let sol = solve_care(
            &DMatrix::from_row_slice(1, 1, &[0.0]),
            &DVector::from_column_slice(&[1.0]),
            &DMatrix::from_row_slice(1, 1, &[1.0]),
            1.0,
        )
        .unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sol.k[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn care_double_integrator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        let q = DMatrix::<f64>::identity(2, 2);
        let sol = solve_care(&a, &b, &q, 1.0).unwrap();
        assert!((sol.k[0] - 1.0).abs() < 1e-9);
        assert!((sol.k[1] - 3.0_f64.sqrt()).abs() < 1e-9);
        let residual =
            (a.transpose() * &sol.p + &sol.p * &a - &sol.p * &b * b.transpose() * &sol.p + &q)
                .norm();
        assert!(residual <= 1e-8 * (1.0 + sol.p.norm()));
        assert!(is_hurwitz(&(a - &b * &sol.k)));
    }

    #[test]
    fn care_f16_baseline_gain() {
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 0.0, 100.0]));
        let sol = solve_care(&f16_a(), &f16_b(), &q, 1.0).unwrap();
        let residual = (f16_a().transpose() * &sol.p + &sol.p * f16_a()
            - &sol.p * f16_b() * f16_b().transpose() * &sol.p
            + &q)
            .norm();
        assert!(residual <= 1e-8 * (1.0 + sol.p.norm()));
        for (i, expect) in F16_KM.iter().enumerate() {
            assert!(
                (sol.k[i] - expect).abs() <= 1e-6 * (1.0 + expect.abs()),
                "k[{i}] = {} vs {expect}",
                sol.k[i]
            );
        }
    }

    #[test]
    fn care_random_controllable_pairs() {
        let mut rng = StdRng::seed_from_u64(0x5EED_2);
        let mut accepted = 0;
        while accepted < 200 {
            let n = rng.gen_range(1..=4);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            // Quantitative controllability of [b Ab ... A^(n-1) b]: nearly
            // uncontrollable pairs make the Riccati problem arbitrarily
            // ill-conditioned without being informative.
            let mut ctrb = DMatrix::zeros(n, n);
            let mut col = b.clone();
            for j in 0..n {
                ctrb.set_column(j, &col);
                col = &a * col;
            }
            let svals = ctrb.singular_values();
            if svals[svals.len() - 1] < 0.05 * (1.0 + ctrb.norm()) {
                continue;
            }
            let q = random_psd(&mut rng, n) + DMatrix::identity(n, n) * 0.1;
            let sol = solve_care(&a, &b, &q, rng.gen_range(0.1..2.0)).unwrap();
            assert!(is_hurwitz(&(a.clone() - &b * &sol.k)));
            accepted += 1;
        }
    }

    #[test]
    fn care_without_stabilizing_solution_errors() {
        // Unstable mode invisible to the input: no stabilizing solution.
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1.0]));
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        assert!(solve_care(&a, &b, &DMatrix::identity(2, 2), 1.0).is_err());

        // Neutrally stable mode with zero state weight: Hamiltonian is
        // singular on the imaginary axis.
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DVector::from_column_slice(&[1.0]);
        assert!(solve_care(&a, &b, &DMatrix::zeros(1, 1), 1.0).is_err());
    }

    #[test]
    fn pseudo_inverse_cases() {
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        let bi = pseudo_left_inverse(&b).unwrap();
        assert_eq!(bi[0], 0.0);
        assert_eq!(bi[1], 1.0);

        let b = DVector::from_column_slice(&[3.0, 4.0]);
        let bi = pseudo_left_inverse(&b).unwrap();
        assert!((bi[0] - 0.12).abs() < 1e-15);
        assert!((bi[1] - 0.16).abs() < 1e-15);

        let bi = pseudo_left_inverse(&f16_b()).unwrap();
        assert!(((bi * f16_b())[0] - 1.0).abs() <= 1e-14);

        assert!(pseudo_left_inverse(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn pseudo_inverse_random_identity() {
        let mut rng = StdRng::seed_from_u64(0x5EED_3);
        for _ in 0..500 {
            let n = rng.gen_range(1..=6);
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0));
            if b.norm() == 0.0 {
                continue;
            }
            let bi = pseudo_left_inverse(&b).unwrap();
            assert!(((bi * &b)[0] - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn golden_section_quadratic_and_kink() {
        let x = minimize_scalar_convex(|u| (u - 3.0) * (u - 3.0), -10.0, 10.0, 1e-8).unwrap();
        assert!((x - 3.0).abs() <= 1e-8);
        let x = minimize_scalar_convex(|u| (u + 1.0).abs(), -5.0, 5.0, 1e-6).unwrap();
        assert!((x + 1.0).abs() <= 1e-6);
    }

    #[test]
    fn golden_section_propagates_non_finite() {
        let r = minimize_scalar_convex(|u| if u > 0.0 { f64::NAN } else { u * u }, -1.0, 1.0, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
