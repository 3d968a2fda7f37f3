//! Coupling-input design on the integral-augmented state error, and optimal
//! allocation of the coupling input between the plant and the virtual model.
//!
//! The design side prescribes `U_c = -K_e e_I` on the stacked error
//! `e_I = [e; e<1>; ...; e<l>]`. The allocation side splits `U_c` into a
//! scalar plant contribution `u_c` and a virtual-model contribution `U_m`
//! under the hard constraint `U_m - b u_c = U_c`, minimising the weighted
//! perturbation `||W { b u_c + (1 - mu) U_c }||_p` that the pair injects
//! into the blended dynamics. Because the constraint is enforced exactly,
//! the error dynamics are identical for every allocation; `mu` is a pure
//! shaping knob.

use nalgebra::{DMatrix, DVector};

use crate::matops::{is_hurwitz, minimize_scalar_convex};
use crate::{Error, Result};

/// Specialisations of the gain structure, kept for reporting and for
/// bandwidth estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingKind {
    Proportional { k_p: f64 },
    ProportionalIntegral { k_p: f64, k_i: f64 },
    General,
}

/// State-feedback coupling design on the augmented error of order `l`:
/// `U_c = -K_e e_I`, with the augmented system matrices
/// `A_e` (block companion-of-integrators) and `B_e = [I; 0; ...; 0]`.
#[derive(Debug, Clone)]
pub struct CouplingDesign {
    pub order: usize,
    pub k_e: DMatrix<f64>,
    pub a_e: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub kind: CouplingKind,
    n: usize,
}

fn assemble_augmented(a_m: &DMatrix<f64>, order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a_m.nrows();
    let dim = n * (order + 1);
    let mut a_e = DMatrix::<f64>::zeros(dim, dim);
    a_e.view_mut((0, 0), (n, n)).copy_from(a_m);
    for i in 1..=order {
        a_e.view_mut((i * n, (i - 1) * n), (n, n))
            .copy_from(&DMatrix::identity(n, n));
    }
    let mut b_e = DMatrix::<f64>::zeros(dim, n);
    b_e.view_mut((0, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    (a_e, b_e)
}

impl CouplingDesign {
    /// P coupling: `U_c = -k_P e` (order 0, `K_e = k_P I`). `k_P = 0` is the
    /// open-loop special case.
    pub fn proportional(a_m: &DMatrix<f64>, k_p: f64) -> Result<Self> {
        let n = a_m.nrows();
        Self::general(
            a_m,
            0,
            DMatrix::identity(n, n) * k_p,
            CouplingKind::Proportional { k_p },
        )
    }

    /// PI coupling: `U_c = -k_P e - k_I e<1>` (order 1, `K_e = [k_P I, k_I I]`).
    pub fn proportional_integral(a_m: &DMatrix<f64>, k_p: f64, k_i: f64) -> Result<Self> {
        let n = a_m.nrows();
        let mut k_e = DMatrix::<f64>::zeros(n, 2 * n);
        k_e.view_mut((0, 0), (n, n))
            .copy_from(&(DMatrix::identity(n, n) * k_p));
        k_e.view_mut((0, n), (n, n))
            .copy_from(&(DMatrix::identity(n, n) * k_i));
        Self::general(a_m, 1, k_e, CouplingKind::ProportionalIntegral { k_p, k_i })
    }

    /// General order-`l` state-feedback design with an explicit gain matrix.
    pub fn with_gain(a_m: &DMatrix<f64>, order: usize, k_e: DMatrix<f64>) -> Result<Self> {
        Self::general(a_m, order, k_e, CouplingKind::General)
    }

    fn general(
        a_m: &DMatrix<f64>,
        order: usize,
        k_e: DMatrix<f64>,
        kind: CouplingKind,
    ) -> Result<Self> {
        let n = a_m.nrows();
        let dim = n * (order + 1);
        if a_m.ncols() != n || k_e.nrows() != n || k_e.ncols() != dim {
            return Err(Error::DimensionMismatch {
                context: "CouplingDesign",
                expected: format!("A_m {n}x{n}, K_e {n}x{dim}"),
                actual: format!(
                    "A_m {}x{}, K_e {}x{}",
                    a_m.nrows(),
                    a_m.ncols(),
                    k_e.nrows(),
                    k_e.ncols()
                ),
            });
        }
        let (a_e, b_e) = assemble_augmented(a_m, order);
        let closed = &a_e - &b_e * &k_e;
        if !is_hurwitz(&closed) {
            return Err(Error::NotHurwitz("A_e - B_e K_e"));
        }
        Ok(Self {
            order,
            k_e,
            a_e,
            b_e,
            kind,
            n,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn augmented_dim(&self) -> usize {
        self.n * (self.order + 1)
    }

    /// `A_e - B_e K_e`, the nominal augmented-error system matrix.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a_e - &self.b_e * &self.k_e
    }

    /// Rough error-dynamics bandwidth: `k_P` for P coupling, `sqrt(k_I)`
    /// for PI coupling. Used only for observer design-guideline warnings.
    pub fn bandwidth_estimate(&self) -> Option<f64> {
        match self.kind {
            CouplingKind::Proportional { k_p } => Some(k_p),
            CouplingKind::ProportionalIntegral { k_i, .. } => Some(k_i.sqrt()),
            CouplingKind::General => None,
        }
    }
}

/// Norm exponent of the allocation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormExponent {
    One,
    Two,
    Infinity,
}

/// Which dynamics the allocation constraint pins down. Only the
/// error-dynamics constraint `U_m - b u_c = U_c` is implemented; the
/// blended-dynamics variant is exposed as a flag for completeness and
/// rejected at use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintTarget {
    #[default]
    ErrorDynamics,
    BlendedDynamics,
}

/// Allocation policy: blend weight `mu`, positive-definite weighting `W`,
/// and the norm exponent of the pointwise objective.
#[derive(Debug, Clone)]
pub struct AllocationPolicy {
    pub mu: f64,
    pub w: DMatrix<f64>,
    pub p: NormExponent,
    pub constraint: ConstraintTarget,
}

impl AllocationPolicy {
    pub fn new(mu: f64, w: DMatrix<f64>, p: NormExponent) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Domain {
                name: "mu",
                constraint: "0 <= mu <= 1",
            });
        }
        if (w.transpose() - &w).norm() > 1e-12 * (1.0 + w.norm()) || w.clone().cholesky().is_none()
        {
            return Err(Error::Domain {
                name: "W",
                constraint: "symmetric positive-definite",
            });
        }
        Ok(Self {
            mu,
            w,
            p,
            constraint: ConstraintTarget::ErrorDynamics,
        })
    }

    /// Identity weighting, exponent 2 — the default reported configuration.
    pub fn weighted_two_norm(mu: f64, n: usize) -> Result<Self> {
        Self::new(mu, DMatrix::identity(n, n), NormExponent::Two)
    }
}

/// Coupling input from the augmented error: `U_c = -K_e e_I`.
pub fn design_coupling(design: &CouplingDesign, e_aug: &DVector<f64>) -> DVector<f64> {
    -(&design.k_e * e_aug)
}

/// Pointwise allocation objective `J = ||W { b u + (1 - mu) U_c }||_p`.
pub fn allocation_objective(
    policy: &AllocationPolicy,
    b: &DVector<f64>,
    u_c_vec: &DVector<f64>,
    u: f64,
) -> f64 {
    let v = &policy.w * (b * u + u_c_vec * (1.0 - policy.mu));
    match policy.p {
        NormExponent::One => v.iter().map(|x| x.abs()).sum(),
        NormExponent::Two => v.norm(),
        NormExponent::Infinity => v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
    }
}

/// Split the coupling input: returns `(u_c, U_m)` with `U_m - b u_c = U_c`
/// holding exactly and `u_c` minimising the allocation objective.
///
/// For `p = 2` the minimiser is closed-form,
/// `u_c = -(1 - mu) (b^T W^T W b)^-1 b^T W^T W U_c`; for `p` in `{1, inf}`
/// a golden-section search runs over the bracket
/// `[-10 ||U_c|| / min nonzero |b_i|, +10 ||U_c|| / min nonzero |b_i|]`
/// (flat minima are possible there; any minimiser is acceptable and the
/// final-bracket midpoint is returned).
pub fn allocate(
    policy: &AllocationPolicy,
    b: &DVector<f64>,
    u_c_vec: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    if policy.constraint == ConstraintTarget::BlendedDynamics {
        return Err(Error::Unsupported(
            "blended-dynamics allocation constraint is a placeholder flag",
        ));
    }
    if b.norm() == 0.0 {
        return Err(Error::Domain {
            name: "b",
            constraint: "||b|| > 0",
        });
    }
    let u = match policy.p {
        NormExponent::Two => {
            let wb = &policy.w * b;
            let wu = &policy.w * u_c_vec;
            -(1.0 - policy.mu) * wb.dot(&wu) / wb.norm_squared()
        }
        NormExponent::One | NormExponent::Infinity => {
            let b_min = b
                .iter()
                .filter(|x| **x != 0.0)
                .fold(f64::INFINITY, |m, x| m.min(x.abs()));
            let half = 10.0 * u_c_vec.norm() / b_min;
            if half == 0.0 {
                0.0
            } else {
                minimize_scalar_convex(
                    |u| allocation_objective(policy, b, u_c_vec, u),
                    -half,
                    half,
                    1e-10 * (1.0 + half),
                )?
            }
        }
    };
    Ok((u, u_c_vec + b * u))
}

/// Augmented-error derivative `e_I' = A_e e_I + B_e (U_c + b Delta~)`.
pub fn augmented_error_derivative(
    design: &CouplingDesign,
    e_aug: &DVector<f64>,
    u_c_vec: &DVector<f64>,
    b: &DVector<f64>,
    delta_tilde: f64,
) -> DVector<f64> {
    &design.a_e * e_aug + &design.b_e * (u_c_vec + b * delta_tilde)
}
