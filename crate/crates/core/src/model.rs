//! Plant, baseline controller, virtual reference model, and the blend
//! coordinate transform.
//!
//! Angles are radians everywhere inside the library; the elevator input
//! channel of the shipped aircraft preset is degree-valued by construction
//! of its control-effectiveness vector, so plant inputs stay in that unit
//! while states are radians. Degree conversions for commands and report
//! columns happen at the I/O boundary, not here.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::matops::{is_hurwitz, solve_care};
use crate::{Error, Result};

/// Known LTI data of the single-input plant
/// `x' = A x + b (u + Delta) + b_r r`, `y = c^T x`.
#[derive(Clone)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub b_r: DVector<f64>,
    pub c: DVector<f64>,
    n: usize,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel").field("n", &self.n).finish()
    }
}

impl PlantModel {
    /// Build a plant and verify `(A, b)` controllability through the rank
    /// of `[b, Ab, ..., A^(n-1) b]`.
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        b_r: DVector<f64>,
        c: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || b_r.len() != n || c.len() != n {
            return Err(Error::DimensionMismatch {
                context: "PlantModel::new",
                expected: format!("A {n}x{n}, b/b_r/c length {n}"),
                actual: format!(
                    "A {}x{}, b {}, b_r {}, c {}",
                    a.nrows(),
                    a.ncols(),
                    b.len(),
                    b_r.len(),
                    c.len()
                ),
            });
        }
        let mut ctrb = DMatrix::zeros(n, n);
        let mut col = b.clone();
        for j in 0..n {
            ctrb.set_column(j, &col);
            col = &a * col;
        }
        if ctrb.rank(1e-10 * (1.0 + ctrb.norm())) < n {
            return Err(Error::Domain {
                name: "(A, b)",
                constraint: "controllable (controllability matrix of full rank)",
            });
        }
        Ok(Self { a, b, b_r, c, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn output(&self, x: &DVector<f64>) -> f64 {
        self.c.dot(x)
    }

    /// F-16 short-period longitudinal dynamics trimmed for angle-of-attack
    /// tracking, augmented with the tracking-error integral state.
    /// States: alpha (rad), q (rad/s), e_alphaI (rad s); input: elevator
    /// deflection (deg); exogenous input: alpha command (rad).
    pub fn f16_short_period() -> Self {
        Self::new(
            DMatrix::from_row_slice(
                3,
                3,
                &[-1.0189, 0.9051, 0.0, 0.8223, -1.0774, 0.0, 1.0, 0.0, 0.0],
            ),
            DVector::from_column_slice(&[-0.0022, -0.1756, 0.0]),
            DVector::from_column_slice(&[0.0, 0.0, -1.0]),
            DVector::from_column_slice(&[1.0, 0.0, 0.0]),
        )
        .expect("preset plant is controllable")
    }
}

/// Matched uncertainty `Delta = Phi(x)^T theta` with a known basis and an
/// unknown parameter vector. The true parameters are deliberately reachable
/// only through the oracle accessors used by the simulator for generating
/// the physical trajectory and diagnostics; controller-path code receives
/// basis values only.
#[derive(Clone)]
pub struct UncertaintyModel {
    basis: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    theta: DVector<f64>,
}

impl fmt::Debug for UncertaintyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UncertaintyModel")
            .field("p", &self.theta.len())
            .finish()
    }
}

impl UncertaintyModel {
    pub fn new(
        basis: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
        theta: DVector<f64>,
    ) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Domain {
                name: "theta",
                constraint: "p >= 1",
            });
        }
        Ok(Self { basis, theta })
    }

    /// Basis/feature vector `Phi(x)`; available to controller code.
    pub fn basis(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.basis)(x)
    }

    pub fn param_dim(&self) -> usize {
        self.theta.len()
    }

    /// Oracle: the true uncertainty value. Simulator-only.
    pub fn oracle_delta(&self, phi: &DVector<f64>) -> f64 {
        phi.dot(&self.theta)
    }

    /// Oracle: the true parameter vector. Simulator-only (diagnostics).
    pub fn oracle_theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// A `p = 1` placeholder with zero basis and zero parameter, for plants
    /// simulated without uncertainty.
    pub fn none() -> Self {
        Self {
            basis: Arc::new(|_x| DVector::zeros(1)),
            theta: DVector::zeros(1),
        }
    }

    /// Linear-in-state features `Phi(x) = x`.
    pub fn linear_in_state(theta: DVector<f64>) -> Result<Self> {
        Self::new(Arc::new(|x: &DVector<f64>| x.clone()), theta)
    }

    /// Uncertainty of the F-16 preset: features alpha, q, and a Gaussian
    /// bump centred at alpha = 2 deg.
    pub fn f16_matched_uncertainty() -> Self {
        let basis = Arc::new(|x: &DVector<f64>| {
            let alpha = x[0];
            let d = alpha - std::f64::consts::PI / 90.0;
            DVector::from_column_slice(&[
                alpha,
                x[1],
                (-d * d / (2.0 * 0.0233 * 0.0233)).exp(),
            ])
        });
        Self {
            basis,
            theta: DVector::from_column_slice(&[-4.6839, -9.8197, 1.0]),
        }
    }
}

/// Baseline gains and the derived reference-model data
/// `A_m = A - b k_m^T` (Hurwitz) and `b_m = -b k_r + b_r`.
#[derive(Debug, Clone)]
pub struct BaselineGains {
    pub k_m: DVector<f64>,
    pub k_r: f64,
    pub a_m: DMatrix<f64>,
    pub b_m: DVector<f64>,
}

impl BaselineGains {
    pub fn from_gains(plant: &PlantModel, k_m: DVector<f64>, k_r: f64) -> Result<Self> {
        if k_m.len() != plant.dim() {
            return Err(Error::DimensionMismatch {
                context: "BaselineGains::from_gains",
                expected: format!("k_m length {}", plant.dim()),
                actual: format!("k_m length {}", k_m.len()),
            });
        }
        let a_m = &plant.a - &plant.b * k_m.transpose();
        if !is_hurwitz(&a_m) {
            return Err(Error::NotHurwitz("A_m = A - b k_m^T"));
        }
        let b_m = -&plant.b * k_r + &plant.b_r;
        Ok(Self { k_m, k_r, a_m, b_m })
    }

    /// Baseline from an LQR design on `(A, b)` with weights `(Q_base, R_base)`.
    pub fn lqr(plant: &PlantModel, q_base: &DMatrix<f64>, r_base: f64, k_r: f64) -> Result<Self> {
        let sol = solve_care(&plant.a, &plant.b, q_base, r_base)?;
        let k_m = DVector::from_iterator(plant.dim(), sol.k.iter().copied());
        Self::from_gains(plant, k_m, k_r)
    }

    /// Baseline feedback component `u_base = -k_m^T x - k_r r`.
    pub fn u_base(&self, x: &DVector<f64>, r: f64) -> f64 {
        -self.k_m.dot(x) - self.k_r * r
    }
}

/// State error and weighted state average: `e = x_m - x`,
/// `z = mu x + (1 - mu) x_m`.
#[derive(Debug, Clone)]
pub struct BlendCoordinates {
    pub e: DVector<f64>,
    pub z: DVector<f64>,
    pub mu: f64,
}

/// Forward blend transform. `mu` outside `[0, 1]` is a domain error.
pub fn to_blend(x: &DVector<f64>, x_m: &DVector<f64>, mu: f64) -> Result<BlendCoordinates> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Domain {
            name: "mu",
            constraint: "0 <= mu <= 1",
        });
    }
    Ok(BlendCoordinates {
        e: x_m - x,
        z: x * mu + x_m * (1.0 - mu),
        mu,
    })
}

/// Inverse blend transform: `x = z - (1 - mu) e`, `x_m = z + mu e`.
pub fn from_blend(coords: &BlendCoordinates) -> (DVector<f64>, DVector<f64>) {
    let x = &coords.z - &coords.e * (1.0 - coords.mu);
    let x_m = &coords.z + &coords.e * coords.mu;
    (x, x_m)
}

/// Physical plant derivative with the structured controller
/// `u = u_base + u_ad + u_c`:
/// `x' = A x + b (u + Delta) + b_r r`.
pub fn plant_derivative(
    plant: &PlantModel,
    baseline: &BaselineGains,
    x: &DVector<f64>,
    u_ad: f64,
    u_c: f64,
    r: f64,
    delta: f64,
) -> DVector<f64> {
    let u = baseline.u_base(x, r) + u_ad + u_c;
    &plant.a * x + &plant.b * (u + delta) + &plant.b_r * r
}

/// Closed-loop form of the same derivative,
/// `x' = A_m x + b_m r + b (u_c - Delta~)` with `Delta~ = -u_ad - Delta`;
/// algebraically identical to [`plant_derivative`] and kept as the second
/// route for equivalence testing.
pub fn closed_loop_plant_derivative(
    plant: &PlantModel,
    baseline: &BaselineGains,
    x: &DVector<f64>,
    u_c: f64,
    delta_tilde: f64,
    r: f64,
) -> DVector<f64> {
    &baseline.a_m * x + &baseline.b_m * r + &plant.b * (u_c - delta_tilde)
}

/// Virtual reference model derivative `x_m' = A_m x_m + b_m r + U_m`.
pub fn virtual_derivative(
    baseline: &BaselineGains,
    x_m: &DVector<f64>,
    u_m: &DVector<f64>,
    r: f64,
) -> DVector<f64> {
    &baseline.a_m * x_m + &baseline.b_m * r + u_m
}

/// Ideal reference-tracking derivative `x_id' = A_m x_id + b_m r`.
pub fn ideal_reference_derivative(
    baseline: &BaselineGains,
    x_id: &DVector<f64>,
    r: f64,
) -> DVector<f64> {
    &baseline.a_m * x_id + &baseline.b_m * r
}
