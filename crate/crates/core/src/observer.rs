//! State observer and instantaneous estimation of the lumped uncertainty.
//!
//! The observer is a certainty-equivalent copy of the plant driven by the
//! measured state, the applied input, the known exogenous reference, and an
//! observation-error feedback term `A_o x~`. The resulting error dynamics
//! `x~' = A_o x~ - b Delta` act as a low-pass filter on the uncertainty, so
//! the filtered uncertainty can be recovered from the measurable `x~` by a
//! left inverse of `b`.

use nalgebra::{DMatrix, DVector};

use crate::matops::{is_hurwitz, pseudo_left_inverse};
use crate::model::PlantModel;
use crate::{Error, Result};

/// How the filtered-uncertainty estimate is scaled.
///
/// The convolution kernel `exp(-omega_f (t - tau))` has DC gain `1/omega_f`,
/// so the raw left-inverse solve recovers the uncertainty attenuated by
/// `omega_f`. `UnityDcGain` (default) multiplies by `omega_f` to realise a
/// first-order lag with unit DC gain, which is what a cancellation input
/// `u_ad = -Delta_hat` needs; `RawFilter` keeps the unscaled solve for
/// fidelity testing of the filter algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorScaling {
    #[default]
    UnityDcGain,
    RawFilter,
}

/// Observer configuration: filter bandwidth, feedback matrix (default
/// `-omega_f I`), and estimator scaling mode.
#[derive(Debug, Clone)]
pub struct ObserverConfig {
    pub omega_f: f64,
    pub a_o: DMatrix<f64>,
    pub scaling: EstimatorScaling,
    scalar_filter: bool,
}

impl ObserverConfig {
    /// Standard design `A_o = -omega_f I`.
    pub fn new(omega_f: f64, n: usize, scaling: EstimatorScaling) -> Result<Self> {
        if !(omega_f > 0.0) {
            return Err(Error::Domain {
                name: "omega_f",
                constraint: "omega_f > 0",
            });
        }
        Ok(Self {
            omega_f,
            a_o: DMatrix::identity(n, n) * -omega_f,
            scaling,
            scalar_filter: true,
        })
    }

    /// Custom Hurwitz feedback matrix. The uncertainty estimator then
    /// requires a zero initial observation error (the homogeneous term of a
    /// non-scalar filter is not propagated).
    pub fn with_feedback(omega_f: f64, a_o: DMatrix<f64>, scaling: EstimatorScaling) -> Result<Self> {
        if !(omega_f > 0.0) {
            return Err(Error::Domain {
                name: "omega_f",
                constraint: "omega_f > 0",
            });
        }
        if !is_hurwitz(&a_o) {
            return Err(Error::NotHurwitz("A_o"));
        }
        let n = a_o.nrows();
        let scalar_filter = (&a_o + DMatrix::identity(n, n) * omega_f).norm() == 0.0;
        Ok(Self {
            omega_f,
            a_o,
            scaling,
            scalar_filter,
        })
    }

    /// Bandwidth-separation guideline: the error-dynamics bandwidth should
    /// sit well above the reference-model poles and below the filter
    /// bandwidth. Violations are reported as a warning string, never an
    /// error (the actuator bandwidth above `omega_f` is unmodelled here).
    pub fn bandwidth_warning(&self, omega_e: f64, a_m_pole_magnitude: f64) -> Option<String> {
        if omega_e >= self.omega_f {
            Some(format!(
                "error-dynamics bandwidth {omega_e:.3} rad/s is not below the observer filter bandwidth {:.3} rad/s; uncertainty above the filter band cannot be rejected",
                self.omega_f
            ))
        } else if omega_e <= 2.0 * a_m_pole_magnitude {
            Some(format!(
                "error-dynamics bandwidth {omega_e:.3} rad/s is not well above the reference-model pole magnitude {a_m_pole_magnitude:.3} rad/s; time-scale separation is weak"
            ))
        } else {
            None
        }
    }
}

/// Observer derivative: the certainty-equivalent plant copy
/// `x_hat' = A x + b u + b_r r + A_o (x_hat - x)`.
pub fn observer_derivative(
    config: &ObserverConfig,
    plant: &PlantModel,
    x: &DVector<f64>,
    u: f64,
    r: f64,
    x_hat: &DVector<f64>,
) -> DVector<f64> {
    &plant.a * x + &plant.b * u + &plant.b_r * r + &config.a_o * (x_hat - x)
}

/// Instantaneous uncertainty estimate from the observation error:
/// `Delta_hat = b^+ { exp(-omega_f t) x~(0) - x~(t) }`, scaled by `omega_f`
/// in `UnityDcGain` mode.
pub fn estimate_uncertainty(
    config: &ObserverConfig,
    b: &DVector<f64>,
    x_tilde: &DVector<f64>,
    x_tilde_0: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    let b_dag = pseudo_left_inverse(b)?;
    let homogeneous = if x_tilde_0.norm() == 0.0 {
        DVector::zeros(x_tilde.len())
    } else {
        if !config.scalar_filter {
            return Err(Error::Unsupported(
                "uncertainty estimation with nonzero initial observation error requires A_o = -omega_f I",
            ));
        }
        x_tilde_0 * (-config.omega_f * t).exp()
    };
    let raw = (b_dag * (homogeneous - x_tilde))[0];
    Ok(match config.scaling {
        EstimatorScaling::UnityDcGain => config.omega_f * raw,
        EstimatorScaling::RawFilter => raw,
    })
}
