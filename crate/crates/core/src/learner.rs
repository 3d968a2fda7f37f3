//! Regressor filter and feature extender for online model learning.
//!
//! The regressor filter pushes the basis function through the same stable
//! filter as the observation error, so that `x~(t) = Phi_f^T(t) theta`
//! whenever the observer starts synchronised. The feature extender then
//! accumulates the filtered regressor into an information matrix `Omega`
//! and a target accumulator `eta` with `eta = Omega theta`, turning the
//! unmeasurable uncertainty relation into the measurable linear regression
//! `Y = M[Omega] theta`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Update factor `B_Y` of the extender. `Regressor` is the default policy
/// `B_Y = Phi_f` (the Gram integrator); `Fixed` is an arbitrary constant
/// driving matrix.
#[derive(Debug, Clone)]
pub enum UpdateFactor {
    Regressor,
    Fixed(DMatrix<f64>),
}

/// Feature extender: forgetting factor `A_Y` (with `A_Y + A_Y^T <= 0`),
/// update factor `B_Y`, and the linear output operator `M` (square or tall;
/// `None` means identity).
#[derive(Debug, Clone)]
pub struct FeatureExtender {
    pub a_y: DMatrix<f64>,
    pub update: UpdateFactor,
    pub m: Option<DMatrix<f64>>,
    q_dim: usize,
    p_dim: usize,
}

impl FeatureExtender {
    /// Default policy: `q = p`, `A_Y = -lambda I` with `lambda >= 0`,
    /// `B_Y = Phi_f`, `M` identity.
    pub fn gram_integrator(p: usize, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Domain {
                name: "lambda",
                constraint: "lambda >= 0",
            });
        }
        Self::new(
            DMatrix::identity(p, p) * -lambda,
            UpdateFactor::Regressor,
            None,
            p,
        )
    }

    pub fn new(
        a_y: DMatrix<f64>,
        update: UpdateFactor,
        m: Option<DMatrix<f64>>,
        p_dim: usize,
    ) -> Result<Self> {
        let q_dim = a_y.nrows();
        if a_y.ncols() != q_dim {
            return Err(Error::DimensionMismatch {
                context: "FeatureExtender::new",
                expected: "square A_Y".into(),
                actual: format!("{}x{}", a_y.nrows(), a_y.ncols()),
            });
        }
        // Stability: the symmetric part of A_Y must be negative semi-definite.
        let sym = (&a_y + a_y.transpose()) * 0.5;
        let eigs = sym.symmetric_eigenvalues();
        if eigs.iter().any(|l| *l > 1e-12 * (1.0 + a_y.norm())) {
            return Err(Error::Domain {
                name: "A_Y",
                constraint: "A_Y + A_Y^T negative semi-definite",
            });
        }
        if let Some(m_op) = &m {
            if m_op.ncols() != q_dim || m_op.nrows() < q_dim {
                return Err(Error::DimensionMismatch {
                    context: "FeatureExtender::new",
                    expected: format!("M square or tall with {q_dim} columns"),
                    actual: format!("{}x{}", m_op.nrows(), m_op.ncols()),
                });
            }
        }
        Ok(Self {
            a_y,
            update,
            m,
            q_dim,
            p_dim,
        })
    }

    pub fn q_dim(&self) -> usize {
        self.q_dim
    }

    pub fn p_dim(&self) -> usize {
        self.p_dim
    }

    fn output_mat(&self, omega: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.m {
            Some(m_op) => m_op * omega,
            None => omega.clone(),
        }
    }

    fn output_vec(&self, eta: &DVector<f64>) -> DVector<f64> {
        match &self.m {
            Some(m_op) => m_op * eta,
            None => eta.clone(),
        }
    }
}

/// Regressor-filter derivative, stated on the transposed (n x p) state:
/// `(Phi_f^T)' = A_o Phi_f^T - b Phi^T`.
pub fn regressor_filter_derivative(
    a_o: &DMatrix<f64>,
    b: &DVector<f64>,
    phi_feat: &DVector<f64>,
    phi_f_t: &DMatrix<f64>,
) -> DMatrix<f64> {
    a_o * phi_f_t - b * phi_feat.transpose()
}

/// Feature-extender derivative `(Omega', eta')` with
/// `Omega' = A_Y Omega + B_Y Phi_f^T` and `eta' = A_Y eta + B_Y x~`.
/// `phi_f_t` is the (n x p) transposed regressor-filter state.
pub fn feature_extender_derivative(
    ext: &FeatureExtender,
    omega: &DMatrix<f64>,
    eta: &DVector<f64>,
    phi_f_t: &DMatrix<f64>,
    x_tilde: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    match &ext.update {
        UpdateFactor::Regressor => {
            let phi_f = phi_f_t.transpose();
            (
                &ext.a_y * omega + &phi_f * phi_f_t,
                &ext.a_y * eta + phi_f * x_tilde,
            )
        }
        UpdateFactor::Fixed(b_y) => (
            &ext.a_y * omega + b_y * phi_f_t,
            &ext.a_y * eta + b_y * x_tilde,
        ),
    }
}

/// Target, prediction, and their gap:
/// `Y = M[eta]`, `Yhat = M[Omega] theta_hat`, `Ytilde = Yhat - Y`.
pub fn target_and_prediction(
    ext: &FeatureExtender,
    omega: &DMatrix<f64>,
    eta: &DVector<f64>,
    theta_hat: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let y = ext.output_vec(eta);
    let y_hat = ext.output_mat(omega) * theta_hat;
    let y_tilde = &y_hat - &y;
    (y, y_hat, y_tilde)
}

/// `M[Omega]` itself, as needed by the adaptation law.
pub fn output_information_matrix(ext: &FeatureExtender, omega: &DMatrix<f64>) -> DMatrix<f64> {
    ext.output_mat(omega)
}

/// Excitation diagnostics of `M[Omega]`: numerical column rank (count of
/// Gram eigenvalues above `1e-10 * trace`) and the smallest eigenvalue of
/// the p x p Gram matrix `M[Omega]^T M[Omega]`.
pub fn excitation_rank(ext: &FeatureExtender, omega: &DMatrix<f64>) -> (usize, f64) {
    let m_omega = ext.output_mat(omega);
    let gram = m_omega.transpose() * &m_omega;
    let eigs = gram.symmetric_eigenvalues();
    let trace = gram.trace();
    let rank = eigs.iter().filter(|l| **l > 1e-10 * trace).count();
    let min_eig = eigs.iter().fold(f64::INFINITY, |m, l| m.min(*l));
    (rank, min_eig)
}
