//! Assembly of the coupled closed-loop ODE (plant, virtual model, error
//! integrals, adaptation, observer, learner, and the ideal reference run
//! alongside), fixed-step RK4 integration, and run diagnostics.
//!
//! A run is strictly deterministic: fixed step, sequential evaluation, no
//! shared state. Command-profile switch times are expected to align with
//! step boundaries (the shipped profiles switch at integer seconds).

use nalgebra::{DMatrix, DVector};

use crate::adapt::{
    bregman_update, direct_update, lyapunov_rate, lyapunov_value, AdaptationConfig,
};
use crate::coupling::{allocate, design_coupling, AllocationPolicy, CouplingDesign};
use crate::learner::{
    feature_extender_derivative, output_information_matrix, regressor_filter_derivative,
    target_and_prediction, FeatureExtender,
};
use crate::model::{BaselineGains, PlantModel, UncertaintyModel};
use crate::observer::{estimate_uncertainty, observer_derivative, ObserverConfig};
use crate::{Error, Result};

/// Exogenous reference signal (values in radians internally).
#[derive(Debug, Clone)]
pub enum CommandProfile {
    Constant(f64),
    /// `(start, end, value)` with contiguous, strictly increasing segments.
    PiecewiseConstant(Vec<(f64, f64, f64)>),
    SquareWave { amplitude: f64, period: f64 },
}

impl CommandProfile {
    pub fn piecewise(segments: Vec<(f64, f64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("command profile: empty segment list".into()));
        }
        for (i, (start, end, _)) in segments.iter().enumerate() {
            if !(start < end) {
                return Err(Error::Config(format!(
                    "command profile: segment {i} has start {start} >= end {end}"
                )));
            }
            if i > 0 && (segments[i - 1].1 - start).abs() > 0.0 {
                return Err(Error::Config(format!(
                    "command profile: segment {i} starts at {start}, expected {} (contiguous coverage)",
                    segments[i - 1].1
                )));
            }
        }
        Ok(Self::PiecewiseConstant(segments))
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::PiecewiseConstant(segments) => {
                for (start, end, v) in segments {
                    if t >= *start && t < *end {
                        return *v;
                    }
                }
                if t < segments[0].0 {
                    segments[0].2
                } else {
                    segments[segments.len() - 1].2
                }
            }
            Self::SquareWave { amplitude, period } => {
                if t.rem_euclid(*period) < 0.5 * period {
                    *amplitude
                } else {
                    -*amplitude
                }
            }
        }
    }

    /// End of the covered time range, if bounded.
    pub fn coverage_end(&self) -> Option<f64> {
        match self {
            Self::PiecewiseConstant(segments) => Some(segments[segments.len() - 1].1),
            _ => None,
        }
    }
}

/// How the cancellation signal `Delta_hat` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproximationMode {
    /// `Delta_hat = Phi^T theta_hat`, direct adaptation law.
    DirectAdaptation,
    /// `Delta_hat = Phi^T theta_hat`, Bregman law fed by the regressor
    /// filter and feature extender (requires observer and learner).
    CompositeLearning,
    /// `Delta_hat` from the observer's filtered-uncertainty estimate
    /// (requires observer; the parameter estimate is frozen).
    InstantaneousRejection,
}

/// Everything a run needs. Immutable during integration.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub plant: PlantModel,
    pub uncertainty: UncertaintyModel,
    pub baseline: BaselineGains,
    pub coupling: CouplingDesign,
    pub allocation: AllocationPolicy,
    pub adaptation: AdaptationConfig,
    pub mode: ApproximationMode,
    pub observer: Option<ObserverConfig>,
    pub learner: Option<FeatureExtender>,
    pub command: CommandProfile,
    pub h: f64,
    pub duration: f64,
    pub output_stride: f64,
    pub x0: DVector<f64>,
    pub x_m0: DVector<f64>,
    pub x_hat0: Option<DVector<f64>>,
    pub theta_hat0: DVector<f64>,
}

/// Flat-vector layout of the integrated state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub q: usize,
    pub has_observer: bool,
    pub has_learner: bool,
}

impl StateLayout {
    pub fn flat_dim(&self) -> usize {
        let mut dim = 2 * self.n + self.n * self.l + self.p + self.n; // x, x_m, e_int, theta_hat, x_id
        if self.has_observer {
            dim += self.n;
        }
        if self.has_learner {
            dim += self.n * self.p + self.q * self.p + self.q;
        }
        dim
    }

    fn x(&self) -> std::ops::Range<usize> {
        0..self.n
    }
    fn x_m(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }
    fn e_int(&self) -> std::ops::Range<usize> {
        2 * self.n..2 * self.n + self.n * self.l
    }
    fn theta_hat(&self) -> std::ops::Range<usize> {
        let s = 2 * self.n + self.n * self.l;
        s..s + self.p
    }
    fn x_id(&self) -> std::ops::Range<usize> {
        let s = 2 * self.n + self.n * self.l + self.p;
        s..s + self.n
    }
    fn x_hat(&self) -> std::ops::Range<usize> {
        let s = 2 * self.n + self.n * self.l + self.p + self.n;
        s..s + self.n
    }
    fn phi_f_t(&self) -> std::ops::Range<usize> {
        let mut s = 2 * self.n + self.n * self.l + self.p + self.n;
        if self.has_observer {
            s += self.n;
        }
        s..s + self.n * self.p
    }
    fn omega(&self) -> std::ops::Range<usize> {
        let r = self.phi_f_t();
        r.end..r.end + self.q * self.p
    }
    fn eta(&self) -> std::ops::Range<usize> {
        let r = self.omega();
        r.end..r.end + self.q
    }
}

/// Structured view of the integrated quantities.
#[derive(Debug, Clone)]
pub struct AdaptiveState {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_m: DVector<f64>,
    /// Error integrals `e<1> ... e<l>`, each of length n.
    pub e_int: Vec<DVector<f64>>,
    pub theta_hat: DVector<f64>,
    pub x_id: DVector<f64>,
    pub x_hat: Option<DVector<f64>>,
    /// Transposed regressor-filter state (n x p).
    pub phi_f_t: Option<DMatrix<f64>>,
    pub omega: Option<DMatrix<f64>>,
    pub eta: Option<DVector<f64>>,
}

impl AdaptiveState {
    pub fn pack(&self, layout: &StateLayout) -> DVector<f64> {
        let mut flat = DVector::zeros(layout.flat_dim());
        flat.rows_mut(0, layout.n).copy_from(&self.x);
        flat.rows_mut(layout.n, layout.n).copy_from(&self.x_m);
        for (i, e) in self.e_int.iter().enumerate() {
            flat.rows_mut(2 * layout.n + i * layout.n, layout.n).copy_from(e);
        }
        let th = layout.theta_hat();
        flat.rows_mut(th.start, layout.p).copy_from(&self.theta_hat);
        let id = layout.x_id();
        flat.rows_mut(id.start, layout.n).copy_from(&self.x_id);
        if layout.has_observer {
            let r = layout.x_hat();
            flat.rows_mut(r.start, layout.n)
                .copy_from(self.x_hat.as_ref().expect("observer state present"));
        }
        if layout.has_learner {
            let r = layout.phi_f_t();
            flat.rows_mut(r.start, r.end - r.start).copy_from_slice(
                self.phi_f_t.as_ref().expect("learner state present").as_slice(),
            );
            let r = layout.omega();
            flat.rows_mut(r.start, r.end - r.start)
                .copy_from_slice(self.omega.as_ref().expect("learner state present").as_slice());
            let r = layout.eta();
            flat.rows_mut(r.start, layout.q)
                .copy_from(self.eta.as_ref().expect("learner state present"));
        }
        flat
    }

    pub fn unpack(layout: &StateLayout, t: f64, flat: &DVector<f64>) -> Self {
        let n = layout.n;
        let seg = |r: std::ops::Range<usize>| flat.rows(r.start, r.end - r.start).into_owned();
        Self {
            t,
            x: seg(layout.x()),
            x_m: seg(layout.x_m()),
            e_int: (0..layout.l)
                .map(|i| {
                    let s = layout.e_int().start + i * n;
                    flat.rows(s, n).into_owned()
                })
                .collect(),
            theta_hat: seg(layout.theta_hat()),
            x_id: seg(layout.x_id()),
            x_hat: layout.has_observer.then(|| seg(layout.x_hat())),
            phi_f_t: layout.has_learner.then(|| {
                let r = layout.phi_f_t();
                DMatrix::from_column_slice(n, layout.p, &flat.as_slice()[r])
            }),
            omega: layout.has_learner.then(|| {
                let r = layout.omega();
                DMatrix::from_column_slice(layout.q, layout.p, &flat.as_slice()[r])
            }),
            eta: layout.has_learner.then(|| seg(layout.eta())),
        }
    }
}

/// One classical fourth-order Runge-Kutta step. Each stage derivative is
/// checked for finiteness; a non-finite component aborts with its time and
/// flat-state index.
pub fn rk4_step<F>(f: F, s: &DVector<f64>, t: f64, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let check = |k: DVector<f64>, stage_t: f64| -> Result<DVector<f64>> {
        match k.iter().position(|v| !v.is_finite()) {
            None => Ok(k),
            Some(component) => Err(Error::NonFiniteDerivative {
                t: stage_t,
                component,
            }),
        }
    };
    let half = 0.5 * h;
    let k1 = check(f(t, s)?, t)?;
    let k2 = check(f(t + half, &(s + &k1 * half))?, t + half)?;
    let k3 = check(f(t + half, &(s + &k2 * half))?, t + half)?;
    let k4 = check(f(t + h, &(s + &k3 * h))?, t + h)?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// One recorded trajectory point. Angles are radians; the input channel
/// carries the plant's native input unit.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_m: DVector<f64>,
    pub x_id: DVector<f64>,
    pub u: f64,
    pub u_base: f64,
    pub u_ad: f64,
    pub u_c: f64,
    pub u_m: DVector<f64>,
    pub delta: f64,
    pub delta_hat: f64,
    pub norm_e: f64,
    pub norm_edot: f64,
    pub norm_theta_tilde: f64,
    pub norm_theta_hat_dot: f64,
    pub v_lyap: f64,
}

/// Time-ordered run record.
#[derive(Debug, Clone, Default)]
pub struct SimTrajectory {
    pub samples: Vec<Sample>,
}

/// Scalar figures of merit for one run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    /// max |c^T x| over the run (rad).
    pub peak_abs_output: f64,
    /// RMS of c^T e over the run (rad).
    pub rms_tracking_error: f64,
    /// Total variation of the plant input over recorded samples.
    pub input_total_variation: f64,
    /// sup ||theta_hat'||.
    pub peak_theta_rate: f64,
    /// ||theta~|| at the final sample.
    pub final_theta_error: f64,
    /// True when every step satisfies V(k) - V(k-1) <= 1e-8 (1 + V(k-1)).
    pub lyapunov_monotone: bool,
    /// Largest raw per-step increase of V (0 when V never increased).
    pub lyapunov_max_violation: f64,
    /// max |central-difference V' - analytic rate| / (1 + |analytic|),
    /// measured at integration-step resolution. NaN when not measured.
    pub vdot_match_max_scaled_err: f64,
    pub diverged: bool,
}

struct Evaluation {
    flat_dot: DVector<f64>,
    u: f64,
    u_base: f64,
    u_ad: f64,
    u_c: f64,
    u_m: DVector<f64>,
    delta: f64,
    delta_hat: f64,
    e: DVector<f64>,
    edot: DVector<f64>,
    theta_dot: DVector<f64>,
}

/// Assembled closed-loop system bound to a validated setup.
pub struct SimEngine<'a> {
    setup: &'a SimSetup,
    layout: StateLayout,
    x_tilde_0: DVector<f64>,
}

impl<'a> SimEngine<'a> {
    pub fn new(setup: &'a SimSetup) -> Result<Self> {
        let n = setup.plant.dim();
        let p = setup.uncertainty.param_dim();
        let l = setup.coupling.order;

        if setup.coupling.state_dim() != n {
            return Err(Error::DimensionMismatch {
                context: "SimEngine::new",
                expected: format!("coupling over state dimension {n}"),
                actual: format!("{}", setup.coupling.state_dim()),
            });
        }
        if setup.allocation.w.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "SimEngine::new",
                expected: format!("allocation weight {n}x{n}"),
                actual: format!("{}x{}", setup.allocation.w.nrows(), setup.allocation.w.ncols()),
            });
        }
        if setup.adaptation.param_dim() != p {
            return Err(Error::DimensionMismatch {
                context: "SimEngine::new",
                expected: format!("adaptation over parameter dimension {p}"),
                actual: format!("{}", setup.adaptation.param_dim()),
            });
        }
        if setup.x0.len() != n || setup.x_m0.len() != n || setup.theta_hat0.len() != p {
            return Err(Error::DimensionMismatch {
                context: "SimEngine::new",
                expected: format!("x0/x_m0 length {n}, theta_hat0 length {p}"),
                actual: format!(
                    "x0 {}, x_m0 {}, theta_hat0 {}",
                    setup.x0.len(),
                    setup.x_m0.len(),
                    setup.theta_hat0.len()
                ),
            });
        }
        match setup.mode {
            ApproximationMode::CompositeLearning => {
                if setup.observer.is_none() || setup.learner.is_none() {
                    return Err(Error::Config(
                        "composite learning requires both observer and learner".into(),
                    ));
                }
            }
            ApproximationMode::InstantaneousRejection => {
                if setup.observer.is_none() {
                    return Err(Error::Config(
                        "instantaneous rejection requires an observer".into(),
                    ));
                }
            }
            ApproximationMode::DirectAdaptation => {}
        }
        if let Some(ext) = &setup.learner {
            if ext.p_dim() != p {
                return Err(Error::DimensionMismatch {
                    context: "SimEngine::new",
                    expected: format!("learner over parameter dimension {p}"),
                    actual: format!("{}", ext.p_dim()),
                });
            }
        }
        if !(setup.h > 0.0) || !(setup.duration > 0.0) {
            return Err(Error::Config("h and duration must be positive".into()));
        }
        let steps = setup.duration / setup.h;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "duration {} is not an integer number of steps at h = {}",
                setup.duration, setup.h
            )));
        }
        let stride = setup.output_stride / setup.h;
        if (stride - stride.round()).abs() > 1e-6 || stride.round() < 1.0 {
            return Err(Error::Config(format!(
                "output stride {} is not an integer multiple of h = {}",
                setup.output_stride, setup.h
            )));
        }
        let per = setup.duration / setup.output_stride;
        if (per - per.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "duration {} is not an integer number of output strides {}",
                setup.duration, setup.output_stride
            )));
        }
        if let Some(end) = setup.command.coverage_end() {
            if end + 1e-12 < setup.duration {
                return Err(Error::Config(format!(
                    "command profile covers [0, {end}) but the run lasts {}",
                    setup.duration
                )));
            }
        }

        let layout = StateLayout {
            n,
            p,
            l,
            q: setup.learner.as_ref().map_or(0, |e| e.q_dim()),
            has_observer: setup.observer.is_some(),
            has_learner: setup.learner.is_some(),
        };
        let x_tilde_0 = match &setup.x_hat0 {
            Some(x_hat0) => x_hat0 - &setup.x0,
            None => DVector::zeros(n),
        };
        Ok(Self {
            setup,
            layout,
            x_tilde_0,
        })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    /// Flat initial state.
    pub fn initial_state(&self) -> DVector<f64> {
        let s = self.setup;
        let n = self.layout.n;
        let state = AdaptiveState {
            t: 0.0,
            x: s.x0.clone(),
            x_m: s.x_m0.clone(),
            e_int: vec![DVector::zeros(n); self.layout.l],
            theta_hat: s.theta_hat0.clone(),
            // The ideal run starts from the blend of the two initial states.
            x_id: &s.x0 * s.allocation.mu + &s.x_m0 * (1.0 - s.allocation.mu),
            x_hat: self
                .layout
                .has_observer
                .then(|| s.x_hat0.clone().unwrap_or_else(|| s.x0.clone())),
            phi_f_t: self.layout.has_learner.then(|| DMatrix::zeros(n, self.layout.p)),
            omega: self
                .layout
                .has_learner
                .then(|| DMatrix::zeros(self.layout.q, self.layout.p)),
            eta: self.layout.has_learner.then(|| DVector::zeros(self.layout.q)),
        };
        state.pack(&self.layout)
    }

    fn augmented_error(&self, flat: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let n = lay.n;
        let mut e_aug = DVector::zeros(lay.n * (lay.l + 1));
        let x = flat.rows(0, n);
        let x_m = flat.rows(n, n);
        for i in 0..n {
            e_aug[i] = x_m[i] - x[i];
        }
        let e_int = lay.e_int();
        e_aug
            .rows_mut(n, n * lay.l)
            .copy_from(&flat.rows(e_int.start, e_int.end - e_int.start));
        e_aug
    }

    fn eval(&self, t: f64, flat: &DVector<f64>) -> Result<Evaluation> {
        let s = self.setup;
        let lay = &self.layout;
        let n = lay.n;
        let x = flat.rows(0, n).into_owned();
        let x_m = flat.rows(n, n).into_owned();
        let theta_hat = {
            let r = lay.theta_hat();
            flat.rows(r.start, lay.p).into_owned()
        };
        let x_id = {
            let r = lay.x_id();
            flat.rows(r.start, n).into_owned()
        };

        let r_cmd = s.command.value(t);
        let phi = s.uncertainty.basis(&x);
        let delta = s.uncertainty.oracle_delta(&phi);

        let x_hat = lay.has_observer.then(|| {
            let r = lay.x_hat();
            flat.rows(r.start, n).into_owned()
        });
        let x_tilde = x_hat.as_ref().map(|xh| xh - &x);

        let delta_hat = match s.mode {
            ApproximationMode::DirectAdaptation | ApproximationMode::CompositeLearning => {
                phi.dot(&theta_hat)
            }
            ApproximationMode::InstantaneousRejection => estimate_uncertainty(
                s.observer.as_ref().expect("validated"),
                &s.plant.b,
                x_tilde.as_ref().expect("validated"),
                &self.x_tilde_0,
                t,
            )?,
        };
        let u_ad = -delta_hat;

        let e_aug = self.augmented_error(flat);
        let u_c_vec = design_coupling(&s.coupling, &e_aug);
        let (u_c, u_m) = allocate(&s.allocation, &s.plant.b, &u_c_vec)?;

        let u_base = s.baseline.u_base(&x, r_cmd);
        let u = u_base + u_ad + u_c;

        let dx = &s.plant.a * &x + &s.plant.b * (u + delta) + &s.plant.b_r * r_cmd;
        let dx_m = &s.baseline.a_m * &x_m + &s.baseline.b_m * r_cmd + &u_m;
        let dx_id = &s.baseline.a_m * &x_id + &s.baseline.b_m * r_cmd;

        // Learner signals (needed before the update law).
        let learner_state = if lay.has_learner {
            let ext = s.learner.as_ref().expect("validated");
            let r = lay.phi_f_t();
            let phi_f_t = DMatrix::from_column_slice(n, lay.p, &flat.as_slice()[r]);
            let r = lay.omega();
            let omega = DMatrix::from_column_slice(lay.q, lay.p, &flat.as_slice()[r]);
            let r = lay.eta();
            let eta = flat.rows(r.start, lay.q).into_owned();
            Some((ext, phi_f_t, omega, eta))
        } else {
            None
        };

        let theta_dot = match s.mode {
            ApproximationMode::DirectAdaptation => {
                direct_update(&s.adaptation, &phi, &e_aug, &s.coupling.b_e, &s.plant.b)
            }
            ApproximationMode::CompositeLearning => {
                let (ext, _, omega, eta) = learner_state.as_ref().expect("validated");
                let (_, _, y_tilde) = target_and_prediction(ext, omega, eta, &theta_hat);
                let m_omega = output_information_matrix(ext, omega);
                bregman_update(
                    &s.adaptation,
                    &phi,
                    &e_aug,
                    &s.coupling.b_e,
                    &s.plant.b,
                    &m_omega,
                    &y_tilde,
                )
            }
            ApproximationMode::InstantaneousRejection => DVector::zeros(lay.p),
        };

        let mut flat_dot = DVector::zeros(lay.flat_dim());
        flat_dot.rows_mut(0, n).copy_from(&dx);
        flat_dot.rows_mut(n, n).copy_from(&dx_m);
        // Chained integrals: e<1>' = e, e<i>' = e<i-1>.
        if lay.l > 0 {
            let base = lay.e_int().start;
            for i in 0..n {
                flat_dot[base + i] = e_aug[i];
            }
            for i in 1..lay.l {
                for j in 0..n {
                    flat_dot[base + i * n + j] = flat[base + (i - 1) * n + j];
                }
            }
        }
        {
            let r = lay.theta_hat();
            flat_dot.rows_mut(r.start, lay.p).copy_from(&theta_dot);
        }
        {
            let r = lay.x_id();
            flat_dot.rows_mut(r.start, n).copy_from(&dx_id);
        }
        if let Some(x_hat) = &x_hat {
            let cfg = s.observer.as_ref().expect("validated");
            let dx_hat = observer_derivative(cfg, &s.plant, &x, u, r_cmd, x_hat);
            let r = lay.x_hat();
            flat_dot.rows_mut(r.start, n).copy_from(&dx_hat);
        }
        if let Some((ext, phi_f_t, omega, eta)) = &learner_state {
            let a_o = &s.observer.as_ref().expect("validated").a_o;
            let d_phi_f_t = regressor_filter_derivative(a_o, &s.plant.b, &phi, phi_f_t);
            let (d_omega, d_eta) = feature_extender_derivative(
                ext,
                omega,
                eta,
                phi_f_t,
                x_tilde.as_ref().expect("validated"),
            );
            let r = lay.phi_f_t();
            flat_dot
                .rows_mut(r.start, r.end - r.start)
                .copy_from_slice(d_phi_f_t.as_slice());
            let r = lay.omega();
            flat_dot
                .rows_mut(r.start, r.end - r.start)
                .copy_from_slice(d_omega.as_slice());
            let r = lay.eta();
            flat_dot.rows_mut(r.start, lay.q).copy_from(&d_eta);
        }

        let e = e_aug.rows(0, n).into_owned();
        Ok(Evaluation {
            edot: &dx_m - &dx,
            flat_dot,
            u,
            u_base,
            u_ad,
            u_c,
            u_m,
            delta,
            delta_hat,
            e,
            theta_dot,
        })
    }

    /// Full closed-loop derivative of the flat state.
    pub fn derivative(&self, t: f64, flat: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(t, flat)?.flat_dot)
    }

    /// Lyapunov value and its theoretical rate at the current state
    /// (oracle-assisted diagnostics).
    pub fn lyapunov_sample(&self, flat: &DVector<f64>) -> (f64, f64) {
        let s = self.setup;
        let lay = &self.layout;
        let e_aug = self.augmented_error(flat);
        let theta_hat = {
            let r = lay.theta_hat();
            flat.rows(r.start, lay.p).into_owned()
        };
        let theta_tilde = &theta_hat - s.uncertainty.oracle_theta();
        let (v, _, _) = lyapunov_value(&s.adaptation, &e_aug, &theta_tilde);
        let y_tilde = if lay.has_learner && s.mode == ApproximationMode::CompositeLearning {
            let ext = s.learner.as_ref().expect("validated");
            let r = lay.omega();
            let omega = DMatrix::from_column_slice(lay.q, lay.p, &flat.as_slice()[r]);
            let r = lay.eta();
            let eta = flat.rows(r.start, lay.q).into_owned();
            Some(target_and_prediction(ext, &omega, &eta, &theta_hat).2)
        } else {
            None
        };
        let rate = lyapunov_rate(&s.adaptation, &e_aug, y_tilde.as_ref());
        (v, rate)
    }

    fn sample(&self, t: f64, flat: &DVector<f64>) -> Result<Sample> {
        let s = self.setup;
        let lay = &self.layout;
        let ev = self.eval(t, flat)?;
        let theta_hat = {
            let r = lay.theta_hat();
            flat.rows(r.start, lay.p).into_owned()
        };
        let theta_tilde = &theta_hat - s.uncertainty.oracle_theta();
        let e_aug = self.augmented_error(flat);
        let (v, _, _) = lyapunov_value(&s.adaptation, &e_aug, &theta_tilde);
        Ok(Sample {
            t,
            x: flat.rows(0, lay.n).into_owned(),
            x_m: flat.rows(lay.n, lay.n).into_owned(),
            x_id: {
                let r = lay.x_id();
                flat.rows(r.start, lay.n).into_owned()
            },
            u: ev.u,
            u_base: ev.u_base,
            u_ad: ev.u_ad,
            u_c: ev.u_c,
            u_m: ev.u_m,
            delta: ev.delta,
            delta_hat: ev.delta_hat,
            norm_e: ev.e.norm(),
            norm_edot: ev.edot.norm(),
            norm_theta_tilde: theta_tilde.norm(),
            norm_theta_hat_dot: ev.theta_dot.norm(),
            v_lyap: v,
        })
    }

    /// Integrate and return the flat state at every output stride. Used by
    /// equivalence tests that need every integrated quantity.
    pub fn run_states(&self) -> Result<Vec<(f64, DVector<f64>)>> {
        let s = self.setup;
        let n_steps = (s.duration / s.h).round() as usize;
        let stride = (s.output_stride / s.h).round() as usize;
        let mut flat = self.initial_state();
        let mut out = Vec::with_capacity(n_steps / stride + 1);
        for k in 0..=n_steps {
            let t = k as f64 * s.h;
            if k % stride == 0 {
                out.push((t, flat.clone()));
            }
            if k == n_steps {
                break;
            }
            flat = rk4_step(|tt, ss| self.derivative(tt, ss), &flat, t, s.h)?;
        }
        Ok(out)
    }
}

const DIVERGENCE_GUARD: f64 = 1e6;

/// Integrate a configured run and return its trajectory and metrics.
///
/// Lyapunov monotonicity and the rate match are tracked at every
/// integration step; samples are recorded at the output stride. A state
/// component exceeding the divergence guard stops the run early and marks
/// the metrics as diverged.
pub fn run_simulation(setup: &SimSetup) -> Result<(SimTrajectory, RunMetrics)> {
    let engine = SimEngine::new(setup)?;
    let n_steps = (setup.duration / setup.h).round() as usize;
    let stride = (setup.output_stride / setup.h).round() as usize;

    let mut traj = SimTrajectory {
        samples: Vec::with_capacity(n_steps / stride + 2),
    };
    let mut flat = engine.initial_state();
    let mut diverged = false;

    let mut v_prev: Option<f64> = None;
    let mut v_prev2: Option<f64> = None;
    let mut rate_prev = 0.0;
    let mut max_violation = 0.0_f64;
    let mut monotone = true;
    let mut vdot_err = 0.0_f64;

    for k in 0..=n_steps {
        let t = k as f64 * setup.h;
        let (v, rate) = engine.lyapunov_sample(&flat);
        if let Some(vp) = v_prev {
            let increase = v - vp;
            if increase > max_violation {
                max_violation = increase;
            }
            if increase > 1e-8 * (1.0 + vp) {
                monotone = false;
            }
        }
        if let Some(vp2) = v_prev2 {
            let fd = (v - vp2) / (2.0 * setup.h);
            let err = (fd - rate_prev).abs() / (1.0 + rate_prev.abs());
            if err > vdot_err {
                vdot_err = err;
            }
        }
        v_prev2 = v_prev;
        v_prev = Some(v);
        rate_prev = rate;

        if k % stride == 0 {
            traj.samples.push(engine.sample(t, &flat)?);
        }
        if k == n_steps {
            break;
        }
        flat = rk4_step(|tt, ss| engine.derivative(tt, ss), &flat, t, setup.h)?;
        if flat.amax() > DIVERGENCE_GUARD {
            diverged = true;
            break;
        }
    }

    let mut metrics = compute_metrics(&traj, &setup.plant.c);
    metrics.lyapunov_monotone = monotone && !diverged;
    metrics.lyapunov_max_violation = max_violation.max(0.0);
    metrics.vdot_match_max_scaled_err = vdot_err;
    metrics.diverged = diverged;
    Ok((traj, metrics))
}

/// Sample-level metrics of a recorded trajectory. The Lyapunov fields are
/// derived from the recorded (strided) samples here; [`run_simulation`]
/// replaces them with the per-integration-step values.
pub fn compute_metrics(traj: &SimTrajectory, c: &DVector<f64>) -> RunMetrics {
    let mut peak_output = 0.0_f64;
    let mut sum_sq = 0.0;
    let mut tv = 0.0;
    let mut peak_rate = 0.0_f64;
    let mut max_violation = 0.0_f64;
    let mut monotone = true;
    let mut prev_u: Option<f64> = None;
    let mut prev_v: Option<f64> = None;
    for s in &traj.samples {
        peak_output = peak_output.max(c.dot(&s.x).abs());
        let e_out = c.dot(&s.x_m) - c.dot(&s.x);
        sum_sq += e_out * e_out;
        if let Some(u) = prev_u {
            tv += (s.u - u).abs();
        }
        prev_u = Some(s.u);
        peak_rate = peak_rate.max(s.norm_theta_hat_dot);
        if let Some(v) = prev_v {
            let increase = s.v_lyap - v;
            max_violation = max_violation.max(increase);
            if increase > 1e-8 * (1.0 + v) {
                monotone = false;
            }
        }
        prev_v = Some(s.v_lyap);
    }
    let count = traj.samples.len().max(1) as f64;
    RunMetrics {
        peak_abs_output: peak_output,
        rms_tracking_error: (sum_sq / count).sqrt(),
        input_total_variation: tv,
        peak_theta_rate: peak_rate,
        final_theta_error: traj
            .samples
            .last()
            .map_or(0.0, |s| s.norm_theta_tilde),
        lyapunov_monotone: monotone,
        lyapunov_max_violation: max_violation.max(0.0),
        vdot_match_max_scaled_err: f64::NAN,
        diverged: false,
    }
}
