//! Cross-module properties of the assembled framework: coordinate and
//! derivative identities along simulated trajectories, loop-shaping
//! behaviour of the coupling designs, observer/learner signal identities,
//! and integrator convergence order.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sync_mrac::adapt::{AdaptationConfig, PhiPotential};
use sync_mrac::coupling::{AllocationPolicy, CouplingDesign, NormExponent};
use sync_mrac::model::{
    closed_loop_plant_derivative, from_blend, plant_derivative, to_blend, BaselineGains,
    PlantModel, UncertaintyModel,
};
use sync_mrac::observer::{observer_derivative, EstimatorScaling, ObserverConfig};
use sync_mrac::sim::{
    rk4_step, run_simulation, ApproximationMode, CommandProfile, SimEngine, SimSetup,
};

const F16_KM: [f64; 3] = [-10.875607026734661, -6.05647218566855, -10.000000000000023];

fn f16_baseline() -> (PlantModel, BaselineGains) {
    let plant = PlantModel::f16_short_period();
    let baseline =
        BaselineGains::from_gains(&plant, DVector::from_column_slice(&F16_KM), 0.0).unwrap();
    (plant, baseline)
}

fn f16_command() -> CommandProfile {
    CommandProfile::piecewise(vec![
        (0.0, 1.0, 0.0),
        (1.0, 11.0, 5.0_f64.to_radians()),
        (11.0, 22.0, (-5.0_f64).to_radians()),
        (22.0, 41.0, 0.0),
        (41.0, 51.0, 2.5_f64.to_radians()),
        (51.0, 62.0, (-2.5_f64).to_radians()),
        (62.0, 80.0, 0.0),
    ])
    .unwrap()
}

fn f16_setup(k_p: f64, mu: f64, duration: f64) -> SimSetup {
    let (plant, baseline) = f16_baseline();
    let coupling = CouplingDesign::proportional(&baseline.a_m, k_p).unwrap();
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(&[400.0, 400.0, 20.0]));
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 800.0, 0.1]));
    let adaptation = AdaptationConfig::new(gamma, q, &coupling, PhiPotential::Disabled).unwrap();
    SimSetup {
        uncertainty: UncertaintyModel::f16_matched_uncertainty(),
        allocation: AllocationPolicy::new(mu, DMatrix::identity(3, 3), NormExponent::Two).unwrap(),
        plant,
        baseline,
        coupling,
        adaptation,
        mode: ApproximationMode::DirectAdaptation,
        observer: None,
        learner: None,
        command: f16_command(),
        h: 1e-3,
        duration,
        output_stride: 0.01,
        x0: DVector::zeros(3),
        x_m0: DVector::zeros(3),
        x_hat0: None,
        theta_hat0: DVector::zeros(3),
    }
}

proptest! {
    /// Physical and closed-loop forms of the plant derivative agree.
    #[test]
    fn plant_forms_agree(
        xs in prop::array::uniform3(-0.5f64..0.5),
        u_ad in -2.0f64..2.0,
        u_c in -2.0f64..2.0,
        r in -0.2f64..0.2,
    ) {
        let (plant, baseline) = f16_baseline();
        let unc = UncertaintyModel::f16_matched_uncertainty();
        let x = DVector::from_column_slice(&xs);
        let delta = unc.oracle_delta(&unc.basis(&x));
        let d1 = plant_derivative(&plant, &baseline, &x, u_ad, u_c, r, delta);
        let d2 = closed_loop_plant_derivative(&plant, &baseline, &x, u_c, -u_ad - delta, r);
        prop_assert!((d1 - d2).norm() <= 1e-12 * (1.0 + u_ad.abs() + u_c.abs()));
    }

    /// Blend transform round-trips to rounding precision.
    #[test]
    fn blend_roundtrip(
        xs in prop::array::uniform3(-10.0f64..10.0),
        xms in prop::array::uniform3(-10.0f64..10.0),
        mu in 0.0f64..=1.0,
    ) {
        let x = DVector::from_column_slice(&xs);
        let x_m = DVector::from_column_slice(&xms);
        let coords = to_blend(&x, &x_m, mu).unwrap();
        let (x_back, x_m_back) = from_blend(&coords);
        let scale = 1.0 + x.norm() + x_m.norm();
        prop_assert!((x_back - &x).norm() <= 1e-14 * scale);
        prop_assert!((x_m_back - &x_m).norm() <= 1e-14 * scale);
    }
}

/// Along a simulated run, the error derivative computed from the allocated
/// pair (U_m, u_c) and from the coupling input directly are identical:
/// the allocation never leaks into the error dynamics.
#[test]
fn allocation_invariance_of_error_dynamics() {
    for mu in [0.0, 0.3, 1.0] {
        let setup = f16_setup(10.0, mu, 4.0);
        let (traj, _) = run_simulation(&setup).unwrap();
        let k_p = 10.0;
        for s in &traj.samples {
            let e = &s.x_m - &s.x;
            let delta_tilde = s.delta_hat - s.delta;
            let u_c_vec = -&e * k_p;
            let via_parts =
                &setup.baseline.a_m * &e + &s.u_m - &setup.plant.b * s.u_c
                    + &setup.plant.b * delta_tilde;
            let via_coupling =
                &setup.baseline.a_m * &e + &u_c_vec + &setup.plant.b * delta_tilde;
            let scale = 1.0 + via_coupling.norm();
            assert!(
                (via_parts - via_coupling).norm() <= 1e-12 * scale,
                "mu = {mu}, t = {}",
                s.t
            );
        }
    }
}

/// Uniform bound of the plant state from the transformed signals:
/// ||x(t)|| <= sup ||z|| + (1 - mu) sup ||e|| at every sample.
#[test]
fn triangle_inequality_bound_along_trajectory() {
    let mu = 0.5;
    let setup = f16_setup(10.0, mu, 8.0);
    let (traj, _) = run_simulation(&setup).unwrap();
    let mut sup_z = 0.0_f64;
    let mut sup_e = 0.0_f64;
    for s in &traj.samples {
        let coords = to_blend(&s.x, &s.x_m, mu).unwrap();
        sup_z = sup_z.max(coords.z.norm());
        sup_e = sup_e.max(coords.e.norm());
        let bound = sup_z + (1.0 - mu) * sup_e;
        assert!(s.x.norm() <= bound + 1e-12, "t = {}", s.t);
    }
}

/// First-order error dynamics under P coupling: on a scalar plant with no
/// uncertainty the tracking error decays at rate k_P - lambda(A_m),
/// measured within 1% over [0, 5/k_P].
#[test]
fn p_coupling_decay_rate_scalar_plant() {
    for k_p in [2.0_f64, 10.0] {
        let plant = PlantModel::new(
            DMatrix::from_row_slice(1, 1, &[0.5]),
            DVector::from_column_slice(&[1.0]),
            DVector::from_column_slice(&[0.0]),
            DVector::from_column_slice(&[1.0]),
        )
        .unwrap();
        // k_m places A_m at -1.
        let baseline = BaselineGains::from_gains(&plant, DVector::from_column_slice(&[1.5]), 0.0)
            .unwrap();
        let coupling = CouplingDesign::proportional(&baseline.a_m, k_p).unwrap();
        let adaptation = AdaptationConfig::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            &coupling,
            PhiPotential::Disabled,
        )
        .unwrap();
        let duration = (5.0 / k_p / 0.01).round() * 0.01;
        let setup = SimSetup {
            plant,
            uncertainty: UncertaintyModel::none(),
            baseline,
            coupling,
            allocation: AllocationPolicy::weighted_two_norm(0.5, 1).unwrap(),
            adaptation,
            mode: ApproximationMode::DirectAdaptation,
            observer: None,
            learner: None,
            command: CommandProfile::Constant(0.0),
            h: 1e-3,
            duration,
            output_stride: 0.01,
            x0: DVector::zeros(1),
            x_m0: DVector::from_column_slice(&[1.0]),
            x_hat0: None,
            theta_hat0: DVector::zeros(1),
        };
        let (traj, _) = run_simulation(&setup).unwrap();
        let first = traj.samples.first().unwrap();
        let last = traj.samples.last().unwrap();
        let e0 = (first.x_m[0] - first.x[0]).abs();
        let e_end = (last.x_m[0] - last.x[0]).abs();
        let measured = (e0 / e_end).ln() / (last.t - first.t);
        let expected = k_p + 1.0; // k_P - lambda, lambda = -1
        assert!(
            (measured - expected).abs() <= 0.01 * expected,
            "k_p = {k_p}: measured {measured}, expected {expected}"
        );
    }
}

/// Second-order error dynamics under PI coupling: with A_m near zero the
/// ringing frequency is sqrt(k_I), measured from zero crossings within 5%.
#[test]
fn pi_coupling_ringing_frequency_scalar_plant() {
    let k_p = 0.2;
    let k_i = 4.0;
    let plant = PlantModel::new(
        DMatrix::from_row_slice(1, 1, &[0.5]),
        DVector::from_column_slice(&[1.0]),
        DVector::from_column_slice(&[0.0]),
        DVector::from_column_slice(&[1.0]),
    )
    .unwrap();
    // A_m = -0.01, near zero.
    let baseline =
        BaselineGains::from_gains(&plant, DVector::from_column_slice(&[0.51]), 0.0).unwrap();
    let coupling = CouplingDesign::proportional_integral(&baseline.a_m, k_p, k_i).unwrap();
    let adaptation = AdaptationConfig::new(
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2),
        &coupling,
        PhiPotential::Disabled,
    )
    .unwrap();
    let setup = SimSetup {
        plant,
        uncertainty: UncertaintyModel::none(),
        baseline,
        coupling,
        allocation: AllocationPolicy::weighted_two_norm(0.5, 1).unwrap(),
        adaptation,
        mode: ApproximationMode::DirectAdaptation,
        observer: None,
        learner: None,
        command: CommandProfile::Constant(0.0),
        h: 1e-3,
        duration: 15.0,
        output_stride: 0.01,
        x0: DVector::zeros(1),
        x_m0: DVector::from_column_slice(&[1.0]),
        x_hat0: None,
        theta_hat0: DVector::zeros(1),
    };
    let (traj, _) = run_simulation(&setup).unwrap();
    let mut crossings = Vec::new();
    for w in traj.samples.windows(2) {
        let e0 = w[0].x_m[0] - w[0].x[0];
        let e1 = w[1].x_m[0] - w[1].x[0];
        if e0 == 0.0 || e0.signum() == e1.signum() {
            continue;
        }
        let frac = e0 / (e0 - e1);
        crossings.push(w[0].t + frac * (w[1].t - w[0].t));
    }
    assert!(crossings.len() >= 4, "too few crossings: {}", crossings.len());
    let gaps: Vec<f64> = crossings.windows(2).map(|c| c[1] - c[0]).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let measured = std::f64::consts::PI / mean_gap;
    let expected = k_i.sqrt();
    assert!(
        (measured - expected).abs() <= 0.05 * expected,
        "measured {measured}, expected {expected}"
    );
}

/// The observation error integrated on its own filter equation matches the
/// difference of the separately integrated observer and plant.
#[test]
fn observation_error_equivalence() {
    let plant = PlantModel::f16_short_period();
    let unc = UncertaintyModel::f16_matched_uncertainty();
    let cfg = ObserverConfig::new(10.0, 3, EstimatorScaling::UnityDcGain).unwrap();
    // State stack: [x; x_hat; x_tilde], x_hat(0) != x(0).
    let x0 = DVector::from_column_slice(&[0.01, -0.02, 0.0]);
    let x_hat0 = DVector::from_column_slice(&[0.03, 0.01, 0.005]);
    let mut z = DVector::zeros(9);
    z.rows_mut(0, 3).copy_from(&x0);
    z.rows_mut(3, 3).copy_from(&x_hat0);
    z.rows_mut(6, 3).copy_from(&(&x_hat0 - &x0));
    let command = |t: f64| if t < 1.0 { 0.0 } else { 0.0873 };
    let f = |t: f64, z: &DVector<f64>| {
        let x = z.rows(0, 3).into_owned();
        let x_hat = z.rows(3, 3).into_owned();
        let x_tilde = z.rows(6, 3).into_owned();
        let u = (2.0 * t).sin();
        let r = command(t);
        let delta = unc.oracle_delta(&unc.basis(&x));
        let dx = &plant.a * &x + &plant.b * (u + delta) + &plant.b_r * r;
        let dx_hat = observer_derivative(&cfg, &plant, &x, u, r, &x_hat);
        let dx_tilde = &cfg.a_o * &x_tilde - &plant.b * delta;
        let mut dz = DVector::zeros(9);
        dz.rows_mut(0, 3).copy_from(&dx);
        dz.rows_mut(3, 3).copy_from(&dx_hat);
        dz.rows_mut(6, 3).copy_from(&dx_tilde);
        Ok(dz)
    };
    let h = 1e-3;
    for k in 0..3000 {
        z = rk4_step(f, &z, k as f64 * h, h).unwrap();
        if k % 100 == 0 {
            let diff = (z.rows(3, 3) - z.rows(0, 3)) - z.rows(6, 3);
            assert!(diff.norm() <= 1e-9, "t = {}", k as f64 * h);
        }
    }
}

fn learning_setup() -> SimSetup {
    let plant = PlantModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]),
        DVector::from_column_slice(&[0.0, 1.0]),
        DVector::from_column_slice(&[0.0, 1.0]),
        DVector::from_column_slice(&[1.0, 0.0]),
    )
    .unwrap();
    let baseline = BaselineGains::lqr(&plant, &DMatrix::identity(2, 2), 1.0, 0.0).unwrap();
    let coupling = CouplingDesign::proportional(&baseline.a_m, 1.0).unwrap();
    let gamma = DMatrix::identity(2, 2) * 50.0;
    let adaptation = AdaptationConfig::new(
        gamma,
        DMatrix::identity(2, 2),
        &coupling,
        PhiPotential::Quadratic {
            hessian: DMatrix::identity(2, 2) * 50.0,
        },
    )
    .unwrap();
    SimSetup {
        uncertainty: UncertaintyModel::linear_in_state(DVector::from_column_slice(&[1.5, -1.0]))
            .unwrap(),
        plant,
        baseline,
        coupling,
        allocation: AllocationPolicy::weighted_two_norm(0.0, 2).unwrap(),
        adaptation,
        mode: ApproximationMode::CompositeLearning,
        observer: Some(ObserverConfig::new(2.0, 2, EstimatorScaling::UnityDcGain).unwrap()),
        learner: Some(
            sync_mrac::learner::FeatureExtender::gram_integrator(2, 0.1).unwrap(),
        ),
        command: CommandProfile::SquareWave {
            amplitude: 20.0_f64.to_radians(),
            period: 8.0,
        },
        h: 1e-3,
        duration: 10.0,
        output_stride: 0.01,
        x0: DVector::zeros(2),
        x_m0: DVector::zeros(2),
        x_hat0: None,
        theta_hat0: DVector::zeros(2),
    }
}

/// Along a learning run started with zero observation error, the filtered
/// regressor reproduces the observation error (x~ = Phi_f^T theta) and the
/// extender accumulators stay consistent (eta = Omega theta) and bounded.
#[test]
fn learner_signal_identities_along_trajectory() {
    let setup = learning_setup();
    let engine = SimEngine::new(&setup).unwrap();
    let layout = engine.layout();
    let states = engine.run_states().unwrap();
    let theta = setup.uncertainty.oracle_theta().clone();
    let scale = 1e-8 * (1.0 + theta.norm());
    let mut sup_omega = 0.0_f64;
    let mut sup_eta = 0.0_f64;
    for (t, flat) in &states {
        let st = sync_mrac::sim::AdaptiveState::unpack(&layout, *t, flat);
        let x_tilde = st.x_hat.as_ref().unwrap() - &st.x;
        let phi_f_t = st.phi_f_t.as_ref().unwrap();
        assert!(
            (&x_tilde - phi_f_t * &theta).norm() <= scale,
            "x~ identity at t = {t}"
        );
        let omega = st.omega.as_ref().unwrap();
        let eta = st.eta.as_ref().unwrap();
        assert!(
            (eta - omega * &theta).norm() <= scale,
            "eta identity at t = {t}"
        );
        sup_omega = sup_omega.max(omega.norm());
        sup_eta = sup_eta.max(eta.norm());
    }
    assert!(sup_omega.is_finite() && sup_omega < 1e3);
    assert!(sup_eta.is_finite() && sup_eta < 1e3);
}

/// Lyapunov decrease and the instantaneous-rate match hold on a direct
/// adaptation cell at integration-step resolution.
#[test]
fn lyapunov_decrease_and_rate_match_direct_cell() {
    let setup = f16_setup(10.0, 0.5, 20.0);
    let (_, metrics) = run_simulation(&setup).unwrap();
    assert!(metrics.lyapunov_monotone, "violation {}", metrics.lyapunov_max_violation);
    let tol = 100.0 * setup.h * setup.h;
    assert!(
        metrics.vdot_match_max_scaled_err <= tol,
        "rate mismatch {} > {tol}",
        metrics.vdot_match_max_scaled_err
    );
}

/// The assembled closed-loop derivative equals the composition of the
/// individually tested module operations, evaluated mid-run.
#[test]
fn assembled_derivative_matches_module_composition() {
    let setup = f16_setup(10.0, 0.5, 2.0);
    let engine = SimEngine::new(&setup).unwrap();
    let states = engine.run_states().unwrap();
    let (t, flat) = &states[150]; // t = 1.5 s, one command step into the run
    assert!((t - 1.5).abs() < 1e-12);
    let assembled = engine.derivative(*t, flat).unwrap();

    let x = flat.rows(0, 3).into_owned();
    let x_m = flat.rows(3, 3).into_owned();
    let theta_hat = flat.rows(6, 3).into_owned();
    let x_id = flat.rows(9, 3).into_owned();
    let r = setup.command.value(*t);
    let phi = setup.uncertainty.basis(&x);
    let delta = setup.uncertainty.oracle_delta(&phi);
    let u_ad = -phi.dot(&theta_hat);
    let e = &x_m - &x;
    let u_c_vec = sync_mrac::coupling::design_coupling(&setup.coupling, &e);
    let (u_c, u_m) = sync_mrac::coupling::allocate(&setup.allocation, &setup.plant.b, &u_c_vec)
        .unwrap();
    let dx = plant_derivative(&setup.plant, &setup.baseline, &x, u_ad, u_c, r, delta);
    let dx_m = sync_mrac::model::virtual_derivative(&setup.baseline, &x_m, &u_m, r);
    let dth = sync_mrac::adapt::direct_update(
        &setup.adaptation,
        &phi,
        &e,
        &setup.coupling.b_e,
        &setup.plant.b,
    );
    let dx_id = sync_mrac::model::ideal_reference_derivative(&setup.baseline, &x_id, r);

    let scale = 1.0 + assembled.norm();
    assert!((assembled.rows(0, 3) - dx).norm() <= 1e-12 * scale);
    assert!((assembled.rows(3, 3) - dx_m).norm() <= 1e-12 * scale);
    assert!((assembled.rows(6, 3) - dth).norm() <= 1e-12 * scale);
    assert!((assembled.rows(9, 3) - dx_id).norm() <= 1e-12 * scale);
}

/// Classical fourth-order convergence: halving the step shrinks the
/// terminal-state change by about 16x.
#[test]
fn rk4_step_halving_order() {
    // Smooth forced pendulum.
    let f = |t: f64, s: &DVector<f64>| {
        Ok(DVector::from_column_slice(&[
            s[1],
            -s[0].sin() - 0.1 * s[1] + t.cos(),
        ]))
    };
    let run = |h: f64| {
        let mut s = DVector::from_column_slice(&[0.3, 0.0]);
        let steps = (10.0 / h).round() as usize;
        for k in 0..steps {
            s = rk4_step(f, &s, k as f64 * h, h).unwrap();
        }
        s
    };
    let s1 = run(0.02);
    let s2 = run(0.01);
    let s3 = run(0.005);
    let d1 = (&s1 - &s2).norm();
    let d2 = (&s2 - &s3).norm();
    let ratio = d1 / d2;
    assert!(
        (8.0..=48.0).contains(&ratio),
        "step-halving ratio {ratio} outside 4th-order band"
    );
}

/// With the coupling gain at zero the framework reproduces a standalone
/// open-loop reference-model adaptive loop integrated independently.
#[test]
fn zero_gain_matches_standalone_open_loop_implementation() {
    let setup = f16_setup(0.0, 0.5, 10.0);
    let engine = SimEngine::new(&setup).unwrap();
    let states = engine.run_states().unwrap();

    // Independent loop: x' = A x + b(u + Delta) + b_r r with
    // u = -k_m^T x - Phi^T th; x_m' = A_m x_m + b_m r;
    // th' = -Gamma Phi e^T P b. Stack: [x; x_m; th].
    let (plant, baseline) = f16_baseline();
    let unc = UncertaintyModel::f16_matched_uncertainty();
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(&[400.0, 400.0, 20.0]));
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 800.0, 0.1]));
    let p = sync_mrac::matops::solve_lyapunov(&baseline.a_m, &q).unwrap();
    let pb = &p * &plant.b;
    let command = f16_command();
    let f = |t: f64, z: &DVector<f64>| {
        let x = z.rows(0, 3).into_owned();
        let x_m = z.rows(3, 3).into_owned();
        let th = z.rows(6, 3).into_owned();
        let r = command.value(t);
        let phi = unc.basis(&x);
        let delta = unc.oracle_delta(&phi);
        let u = -plant_k_m_dot(&baseline, &x) - phi.dot(&th);
        let e = &x_m - &x;
        let mut dz = DVector::zeros(9);
        dz.rows_mut(0, 3)
            .copy_from(&(&plant.a * &x + &plant.b * (u + delta) + &plant.b_r * r));
        dz.rows_mut(3, 3)
            .copy_from(&(&baseline.a_m * &x_m + &baseline.b_m * r));
        dz.rows_mut(6, 3).copy_from(&(-(&gamma * phi) * e.dot(&pb)));
        Ok(dz)
    };
    fn plant_k_m_dot(baseline: &BaselineGains, x: &DVector<f64>) -> f64 {
        baseline.k_m.dot(x)
    }

    let mut z = DVector::zeros(9);
    let h = 1e-3;
    let mut max_diff = 0.0_f64;
    for (idx, (t, flat)) in states.iter().enumerate() {
        let diff_x = (flat.rows(0, 3) - z.rows(0, 3)).amax();
        let diff_xm = (flat.rows(3, 3) - z.rows(3, 3)).amax();
        let diff_th = (flat.rows(6, 3) - z.rows(6, 3)).amax();
        max_diff = max_diff.max(diff_x).max(diff_xm).max(diff_th);
        if idx == states.len() - 1 {
            break;
        }
        for k in 0..10 {
            z = rk4_step(f, &z, t + k as f64 * h, h).unwrap();
        }
    }
    assert!(max_diff <= 1e-10, "max deviation {max_diff}");
}
