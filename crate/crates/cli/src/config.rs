//! Experiment configuration: TOML schema, validation, and construction of
//! per-cell simulation setups.
//!
//! Matrices accept three spellings: `"identity"`, `{ diag = [..] }`, or a
//! full row-major nested array. Command values and the reported angle
//! columns are degrees; everything is converted to radians on load.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use sync_mrac::adapt::{AdaptationConfig, PhiPotential};
use sync_mrac::coupling::{AllocationPolicy, CouplingDesign, NormExponent};
use sync_mrac::learner::FeatureExtender;
use sync_mrac::model::{BaselineGains, PlantModel, UncertaintyModel};
use sync_mrac::observer::{EstimatorScaling, ObserverConfig};
use sync_mrac::sim::{ApproximationMode, CommandProfile, SimSetup};

/// Bundled Table-style default study.
pub const F16_PRESET_TOML: &str = include_str!("../presets/f16.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    plant: RawPlant,
    uncertainty: Option<RawUncertainty>,
    baseline: RawBaseline,
    coupling: RawCoupling,
    allocation: RawAllocation,
    adaptation: RawAdaptation,
    observer: Option<RawObserver>,
    learner: Option<RawLearner>,
    integrator: RawIntegrator,
    command: RawCommand,
    output: Option<RawOutput>,
    initial: Option<RawInitial>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    preset: Option<String>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<f64>>,
    b_r: Option<Vec<f64>>,
    c: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUncertainty {
    kind: String,
    theta: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaseline {
    q_base: Option<MatrixSpec>,
    r_base: Option<f64>,
    k_m: Option<Vec<f64>>,
    #[serde(default)]
    k_r: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoupling {
    kind: String,
    k_p: Option<Vec<f64>>,
    k_i: Option<Vec<f64>>,
    order: Option<usize>,
    k_e: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAllocation {
    mu: Vec<f64>,
    w: Option<MatrixSpec>,
    p: NormSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdaptation {
    mode: String,
    gamma: MatrixSpec,
    q: MatrixSpec,
    phi: Option<MatrixSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObserver {
    #[serde(default = "default_true")]
    enabled: bool,
    omega_f: f64,
    #[serde(default)]
    mode: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    #[serde(default = "default_true")]
    enabled: bool,
    #[serde(default = "default_lambda")]
    lambda: f64,
}

fn default_lambda() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrator {
    h: f64,
    duration: f64,
    stride: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCommand {
    segments: Vec<RawSegment>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    start: f64,
    end: f64,
    value_deg: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    formats: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    x0: Option<Vec<f64>>,
    x_m0: Option<Vec<f64>>,
    theta_hat0: Option<Vec<f64>>,
    x_hat0: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Named(String),
    Diag { diag: Vec<f64> },
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn build(&self, field: &str, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Named(name) if name == "identity" => Ok(DMatrix::identity(dim, dim)),
            MatrixSpec::Named(name) => {
                bail!("{field}: unknown matrix name {name:?} (expected \"identity\", {{ diag = [..] }}, or nested rows)")
            }
            MatrixSpec::Diag { diag } => {
                if diag.len() != dim {
                    bail!(
                        "{field}: diagonal has {} entries, expected {dim}",
                        diag.len()
                    );
                }
                check_finite(field, diag)?;
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
            }
            MatrixSpec::Full(rows) => matrix_from_rows(field, rows, Some((dim, dim))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NormSpec {
    Int(u8),
    Name(String),
}

fn matrix_from_rows(
    field: &str,
    rows: &[Vec<f64>],
    expect: Option<(usize, usize)>,
) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("{field}: matrix has no rows");
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("{field}: ragged rows (all rows must have the same length)");
    }
    if let Some((er, ec)) = expect {
        if rows.len() != er || ncols != ec {
            bail!(
                "{field}: matrix is {}x{ncols}, expected {er}x{ec}",
                rows.len()
            );
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    check_finite(field, &flat)?;
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn check_finite(field: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        bail!("{field}: entries must be finite");
    }
    Ok(())
}

/// Coupling gains of one grid row.
#[derive(Debug, Clone)]
pub enum GainSpec {
    P { k_p: f64 },
    Pi { k_p: f64, k_i: f64 },
    General { order: usize, k_e: DMatrix<f64> },
}

impl GainSpec {
    pub fn k_p(&self) -> f64 {
        match self {
            GainSpec::P { k_p } | GainSpec::Pi { k_p, .. } => *k_p,
            GainSpec::General { .. } => f64::NAN,
        }
    }

    pub fn k_i(&self) -> Option<f64> {
        match self {
            GainSpec::Pi { k_i, .. } => Some(*k_i),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            GainSpec::P { k_p } => format!("kp{k_p}"),
            GainSpec::Pi { k_p, k_i } => format!("kp{k_p}_ki{k_i}"),
            GainSpec::General { order, .. } => format!("general_l{order}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptationModeCfg {
    Direct,
    Bregman,
    Rejection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Svg,
}

#[derive(Debug, Clone)]
pub struct ObserverCfg {
    pub omega_f: f64,
    pub scaling: EstimatorScaling,
}

#[derive(Debug, Clone)]
pub struct LearnerCfg {
    pub lambda: f64,
}

/// Fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub plant: PlantModel,
    pub uncertainty: UncertaintyModel,
    pub baseline: BaselineGains,
    pub gains: Vec<GainSpec>,
    pub mu_values: Vec<f64>,
    pub w: DMatrix<f64>,
    pub p_norm: NormExponent,
    pub adaptation_mode: AdaptationModeCfg,
    pub gamma: DMatrix<f64>,
    pub q_weight: DMatrix<f64>,
    pub phi_hessian: Option<DMatrix<f64>>,
    pub observer: Option<ObserverCfg>,
    pub learner: Option<LearnerCfg>,
    pub h: f64,
    pub duration: f64,
    pub stride: f64,
    pub command: CommandProfile,
    pub out_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    pub x0: DVector<f64>,
    pub x_m0: DVector<f64>,
    pub x_hat0: Option<DVector<f64>>,
    pub theta_hat0: DVector<f64>,
}

/// One grid cell: indices into the gain and mu lists.
#[derive(Debug, Clone, Copy)]
pub struct GridCell {
    pub gain_idx: usize,
    pub mu_idx: usize,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config file {}", path.display()))
}

/// The bundled default study.
pub fn f16_default_config() -> ExperimentConfig {
    parse_config(F16_PRESET_TOML).expect("bundled preset parses")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).context("parsing TOML")?;

    // Plant.
    let plant = match raw.plant.preset.as_deref() {
        Some("f16-short-period") => {
            if raw.plant.a.is_some() || raw.plant.b.is_some() {
                bail!("plant: give either preset or explicit matrices, not both");
            }
            PlantModel::f16_short_period()
        }
        Some(other) => bail!("plant.preset: unknown preset {other:?} (expected \"f16-short-period\")"),
        None => {
            let a = matrix_from_rows(
                "plant.a",
                raw.plant.a.as_ref().context("plant.a: required when no preset is given")?,
                None,
            )?;
            let n = a.nrows();
            if a.ncols() != n {
                bail!("plant.a: must be square, got {}x{}", a.nrows(), a.ncols());
            }
            let vec_field = |name: &str, v: &Option<Vec<f64>>| -> Result<DVector<f64>> {
                let v = v.as_ref().with_context(|| format!("{name}: required when no preset is given"))?;
                if v.len() != n {
                    bail!("{name}: has {} entries, expected {n}", v.len());
                }
                check_finite(name, v)?;
                Ok(DVector::from_column_slice(v))
            };
            let b = vec_field("plant.b", &raw.plant.b)?;
            let b_r = vec_field("plant.b_r", &raw.plant.b_r)?;
            let c = vec_field("plant.c", &raw.plant.c)?;
            PlantModel::new(a, b, b_r, c).map_err(|e| anyhow::anyhow!("plant: {e}"))?
        }
    };
    let n = plant.dim();

    // Uncertainty.
    let uncertainty = match &raw.uncertainty {
        None => {
            if raw.plant.preset.is_some() {
                UncertaintyModel::f16_matched_uncertainty()
            } else {
                UncertaintyModel::none()
            }
        }
        Some(u) => match u.kind.as_str() {
            "f16-bump" => {
                if let Some(theta) = &u.theta {
                    if theta.len() != 3 {
                        bail!("uncertainty.theta: has {} entries, expected 3 for kind \"f16-bump\"", theta.len());
                    }
                }
                match &u.theta {
                    None => UncertaintyModel::f16_matched_uncertainty(),
                    Some(theta) => {
                        let basis = UncertaintyModel::f16_matched_uncertainty();
                        let _ = basis;
                        // Same bump basis, custom parameters.
                        UncertaintyModel::new(
                            std::sync::Arc::new(|x: &DVector<f64>| {
                                let alpha = x[0];
                                let d = alpha - std::f64::consts::PI / 90.0;
                                DVector::from_column_slice(&[
                                    alpha,
                                    x[1],
                                    (-d * d / (2.0 * 0.0233 * 0.0233)).exp(),
                                ])
                            }),
                            DVector::from_column_slice(theta),
                        )
                        .map_err(|e| anyhow::anyhow!("uncertainty: {e}"))?
                    }
                }
            }
            "linear" => {
                let theta = u
                    .theta
                    .as_ref()
                    .context("uncertainty.theta: required for kind \"linear\"")?;
                if theta.len() != n {
                    bail!("uncertainty.theta: has {} entries, expected {n} for kind \"linear\"", theta.len());
                }
                check_finite("uncertainty.theta", theta)?;
                UncertaintyModel::linear_in_state(DVector::from_column_slice(theta))
                    .map_err(|e| anyhow::anyhow!("uncertainty: {e}"))?
            }
            "none" => UncertaintyModel::none(),
            other => bail!("uncertainty.kind: unknown kind {other:?} (expected \"f16-bump\", \"linear\", or \"none\")"),
        },
    };
    let p_dim = uncertainty.param_dim();

    // Baseline.
    let baseline = match (&raw.baseline.k_m, &raw.baseline.q_base) {
        (Some(k_m), None) => {
            if k_m.len() != n {
                bail!("baseline.k_m: has {} entries, expected {n}", k_m.len());
            }
            BaselineGains::from_gains(&plant, DVector::from_column_slice(k_m), raw.baseline.k_r)
                .map_err(|e| anyhow::anyhow!("baseline: {e}"))?
        }
        (None, Some(q_base)) => {
            let q = q_base.build("baseline.q_base", n)?;
            let r = raw.baseline.r_base.context("baseline.r_base: required with q_base")?;
            if r <= 0.0 {
                bail!("baseline.r_base = {r}: must be > 0");
            }
            BaselineGains::lqr(&plant, &q, r, raw.baseline.k_r)
                .map_err(|e| anyhow::anyhow!("baseline: {e}"))?
        }
        (Some(_), Some(_)) => bail!("baseline: give either k_m or q_base/r_base, not both"),
        (None, None) => bail!("baseline: requires k_m or q_base/r_base"),
    };

    // Coupling gain list.
    let gains = match raw.coupling.kind.as_str() {
        "P" => {
            let k_p = raw.coupling.k_p.as_ref().context("coupling.k_p: required for kind \"P\"")?;
            if k_p.is_empty() {
                bail!("coupling.k_p: must not be empty");
            }
            for (i, k) in k_p.iter().enumerate() {
                if *k < 0.0 {
                    bail!("coupling.k_p[{i}] = {k}: must be >= 0");
                }
            }
            k_p.iter().map(|k| GainSpec::P { k_p: *k }).collect::<Vec<_>>()
        }
        "PI" => {
            let k_p = raw.coupling.k_p.as_ref().context("coupling.k_p: required for kind \"PI\"")?;
            let k_i = raw.coupling.k_i.as_ref().context("coupling.k_i: required for kind \"PI\"")?;
            if k_p.len() != k_i.len() {
                bail!(
                    "coupling: k_p has {} entries but k_i has {} (paired per grid row)",
                    k_p.len(),
                    k_i.len()
                );
            }
            if k_p.is_empty() {
                bail!("coupling.k_p: must not be empty");
            }
            k_p.iter()
                .zip(k_i)
                .map(|(p, i)| GainSpec::Pi { k_p: *p, k_i: *i })
                .collect()
        }
        "general" => {
            let order = raw.coupling.order.context("coupling.order: required for kind \"general\"")?;
            let rows = raw.coupling.k_e.as_ref().context("coupling.k_e: required for kind \"general\"")?;
            let k_e = matrix_from_rows("coupling.k_e", rows, Some((n, n * (order + 1))))?;
            vec![GainSpec::General { order, k_e }]
        }
        other => bail!("coupling.kind: unknown kind {other:?} (expected \"P\", \"PI\", or \"general\")"),
    };

    // Allocation.
    if raw.allocation.mu.is_empty() {
        bail!("allocation.mu: must not be empty");
    }
    for (i, mu) in raw.allocation.mu.iter().enumerate() {
        if !(0.0..=1.0).contains(mu) {
            bail!("allocation.mu[{i}] = {mu}: must lie in [0, 1]");
        }
    }
    let w = match &raw.allocation.w {
        None => DMatrix::identity(n, n),
        Some(spec) => spec.build("allocation.w", n)?,
    };
    let p_norm = match &raw.allocation.p {
        NormSpec::Int(1) => NormExponent::One,
        NormSpec::Int(2) => NormExponent::Two,
        NormSpec::Name(s) if s == "inf" => NormExponent::Infinity,
        NormSpec::Int(other) => bail!("allocation.p = {other}: must be 1, 2, or \"inf\""),
        NormSpec::Name(other) => bail!("allocation.p = {other:?}: must be 1, 2, or \"inf\""),
    };

    // Adaptation.
    let adaptation_mode = match raw.adaptation.mode.as_str() {
        "direct" => AdaptationModeCfg::Direct,
        "bregman" => AdaptationModeCfg::Bregman,
        "rejection" => AdaptationModeCfg::Rejection,
        other => bail!("adaptation.mode: unknown mode {other:?} (expected \"direct\", \"bregman\", or \"rejection\")"),
    };
    let gamma = raw.adaptation.gamma.build("adaptation.gamma", p_dim)?;
    let l_max = gains
        .iter()
        .map(|g| match g {
            GainSpec::P { .. } => 0,
            GainSpec::Pi { .. } => 1,
            GainSpec::General { order, .. } => *order,
        })
        .max()
        .unwrap_or(0);
    let q_weight = raw.adaptation.q.build("adaptation.q", n * (l_max + 1))?;
    let phi_hessian = match &raw.adaptation.phi {
        None => None,
        Some(spec) => Some(spec.build("adaptation.phi", p_dim)?),
    };

    // Observer / learner.
    let observer = match &raw.observer {
        Some(o) if o.enabled => {
            if !(o.omega_f > 0.0) {
                bail!("observer.omega_f = {}: must be > 0", o.omega_f);
            }
            let scaling = match o.mode.as_deref() {
                None | Some("unity-dc-gain") => EstimatorScaling::UnityDcGain,
                Some("raw-filter") => EstimatorScaling::RawFilter,
                Some(other) => bail!("observer.mode: unknown mode {other:?} (expected \"unity-dc-gain\" or \"raw-filter\")"),
            };
            Some(ObserverCfg {
                omega_f: o.omega_f,
                scaling,
            })
        }
        _ => None,
    };
    let learner = match &raw.learner {
        Some(l) if l.enabled => {
            if l.lambda < 0.0 {
                bail!("learner.lambda = {}: must be >= 0", l.lambda);
            }
            Some(LearnerCfg { lambda: l.lambda })
        }
        _ => None,
    };
    match adaptation_mode {
        AdaptationModeCfg::Bregman => {
            if observer.is_none() || learner.is_none() {
                bail!("adaptation.mode = \"bregman\": requires [observer] and [learner] sections with enabled = true");
            }
        }
        AdaptationModeCfg::Rejection => {
            if observer.is_none() {
                bail!("adaptation.mode = \"rejection\": requires an [observer] section with enabled = true");
            }
        }
        AdaptationModeCfg::Direct => {}
    }

    // Integrator.
    let integ = &raw.integrator;
    if !(integ.h > 0.0) {
        bail!("integrator.h = {}: must be > 0", integ.h);
    }
    if !(integ.duration > 0.0) {
        bail!("integrator.duration = {}: must be > 0", integ.duration);
    }
    if !(integ.stride > 0.0) {
        bail!("integrator.stride = {}: must be > 0", integ.stride);
    }

    // Command profile (degrees in, radians out).
    if raw.command.segments.is_empty() {
        bail!("command.segments: must not be empty");
    }
    let mut segments = Vec::with_capacity(raw.command.segments.len());
    for (i, seg) in raw.command.segments.iter().enumerate() {
        check_finite(
            &format!("command.segments[{i}]"),
            &[seg.start, seg.end, seg.value_deg],
        )?;
        if !(seg.start < seg.end) {
            bail!(
                "command.segments[{i}]: start {} must be strictly less than end {}",
                seg.start,
                seg.end
            );
        }
        if i == 0 && seg.start != 0.0 {
            bail!("command.segments[0]: must start at 0, starts at {}", seg.start);
        }
        if i > 0 && seg.start != raw.command.segments[i - 1].end {
            bail!(
                "command.segments[{i}]: starts at {}, expected {} (contiguous coverage)",
                seg.start,
                raw.command.segments[i - 1].end
            );
        }
        segments.push((seg.start, seg.end, seg.value_deg.to_radians()));
    }
    let coverage_end = segments[segments.len() - 1].1;
    if coverage_end < integ.duration {
        bail!(
            "command.segments: cover [0, {coverage_end}) but integrator.duration = {} (contiguous coverage of the run is required)",
            integ.duration
        );
    }
    let command = CommandProfile::piecewise(segments).map_err(|e| anyhow::anyhow!("command: {e}"))?;

    // Output.
    let (out_dir, formats) = match &raw.output {
        None => (PathBuf::from("out"), vec![OutputFormat::Csv]),
        Some(o) => {
            let dir = PathBuf::from(o.dir.clone().unwrap_or_else(|| "out".into()));
            let formats = match &o.formats {
                None => vec![OutputFormat::Csv],
                Some(list) => {
                    let mut fs = Vec::new();
                    for f in list {
                        match f.as_str() {
                            "csv" => fs.push(OutputFormat::Csv),
                            "svg" => fs.push(OutputFormat::Svg),
                            other => bail!("output.formats: unknown format {other:?} (expected \"csv\" or \"svg\")"),
                        }
                    }
                    if !fs.contains(&OutputFormat::Csv) {
                        fs.push(OutputFormat::Csv);
                    }
                    fs
                }
            };
            (dir, formats)
        }
    };

    // Initial conditions.
    let vec_or_zeros = |name: &str, v: &Option<Vec<f64>>, dim: usize| -> Result<DVector<f64>> {
        match v {
            None => Ok(DVector::zeros(dim)),
            Some(v) => {
                if v.len() != dim {
                    bail!("{name}: has {} entries, expected {dim}", v.len());
                }
                check_finite(name, v)?;
                Ok(DVector::from_column_slice(v))
            }
        }
    };
    let (x0, x_m0, theta_hat0, x_hat0) = match &raw.initial {
        None => (
            DVector::zeros(n),
            DVector::zeros(n),
            DVector::zeros(p_dim),
            None,
        ),
        Some(init) => (
            vec_or_zeros("initial.x0", &init.x0, n)?,
            vec_or_zeros("initial.x_m0", &init.x_m0, n)?,
            vec_or_zeros("initial.theta_hat0", &init.theta_hat0, p_dim)?,
            match &init.x_hat0 {
                None => None,
                Some(v) => Some(vec_or_zeros("initial.x_hat0", &Some(v.clone()), n)?),
            },
        ),
    };

    Ok(ExperimentConfig {
        plant,
        uncertainty,
        baseline,
        gains,
        mu_values: raw.allocation.mu.clone(),
        w,
        p_norm,
        adaptation_mode,
        gamma,
        q_weight,
        phi_hessian,
        observer,
        learner,
        h: integ.h,
        duration: integ.duration,
        stride: integ.stride,
        command,
        out_dir,
        formats,
        x0,
        x_m0,
        x_hat0,
        theta_hat0,
    })
}

impl ExperimentConfig {
    /// All grid cells: gain list x mu list.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::with_capacity(self.gains.len() * self.mu_values.len());
        for gain_idx in 0..self.gains.len() {
            for mu_idx in 0..self.mu_values.len() {
                cells.push(GridCell { gain_idx, mu_idx });
            }
        }
        cells
    }

    /// Build the simulation setup of one cell.
    pub fn build_setup(&self, cell: GridCell) -> Result<SimSetup> {
        let gain = &self.gains[cell.gain_idx];
        let mu = self.mu_values[cell.mu_idx];
        let coupling = match gain {
            GainSpec::P { k_p } => CouplingDesign::proportional(&self.baseline.a_m, *k_p),
            GainSpec::Pi { k_p, k_i } => {
                CouplingDesign::proportional_integral(&self.baseline.a_m, *k_p, *k_i)
            }
            GainSpec::General { order, k_e } => {
                CouplingDesign::with_gain(&self.baseline.a_m, *order, k_e.clone())
            }
        }
        .map_err(|e| anyhow::anyhow!("coupling ({}): {e}", gain.label()))?;

        let dim = coupling.augmented_dim();
        if self.q_weight.nrows() != dim {
            bail!(
                "adaptation.q: is {}x{}, expected {dim}x{dim} for coupling {}",
                self.q_weight.nrows(),
                self.q_weight.ncols(),
                gain.label()
            );
        }
        let phi = match &self.phi_hessian {
            None => PhiPotential::Disabled,
            Some(h) => PhiPotential::Quadratic { hessian: h.clone() },
        };
        let adaptation = AdaptationConfig::new(
            self.gamma.clone(),
            self.q_weight.clone(),
            &coupling,
            phi,
        )
        .map_err(|e| anyhow::anyhow!("adaptation: {e}"))?;

        let allocation = AllocationPolicy::new(mu, self.w.clone(), self.p_norm)
            .map_err(|e| anyhow::anyhow!("allocation: {e}"))?;

        let observer = match &self.observer {
            None => None,
            Some(o) => Some(
                ObserverConfig::new(o.omega_f, self.plant.dim(), o.scaling)
                    .map_err(|e| anyhow::anyhow!("observer: {e}"))?,
            ),
        };
        let learner = match &self.learner {
            None => None,
            Some(l) => Some(
                FeatureExtender::gram_integrator(self.uncertainty.param_dim(), l.lambda)
                    .map_err(|e| anyhow::anyhow!("learner: {e}"))?,
            ),
        };
        let mode = match self.adaptation_mode {
            AdaptationModeCfg::Direct => ApproximationMode::DirectAdaptation,
            AdaptationModeCfg::Bregman => ApproximationMode::CompositeLearning,
            AdaptationModeCfg::Rejection => ApproximationMode::InstantaneousRejection,
        };

        Ok(SimSetup {
            plant: self.plant.clone(),
            uncertainty: self.uncertainty.clone(),
            baseline: self.baseline.clone(),
            coupling,
            allocation,
            adaptation,
            mode,
            observer,
            learner,
            command: self.command.clone(),
            h: self.h,
            duration: self.duration,
            output_stride: self.stride,
            x0: self.x0.clone(),
            x_m0: self.x_m0.clone(),
            x_hat0: self.x_hat0.clone(),
            theta_hat0: self.theta_hat0.clone(),
        })
    }

    /// Bandwidth-guideline warnings for the configured observer, one per
    /// grid gain where the separation is violated.
    pub fn observer_warnings(&self) -> Vec<String> {
        let Some(obs) = &self.observer else {
            return Vec::new();
        };
        let Ok(cfg) = ObserverConfig::new(obs.omega_f, self.plant.dim(), obs.scaling) else {
            return Vec::new();
        };
        // Spectral bound of A_m from its Lyapunov-certified norm proxy.
        let a_m_bound = self.baseline.a_m.norm();
        let mut warnings = Vec::new();
        for gain in &self.gains {
            let coupling = match gain {
                GainSpec::P { k_p } => CouplingDesign::proportional(&self.baseline.a_m, *k_p),
                GainSpec::Pi { k_p, k_i } => {
                    CouplingDesign::proportional_integral(&self.baseline.a_m, *k_p, *k_i)
                }
                GainSpec::General { order, k_e } => {
                    CouplingDesign::with_gain(&self.baseline.a_m, *order, k_e.clone())
                }
            };
            let Ok(coupling) = coupling else { continue };
            if let Some(omega_e) = coupling.bandwidth_estimate() {
                if let Some(w) = cfg.bandwidth_warning(omega_e, a_m_bound) {
                    warnings.push(format!("gain {}: {w}", gain.label()));
                }
            }
        }
        warnings
    }
}
