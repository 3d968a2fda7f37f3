//! Trajectory and summary CSV emission (UTF-8, LF, header row).
//!
//! Numbers are printed in Rust's shortest round-trip form, so re-parsing a
//! file reproduces the in-memory values exactly. Three-state plants get the
//! documented angle-of-attack column names with degree conversion; other
//! dimensions fall back to generic radian-valued state columns.

use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use sync_mrac::sim::{RunMetrics, SimTrajectory};

fn push_num(line: &mut String, v: f64) {
    line.push(',');
    line.push_str(&format!("{v}"));
}

/// Column header of a trajectory file for state dimension `n`.
pub fn trajectory_header(n: usize) -> String {
    if n == 3 {
        "t,alpha_deg,q_dps,e_alphaI,xm_alpha_deg,xm_q_dps,xm_e_alphaI,\
         xid_alpha_deg,xid_q_dps,xid_e_alphaI,delta_e_deg,u_base,u_ad,u_c,\
         Delta,Delta_hat,norm_e,norm_edot,norm_theta_tilde,norm_theta_hat_dot,V"
            .replace(' ', "")
    } else {
        let mut h = String::from("t");
        for tag in ["x", "xm", "xid"] {
            for i in 1..=n {
                h.push_str(&format!(",{tag}_{i}"));
            }
        }
        h.push_str(",u,u_base,u_ad,u_c,Delta,Delta_hat,norm_e,norm_edot,norm_theta_tilde,norm_theta_hat_dot,V");
        h
    }
}

pub fn write_trajectory(path: &Path, traj: &SimTrajectory, n: usize) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating trajectory file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", trajectory_header(n))?;
    let deg = 180.0 / std::f64::consts::PI;
    for s in &traj.samples {
        let mut line = format!("{}", s.t);
        if n == 3 {
            for v in [
                s.x[0] * deg,
                s.x[1] * deg,
                s.x[2],
                s.x_m[0] * deg,
                s.x_m[1] * deg,
                s.x_m[2],
                s.x_id[0] * deg,
                s.x_id[1] * deg,
                s.x_id[2],
            ] {
                push_num(&mut line, v);
            }
        } else {
            for vec in [&s.x, &s.x_m, &s.x_id] {
                for i in 0..n {
                    push_num(&mut line, vec[i]);
                }
            }
        }
        for v in [
            s.u,
            s.u_base,
            s.u_ad,
            s.u_c,
            s.delta,
            s.delta_hat,
            s.norm_e,
            s.norm_edot,
            s.norm_theta_tilde,
            s.norm_theta_hat_dot,
            s.v_lyap,
        ] {
            push_num(&mut line, v);
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a trajectory CSV back into its header and numeric rows.
pub fn read_trajectory(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading trajectory file {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .context("trajectory file is empty")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.parse::<f64>()).collect();
        rows.push(row.with_context(|| format!("parsing row {}", i + 2))?);
    }
    Ok((header, rows))
}

/// One summary row.
pub struct SummaryRow {
    pub k_p: f64,
    pub k_i: Option<f64>,
    pub mu: f64,
    pub metrics: RunMetrics,
}

pub const SUMMARY_HEADER: &str = "k_p,k_i,mu,diverged,peak_abs_output_rad,rms_tracking_error_rad,\
input_total_variation,peak_theta_rate,final_theta_error,lyapunov_monotone,\
lyapunov_max_violation,vdot_match_max_scaled_err";

/// Write the metrics summary, sorted by (k_p, mu).
pub fn write_summary(path: &Path, rows: &mut [SummaryRow]) -> Result<()> {
    rows.sort_by(|a, b| {
        (a.k_p, a.mu)
            .partial_cmp(&(b.k_p, b.mu))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating summary file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{SUMMARY_HEADER}")?;
    for row in rows.iter() {
        let m = &row.metrics;
        let mut line = format!("{}", row.k_p);
        line.push(',');
        match row.k_i {
            Some(k_i) => line.push_str(&format!("{k_i}")),
            None => line.push_str(""),
        }
        line.push(',');
        line.push_str(&format!("{}", row.mu));
        line.push(',');
        line.push_str(if m.diverged { "true" } else { "false" });
        for v in [
            m.peak_abs_output,
            m.rms_tracking_error,
            m.input_total_variation,
            m.peak_theta_rate,
            m.final_theta_error,
        ] {
            push_num(&mut line, v);
        }
        line.push(',');
        line.push_str(if m.lyapunov_monotone { "true" } else { "false" });
        push_num(&mut line, m.lyapunov_max_violation);
        push_num(&mut line, m.vdot_match_max_scaled_err);
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
