//! Minimal SVG line plots: one figure per reported quantity, one panel per
//! grid cell (gain rows, mu columns).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sync_mrac::sim::SimTrajectory;

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 46.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Figure {
    file: &'static str,
    title: &'static str,
    /// Minimum state dimension the extractors index into.
    min_state_dim: usize,
    /// (label, extractor) pairs drawn in each panel.
    series: Vec<(&'static str, fn(&sync_mrac::sim::Sample) -> f64)>,
}

fn rad2deg(v: f64) -> f64 {
    v * 180.0 / std::f64::consts::PI
}

fn figures() -> Vec<Figure> {
    vec![
        Figure {
            file: "fig_alpha.svg",
            title: "angle of attack [deg]",
            min_state_dim: 1,
            series: vec![
                ("plant", |s| rad2deg(s.x[0])),
                ("virtual", |s| rad2deg(s.x_m[0])),
                ("ideal", |s| rad2deg(s.x_id[0])),
            ],
        },
        Figure {
            file: "fig_q.svg",
            title: "pitch rate [deg/s]",
            min_state_dim: 2,
            series: vec![
                ("plant", |s| rad2deg(s.x[1])),
                ("virtual", |s| rad2deg(s.x_m[1])),
                ("ideal", |s| rad2deg(s.x_id[1])),
            ],
        },
        Figure {
            file: "fig_input.svg",
            title: "elevator deflection [deg]",
            min_state_dim: 0,
            series: vec![
                ("total", |s| s.u),
                ("baseline", |s| s.u_base),
                ("adaptive", |s| s.u_ad),
                ("coupling", |s| s.u_c),
            ],
        },
        Figure {
            file: "fig_uncertainty.svg",
            title: "uncertainty and estimate",
            min_state_dim: 0,
            series: vec![
                ("true", |s| s.delta),
                ("estimate", |s| s.delta_hat),
            ],
        },
        Figure {
            file: "fig_norm_e.svg",
            title: "||e||",
            min_state_dim: 0,
            series: vec![("||e||", |s| s.norm_e)],
        },
        Figure {
            file: "fig_norm_edot.svg",
            title: "||de/dt||",
            min_state_dim: 0,
            series: vec![("||de/dt||", |s| s.norm_edot)],
        },
        Figure {
            file: "fig_norm_theta_tilde.svg",
            title: "||theta~||",
            min_state_dim: 0,
            series: vec![("||theta~||", |s| s.norm_theta_tilde)],
        },
        Figure {
            file: "fig_norm_theta_hat_dot.svg",
            title: "||dtheta^/dt||",
            min_state_dim: 0,
            series: vec![("||dtheta^/dt||", |s| s.norm_theta_hat_dot)],
        },
    ]
}

/// Cell data handed to the plotter: row label, column label, trajectory.
pub struct PlotCell<'a> {
    pub gain_label: String,
    pub mu: f64,
    pub gain_idx: usize,
    pub mu_idx: usize,
    pub traj: &'a SimTrajectory,
}

fn polyline(points: &[(f64, f64)], x0: f64, y0: f64, scale: &PanelScale, color: &str) -> String {
    let mut d = String::with_capacity(points.len() * 12);
    for (i, (t, v)) in points.iter().enumerate() {
        let px = x0 + (t - scale.t_min) / (scale.t_max - scale.t_min) * PANEL_W;
        let py = y0 + PANEL_H - (v - scale.v_min) / (scale.v_max - scale.v_min) * PANEL_H;
        let _ = write!(d, "{}{px:.2},{py:.2}", if i == 0 { "" } else { " " });
    }
    format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{d}\"/>\n")
}

struct PanelScale {
    t_min: f64,
    t_max: f64,
    v_min: f64,
    v_max: f64,
}

/// Write all figures for the supplied cells; returns the file paths.
pub fn write_figures(dir: &Path, cells: &[PlotCell<'_>]) -> Result<Vec<PathBuf>> {
    let n_rows = cells.iter().map(|c| c.gain_idx).max().map_or(0, |m| m + 1);
    let n_cols = cells.iter().map(|c| c.mu_idx).max().map_or(0, |m| m + 1);
    let state_dim = cells
        .iter()
        .flat_map(|c| c.traj.samples.first())
        .map(|s| s.x.len())
        .min()
        .unwrap_or(0);
    let mut written = Vec::new();
    for fig in figures() {
        if fig.min_state_dim > state_dim {
            continue;
        }
        let width = MARGIN + n_cols as f64 * (PANEL_W + MARGIN);
        let height = MARGIN + n_rows as f64 * (PANEL_H + MARGIN) + 20.0;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
             viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <text x=\"{MARGIN}\" y=\"18\" font-size=\"14\">{}</text>\n",
            fig.title
        );
        for cell in cells {
            let x0 = MARGIN + cell.mu_idx as f64 * (PANEL_W + MARGIN);
            let y0 = MARGIN + cell.gain_idx as f64 * (PANEL_H + MARGIN);
            let samples = &cell.traj.samples;
            if samples.is_empty() {
                continue;
            }
            // Downsample to keep files small.
            let step = (samples.len() / 800).max(1);
            let mut v_min = f64::INFINITY;
            let mut v_max = f64::NEG_INFINITY;
            let mut tracks: Vec<Vec<(f64, f64)>> = Vec::with_capacity(fig.series.len());
            for (_, extract) in &fig.series {
                let pts: Vec<(f64, f64)> = samples
                    .iter()
                    .step_by(step)
                    .map(|s| (s.t, extract(s)))
                    .collect();
                for (_, v) in &pts {
                    v_min = v_min.min(*v);
                    v_max = v_max.max(*v);
                }
                tracks.push(pts);
            }
            if !(v_max > v_min) {
                let pad = 1.0 + v_max.abs() * 0.1;
                v_min -= pad;
                v_max += pad;
            } else {
                let pad = 0.05 * (v_max - v_min);
                v_min -= pad;
                v_max += pad;
            }
            let scale = PanelScale {
                t_min: samples[0].t,
                t_max: samples[samples.len() - 1].t,
                v_min,
                v_max,
            };
            let _ = write!(
                svg,
                "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" \
                 fill=\"none\" stroke=\"#888\" stroke-width=\"0.7\"/>\n\
                 <text x=\"{x0}\" y=\"{:.1}\">{} mu={}</text>\n\
                 <text x=\"{x0}\" y=\"{:.1}\" font-size=\"9\">[{:.3}, {:.3}]</text>\n",
                y0 - 6.0,
                cell.gain_label,
                cell.mu,
                y0 + PANEL_H + 12.0,
                scale.v_min,
                scale.v_max,
            );
            for (i, pts) in tracks.iter().enumerate() {
                svg.push_str(&polyline(pts, x0, y0, &scale, COLORS[i % COLORS.len()]));
            }
        }
        // Legend.
        let mut lx = MARGIN;
        for (i, (label, _)) in fig.series.iter().enumerate() {
            let _ = writeln!(
                svg,
                "<rect x=\"{lx}\" y=\"{:.1}\" width=\"12\" height=\"3\" fill=\"{}\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\">{label}</text>",
                height - 12.0,
                COLORS[i % COLORS.len()],
                lx + 16.0,
                height - 7.0,
            );
            lx += 110.0;
        }
        svg.push_str("</svg>\n");
        let path = dir.join(fig.file);
        std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
