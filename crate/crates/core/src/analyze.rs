//! Post-processing of trajectories: functional decay checks, empirical decay
//! envelopes, rational-bound checks and CSV/SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::certify::{rational_bound, StabilityParams};
use crate::ddesim::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayReport {
    pub samples: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// Largest `D⁺V + λV - tol·(1 + V)`; negative when nothing is violated.
    pub max_violation: f64,
}

/// Checks `V̇ ≤ -rate·V` with forward differences on a uniform grid, flagging
/// indices where `D⁺V + λ_h·V > tol·(1 + V)`.
///
/// `λ_h = (1 - e^{-rate·h})/h` is the one-step equivalent of `rate`, so an
/// exact exponential with that rate is never flagged at any step size.
pub fn verify_decay(series: &[f64], step: f64, rate: f64, tol: f64) -> Result<DecayReport> {
    if series.len() < 3 {
        return Err(Error::ContractViolation(format!(
            "decay check needs at least 3 samples, got {}",
            series.len()
        )));
    }
    if !(step > 0.0) || !(rate >= 0.0) {
        return Err(Error::ContractViolation(format!(
            "need step > 0 and rate >= 0, got step = {step}, rate = {rate}"
        )));
    }
    let discrete_rate = -(-rate * step).exp_m1() / step;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for w in series.windows(2) {
        let (v, v_next) = (w[0], w[1]);
        let excess = (v_next - v) / step + discrete_rate * v - tol * (1.0 + v.abs());
        if excess > 0.0 {
            violations += 1;
        }
        worst = worst.max(excess);
    }
    let samples = series.len() - 1;
    Ok(DecayReport {
        samples,
        violations,
        violation_fraction: violations as f64 / samples as f64,
        max_violation: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnvelopeModel {
    Exponential,
    Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    /// `λ` in `y ≈ C e^{-λt}`.
    pub exp_rate: f64,
    pub exp_r_squared: f64,
    /// `p` in `y ≈ C (1+t)^{-p}`.
    pub rational_exponent: f64,
    pub rational_r_squared: f64,
    pub preferred: EnvelopeModel,
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r²)`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res <= f64::EPSILON {
        1.0
    } else {
        0.0
    };
    (intercept, slope, r2)
}

/// Fits exponential and rational envelopes to a positive series.
pub fn fit_envelope(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(Error::ContractViolation("times and values differ in length".into()));
    }
    if values.len() < 10 {
        return Err(Error::ContractViolation(format!(
            "envelope fit needs at least 10 samples, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::ContractViolation(format!(
            "envelope fit needs positive samples; sample {i} is {}",
            values[i]
        )));
    }
    if times.iter().any(|t| !(*t > -1.0)) {
        return Err(Error::ContractViolation("times must exceed -1".into()));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (_, exp_slope, exp_r2) = linear_fit(times, &logs);
    let log_t: Vec<f64> = times.iter().map(|t| t.ln_1p()).collect();
    let (_, rat_slope, rat_r2) = linear_fit(&log_t, &logs);
    Ok(DecayFit {
        exp_rate: -exp_slope,
        exp_r_squared: exp_r2,
        rational_exponent: -rat_slope,
        rational_r_squared: rat_r2,
        preferred: if rat_r2 > exp_r2 {
            EnvelopeModel::Rational
        } else {
            EnvelopeModel::Exponential
        },
    })
}

/// `‖x(t_i)‖ ≤ bound(‖φ‖∞, t_i)·(1 + tol)` for every sample with `t ≥ 0`.
pub fn bound_check(traj: &Trajectory, params: &StabilityParams, tol: f64) -> bool {
    if traj.is_empty() {
        return true;
    }
    let norm_phi = traj.norm_phi();
    traj.norm_x()
        .iter()
        .zip(&traj.times)
        .skip(traj.origin)
        .all(|(nx, &t)| *nx <= rational_bound(params, norm_phi, t) * (1.0 + tol))
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header and rows from `t = 0` onwards:
/// `t,x1..xn[,xh1..xhn][,u],norm_x,norm_err`. Without an observer `norm_err`
/// is written as 0.
pub fn csv_string(traj: &Trajectory) -> String {
    let n = traj.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    if traj.xhat.is_some() {
        header.extend((1..=n).map(|i| format!("xh{i}")));
    }
    if traj.u.is_some() {
        header.push("u".into());
    }
    header.push("norm_x".into());
    header.push("norm_err".into());

    let norm_x = traj.norm_x();
    let norm_err = traj.norm_err();
    let mut out = header.join(",");
    out.push('\n');
    for i in traj.origin..traj.len() {
        let mut fields = vec![fmt_value(traj.times[i])];
        fields.extend(traj.x[i].iter().map(|v| fmt_value(*v)));
        if let Some(xh) = &traj.xhat {
            fields.extend(xh[i].iter().map(|v| fmt_value(*v)));
        }
        if let Some(u) = &traj.u {
            fields.push(fmt_value(u[i]));
        }
        fields.push(fmt_value(norm_x[i]));
        fields.push(fmt_value(norm_err.as_ref().map_or(0.0, |e| e[i])));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    fs::write(path, csv_string(traj)).map_err(|e| Error::io(path, e))
}

/// Parsed trajectory CSV: column names and rows of values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Same layout as [`csv_string`].
    pub fn to_csv_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Validation("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("line {}: {e}", lineno + 2)))?;
        if row.len() != header.len() {
            return Err(Error::Validation(format!(
                "line {} has {} fields, header has {}",
                lineno + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Self-contained SVG polyline chart. With `log_scale`, non-positive values
/// are dropped.
pub fn svg_string(series: &[PlotSeries], title: &str, log_scale: bool) -> Result<String> {
    let (w, h, margin) = (800.0, 480.0, 60.0);
    let transform = |v: f64| if log_scale { v.log10() } else { v };
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .filter(|(t, v)| t.is_finite() && v.is_finite() && (!log_scale || **v > 0.0))
                .map(|(t, v)| (*t, transform(*v)))
                .collect()
        })
        .collect();
    let all = points.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::NoData);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{margin}" y="{margin}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * margin,
        h - 2.0 * margin
    );
    let y_label = |y: f64| if log_scale { format!("1e{y:.1}") } else { format!("{y:.3e}") };
    let axis_labels = [
        (margin, h - margin + 18.0, "start", format!("{x0:.3}")),
        (w - margin, h - margin + 18.0, "end", format!("{x1:.3}")),
        (margin - 4.0, h - margin, "end", y_label(y0)),
        (margin - 4.0, margin + 4.0, "end", y_label(y1)),
    ];
    for (x, y, anchor, text) in axis_labels {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{text}</text>"#
        );
    }
    for (i, (s, pts)) in series.iter().zip(&points).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            w - margin - 140.0,
            margin + 18.0 * (i as f64 + 1.0),
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_plot(series: &[PlotSeries], title: &str, log_scale: bool, path: &Path) -> Result<()> {
    let svg = svg_string(series, title, log_scale)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: f64, t_end: f64) -> Vec<f64> {
        let n = (t_end / h).round() as usize;
        (0..=n).map(|i| i as f64 * h).collect()
    }

    #[test]
    fn decay_exact_exponential_passes() {
        let ts = grid(0.01, 5.0);
        let v: Vec<f64> = ts.iter().map(|t| (-2.0 * t).exp()).collect();
        let r = verify_decay(&v, 0.01, 2.0, 1e-3).unwrap();
        assert_eq!(r.violation_fraction, 0.0);
    }

    #[test]
    fn decay_zero_series_passes() {
        let r = verify_decay(&[0.0; 50], 0.01, 7.0, 0.0).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn decay_too_slow_is_flagged() {
        let ts = grid(0.01, 5.0);
        let v: Vec<f64> = ts.iter().map(|t| (-t).exp()).collect();
        let r = verify_decay(&v, 0.01, 2.0, 1e-3).unwrap();
        assert!(r.violation_fraction > 0.99, "{r:?}");
        assert!(verify_decay(&[1.0, 0.5], 0.01, 1.0, 0.0).is_err());
    }

    #[test]
    fn fit_planted_models() {
        let ts = grid(0.01, 5.0);
        let y: Vec<f64> = ts.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let fit = fit_envelope(&ts, &y).unwrap();
        assert!((fit.exp_rate - 2.0).abs() <= 0.1);
        assert_eq!(fit.preferred, EnvelopeModel::Exponential);

        let ts = grid(0.05, 50.0);
        let y: Vec<f64> = ts.iter().map(|t| (1.0 + t).powi(-3)).collect();
        let fit = fit_envelope(&ts, &y).unwrap();
        assert!((fit.rational_exponent - 3.0).abs() <= 0.15);
        assert_eq!(fit.preferred, EnvelopeModel::Rational);

        let fit = fit_envelope(&ts, &vec![1.0; ts.len()]).unwrap();
        assert!(fit.exp_rate.abs() < 1e-12 && fit.rational_exponent.abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let ts = grid(0.1, 2.0);
        let mut y = vec![1.0; ts.len()];
        y[3] = 0.0;
        assert!(fit_envelope(&ts, &y).is_err());
        assert!(fit_envelope(&ts[..5], &y[..5]).is_err());
    }

    fn tiny_trajectory() -> Trajectory {
        Trajectory {
            step: 0.5,
            tau: 1.0,
            origin: 0,
            theta: 2.0,
            times: vec![0.0, 0.5],
            x: vec![vec![1.0, -2.0], vec![0.5, 0.1]],
            xhat: None,
            u: Some(vec![0.0, 0.3]),
        }
    }

    #[test]
    fn csv_layout() {
        let csv = csv_string(&tiny_trajectory());
        let lines: Vec<&str> = csv.split_inclusive('\n').collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "t,x1,x2,u,norm_x,norm_err\n");
        assert!(lines[1].starts_with("0.0000000000000000e0,1.0000000000000000e0,-2.0000000000000000e0,"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let mut traj = tiny_trajectory();
        traj.x[1] = vec![std::f64::consts::PI, 1.0 / 3.0];
        let text = csv_string(&traj);
        let table = parse_csv(&text).unwrap();
        assert_eq!(table.column("x1").unwrap()[1], std::f64::consts::PI);
        assert_eq!(table.to_csv_string(), text);
    }

    #[test]
    fn plot_needs_data() {
        assert!(matches!(svg_string(&[], "empty", false), Err(Error::NoData)));
        let s = PlotSeries {
            label: "neg".into(),
            times: vec![0.0, 1.0],
            values: vec![-1.0, 0.0],
        };
        assert!(matches!(svg_string(std::slice::from_ref(&s), "log", true), Err(Error::NoData)));
        let svg = svg_string(&[s], "lin", false).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    }

    #[test]
    fn bound_check_zero_trajectory() {
        let traj = Trajectory {
            x: vec![vec![0.0, 0.0]; 2],
            ..tiny_trajectory()
        };
        let p = StabilityParams::new(1.0, 1.0, 1.0, 2.0, 2.0, 1.0).unwrap();
        assert!(bound_check(&traj, &p, 0.0));
    }
}
