use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ratstab_core::analyze::{self, fit_envelope, read_csv, DecayFit, PlotSeries};
use ratstab_core::certify::{
    find_theta_min, select_alpha_observer_based, select_alpha_output_feedback, AlphaSelection, ConditionReport,
    OutputFeedbackAlpha,
};
use ratstab_core::ddesim::{run_scenario, Trajectory};
use ratstab_core::matops::{lyapunov_residual, norm2, solve_lyapunov, LyapunovCertificate, Matrix};
use ratstab_core::sysmodel::estimate_lipschitz;
use ratstab_core::{Error, Result};
use serde::Serialize;

use crate::config::{Mode, Overrides, Resolved, RunConfig};

pub const LIPSCHITZ_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass = 0,
    Fail = 1,
    InputError = 2,
}

impl Status {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn of_error(err: &Error) -> Status {
        match err {
            Error::NoFeasibleTheta { .. } | Error::ConditionsNotSatisfied(_) | Error::Diverged { .. } => Status::Fail,
            _ => Status::InputError,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(io_err(Path::new("<stdout>")))
}

macro_rules! say {
    ($out:expr) => {
        say($out, format_args!(""))
    };
    ($out:expr, $($arg:tt)*) => {
        say($out, format_args!($($arg)*))
    };
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Resolved> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    cfg.resolve()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.dim()).map(|i| m.row(i).to_vec()).collect()
}

/// Margins that must be positive for a mode to be certified.
pub fn required_margins(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Observer => &["a", "b"],
        Mode::StateFeedback => &["c", "d"],
        Mode::OutputFeedback => &["c", "d", "output_feedback"],
        Mode::ObserverBased | Mode::OpenLoop => &["a", "b", "c", "d"],
    }
}

fn margin_ok(report: &ConditionReport, name: &str) -> bool {
    match name {
        "a" => report.flags.a,
        "b" => report.flags.b,
        "c" => report.flags.c,
        "d" => report.flags.d,
        _ => report.flags.output_feedback,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovSummary {
    pub solution: Vec<Vec<f64>>,
    pub residual: f64,
    pub spectral_norm: f64,
    pub min_eig: f64,
}

impl From<&LyapunovCertificate> for LyapunovSummary {
    fn from(c: &LyapunovCertificate) -> Self {
        LyapunovSummary {
            solution: rows(&c.solution),
            residual: c.residual,
            spectral_norm: c.spectral_norm,
            min_eig: c.min_eig,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub mode: String,
    pub theta: f64,
    pub tau: f64,
    pub lipschitz_k: f64,
    pub l_scaled: Vec<f64>,
    pub k_scaled: Vec<f64>,
    /// Solution for the observer matrix `A + LC`.
    pub p: LyapunovSummary,
    /// Solution for the feedback matrix `A + BK`.
    pub s: LyapunovSummary,
    pub margins: ConditionReport,
    pub required: Vec<String>,
    pub certified: bool,
    pub alpha_margin: f64,
    pub alpha_observer_based: Option<AlphaSelection>,
    pub alpha_output_feedback: Option<OutputFeedbackAlpha>,
    pub lipschitz_estimate: f64,
    pub lipschitz_samples: usize,
    pub seed: u64,
}

pub fn build_certificate(r: &Resolved, alpha_margin: f64) -> Result<Certificate> {
    let p = solve_lyapunov(&r.gains.observer_matrix()?)?;
    let s = solve_lyapunov(&r.gains.feedback_matrix()?)?;
    let theta = r.gains.theta();
    let k = r.system.lipschitz_k;
    let report = ConditionReport::evaluate(theta, r.system.tau, p.spectral_norm, s.spectral_norm, k);
    let mode = r.config.scenario.mode;
    let required = required_margins(mode);
    let certified = required.iter().all(|m| margin_ok(&report, m));
    let alpha_ob = select_alpha_observer_based(theta, report.a, report.c, s.spectral_norm, norm2(r.gains.k()), alpha_margin).ok();
    let alpha_of = select_alpha_output_feedback(report.c, report.d, k, p.spectral_norm, alpha_margin).ok();
    let estimate = estimate_lipschitz(r.system.f.as_ref(), &r.system.domain_box, LIPSCHITZ_SAMPLES, r.config.sim.seed)?;
    Ok(Certificate {
        mode: mode.to_string(),
        theta,
        tau: r.system.tau,
        lipschitz_k: k,
        l_scaled: r.gains.l_scaled().to_vec(),
        k_scaled: r.gains.k_scaled().to_vec(),
        p: (&p).into(),
        s: (&s).into(),
        margins: report,
        required: required.iter().map(|s| s.to_string()).collect(),
        certified,
        alpha_margin,
        alpha_observer_based: alpha_ob,
        alpha_output_feedback: alpha_of,
        lipschitz_estimate: estimate,
        lipschitz_samples: LIPSCHITZ_SAMPLES,
        seed: r.config.sim.seed,
    })
}

fn fmt_matrix(m: &[Vec<f64>]) -> String {
    let inner: Vec<String> = m
        .iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", inner.join(", "))
}

fn pass_mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn print_margins(out: &mut dyn Write, report: &ConditionReport) -> Result<()> {
    say!(out, "  a (observer)        = {:+.6} {}", report.a, pass_mark(report.flags.a))?;
    say!(out, "  b (observer)        = {:+.6} {}", report.b, pass_mark(report.flags.b))?;
    say!(out, "  c (feedback)        = {:+.6} {}", report.c, pass_mark(report.flags.c))?;
    say!(out, "  d (feedback)        = {:+.6} {}", report.d, pass_mark(report.flags.d))?;
    say!(out, "  output feedback     = {:+.6} {}", report.of_margin, pass_mark(report.flags.output_feedback))
}

fn print_certificate(out: &mut dyn Write, c: &Certificate) -> Result<()> {
    say!(out, "mode: {}  theta = {}  tau = {}  k = {}", c.mode, c.theta, c.tau, c.lipschitz_k)?;
    say!(out, "L(theta) = {:?}  K(theta) = {:?}", c.l_scaled, c.k_scaled)?;
    say!(out, "P = {}  residual {:.3e}  ||P|| = {:.6}", fmt_matrix(&c.p.solution), c.p.residual, c.p.spectral_norm)?;
    say!(out, "S = {}  residual {:.3e}  ||S|| = {:.6}", fmt_matrix(&c.s.solution), c.s.residual, c.s.spectral_norm)?;
    say!(out, "margins:")?;
    print_margins(out, &c.margins)?;
    match &c.alpha_observer_based {
        Some(a) => say!(out, "alpha (observer-based): {:.6e} (threshold {:.6e})", a.alpha, a.bound)?,
        None => say!(out, "alpha (observer-based): unavailable, needs a > 0 and c > 0")?,
    }
    match &c.alpha_output_feedback {
        Some(OutputFeedbackAlpha::Bounded(a)) => {
            say!(out, "alpha (output feedback): {:.6} (upper bound {:.6})", a.alpha, a.bound)?
        }
        Some(OutputFeedbackAlpha::Unconstrained) => say!(out, "alpha (output feedback): unconstrained (k = 0)")?,
        None => say!(out, "alpha (output feedback): unavailable, needs c > 0 and d > 0")?,
    }
    say!(
        out,
        "sampled Lipschitz estimate over the domain box: {:.4} (declared k = {}, seed {})",
        c.lipschitz_estimate,
        c.lipschitz_k,
        c.seed
    )?;
    if c.lipschitz_estimate > c.lipschitz_k {
        say!(out, "  note: the estimate exceeds the declared k; the margins hold only where k bounds f")?;
    }
    say!(
        out,
        "required margins [{}]: {}",
        c.required.join(", "),
        if c.certified { "CERTIFIED" } else { "NOT CERTIFIED" }
    )
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn cmd_certify(r: &Resolved, alpha_margin: f64, out: &mut dyn Write) -> Result<Status> {
    let cert = build_certificate(r, alpha_margin)?;
    print_certificate(out, &cert)?;
    let path = write_json(&r.config.output.directory, "certificate.json", &cert)?;
    say!(out, "wrote {}", path.display())?;
    Ok(if cert.certified { Status::Pass } else { Status::Fail })
}

#[derive(Debug, Clone, Serialize)]
pub struct Synthesis {
    pub theta_min: f64,
    pub theta_max: f64,
    pub tol: f64,
    pub norm_p: f64,
    pub norm_s: f64,
    pub margins: ConditionReport,
}

pub fn synthesize(r: &Resolved, theta_max: f64, tol: f64) -> Result<Synthesis> {
    let norm_p = solve_lyapunov(&r.gains.observer_matrix()?)?.spectral_norm;
    let norm_s = solve_lyapunov(&r.gains.feedback_matrix()?)?.spectral_norm;
    let (tau, k) = (r.system.tau, r.system.lipschitz_k);
    let theta_min = find_theta_min(tau, norm_p, norm_s, k, theta_max, tol)?;
    Ok(Synthesis {
        theta_min,
        theta_max,
        tol,
        norm_p,
        norm_s,
        margins: ConditionReport::evaluate(theta_min, tau, norm_p, norm_s, k),
    })
}

pub fn cmd_synthesize(r: &Resolved, theta_max: f64, tol: f64, out: &mut dyn Write) -> Result<Status> {
    let s = match synthesize(r, theta_max, tol) {
        Ok(s) => s,
        Err(Error::NoFeasibleTheta { theta_max }) => {
            say!(out, "no theta in [1, {theta_max}] satisfies all margins (k = {})", r.system.lipschitz_k)?;
            return Ok(Status::Fail);
        }
        Err(e) => return Err(e),
    };
    say!(out, "||P|| = {:.6}  ||S|| = {:.6}  k = {}  tau = {}", s.norm_p, s.norm_s, r.system.lipschitz_k, r.system.tau)?;
    say!(out, "theta* = {:.6} (tol {}, searched [1, {}])", s.theta_min, s.tol, s.theta_max)?;
    say!(out, "margins at theta*:")?;
    print_margins(out, &s.margins)?;
    let path = write_json(&r.config.output.directory, "synthesis.json", &s)?;
    say!(out, "wrote {}", path.display())?;
    Ok(Status::Pass)
}

/// Positive samples of `series` at `t ≥ from`.
fn tail_fit(traj: &Trajectory, series: &[f64], from: f64) -> Result<DecayFit> {
    let (ts, ys): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(series)
        .filter(|(t, y)| **t >= from && **y > 0.0)
        .map(|(t, y)| (*t, *y))
        .unzip();
    fit_envelope(&ts, &ys)
}

fn print_fit(out: &mut dyn Write, label: &str, fit: Result<DecayFit>) -> Result<()> {
    match fit {
        Ok(f) => say!(
            out,
            "  {label}: exp rate {:.4} (r2 {:.4}), rational exponent {:.4} (r2 {:.4}), preferred {:?}",
            f.exp_rate,
            f.exp_r_squared,
            f.rational_exponent,
            f.rational_r_squared,
            f.preferred
        ),
        Err(e) => say!(out, "  {label}: no fit ({e})"),
    }
}

pub struct SimulationArtifacts {
    pub trajectory: Trajectory,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn simulate(r: &Resolved) -> Result<SimulationArtifacts> {
    let traj = run_scenario(&r.system, &r.gains, &r.scenario, &r.phi, &r.phi_hat, r.config.sim.h, r.config.sim.t_end)?;
    let dir = &r.config.output.directory;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join("trajectory.csv");
    analyze::emit_csv(&traj, &csv)?;
    let mut plots = Vec::new();
    if r.config.output.emit_plots {
        let start = traj.origin;
        let times = traj.times[start..].to_vec();
        let mut norms = vec![PlotSeries {
            label: "|x|".into(),
            times: times.clone(),
            values: traj.norm_x()[start..].to_vec(),
        }];
        if let Some(err) = traj.norm_err() {
            norms.push(PlotSeries {
                label: "|xhat - x|".into(),
                times: times.clone(),
                values: err[start..].to_vec(),
            });
        }
        let path = dir.join("norms.svg");
        match analyze::emit_plot(&norms, "norms (log scale)", true, &path) {
            Ok(()) => plots.push(path),
            Err(Error::NoData) => {}
            Err(e) => return Err(e),
        }
        let states: Vec<PlotSeries> = (0..traj.dim())
            .map(|i| PlotSeries {
                label: format!("x{}", i + 1),
                times: times.clone(),
                values: traj.x[start..].iter().map(|x| x[i]).collect(),
            })
            .collect();
        let path = dir.join("states.svg");
        analyze::emit_plot(&states, "plant state", false, &path)?;
        plots.push(path);
    }
    Ok(SimulationArtifacts {
        trajectory: traj,
        csv,
        plots,
    })
}

fn print_simulation(out: &mut dyn Write, r: &Resolved, a: &SimulationArtifacts) -> Result<()> {
    let traj = &a.trajectory;
    let x0 = traj.norm_x()[traj.origin];
    say!(out, "scenario {}  h = {}  T = {}", r.scenario, r.config.sim.h, r.config.sim.t_end)?;
    say!(out, "||x(0)|| = {:.6e}  ||x(T)|| = {:.6e}", x0, norm2(traj.final_x()))?;
    if let Some(err) = traj.norm_err() {
        say!(out, "||xhat(0) - x(0)|| = {:.6e}  ||xhat(T) - x(T)|| = {:.6e}", err[traj.origin], err[err.len() - 1])?;
    }
    say!(out, "decay envelopes for t >= tau:")?;
    print_fit(out, "|x|", tail_fit(traj, &traj.norm_x(), traj.tau))?;
    if let Some(err) = traj.norm_err() {
        print_fit(out, "|xhat - x|", tail_fit(traj, &err, traj.tau))?;
    }
    say!(out, "wrote {}", a.csv.display())?;
    for p in &a.plots {
        say!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

pub fn cmd_simulate(r: &Resolved, out: &mut dyn Write) -> Result<Status> {
    match simulate(r) {
        Ok(a) => {
            print_simulation(out, r, &a)?;
            Ok(Status::Pass)
        }
        Err(Error::Diverged { t }) => {
            say!(out, "simulation diverged at t = {t}")?;
            Ok(Status::Fail)
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_fit(input: &Path, column: &str, from: f64, out: &mut dyn Write) -> Result<Status> {
    let table = read_csv(input)?;
    let times = table
        .column("t")
        .ok_or_else(|| Error::Validation(format!("{} has no t column", input.display())))?;
    let values = table.column(column).ok_or_else(|| {
        Error::Validation(format!(
            "{} has no column {column}; available: {}",
            input.display(),
            table.header.join(", ")
        ))
    })?;
    let (ts, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&values)
        .filter(|(t, y)| **t >= from && **y > 0.0)
        .map(|(t, y)| (*t, *y))
        .unzip();
    let fit = fit_envelope(&ts, &ys)?;
    say!(out, "column {column}, {} positive samples with t >= {from}", ts.len())?;
    print_fit(out, column, Ok(fit))?;
    Ok(Status::Pass)
}

/// The worked two-dimensional example, as a configuration file.
pub const REPRO_CONFIG: &str = r#"
[system]
n = 2
tau = 1.0
lipschitz_k = 0.5
f = "paper_example"
domain_box = { state = [[-30.0, 30.0], [-30.0, 30.0]], input = [-3.1415926535897931, 3.1415926535897931] }

[gains]
L = [-14.0, -28.0]
K = [-30.0, -30.0]
theta = 8.0

[sim]
h = 0.001
T = 10.0
x0 = [-20.0, -10.0]
xhat0 = [10.0, 10.0]
history = "constant"
seed = 0

[scenario]
mode = "observer_based"

[output]
directory = "out/repro"
emit_plots = true
"#;

/// Published solutions for the worked example.
pub const PRINTED_P: [[f64; 2]; 2] = [[0.0377, 0.0278], [0.0278, 1.0675]];
pub const PRINTED_S: [[f64; 2]; 2] = [[0.5172, -0.5000], [-0.5000, 0.5167]];
pub const PRINTED_NORM_P: f64 = 1.0682;
pub const PRINTED_NORM_S: f64 = 1.0169;
/// Agreement band between printed and computed norms.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct PrintedCheck {
    pub name: &'static str,
    pub printed_norm: f64,
    pub computed_norm: f64,
    pub norms_agree: bool,
    /// `‖AᵀX + XA + I‖_F` for the printed matrix.
    pub residual_as_printed: f64,
    /// `‖AX + XAᵀ + I‖_F` for the printed matrix.
    pub residual_transposed: f64,
}

pub fn check_printed(name: &'static str, a: &Matrix, printed: [[f64; 2]; 2], printed_norm: f64, computed_norm: f64) -> Result<PrintedCheck> {
    let x = Matrix::from_rows(&printed)?;
    Ok(PrintedCheck {
        name,
        printed_norm,
        computed_norm,
        norms_agree: (printed_norm - computed_norm).abs() <= NORM_TOLERANCE,
        residual_as_printed: lyapunov_residual(a, &x),
        residual_transposed: lyapunov_residual(&a.transpose(), &x),
    })
}

pub fn repro_resolved(overrides: &Overrides) -> Result<Resolved> {
    let mut cfg = RunConfig::from_toml(REPRO_CONFIG)?;
    cfg.apply(overrides);
    cfg.resolve()
}

pub fn cmd_repro_paper(overrides: &Overrides, out: &mut dyn Write) -> Result<Status> {
    let r = repro_resolved(overrides)?;
    let cert = build_certificate(&r, 0.1)?;
    let checks = [
        check_printed("P", &r.gains.observer_matrix()?, PRINTED_P, PRINTED_NORM_P, cert.p.spectral_norm)?,
        check_printed("S", &r.gains.feedback_matrix()?, PRINTED_S, PRINTED_NORM_S, cert.s.spectral_norm)?,
    ];
    say!(out, "== Lyapunov solutions: published vs computed ==")?;
    say!(out, "P published {}", fmt_matrix(&PRINTED_P.map(|r| r.to_vec())))?;
    say!(out, "P computed  {}", fmt_matrix(&cert.p.solution))?;
    say!(out, "S published {}", fmt_matrix(&PRINTED_S.map(|r| r.to_vec())))?;
    say!(out, "S computed  {}", fmt_matrix(&cert.s.solution))?;
    say!(out, "{:<6} {:>10} {:>10} {:>16} {:>16}  verdict", "matrix", "published", "computed", "res(AtX+XA+I)", "res(AX+XAt+I)")?;
    for c in &checks {
        let verdict = if c.norms_agree {
            "match".to_string()
        } else {
            format!(
                "DISCREPANCY: published ||{}|| = {} is not reproduced; computed {:.5}",
                c.name, c.printed_norm, c.computed_norm
            )
        };
        say!(
            out,
            "||{}||   {:>10.4} {:>10.5} {:>16.3e} {:>16.3e}  {verdict}",
            c.name,
            c.printed_norm,
            c.computed_norm,
            c.residual_as_printed,
            c.residual_transposed
        )?;
    }
    say!(out, "computed residuals: P {:.3e}, S {:.3e}", cert.p.residual, cert.s.residual)?;
    say!(out)?;
    say!(out, "== Certification (k = {} over |x1| <= 30) ==", cert.lipschitz_k)?;
    print_certificate(out, &cert)?;
    let with_printed = ConditionReport::evaluate(cert.theta, cert.tau, PRINTED_NORM_P, PRINTED_NORM_S, cert.lipschitz_k);
    say!(out, "margins with the published norms:")?;
    print_margins(out, &with_printed)?;
    let dir = r.config.output.directory.clone();
    let path = write_json(&dir, "certificate.json", &cert)?;
    say!(out, "wrote {}", path.display())?;
    write_json(&dir, "published_check.json", &checks)?;
    say!(out)?;
    say!(out, "== Simulation ==")?;
    let status = cmd_simulate(&r, out)?;
    Ok(status)
}
