//! Constant-delay DDE integration by the method of steps with classical RK4,
//! and closed-loop wiring of the plant/observer configurations.
//!
//! The delay must be an integer multiple `m ≥ 2` of the step, so every
//! breakpoint `kτ` and every whole-delay lookup `t + h - τ` lands on a stored
//! node. Half-step lookups `t + h/2 - τ` use cubic Hermite interpolation from
//! the node states and their stored right-hand sides; inside the initial
//! segment the history function is evaluated directly.

use std::fmt;

use crate::error::{Error, Result};
use crate::exprlang::{self, Expr, Var};
use crate::matops;
use crate::sysmodel::{GainSet, SystemSpec};

/// Norm above which a run is reported as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Number of whole steps per delay, or an error when `τ/h` is not an integer ≥ 2.
pub fn delay_steps(tau: f64, step: f64) -> Result<usize> {
    if !(step > 0.0 && step.is_finite() && tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "step and delay must be positive, got h = {step}, tau = {tau}"
        )));
    }
    let ratio = tau / step;
    let m = ratio.round();
    if (ratio - m).abs() > 1e-9 * ratio || m < 2.0 {
        return Err(Error::Config(format!(
            "delay {tau} must be an integer multiple (>= 2) of the step {step}"
        )));
    }
    Ok(m as usize)
}

/// Node states and right-hand sides on the uniform grid starting at `t = -τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    step: f64,
    delay_steps: usize,
    dim: usize,
    /// Node `i` sits at `t = (i - m) h`.
    states: Vec<f64>,
    /// Right-hand side at nodes `m, m+1, …` (t ≥ 0).
    derivs: Vec<f64>,
}

impl HistoryBuffer {
    fn new(step: f64, delay_steps: usize, dim: usize) -> Self {
        HistoryBuffer {
            step,
            delay_steps,
            dim,
            states: Vec::new(),
            derivs: Vec::new(),
        }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, node: usize) -> f64 {
        (node as f64 - self.delay_steps as f64) * self.step
    }

    pub fn state(&self, node: usize) -> &[f64] {
        &self.states[node * self.dim..(node + 1) * self.dim]
    }

    /// Stored right-hand side at a node with `t ≥ 0`.
    pub fn derivative(&self, node: usize) -> &[f64] {
        let j = node - self.delay_steps;
        &self.derivs[j * self.dim..(j + 1) * self.dim]
    }

    /// Cubic Hermite value at `t_node + frac·h`, `0 ≤ frac ≤ 1`, on an
    /// interval whose both ends have stored derivatives.
    pub fn hermite(&self, node: usize, frac: f64, out: &mut [f64]) {
        let h = self.step;
        let (x0, x1) = (self.state(node), self.state(node + 1));
        let (f0, f1) = (self.derivative(node), self.derivative(node + 1));
        let s = frac;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        for k in 0..self.dim {
            out[k] = h00 * x0[k] + h10 * h * f0[k] + h01 * x1[k] + h11 * h * f1[k];
        }
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }
}

/// Solution of [`integrate`]: the full node grid from `-τ` to the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct DdeSolution {
    pub buffer: HistoryBuffer,
}

impl DdeSolution {
    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Index of the node at `t = 0`.
    pub fn origin(&self) -> usize {
        self.buffer.delay_steps
    }

    pub fn time(&self, node: usize) -> f64 {
        self.buffer.time(node)
    }

    pub fn state(&self, node: usize) -> &[f64] {
        self.buffer.state(node)
    }

    pub fn final_state(&self) -> &[f64] {
        self.buffer.state(self.len() - 1)
    }

    /// State at a grid time, if `t` is (within rounding) a node.
    pub fn at(&self, t: f64) -> Option<&[f64]> {
        let idx = t / self.buffer.step + self.origin() as f64;
        let node = idx.round();
        if (idx - node).abs() > 1e-6 || node < 0.0 || node as usize >= self.len() {
            return None;
        }
        Some(self.state(node as usize))
    }
}

fn guard(state: &[f64], t: f64) -> Result<()> {
    let finite = state.iter().all(|v| v.is_finite());
    if !finite || matops::norm2(state) > DIVERGENCE_NORM {
        return Err(Error::Diverged { t });
    }
    Ok(())
}

/// Integrates `ẋ(t) = rhs(t, x(t), x(t-τ))` on `[0, t_end]` from the initial
/// segment `phi` on `[-τ, 0]`.
///
/// `rhs(t, x, x_delayed, out)` writes `ẋ`; `phi(s, out)` writes `φ(s)`. The
/// run covers `floor(t_end/h)` steps.
pub fn integrate<F, H>(
    dim: usize,
    mut rhs: F,
    phi: H,
    tau: f64,
    step: f64,
    t_end: f64,
) -> Result<DdeSolution>
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]),
    H: Fn(f64, &mut [f64]),
{
    let m = delay_steps(tau, step)?;
    if !(t_end >= step) {
        return Err(Error::Config(format!(
            "horizon {t_end} must be at least one step {step}"
        )));
    }
    if dim == 0 {
        return Err(Error::Config("state dimension must be positive".into()));
    }
    let n_steps = (t_end / step + 1e-9).floor() as usize;
    let h = step;

    let mut buf = HistoryBuffer::new(h, m, dim);
    buf.states.reserve((m + n_steps + 1) * dim);
    buf.derivs.reserve((n_steps + 1) * dim);

    let mut tmp = vec![0.0; dim];
    for node in 0..=m {
        phi(buf.time(node), &mut tmp);
        if !tmp.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "initial history is not finite at t = {}",
                buf.time(node)
            )));
        }
        buf.states.extend_from_slice(&tmp);
    }
    rhs(0.0, buf.state(m), buf.state(0), &mut tmp);
    buf.derivs.extend_from_slice(&tmp);

    let (mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut stage = vec![0.0; dim];
    let mut delayed_mid = vec![0.0; dim];
    let mut next = vec![0.0; dim];

    // Method of steps: segment `seg` covers [seg·τ, (seg+1)·τ]; within it the
    // delayed argument lives entirely in already computed nodes.
    let mut j = 0;
    while j < n_steps {
        let segment_end = ((j / m) + 1) * m;
        while j < segment_end.min(n_steps) {
            let node = m + j;
            let t = j as f64 * h;

            // Delayed argument at t + h/2 - τ, inside interval [j, j+1] of the grid.
            if j < m {
                phi(t + 0.5 * h - tau, &mut delayed_mid);
            } else {
                buf.hermite(j, 0.5, &mut delayed_mid);
            }

            let x = buf.state(node).to_vec();
            let k1 = buf.derivative(node).to_vec();

            for k in 0..dim {
                stage[k] = x[k] + 0.5 * h * k1[k];
            }
            rhs(t + 0.5 * h, &stage, &delayed_mid, &mut k2);
            for k in 0..dim {
                stage[k] = x[k] + 0.5 * h * k2[k];
            }
            rhs(t + 0.5 * h, &stage, &delayed_mid, &mut k3);
            for k in 0..dim {
                stage[k] = x[k] + h * k3[k];
            }
            let delayed_end = buf.state(j + 1).to_vec();
            rhs(t + h, &stage, &delayed_end, &mut k4);

            for k in 0..dim {
                next[k] = x[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            }
            let t_next = (j + 1) as f64 * h;
            guard(&next, t_next)?;
            buf.states.extend_from_slice(&next);
            rhs(t_next, &next, &delayed_end, &mut tmp);
            buf.derivs.extend_from_slice(&tmp);
            j += 1;
        }
    }
    Ok(DdeSolution { buffer: buf })
}

/// Initial segment on `[-τ, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub enum History {
    Constant(Vec<f64>),
    /// One expression per coordinate in the variable `t`.
    Expressions(Vec<Expr>),
}

impl History {
    pub fn constant(v: &[f64]) -> Self {
        History::Constant(v.to_vec())
    }

    pub fn from_expressions<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let mut exprs = Vec::with_capacity(texts.len());
        for text in texts {
            let e = exprlang::parse(text.as_ref())?;
            if let Some(v) = exprlang::free_vars(&e).into_iter().find(|v| *v != Var::T) {
                return Err(Error::Validation(format!(
                    "history expression '{}' may only reference t, found {v}",
                    text.as_ref()
                )));
            }
            exprs.push(e);
        }
        Ok(History::Expressions(exprs))
    }

    pub fn dim(&self) -> usize {
        match self {
            History::Constant(v) => v.len(),
            History::Expressions(e) => e.len(),
        }
    }

    pub fn eval(&self, s: f64, out: &mut [f64]) {
        match self {
            History::Constant(v) => out.copy_from_slice(v),
            History::Expressions(exprs) => {
                let env = |v: Var| (v == Var::T).then_some(s);
                for (o, e) in out.iter_mut().zip(exprs) {
                    *o = exprlang::eval(e, &env).unwrap_or(f64::NAN);
                }
            }
        }
    }
}

/// Exogenous input driving the plant when only the observer runs.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Zero,
    /// Expression in `t`.
    Expr(Expr),
}

impl InputSignal {
    pub fn parse(text: &str) -> Result<Self> {
        let e = exprlang::parse(text)?;
        if let Some(v) = exprlang::free_vars(&e).into_iter().find(|v| *v != Var::T) {
            return Err(Error::Validation(format!(
                "input expression '{text}' may only reference t, found {v}"
            )));
        }
        Ok(InputSignal::Expr(e))
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            InputSignal::Zero => 0.0,
            InputSignal::Expr(e) => {
                exprlang::eval(e, &|v: Var| (v == Var::T).then_some(t)).unwrap_or(f64::NAN)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// `u ≡ 0`, plant only.
    OpenLoop,
    /// `u = K(θ) x`, plant only.
    StateFeedback,
    /// Observer with `f`, plant driven by an external input.
    ObserverOnly { input: InputSignal },
    /// `u = K(θ) x̂`, observer with `f`.
    ObserverBased,
    /// `u = K(θ) x̃`, observer without `f`.
    OutputFeedback,
}

impl Scenario {
    pub fn has_observer(&self) -> bool {
        !matches!(self, Scenario::OpenLoop | Scenario::StateFeedback)
    }

    pub fn has_control(&self) -> bool {
        !matches!(self, Scenario::OpenLoop)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::OpenLoop => "open_loop",
            Scenario::StateFeedback => "state_feedback",
            Scenario::ObserverOnly { .. } => "observer",
            Scenario::ObserverBased => "observer_based",
            Scenario::OutputFeedback => "output_feedback",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sampled closed-loop run, including the initial segment on `[-τ, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub step: f64,
    pub tau: f64,
    /// Index of the sample at `t = 0`.
    pub origin: usize,
    /// High-gain parameter used for the transformed coordinates.
    pub theta: f64,
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub xhat: Option<Vec<Vec<f64>>>,
    pub u: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn norm_x(&self) -> Vec<f64> {
        self.x.iter().map(|r| matops::norm2(r)).collect()
    }

    /// `‖x̂ - x‖`; `None` without an observer.
    pub fn norm_err(&self) -> Option<Vec<f64>> {
        self.xhat.as_ref().map(|xh| {
            xh.iter()
                .zip(&self.x)
                .map(|(a, b)| matops::norm2(&sub(a, b)))
                .collect()
        })
    }

    /// `η = Δθ(x̂ - x)`.
    pub fn eta(&self) -> Option<Vec<Vec<f64>>> {
        let scale = matops::delta_theta_diag(self.theta, self.dim());
        self.xhat.as_ref().map(|xh| {
            xh.iter()
                .zip(&self.x)
                .map(|(a, b)| scaled(&scale, &sub(a, b)))
                .collect()
        })
    }

    /// `χ = Δθ x`.
    pub fn chi(&self) -> Vec<Vec<f64>> {
        let scale = matops::delta_theta_diag(self.theta, self.dim());
        self.x.iter().map(|r| scaled(&scale, r)).collect()
    }

    /// `‖φ‖∞` over the stored initial segment.
    pub fn norm_phi(&self) -> f64 {
        self.x[..=self.origin.min(self.len().saturating_sub(1))]
            .iter()
            .map(|r| matops::norm2(r))
            .fold(0.0, f64::max)
    }

    pub fn final_x(&self) -> &[f64] {
        &self.x[self.len() - 1]
    }

    pub fn final_err(&self) -> Option<f64> {
        self.norm_err().and_then(|v| v.last().copied())
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

fn scaled(scale: &[f64], v: &[f64]) -> Vec<f64> {
    scale.iter().zip(v).map(|(s, x)| s * x).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `out = A z + B u` for the companion pair.
fn companion_apply(z: &[f64], u: f64, out: &mut [f64]) {
    let n = z.len();
    out[..n - 1].copy_from_slice(&z[1..]);
    out[n - 1] = u;
}

/// Runs one closed-loop configuration.
pub fn run_scenario(
    sys: &SystemSpec,
    gains: &GainSet,
    scenario: &Scenario,
    phi: &History,
    phi_hat: &History,
    step: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let n = sys.n;
    if gains.n() != n {
        return Err(Error::Config(format!(
            "gain dimension {} does not match system dimension {n}",
            gains.n()
        )));
    }
    if phi.dim() != n {
        return Err(Error::Config(format!(
            "plant history has dimension {}, expected {n}",
            phi.dim()
        )));
    }
    let observer = scenario.has_observer();
    if observer && phi_hat.dim() != n {
        return Err(Error::Config(format!(
            "observer history has dimension {}, expected {n}",
            phi_hat.dim()
        )));
    }
    let dim = if observer { 2 * n } else { n };
    let l_theta = gains.l_scaled().to_vec();
    let k_theta = gains.k_scaled().to_vec();
    let f = sys.f.clone();

    let control = |t: f64, z: &[f64]| -> f64 {
        match scenario {
            Scenario::OpenLoop => 0.0,
            Scenario::StateFeedback => dot(&k_theta, &z[..n]),
            Scenario::ObserverOnly { input } => input.eval(t),
            Scenario::ObserverBased | Scenario::OutputFeedback => dot(&k_theta, &z[n..]),
        }
    };

    let mut f_buf = vec![0.0; n];
    let rhs = |t: f64, z: &[f64], zd: &[f64], out: &mut [f64]| {
        let u = control(t, z);
        let (x, xd) = (&z[..n], &zd[..n]);
        companion_apply(x, u, &mut out[..n]);
        f.eval_into(x, xd, u, &mut f_buf);
        for (o, fv) in out[..n].iter_mut().zip(&f_buf) {
            *o += fv;
        }
        if observer {
            let (xh, xhd) = (&z[n..], &zd[n..]);
            let innovation = xh[0] - x[0];
            let obs = &mut out[n..];
            companion_apply(xh, u, obs);
            if !matches!(scenario, Scenario::OutputFeedback) {
                f.eval_into(xh, xhd, u, &mut f_buf);
                for (o, fv) in obs.iter_mut().zip(&f_buf) {
                    *o += fv;
                }
            }
            for (o, l) in obs.iter_mut().zip(&l_theta) {
                *o += l * innovation;
            }
        }
    };
    let history = |s: f64, out: &mut [f64]| {
        phi.eval(s, &mut out[..n]);
        if observer {
            phi_hat.eval(s, &mut out[n..]);
        }
    };

    let sol = integrate(dim, rhs, history, sys.tau, step, t_end)?;

    let len = sol.len();
    let mut times = Vec::with_capacity(len);
    let mut x = Vec::with_capacity(len);
    let mut xhat = observer.then(|| Vec::with_capacity(len));
    let mut u = scenario.has_control().then(|| Vec::with_capacity(len));
    for node in 0..len {
        let t = sol.time(node);
        let z = sol.state(node);
        times.push(t);
        x.push(z[..n].to_vec());
        if let Some(xh) = xhat.as_mut() {
            xh.push(z[n..].to_vec());
        }
        if let Some(us) = u.as_mut() {
            us.push(control(t, z));
        }
    }
    Ok(Trajectory {
        step,
        tau: sys.tau,
        origin: sol.origin(),
        theta: gains.theta(),
        times,
        x,
        xhat,
        u,
    })
}

/// Inputs of one [`run_scenario`] call, for batch execution.
#[derive(Debug, Clone)]
pub struct ScenarioJob {
    pub sys: SystemSpec,
    pub gains: GainSet,
    pub scenario: Scenario,
    pub phi: History,
    pub phi_hat: History,
    pub step: f64,
    pub t_end: f64,
}

impl ScenarioJob {
    pub fn run(&self) -> Result<Trajectory> {
        run_scenario(
            &self.sys,
            &self.gains,
            &self.scenario,
            &self.phi,
            &self.phi_hat,
            self.step,
            self.t_end,
        )
    }
}

/// Runs independent jobs on scoped threads; results keep the job order.
pub fn run_batch(jobs: &[ScenarioJob]) -> Vec<Result<Trajectory>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|group| scope.spawn(move || group.iter().map(ScenarioJob::run).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scenario worker panicked"))
            .collect()
    })
}
