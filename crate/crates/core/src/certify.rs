//! Delay-dependent stability margins, θ-synthesis, composite-functional
//! weights, the explicit rational decay bound and Lyapunov–Krasovskii
//! functional evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matops::{self, Matrix};

/// Margin pair `(θ/2 - ‖M‖ lnθ/(2τ) - 3k‖M‖, √θ/2 - k‖M‖)` shared by the
/// observer (`M = P`) and the state feedback (`M = S`).
fn margins(theta: f64, tau: f64, norm: f64, k: f64) -> (f64, f64) {
    let first = theta / 2.0 - norm * theta.ln() / (2.0 * tau) - 3.0 * k * norm;
    let second = theta.sqrt() / 2.0 - k * norm;
    (first, second)
}

/// Observer margins `(a(θ), b(θ))`.
pub fn observer_conditions(theta: f64, tau: f64, norm_p: f64, k: f64) -> (f64, f64) {
    margins(theta, tau, norm_p, k)
}

/// State-feedback margins `(c(θ), d(θ))`.
pub fn feedback_conditions(theta: f64, tau: f64, norm_s: f64, k: f64) -> (f64, f64) {
    margins(theta, tau, norm_s, k)
}

/// Extra output-feedback margin; numerically equal to `c(θ)` but required
/// jointly with the feedback pair.
pub fn output_feedback_condition(theta: f64, tau: f64, norm_s: f64, k: f64) -> f64 {
    margins(theta, tau, norm_s, k).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionFlags {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
    pub output_feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub theta: f64,
    pub tau: f64,
    pub norm_p: f64,
    pub norm_s: f64,
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub of_margin: f64,
    pub flags: ConditionFlags,
}

impl ConditionReport {
    pub fn evaluate(theta: f64, tau: f64, norm_p: f64, norm_s: f64, k: f64) -> Self {
        let (a, b) = observer_conditions(theta, tau, norm_p, k);
        let (c, d) = feedback_conditions(theta, tau, norm_s, k);
        let of_margin = output_feedback_condition(theta, tau, norm_s, k);
        ConditionReport {
            theta,
            tau,
            norm_p,
            norm_s,
            k,
            a,
            b,
            c,
            d,
            of_margin,
            flags: ConditionFlags {
                a: a > 0.0,
                b: b > 0.0,
                c: c > 0.0,
                d: d > 0.0,
                output_feedback: of_margin > 0.0,
            },
        }
    }

    pub fn observer_ok(&self) -> bool {
        self.flags.a && self.flags.b
    }

    pub fn feedback_ok(&self) -> bool {
        self.flags.c && self.flags.d
    }

    pub fn all_ok(&self) -> bool {
        self.observer_ok() && self.feedback_ok() && self.flags.output_feedback
    }
}

pub const THETA_GRID_STEP: f64 = 0.1;

/// Smallest θ in `[1, theta_max]` at which `a, b, c, d` are all strictly
/// positive: grid scan followed by bisection on the bracketing grid cell.
pub fn find_theta_min(
    tau: f64,
    norm_p: f64,
    norm_s: f64,
    k: f64,
    theta_max: f64,
    tol: f64,
) -> Result<f64> {
    if !(theta_max > 1.0 && theta_max.is_finite()) {
        return Err(Error::PreconditionViolated(format!(
            "theta_max must exceed 1, got {theta_max}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::PreconditionViolated(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let passes = |theta: f64| {
        let (a, b) = observer_conditions(theta, tau, norm_p, k);
        let (c, d) = feedback_conditions(theta, tau, norm_s, k);
        a > 0.0 && b > 0.0 && c > 0.0 && d > 0.0
    };
    let steps = ((theta_max - 1.0) / THETA_GRID_STEP).floor() as usize;
    let grid = (0..=steps)
        .map(|i| 1.0 + i as f64 * THETA_GRID_STEP)
        .chain(std::iter::once(theta_max));
    let mut prev = None;
    for theta in grid {
        if passes(theta) {
            let Some(mut lo) = prev else {
                return Ok(theta);
            };
            let mut hi = theta;
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if passes(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(hi);
        }
        prev = Some(theta);
    }
    Err(Error::NoFeasibleTheta { theta_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// Lower threshold (observer-based) or upper bound (output feedback).
    pub bound: f64,
}

/// Weight of `V` in `U = αV + W` for the observer-based controller:
/// `α > 2θ²‖S‖²‖K‖² / (a c)`, returned as `(1 + margin)` times the threshold.
pub fn select_alpha_observer_based(
    theta: f64,
    a: f64,
    c: f64,
    norm_s: f64,
    norm_k: f64,
    margin: f64,
) -> Result<AlphaSelection> {
    if !(a > 0.0 && c > 0.0) {
        return Err(Error::ConditionsNotSatisfied(format!(
            "need a > 0 and c > 0, got a = {a}, c = {c}"
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::PreconditionViolated(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let threshold = 2.0 * theta * theta * norm_s * norm_s * norm_k * norm_k / (a * c);
    let alpha = if threshold == 0.0 {
        margin
    } else {
        (1.0 + margin) * threshold
    };
    Ok(AlphaSelection {
        alpha,
        bound: threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum OutputFeedbackAlpha {
    Bounded(AlphaSelection),
    /// `k = 0`: every positive weight works.
    Unconstrained,
}

/// Weight of `V` for the output-feedback composite functional:
/// `α < min(c, d) / (k‖P‖)`, returned as `(1 - margin)` times the bound.
pub fn select_alpha_output_feedback(
    c: f64,
    d: f64,
    k: f64,
    norm_p: f64,
    margin: f64,
) -> Result<OutputFeedbackAlpha> {
    if !(c > 0.0 && d > 0.0) {
        return Err(Error::ConditionsNotSatisfied(format!(
            "need c > 0 and d > 0, got c = {c}, d = {d}"
        )));
    }
    if !(norm_p > 0.0) || k < 0.0 {
        return Err(Error::ConditionsNotSatisfied(format!(
            "need k >= 0 and norm_p > 0, got k = {k}, norm_p = {norm_p}"
        )));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::PreconditionViolated(format!(
            "margin must lie in (0, 1), got {margin}"
        )));
    }
    if k == 0.0 {
        return Ok(OutputFeedbackAlpha::Unconstrained);
    }
    let bound = c.min(d) / (k * norm_p);
    Ok(OutputFeedbackAlpha::Bounded(AlphaSelection {
        alpha: bound * (1.0 - margin),
        bound,
    }))
}

/// `(r₃ - r₂) / r₂`, the exponent obtained when `V̇ ≤ -λ₃‖x_t‖^{r₃}`.
pub fn corollary_k(r2: f64, r3: f64) -> Result<f64> {
    if !(r2 > 0.0 && r2 < r3) {
        return Err(Error::PreconditionViolated(format!(
            "need 0 < r2 < r3, got r2 = {r2}, r3 = {r3}"
        )));
    }
    Ok((r3 - r2) / r2)
}

/// Constants of a rational decay certificate
/// `λ₁‖x‖^{r₁} ≤ V ≤ λ₂‖x_t‖∞^{r₂}`, `V̇ + λ₃V^{1+k} ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: Option<f64>,
    pub k: f64,
    pub m: f64,
    pub e: f64,
    /// Radius of validity; infinite for global certificates.
    pub sigma: f64,
}

impl StabilityParams {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, r1: f64, r2: f64, k: f64) -> Result<Self> {
        let all = [lambda1, lambda2, lambda3, r1, r2, k];
        if !all.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::PreconditionViolated(format!(
                "stability constants must be positive and finite: {all:?}"
            )));
        }
        Ok(StabilityParams {
            lambda1,
            lambda2,
            lambda3,
            r1,
            r2,
            r3: None,
            k,
            m: lambda1.powf(-1.0 / r1) * lambda2.powf(1.0 / r1),
            e: r2 / r1,
            sigma: f64::INFINITY,
        })
    }

    /// From `V̇ ≤ -λ₃‖x_t‖∞^{r₃}`: `V̇ ≤ -(λ₃/λ₂^{r₃/r₂}) V^{1+k}` with
    /// `k = (r₃ - r₂)/r₂`.
    pub fn from_segment_decay(
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        r1: f64,
        r2: f64,
        r3: f64,
    ) -> Result<Self> {
        let k = corollary_k(r2, r3)?;
        let mut params = Self::new(lambda1, lambda2, lambda3 / lambda2.powf(r3 / r2), r1, r2, k)?;
        params.r3 = Some(r3);
        Ok(params)
    }

    /// From an exponential certificate `V̇ ≤ -rate·V` on trajectories starting
    /// with `‖φ‖∞ ≤ norm_phi`: since `V ≤ V₀ ≤ λ₂‖φ‖∞^{r₂}`, the rational
    /// inequality holds with `λ₃ = rate / V₀^k`.
    pub fn from_exponential_decay(
        lambda1: f64,
        lambda2: f64,
        r1: f64,
        r2: f64,
        rate: f64,
        k: f64,
        norm_phi: f64,
    ) -> Result<Self> {
        let v0 = lambda2 * norm_phi.powf(r2);
        if !(v0 > 0.0) {
            return Err(Error::PreconditionViolated(
                "initial functional bound must be positive".into(),
            ));
        }
        let mut params = Self::new(lambda1, lambda2, rate / v0.powf(k), r1, r2, k)?;
        params.sigma = norm_phi;
        Ok(params)
    }
}

/// `‖x(t)‖ ≤ λ₁^{-1/r₁} (λ₂^{-k}‖φ‖∞^{-r₂k} + λ₃ k t)^{-1/(k r₁)}`.
pub fn rational_bound(params: &StabilityParams, norm_phi: f64, t: f64) -> f64 {
    if norm_phi == 0.0 {
        return 0.0;
    }
    let StabilityParams {
        lambda1,
        lambda2,
        lambda3,
        r1,
        r2,
        k,
        ..
    } = *params;
    let base = lambda2.powf(-k) * norm_phi.powf(-r2 * k) + lambda3 * k * t;
    lambda1.powf(-1.0 / r1) * base.powf(-1.0 / (k * r1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Transform {
    /// `η = Δθ (x̂ - x)`
    ObserverError,
    /// `χ = Δθ x`
    State,
}

#[derive(Debug, Clone)]
pub struct FunctionalSpec {
    pub matrix: Matrix,
    pub theta: f64,
    pub tau: f64,
    pub transform: Transform,
}

impl FunctionalSpec {
    pub fn new(matrix: Matrix, theta: f64, tau: f64, transform: Transform) -> Result<Self> {
        if matrix.asymmetry() > 1e-9 {
            return Err(Error::ContractViolation("functional matrix is not symmetric".into()));
        }
        let min_eig = matops::symmetric_eigenvalues(&matrix)[0];
        if !(min_eig > 0.0) {
            return Err(Error::ContractViolation(
                "functional matrix is not positive definite".into(),
            ));
        }
        if !(theta > 0.0 && tau > 0.0) {
            return Err(Error::ContractViolation(format!(
                "theta and tau must be positive, got theta = {theta}, tau = {tau}"
            )));
        }
        Ok(FunctionalSpec {
            matrix,
            theta,
            tau,
            transform,
        })
    }

    /// `λ₁ = λmin(M)`, `λ₂ = λmax(M) + θτ/2` of the sandwich bound with `r₁ = r₂ = 2`.
    pub fn sandwich_constants(&self) -> (f64, f64) {
        let eig = matops::symmetric_eigenvalues(&self.matrix);
        (eig[0], eig[eig.len() - 1] + self.theta * self.tau / 2.0)
    }
}

/// `V = ηᵀMη + (θ/2)∫_{t-τ}^{t} θ^{(s-t)/(2τ)}‖η(s)‖² ds`, trapezoid rule.
///
/// `window` holds the transformed state on the uniform grid `t-τ, t-τ+h, …, t`;
/// its last row is the current value.
pub fn krasovskii_value<R: AsRef<[f64]>>(spec: &FunctionalSpec, step: f64, window: &[R]) -> Result<f64> {
    let intervals = spec.tau / step;
    let m = intervals.round();
    if !(step > 0.0) || (intervals - m).abs() > 1e-9 * intervals.max(1.0) || m < 1.0 {
        return Err(Error::ContractViolation(format!(
            "delay {} is not a whole number of steps {step}",
            spec.tau
        )));
    }
    let m = m as usize;
    if window.len() != m + 1 {
        return Err(Error::ContractViolation(format!(
            "history window has {} samples, expected {} covering [t - tau, t]",
            window.len(),
            m + 1
        )));
    }
    let n = spec.matrix.dim();
    if let Some(bad) = window.iter().position(|r| r.as_ref().len() != n) {
        return Err(Error::ContractViolation(format!(
            "history sample {bad} has wrong dimension"
        )));
    }
    let current = window[m].as_ref();
    let quadratic = spec.matrix.quad_form(current);

    let ln_theta = spec.theta.ln();
    let weight = |j: usize| {
        // s - t = -(m - j) h
        let offset = -((m - j) as f64) * step;
        (ln_theta * offset / (2.0 * spec.tau)).exp()
    };
    let sq = |r: &R| r.as_ref().iter().map(|v| v * v).sum::<f64>();
    let mut integral = 0.0;
    for j in 0..m {
        integral += 0.5 * step * (weight(j) * sq(&window[j]) + weight(j + 1) * sq(&window[j + 1]));
    }
    Ok(quadratic + 0.5 * spec.theta * integral)
}

/// Functional value at every grid index `i ≥ m` of a transformed series.
pub fn krasovskii_series<R: AsRef<[f64]>>(spec: &FunctionalSpec, step: f64, series: &[R]) -> Result<Vec<f64>> {
    let m = (spec.tau / step).round() as usize;
    if series.len() <= m {
        return Err(Error::ContractViolation(
            "series shorter than one delay interval".into(),
        ));
    }
    (m..series.len())
        .map(|i| krasovskii_value(spec, step, &series[i - m..=i]))
        .collect()
}
