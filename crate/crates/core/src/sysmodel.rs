//! The triangular time-delay plant `ẋ = Ax + Bu + f(x, x(t-τ), u)`, its
//! nonlinearity handles and the θ-scaled gain vectors.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exprlang::{self, Expr, Var};
use crate::matops::{self, check_theta, Matrix};

/// Input values on which `f(0, 0, u) = 0` is checked.
pub const ZERO_CHECK_INPUTS: [f64; 5] = [-10.0, -1.0, 0.0, 1.0, 10.0];

/// `f(x, x_delayed, u) -> ℝⁿ`, component `i` depending on coordinates `≤ i` only.
pub trait Nonlinearity: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], xd: &[f64], u: f64, out: &mut [f64]);

    fn eval(&self, x: &[f64], xd: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, xd, u, &mut out);
        out
    }

    /// Whether triangularity was already established from the expression
    /// structure, making numeric probing unnecessary.
    fn structurally_triangular(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

pub type NonlinearityHandle = Arc<dyn Nonlinearity>;

#[derive(Debug, Clone, Copy)]
pub struct ZeroNonlinearity {
    pub n: usize,
}

impl Nonlinearity for ZeroNonlinearity {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval_into(&self, _x: &[f64], _xd: &[f64], _u: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn structurally_triangular(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        "zero".into()
    }
}

/// `f₁ = x₁ cos x₁ + x₁(t-τ) cos u`, remaining components zero.
#[derive(Debug, Clone, Copy)]
pub struct PaperExample {
    pub n: usize,
}

impl Nonlinearity for PaperExample {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval_into(&self, x: &[f64], xd: &[f64], u: f64, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = x[0] * x[0].cos() + xd[0] * u.cos();
    }

    fn describe(&self) -> String {
        "paper_example".into()
    }
}

/// One parsed expression per component.
#[derive(Clone)]
pub struct ExprNonlinearity {
    components: Vec<Expr>,
}

impl ExprNonlinearity {
    pub fn components(&self) -> &[Expr] {
        &self.components
    }
}

struct StateEnv<'a> {
    x: &'a [f64],
    xd: &'a [f64],
    u: f64,
}

impl exprlang::Env for StateEnv<'_> {
    fn lookup(&self, var: Var) -> Option<f64> {
        match var {
            Var::X(i) => self.x.get(i - 1).copied(),
            Var::Xd(i) => self.xd.get(i - 1).copied(),
            Var::U => Some(self.u),
            Var::T => None,
        }
    }
}

impl Nonlinearity for ExprNonlinearity {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn eval_into(&self, x: &[f64], xd: &[f64], u: f64, out: &mut [f64]) {
        let env = StateEnv { x, xd, u };
        for (o, e) in out.iter_mut().zip(&self.components) {
            // Variables are validated at construction; a miss can only mean a
            // shorter state than declared, reported as NaN to the simulator.
            *o = exprlang::eval(e, &env).unwrap_or(f64::NAN);
        }
    }

    fn structurally_triangular(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        let parts: Vec<String> = self.components.iter().map(|e| e.to_string()).collect();
        format!("[{}]", parts.join(", "))
    }
}

#[derive(Debug, Clone)]
pub enum NonlinearitySource {
    Registry { name: String, n: usize },
    Expressions(Vec<String>),
}

pub const REGISTRY: [&str; 2] = ["zero", "paper_example"];

pub fn make_nonlinearity(source: &NonlinearitySource) -> Result<NonlinearityHandle> {
    let handle: NonlinearityHandle = match source {
        NonlinearitySource::Registry { name, n } => {
            if *n == 0 || *n > matops::MAX_DIM {
                return Err(Error::Config(format!("dimension {n} out of range")));
            }
            match name.as_str() {
                "zero" => Arc::new(ZeroNonlinearity { n: *n }),
                "paper_example" => Arc::new(PaperExample { n: *n }),
                other => {
                    return Err(Error::Validation(format!(
                        "unknown nonlinearity '{other}' (known: {})",
                        REGISTRY.join(", ")
                    )))
                }
            }
        }
        NonlinearitySource::Expressions(texts) => {
            let n = texts.len();
            if n == 0 || n > matops::MAX_DIM {
                return Err(Error::Config(format!("dimension {n} out of range")));
            }
            let mut components = Vec::with_capacity(n);
            for (i, text) in texts.iter().enumerate() {
                let e = exprlang::parse(text)?;
                let component = i + 1;
                for var in exprlang::free_vars(&e) {
                    match var {
                        Var::T => {
                            return Err(Error::Validation(format!(
                                "component {component} references 't'; f must not depend on time"
                            )))
                        }
                        Var::U => {}
                        Var::X(j) | Var::Xd(j) if j > component => {
                            return Err(Error::Validation(format!(
                                "component {component} references {var}, violating triangular structure"
                            )))
                        }
                        _ => {}
                    }
                }
                components.push(e);
            }
            Arc::new(ExprNonlinearity { components })
        }
    };
    check_vanishes_at_origin(handle.as_ref())?;
    Ok(handle)
}

fn check_vanishes_at_origin(f: &dyn Nonlinearity) -> Result<()> {
    let zeros = vec![0.0; f.dim()];
    for u in ZERO_CHECK_INPUTS {
        let v = f.eval(&zeros, &zeros, u);
        if let Some((i, val)) = v.iter().enumerate().find(|(_, val)| **val != 0.0) {
            return Err(Error::Validation(format!(
                "f(0, 0, {u}) component {} = {val}, expected 0",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Randomized probing: perturbing coordinates `j > i` of `x` or `x_delayed`
/// must leave component `i` unchanged.
fn probe_triangular(f: &dyn Nonlinearity, seed: u64) -> Result<()> {
    let n = f.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..32 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let xd: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let u = rng.random_range(-5.0..5.0);
        let base = f.eval(&x, &xd, u);
        for j in 1..n {
            for delayed in [false, true] {
                let (mut x2, mut xd2) = (x.clone(), xd.clone());
                let target = if delayed { &mut xd2[j] } else { &mut x2[j] };
                *target += rng.random_range(0.5..3.0);
                let moved = f.eval(&x2, &xd2, u);
                for i in 0..j {
                    let same = base[i] == moved[i] || (base[i].is_nan() && moved[i].is_nan());
                    if !same {
                        let var = if delayed { Var::Xd(j + 1) } else { Var::X(j + 1) };
                        return Err(Error::Validation(format!(
                            "component {} depends on {var}, violating triangular structure",
                            i + 1
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-coordinate bounds applied to both `x` and `x_delayed`, plus an input range.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub state: Vec<(f64, f64)>,
    pub input: (f64, f64),
}

impl DomainBox {
    pub fn symmetric(n: usize, radius: f64) -> Self {
        DomainBox {
            state: vec![(-radius, radius); n],
            input: (-1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.state.is_empty() || !self.state.iter().copied().all(ok) || !ok(self.input) {
            return Err(Error::Config(
                "domain box must be non-empty with finite lo < hi on every axis".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, other: &DomainBox) -> bool {
        let inside = |(lo, hi): (f64, f64), (l2, h2): (f64, f64)| lo <= l2 && h2 <= hi;
        self.state.len() == other.state.len()
            && self.state.iter().zip(&other.state).all(|(a, b)| inside(*a, *b))
            && inside(self.input, other.input)
    }
}

#[derive(Clone)]
pub struct SystemSpec {
    pub n: usize,
    pub tau: f64,
    pub f: NonlinearityHandle,
    pub lipschitz_k: f64,
    pub domain_box: DomainBox,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("n", &self.n)
            .field("tau", &self.tau)
            .field("f", &self.f.describe())
            .field("lipschitz_k", &self.lipschitz_k)
            .field("domain_box", &self.domain_box)
            .finish()
    }
}

impl SystemSpec {
    pub fn new(
        tau: f64,
        f: NonlinearityHandle,
        lipschitz_k: f64,
        domain_box: DomainBox,
    ) -> Result<Self> {
        let n = f.dim();
        if n == 0 || n > matops::MAX_DIM {
            return Err(Error::Config(format!("dimension {n} out of range")));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("delay must be positive, got {tau}")));
        }
        if !(lipschitz_k.is_finite() && lipschitz_k >= 0.0) {
            return Err(Error::Config(format!(
                "Lipschitz constant must be non-negative, got {lipschitz_k}"
            )));
        }
        domain_box.validate()?;
        if domain_box.state.len() != n {
            return Err(Error::Config(format!(
                "domain box has {} axes, system dimension is {n}",
                domain_box.state.len()
            )));
        }
        check_vanishes_at_origin(f.as_ref())?;
        if !f.structurally_triangular() {
            probe_triangular(f.as_ref(), 0)?;
        }
        Ok(SystemSpec {
            n,
            tau,
            f,
            lipschitz_k,
            domain_box,
        })
    }
}

/// `L(θ) = [l₁θ, …, lₙθⁿ]ᵀ` and `K(θ) = [k₁θⁿ, …, kₙθ]`.
pub fn scale_gains(l: &[f64], k: &[f64], theta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_theta(theta)?;
    if l.len() != k.len() {
        return Err(Error::Config(format!(
            "gain lengths differ: L has {}, K has {}",
            l.len(),
            k.len()
        )));
    }
    let n = l.len() as i32;
    let l_scaled = l
        .iter()
        .enumerate()
        .map(|(i, li)| li * theta.powi(i as i32 + 1))
        .collect();
    let k_scaled = k
        .iter()
        .enumerate()
        .map(|(i, ki)| ki * theta.powi(n - i as i32))
        .collect();
    Ok((l_scaled, k_scaled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    l: Vec<f64>,
    k: Vec<f64>,
    theta: f64,
    l_scaled: Vec<f64>,
    k_scaled: Vec<f64>,
}

impl GainSet {
    /// Validates that `A + LC` and `A + BK` are Hurwitz for the companion triple.
    pub fn new(l: Vec<f64>, k: Vec<f64>, theta: f64) -> Result<Self> {
        let n = l.len();
        if n == 0 || n > matops::MAX_DIM {
            return Err(Error::Config(format!("gain dimension {n} out of range")));
        }
        if !l.iter().chain(&k).all(|v| v.is_finite()) {
            return Err(Error::Config("gains must be finite".into()));
        }
        let (l_scaled, k_scaled) = scale_gains(&l, &k, theta)?;
        let gains = GainSet {
            l,
            k,
            theta,
            l_scaled,
            k_scaled,
        };
        if !matops::is_hurwitz(&gains.observer_matrix()?) {
            return Err(Error::NotHurwitz(format!("A + LC with L = {:?}", gains.l)));
        }
        if !matops::is_hurwitz(&gains.feedback_matrix()?) {
            return Err(Error::NotHurwitz(format!("A + BK with K = {:?}", gains.k)));
        }
        Ok(gains)
    }

    pub fn n(&self) -> usize {
        self.l.len()
    }

    pub fn l(&self) -> &[f64] {
        &self.l
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn l_scaled(&self) -> &[f64] {
        &self.l_scaled
    }

    pub fn k_scaled(&self) -> &[f64] {
        &self.k_scaled
    }

    /// `A_L = A + LC`.
    pub fn observer_matrix(&self) -> Result<Matrix> {
        let (a, _, c) = matops::build_companion(self.n())?;
        Ok(a.add_outer(&self.l, &c))
    }

    /// `A_K = A + BK`.
    pub fn feedback_matrix(&self) -> Result<Matrix> {
        let (a, b, _) = matops::build_companion(self.n())?;
        Ok(a.add_outer(&b, &self.k))
    }

    /// Same gains at a different θ.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        let (l_scaled, k_scaled) = scale_gains(&self.l, &self.k, theta)?;
        Ok(GainSet {
            theta,
            l_scaled,
            k_scaled,
            ..self.clone()
        })
    }
}

/// Running lower bound on the Lipschitz constant of `f` in `(x, x_delayed)`,
/// uniformly in `u`.
///
/// Samples only ever raise the estimate, so adding samples drawn from a
/// larger box never lowers it.
pub struct LipschitzProbe<'a> {
    f: &'a dyn Nonlinearity,
    estimate: f64,
}

impl<'a> LipschitzProbe<'a> {
    pub fn new(f: &'a dyn Nonlinearity) -> Self {
        LipschitzProbe { f, estimate: 0.0 }
    }

    pub fn estimate(&self) -> f64 {
        self.estimate
    }

    pub fn add_samples(&mut self, domain: &DomainBox, samples: usize, seed: u64) -> Result<()> {
        domain.validate()?;
        let n = self.f.dim();
        if domain.state.len() != n {
            return Err(Error::Config(format!(
                "domain box has {} axes, system dimension is {n}",
                domain.state.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
            let point = domain
                .state
                .iter()
                .chain(&domain.state)
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect();
            (point, rng.random_range(domain.input.0..=domain.input.1))
        };
        // Slopes often peak on the boundary: pin each coordinate to a face
        // with probability 1/8.
        let draw_probe = |rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
            let point = domain
                .state
                .iter()
                .chain(&domain.state)
                .map(|&(lo, hi)| match rng.random_range(0..16u8) {
                    0 => lo,
                    1 => hi,
                    _ => rng.random_range(lo..=hi),
                })
                .collect();
            (point, rng.random_range(domain.input.0..=domain.input.1))
        };
        let eval = |p: &[f64], u: f64| self.f.eval(&p[..n], &p[n..], u);
        let dist = |a: &[f64], b: &[f64]| matops::norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());

        for _ in 0..samples {
            // Random pair sharing the same input.
            let (p, u) = draw(&mut rng);
            let (q, _) = draw(&mut rng);
            let d = dist(&p, &q);
            if d > 0.0 {
                self.raise(dist(&eval(&p, u), &eval(&q, u)) / d);
            }

            // Central-difference Jacobian at p; its spectral norm bounds the
            // local slope from below.
            let (p, u) = draw_probe(&mut rng);
            let mut jac = vec![vec![0.0; 2 * n]; n];
            for (col, scale) in p.iter().enumerate().map(|(c, v)| (c, v.abs().max(1.0))) {
                let step = 1e-6 * scale;
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[col] += step;
                minus[col] -= step;
                let (fp, fm) = (eval(&plus, u), eval(&minus, u));
                for row in 0..n {
                    jac[row][col] = (fp[row] - fm[row]) / (2.0 * step);
                }
            }
            self.raise(jacobian_norm(&jac)?);
        }
        Ok(())
    }

    fn raise(&mut self, value: f64) {
        if value.is_finite() && value > self.estimate {
            self.estimate = value;
        }
    }
}

/// `‖J‖₂ = sqrt(λmax(J Jᵀ))` for an n×2n Jacobian.
fn jacobian_norm(jac: &[Vec<f64>]) -> Result<f64> {
    let n = jac.len();
    let mut gram = Matrix::zeros(n)?;
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = jac[i].iter().zip(&jac[j]).map(|(a, b)| a * b).sum();
        }
    }
    if !gram.max_abs().is_finite() {
        return Ok(f64::NAN);
    }
    Ok(matops::symmetric_eigenvalues(&gram)
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0)
        .sqrt())
}

/// Advisory lower bound on the Lipschitz constant of `f` over `domain`.
pub fn estimate_lipschitz(
    f: &dyn Nonlinearity,
    domain: &DomainBox,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 100 {
        return Err(Error::Config(format!(
            "at least 100 samples required, got {samples}"
        )));
    }
    let mut probe = LipschitzProbe::new(f);
    probe.add_samples(domain, samples, seed)?;
    Ok(probe.estimate())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn scale_gains_examples() {
        let (l, k) = scale_gains(&[-14.0, -28.0], &[-30.0, -30.0], 1.0).unwrap();
        assert_eq!((l, k), (vec![-14.0, -28.0], vec![-30.0, -30.0]));
        let (l, k) = scale_gains(&[-14.0, -28.0], &[-30.0, -30.0], 8.0).unwrap();
        assert_eq!(l, vec![-112.0, -1792.0]);
        assert_eq!(k, vec![-1920.0, -240.0]);
        assert!(scale_gains(&[1.0], &[1.0], 0.0).is_err());
        assert!(scale_gains(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn registry_handles() {
        let zero = make_nonlinearity(&NonlinearitySource::Registry {
            name: "zero".into(),
            n: 2,
        })
        .unwrap();
        assert_eq!(zero.eval(&[3.0, 4.0], &[1.0, 2.0], 7.0), vec![0.0, 0.0]);

        let paper = make_nonlinearity(&NonlinearitySource::Registry {
            name: "paper_example".into(),
            n: 2,
        })
        .unwrap();
        let v = paper.eval(&[PI, 0.0], &[2.0, 0.0], 0.0);
        assert!((v[0] - (2.0 - PI)).abs() < 1e-15);
        assert_eq!(v[1], 0.0);

        let err = make_nonlinearity(&NonlinearitySource::Registry {
            name: "nope".into(),
            n: 2,
        });
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn triangularity_violation_names_variable() {
        let err = make_nonlinearity(&NonlinearitySource::Expressions(vec![
            "x2".into(),
            "x1".into(),
        ]))
        .err()
        .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("component 1") && msg.contains("x2"), "{msg}");

        let err = make_nonlinearity(&NonlinearitySource::Expressions(vec![
            "x1".into(),
            "xd3".into(),
            "0".into(),
        ]))
        .err()
        .unwrap();
        assert!(err.to_string().contains("xd3"));
    }

    #[test]
    fn expressions_must_vanish_at_origin() {
        let err = make_nonlinearity(&NonlinearitySource::Expressions(vec!["1+x1".into()]));
        assert!(matches!(err, Err(Error::Validation(_))));
        let err = make_nonlinearity(&NonlinearitySource::Expressions(vec!["cos(u)".into()]));
        assert!(matches!(err, Err(Error::Validation(_))));
        let err = make_nonlinearity(&NonlinearitySource::Expressions(vec!["t*x1".into()]));
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    struct Opaque;
    impl Nonlinearity for Opaque {
        fn dim(&self) -> usize {
            2
        }
        fn eval_into(&self, x: &[f64], _xd: &[f64], _u: f64, out: &mut [f64]) {
            out[0] = x[1].sin();
            out[1] = 0.0;
        }
        fn describe(&self) -> String {
            "opaque".into()
        }
    }

    #[test]
    fn probing_catches_opaque_violation() {
        let err = SystemSpec::new(1.0, Arc::new(Opaque), 0.0, DomainBox::symmetric(2, 1.0));
        let msg = err.err().unwrap().to_string();
        assert!(msg.contains("x2"), "{msg}");
    }

    #[test]
    fn system_spec_validation() {
        let f: NonlinearityHandle = Arc::new(ZeroNonlinearity { n: 2 });
        let bx = DomainBox::symmetric(2, 1.0);
        assert!(SystemSpec::new(1.0, f.clone(), 0.5, bx.clone()).is_ok());
        assert!(SystemSpec::new(0.0, f.clone(), 0.5, bx.clone()).is_err());
        assert!(SystemSpec::new(1.0, f.clone(), -1.0, bx.clone()).is_err());
        assert!(SystemSpec::new(1.0, f.clone(), 0.5, DomainBox::symmetric(3, 1.0)).is_err());
        let inverted = DomainBox {
            state: vec![(1.0, -1.0); 2],
            input: (-1.0, 1.0),
        };
        assert!(SystemSpec::new(1.0, f, 0.5, inverted).is_err());
    }

    #[test]
    fn gain_set_validation() {
        let g = GainSet::new(vec![-14.0, -28.0], vec![-30.0, -30.0], 8.0).unwrap();
        assert_eq!(g.k_scaled(), &[-1920.0, -240.0]);
        assert!(matches!(
            GainSet::new(vec![-14.0, -28.0], vec![0.0, 0.0], 8.0),
            Err(Error::NotHurwitz(_))
        ));
        assert!(matches!(
            GainSet::new(vec![14.0, -28.0], vec![-30.0, -30.0], 8.0),
            Err(Error::NotHurwitz(_))
        ));
        assert!(matches!(
            GainSet::new(vec![-14.0, -28.0], vec![-30.0, -30.0], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lipschitz_zero_and_sine() {
        let zero = ZeroNonlinearity { n: 2 };
        let est = estimate_lipschitz(&zero, &DomainBox::symmetric(2, 5.0), 200, 0).unwrap();
        assert_eq!(est, 0.0);

        let sine = make_nonlinearity(&NonlinearitySource::Expressions(vec![
            "sin(x1)".into(),
            "0".into(),
        ]))
        .unwrap();
        let bx = DomainBox::symmetric(2, 5.0);
        let est = estimate_lipschitz(sine.as_ref(), &bx, 1000, 7).unwrap();
        assert!((est - 1.0).abs() <= 0.05, "{est}");
        assert!(estimate_lipschitz(sine.as_ref(), &bx, 99, 7).is_err());
    }

    #[test]
    fn lipschitz_deterministic_per_seed() {
        let f = PaperExample { n: 2 };
        let bx = DomainBox::symmetric(2, 20.0);
        let a = estimate_lipschitz(&f, &bx, 300, 3).unwrap();
        let b = estimate_lipschitz(&f, &bx, 300, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
