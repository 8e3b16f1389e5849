//! TOML run configuration.
//!
//! ```toml
//! [system]
//! n = 2
//! tau = 1.0
//! lipschitz_k = 0.5
//! f = "paper_example"            # or a list of expressions, one per component
//! domain_box = { state = [[-30.0, 30.0], [-30.0, 30.0]], input = [-1.0, 1.0] }
//!
//! [gains]
//! L = [-14.0, -28.0]
//! K = [-30.0, -30.0]
//! theta = 8.0
//!
//! [sim]
//! h = 0.001
//! T = 10.0
//! x0 = [-20.0, -10.0]
//! xhat0 = [10.0, 10.0]
//! history = "constant"           # or { x = ["..."], xhat = ["..."] } in t
//! seed = 0
//!
//! [scenario]
//! mode = "observer_based"
//!
//! [output]
//! directory = "out"
//! emit_plots = true
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ratstab_core::ddesim::{delay_steps, History, InputSignal, Scenario};
use ratstab_core::sysmodel::{make_nonlinearity, DomainBox, GainSet, NonlinearitySource, SystemSpec};
use ratstab_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub gains: GainsSection,
    pub sim: SimSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub tau: f64,
    pub lipschitz_k: f64,
    pub f: FSource,
    pub domain_box: BoxSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum FSource {
    Registry(String),
    Expressions(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub state: Vec<[f64; 2]>,
    #[serde(default = "default_input_range")]
    pub input: [f64; 2],
}

fn default_input_range() -> [f64; 2] {
    [-1.0, 1.0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSection {
    #[serde(rename = "L")]
    pub l: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub theta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub h: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub xhat0: Option<Vec<f64>>,
    #[serde(default)]
    pub history: HistorySpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(untagged)]
pub enum HistorySpec {
    #[default]
    #[serde(deserialize_with = "constant_keyword")]
    Constant,
    Expressions(HistoryExpressions),
}

fn constant_keyword<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<(), D::Error> {
    let s = String::deserialize(d)?;
    if s == "constant" {
        Ok(())
    } else {
        Err(serde::de::Error::custom(format!(
            "history must be \"constant\" or a table of expressions, got \"{s}\""
        )))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryExpressions {
    pub x: Vec<String>,
    #[serde(default)]
    pub xhat: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenLoop,
    StateFeedback,
    Observer,
    ObserverBased,
    OutputFeedback,
}

impl Mode {
    pub fn has_observer(self) -> bool {
        matches!(self, Mode::Observer | Mode::ObserverBased | Mode::OutputFeedback)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OpenLoop => "open_loop",
            Mode::StateFeedback => "state_feedback",
            Mode::Observer => "observer",
            Mode::ObserverBased => "observer_based",
            Mode::OutputFeedback => "output_feedback",
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub mode: Mode,
    /// Exogenous input `u(t)` for the observer-only mode.
    #[serde(default)]
    pub input: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub emit_plots: bool,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            emit_plots: false,
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub theta: Option<f64>,
    pub seed: Option<u64>,
}

/// Everything the commands need, validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub system: SystemSpec,
    pub gains: GainSet,
    pub scenario: Scenario,
    pub phi: History,
    pub phi_hat: History,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output.directory = out.clone();
        }
        if let Some(h) = o.step {
            self.sim.h = h;
        }
        if let Some(t) = o.horizon {
            self.sim.t_end = t;
        }
        if let Some(theta) = o.theta {
            self.gains.theta = theta;
        }
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
        }
    }

    fn check_numbers(&self) -> Result<()> {
        let n = self.system.n;
        let mut named: Vec<(&str, &[f64])> = vec![
            ("system.tau", std::slice::from_ref(&self.system.tau)),
            ("system.lipschitz_k", std::slice::from_ref(&self.system.lipschitz_k)),
            ("system.domain_box.input", &self.system.domain_box.input),
            ("gains.L", &self.gains.l),
            ("gains.K", &self.gains.k),
            ("gains.theta", std::slice::from_ref(&self.gains.theta)),
            ("sim.h", std::slice::from_ref(&self.sim.h)),
            ("sim.T", std::slice::from_ref(&self.sim.t_end)),
            ("sim.x0", &self.sim.x0),
        ];
        if let Some(xh) = &self.sim.xhat0 {
            named.push(("sim.xhat0", xh));
        }
        for (name, values) in &named {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        for pair in &self.system.domain_box.state {
            if pair.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("system.domain_box.state must be finite".into()));
            }
        }
        for (name, len) in [
            ("gains.L", self.gains.l.len()),
            ("gains.K", self.gains.k.len()),
            ("sim.x0", self.sim.x0.len()),
            ("system.domain_box.state", self.system.domain_box.state.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has length {len}, expected n = {n}")));
            }
        }
        if let Some(xh) = &self.sim.xhat0 {
            if xh.len() != n {
                return Err(Error::Config(format!("sim.xhat0 has length {}, expected n = {n}", xh.len())));
            }
        }
        if !(self.gains.theta > 0.0) {
            return Err(Error::Config(format!("gains.theta must be positive, got {}", self.gains.theta)));
        }
        if !(self.sim.t_end >= self.sim.h) {
            return Err(Error::Config(format!("sim.T = {} must be at least sim.h = {}", self.sim.t_end, self.sim.h)));
        }
        delay_steps(self.system.tau, self.sim.h)?;
        Ok(())
    }

    pub fn resolve(self) -> Result<Resolved> {
        self.check_numbers()?;
        let n = self.system.n;
        let source = match &self.system.f {
            FSource::Registry(name) => NonlinearitySource::Registry { name: name.clone(), n },
            FSource::Expressions(list) => {
                if list.len() != n {
                    return Err(Error::Config(format!(
                        "system.f has {} components, expected n = {n}",
                        list.len()
                    )));
                }
                NonlinearitySource::Expressions(list.clone())
            }
        };
        let f = make_nonlinearity(&source)?;
        let domain = DomainBox {
            state: self.system.domain_box.state.iter().map(|p| (p[0], p[1])).collect(),
            input: (self.system.domain_box.input[0], self.system.domain_box.input[1]),
        };
        let system = SystemSpec::new(self.system.tau, f, self.system.lipschitz_k, domain)?;
        let gains = GainSet::new(self.gains.l.clone(), self.gains.k.clone(), self.gains.theta)?;

        let scenario = match self.scenario.mode {
            Mode::OpenLoop => Scenario::OpenLoop,
            Mode::StateFeedback => Scenario::StateFeedback,
            Mode::Observer => Scenario::ObserverOnly {
                input: match &self.scenario.input {
                    Some(text) => InputSignal::parse(text)?,
                    None => InputSignal::Zero,
                },
            },
            Mode::ObserverBased => Scenario::ObserverBased,
            Mode::OutputFeedback => Scenario::OutputFeedback,
        };
        if self.scenario.input.is_some() && self.scenario.mode != Mode::Observer {
            return Err(Error::Config("scenario.input is only used by mode = \"observer\"".into()));
        }

        let xhat0 = match (&self.sim.xhat0, self.scenario.mode.has_observer()) {
            (Some(v), _) => v.clone(),
            (None, false) => vec![0.0; n],
            (None, true) => {
                return Err(Error::Config(format!(
                    "sim.xhat0 is required for mode = \"{}\"",
                    self.scenario.mode
                )))
            }
        };
        let (phi, phi_hat) = match &self.sim.history {
            HistorySpec::Constant => (History::constant(&self.sim.x0), History::constant(&xhat0)),
            HistorySpec::Expressions(h) => {
                let phi = history_from(&h.x, &self.sim.x0, "sim.history.x", n)?;
                let phi_hat = match &h.xhat {
                    Some(list) => history_from(list, &xhat0, "sim.history.xhat", n)?,
                    None => History::constant(&xhat0),
                };
                (phi, phi_hat)
            }
        };
        Ok(Resolved {
            config: self,
            system,
            gains,
            scenario,
            phi,
            phi_hat,
        })
    }
}

/// Expression history whose value at `t = 0` must agree with the point
/// initial condition.
fn history_from(list: &[String], at_zero: &[f64], name: &str, n: usize) -> Result<History> {
    if list.len() != n {
        return Err(Error::Config(format!("{name} has {} components, expected n = {n}", list.len())));
    }
    let history = History::from_expressions(list)?;
    let mut value = vec![0.0; n];
    history.eval(0.0, &mut value);
    for (i, (got, want)) in value.iter().zip(at_zero).enumerate() {
        if !((got - want).abs() <= 1e-9 * (1.0 + want.abs())) {
            return Err(Error::Config(format!(
                "{name}[{i}] evaluates to {got} at t = 0 but the initial state is {want}"
            )));
        }
    }
    Ok(history)
}
