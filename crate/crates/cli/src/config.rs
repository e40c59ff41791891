//! Run configuration: TOML with nested sections, validated in full before
//! anything runs.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spinsde::lattice::{build_ising_coupling_with, CouplingModel, IsingParams, LatticeSpec, DEFAULT_REGULARIZATION};
use spinsde::observables::ObservableFn;
use spinsde::saddle::{SpAction, SpOptions};
use spinsde::sampling::{SamplingMode, SamplingPlan};
use spinsde::sde::{IntegratorSpec, Scheme, DEFAULT_CHART_THRESHOLD};

/// Prefix of the config lines embedded in output files.
pub const EMBED_PREFIX: &str = "#| ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lattice: LatticeSection,
    pub hamiltonian: HamiltonianSection,
    pub integrator: IntegratorSection,
    pub sampling: SamplingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saddle: Option<SaddleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSection {
    pub dims: Vec<usize>,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSection {
    #[serde(rename = "J")]
    pub coupling: f64,
    #[serde(rename = "gamma")]
    pub transverse: f64,
    #[serde(rename = "h")]
    pub longitudinal: f64,
    #[serde(default = "default_initial_state")]
    pub initial_state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSection {
    pub scheme: String,
    pub dt: f64,
    pub t_max: f64,
    /// Record every this many steps.
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default = "default_chart_threshold")]
    pub chart_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSection {
    pub mode: String,
    pub n_traj: usize,
    #[serde(default = "default_batches")]
    pub n_batches: usize,
    pub seed: u64,
    #[serde(default = "default_observables")]
    pub observables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSection {
    #[serde(default = "default_action")]
    pub action: String,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "yes")]
    pub damping: bool,
    /// End times for saddle scans and Loschmidt rates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub end_times: Vec<f64>,
    #[serde(default)]
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
}

fn default_regularization() -> f64 {
    DEFAULT_REGULARIZATION
}
fn default_initial_state() -> String {
    InitialState::Down.to_string()
}
fn one() -> usize {
    1
}
fn default_chart_threshold() -> f64 {
    DEFAULT_CHART_THRESHOLD
}
fn default_batches() -> usize {
    5
}
fn default_observables() -> Vec<String> {
    vec!["norm".into(), "mz".into()]
}
fn default_action() -> String {
    SpAction::Normalization.name().into()
}
fn default_tolerance() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    1000
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    Down,
    /// Equal superposition of the two ferromagnetic states; sampled as the
    /// return rate from `|↓…↓⟩` to either of them.
    FmSuperposition,
}

impl fmt::Display for InitialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitialState::Down => "down",
            InitialState::FmSuperposition => "fm-superposition",
        })
    }
}

impl FromStr for InitialState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "down" => Ok(InitialState::Down),
            "fm-superposition" => Ok(InitialState::FmSuperposition),
            other => Err(format!("unknown initial state '{other}' (expected down or fm-superposition)")),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for line in &self.0 {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Everything a command needs, checked and converted.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: CouplingModel,
    pub initial: InitialState,
    pub integrator: IntegratorSpec,
    pub t_max: f64,
    pub record_every: usize,
    pub plan: SamplingPlan,
    pub observables: Vec<ObservableFn>,
    pub action: SpAction,
    pub sp_options: SpOptions,
    pub end_times: Vec<f64>,
    pub warm_start: bool,
}

impl RunConfig {
    /// Parses TOML, rejecting every key the schema does not know.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError(vec![e.to_string()]))?;
        let mut unknown = Vec::new();
        let parsed: Result<RunConfig, _> = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()));
        let mut errors: Vec<String> = unknown.into_iter().map(|k| format!("{k}: unknown key")).collect();
        match parsed {
            Ok(cfg) if errors.is_empty() => Ok(cfg),
            Ok(_) => Err(ConfigError(errors)),
            Err(e) => {
                errors.push(e.to_string().trim().to_string());
                Err(ConfigError(errors))
            }
        }
    }

    /// Accepts a TOML file or an output CSV carrying an embedded config.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        if text.lines().any(|l| l.starts_with(EMBED_PREFIX.trim_end())) {
            let embedded: Vec<&str> = text
                .lines()
                .filter_map(|l| l.strip_prefix(EMBED_PREFIX).or_else(|| (l == EMBED_PREFIX.trim_end()).then_some("")))
                .collect();
            return Self::from_toml(&embedded.join("\n"));
        }
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config as embedded in output files: output location stripped so
    /// reruns from it are independent of where files were written.
    pub fn embedded(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.to_toml().lines().map(|l| format!("{EMBED_PREFIX}{l}").trim_end().to_string() + "\n").collect()
    }

    pub fn prefix(&self) -> String {
        self.output.as_ref().and_then(|o| o.prefix.clone()).unwrap_or_else(|| "run".into())
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output.as_ref().and_then(|o| o.dir.clone())
    }

    /// Validates every field, collecting all problems before failing.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errors.push(msg);
            }
        };
        let h = &self.hamiltonian;
        for (key, v) in [("hamiltonian.J", h.coupling), ("hamiltonian.gamma", h.transverse), ("hamiltonian.h", h.longitudinal)] {
            check(v.is_finite(), format!("{key}: must be finite, got {v}"));
        }
        check(h.coupling != 0.0, "hamiltonian.J: must be nonzero".into());
        let initial = h.initial_state.parse::<InitialState>();
        if let Err(e) = &initial {
            check(false, format!("hamiltonian.initial_state: {e}"));
        }

        let lattice = LatticeSpec::new(self.lattice.dims.clone());
        if let Err(e) = &lattice {
            check(false, format!("lattice.dims: {e}"));
        }
        let reg = self.lattice.regularization;
        check(reg.is_finite(), format!("lattice.regularization: must be finite, got {reg}"));

        let ig = &self.integrator;
        let scheme = ig.scheme.parse::<Scheme>();
        if scheme.is_err() {
            let valid: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
            check(false, format!("integrator.scheme: unknown scheme '{}' (valid: {})", ig.scheme, valid.join(", ")));
        }
        check(ig.dt > 0.0 && ig.dt.is_finite(), format!("integrator.dt: must be positive, got {}", ig.dt));
        check(ig.t_max > 0.0 && ig.t_max.is_finite(), format!("integrator.t_max: must be positive, got {}", ig.t_max));
        check(ig.record_every > 0, "integrator.record_every: must be positive".into());
        check(
            ig.chart_threshold > 1.0 && ig.chart_threshold.is_finite(),
            format!("integrator.chart_threshold: must exceed 1, got {}", ig.chart_threshold),
        );
        let mut n_steps = None;
        if ig.dt > 0.0 && ig.t_max > 0.0 {
            let ratio = ig.t_max / ig.dt;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                check(false, format!("integrator.t_max: {} is not a multiple of dt = {}", ig.t_max, ig.dt));
            } else {
                n_steps = Some(ratio.round() as usize);
            }
        }
        if let Some(n) = n_steps {
            if ig.record_every > 0 && n % ig.record_every != 0 {
                check(false, format!("integrator.record_every: {} does not divide the {n} steps", ig.record_every));
            }
        }

        let s = &self.sampling;
        let mode = s.mode.parse::<SamplingMode>();
        if let Err(e) = &mode {
            check(false, format!("sampling.mode: {e}"));
        }
        check(s.n_traj > 0, "sampling.n_traj: must be positive".into());
        check(s.n_batches > 0, "sampling.n_batches: must be positive".into());
        if s.n_traj > 0 && s.n_batches > 0 && s.n_traj % s.n_batches != 0 {
            check(false, format!("sampling.n_batches: {} does not divide n_traj = {}", s.n_batches, s.n_traj));
        }
        let mut observables = Vec::new();
        for name in &s.observables {
            match name.parse::<ObservableFn>() {
                Ok(o) => observables.push(o),
                Err(e) => check(false, format!("sampling.observables: {e}")),
            }
        }
        check(!s.observables.is_empty(), "sampling.observables: must not be empty".into());
        if let Ok(l) = &lattice {
            for o in &observables {
                if let ObservableFn::MagnetizationZ(spinsde::observables::SiteSel::Site(i))
                | ObservableFn::MagnetizationX(spinsde::observables::SiteSel::Site(i)) = o
                {
                    check(*i < l.n_sites(), format!("sampling.observables: site {i} outside {} sites", l.n_sites()));
                }
            }
        }

        let default_saddle = SaddleSection {
            action: default_action(),
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
            damping: true,
            end_times: Vec::new(),
            warm_start: false,
        };
        let sp = self.saddle.as_ref().unwrap_or(&default_saddle);
        let action = sp.action.parse::<SpAction>();
        if let Err(e) = &action {
            check(false, format!("saddle.action: {e}"));
        }
        check(sp.tolerance > 0.0, format!("saddle.tolerance: must be positive, got {}", sp.tolerance));
        check(sp.max_iter > 0, "saddle.max_iter: must be positive".into());
        check(
            sp.end_times.windows(2).all(|w| w[1] > w[0]),
            "saddle.end_times: must be strictly increasing".into(),
        );
        check(
            sp.end_times.iter().all(|t| *t > 0.0 && *t <= ig.t_max + 1e-12),
            format!("saddle.end_times: must lie in (0, t_max = {}]", ig.t_max),
        );
        if initial == Ok(InitialState::FmSuperposition) {
            check(!sp.end_times.is_empty(), "saddle.end_times: required for the fm-superposition rate".into());
        }

        let model = match &lattice {
            Ok(l) if errors.is_empty() => build_ising_coupling_with(
                l,
                IsingParams { coupling: h.coupling, transverse: h.transverse, longitudinal: h.longitudinal },
                reg,
            )
            .map_err(|e| vec![format!("lattice: {e}")]),
            _ => Err(Vec::new()),
        };
        let model = match model {
            Ok(m) => m,
            Err(mut more) => {
                errors.append(&mut more);
                return Err(ConfigError(errors));
            }
        };
        let integrator = IntegratorSpec::new(scheme.expect("checked"), ig.dt)
            .and_then(|i| i.with_chart_threshold(ig.chart_threshold))
            .map_err(|e| ConfigError(vec![format!("integrator: {e}")]))?;
        let mut sp_options = SpOptions::new(ig.dt);
        sp_options.tolerance = sp.tolerance;
        sp_options.max_iter = sp.max_iter;
        sp_options.damping = sp.damping;
        Ok(Resolved {
            model,
            initial: initial.expect("checked"),
            integrator,
            t_max: ig.t_max,
            record_every: ig.record_every,
            plan: SamplingPlan::new(mode.expect("checked"), s.n_traj, s.seed).with_batches(s.n_batches),
            observables,
            action: action.expect("checked"),
            sp_options,
            end_times: sp.end_times.clone(),
            warm_start: sp.warm_start,
        })
    }
}
