//! Disentangling-variable SDEs and their integrators.
//!
//! A single-site propagator `exp(i∫Φ·S)` is written as
//! `exp(ξ⁺S⁺) exp(ξᶻSᶻ) exp(ξ⁻S⁻)`. Acting on `|↓⟩` it gives
//! `e^{-ξᶻ/2} (|↓⟩ + ξ⁺|↑⟩)`, so only `ξ⁺` and `ξᶻ` enter observables:
//!
//! ```text
//! dξ⁺ = i[Φ⁺ + Φᶻ ξ⁺ - Φ⁻ (ξ⁺)²] dt
//! dξᶻ = i[Φᶻ - 2Φ⁻ ξ⁺] dt
//! dξ⁻ = iΦ⁻ e^{ξᶻ} dt
//! ```
//!
//! with `Φ^± = h^±` and `Φᶻ dt = hᶻ dt + J dφ`. The noise enters through
//! `Φᶻ` only, and the equations are to be read in the Stratonovich sense
//! (they come from composing exact short-time exponentials). Euler-Maruyama
//! is the Itô scheme and carries the corresponding correction.
//!
//! `ξ⁺` has poles at finite times. When `|ξ⁺|` exceeds a threshold the state
//! switches to the inverse chart `(η, ζ) = (1/ξ⁺, ξᶻ - 2 log ξ⁺)`, whose
//! equations are those of the normal chart with `Φ⁺ ↔ Φ⁻` and `Φᶻ → -Φᶻ`.
//! In the inverse chart the site state is `e^{-ζ/2} (|↑⟩ + η|↓⟩)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lattice::{CouplingModel, NoiseTransform};
use crate::saddle::SaddleField;
use crate::C64;

/// Default `|ξ⁺|` above which the state moves to the other chart.
pub const DEFAULT_CHART_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Itô Euler-Maruyama, strong order 1/2.
    EulerMaruyama,
    /// Stratonovich predictor-corrector, strong order 1 for this
    /// commutative noise.
    Heun,
    /// Derivative-free strong order 1 scheme (Platen's Milstein term) with
    /// a trapezoidal drift stage.
    StrongOrder1,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::EulerMaruyama, Scheme::Heun, Scheme::StrongOrder1];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler-maruyama",
            Scheme::Heun => "heun",
            Scheme::StrongOrder1 => "strong-order-1",
        }
    }

    pub fn strong_order(self) -> f64 {
        match self {
            Scheme::EulerMaruyama => 0.5,
            Scheme::Heun | Scheme::StrongOrder1 => 1.0,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler-maruyama" | "euler" | "em" => Ok(Scheme::EulerMaruyama),
            "heun" => Ok(Scheme::Heun),
            "strong-order-1" | "so1" | "platen" | "milstein" => Ok(Scheme::StrongOrder1),
            other => Err(Error::InvalidIntegrator(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSpec {
    pub scheme: Scheme,
    pub dt: f64,
    pub chart_threshold: f64,
    /// Integrate `ξ⁻` as well. Observables on `|↓⟩` do not need it.
    pub track_lowering: bool,
}

impl IntegratorSpec {
    pub fn new(scheme: Scheme, dt: f64) -> Result<Self> {
        let spec = Self {
            scheme,
            dt,
            chart_threshold: DEFAULT_CHART_THRESHOLD,
            track_lowering: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_chart_threshold(mut self, threshold: f64) -> Result<Self> {
        self.chart_threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lowering(mut self, track: bool) -> Self {
        self.track_lowering = track;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidIntegrator(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.chart_threshold.is_finite() && self.chart_threshold > 1.0) {
            return Err(Error::InvalidIntegrator(format!(
                "chart threshold must exceed 1, got {}",
                self.chart_threshold
            )));
        }
        Ok(())
    }

    /// Number of steps reaching `t`, which must be a multiple of `dt`.
    pub fn steps_for(&self, t: f64) -> Result<usize> {
        steps_for(t, self.dt)
    }
}

pub(crate) fn steps_for(t: f64, dt: f64) -> Result<usize> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidIntegrator(format!("time must be non-negative, got {t}")));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidIntegrator(format!(
            "time {t} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Chart {
    /// `(ξ⁺, ξᶻ)`.
    Normal,
    /// `(η, ζ) = (1/ξ⁺, ξᶻ - 2 log ξ⁺)`.
    Inverse,
}

impl Chart {
    fn sign(self) -> f64 {
        match self {
            Chart::Normal => 1.0,
            Chart::Inverse => -1.0,
        }
    }
}

/// Per-site amplitudes `e^{L} (a_↓, a_↑)` of the state reached from `|↓⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteAmplitudes {
    pub log_scale: C64,
    pub down: C64,
    pub up: C64,
}

/// Disentangling variables of one site in whichever chart is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteState {
    pub chart: Chart,
    /// `ξ⁺` in the normal chart, `η` in the inverse chart.
    pub ratio: C64,
    /// `ξᶻ` in the normal chart, `ζ` in the inverse chart.
    pub log_amp: C64,
    /// `ξ⁻` (chart independent; zero unless tracked).
    pub lowering: C64,
}

impl Default for SiteState {
    fn default() -> Self {
        Self::initial()
    }
}

impl SiteState {
    /// Identity propagator: all variables zero.
    pub fn initial() -> Self {
        let z = C64::new(0.0, 0.0);
        Self { chart: Chart::Normal, ratio: z, log_amp: z, lowering: z }
    }

    pub fn from_normal(xi_plus: C64, xi_z: C64) -> Self {
        Self { chart: Chart::Normal, ratio: xi_plus, log_amp: xi_z, lowering: C64::new(0.0, 0.0) }
    }

    pub fn xi_plus(&self) -> C64 {
        match self.chart {
            Chart::Normal => self.ratio,
            Chart::Inverse => self.ratio.inv(),
        }
    }

    pub fn xi_z(&self) -> C64 {
        match self.chart {
            Chart::Normal => self.log_amp,
            Chart::Inverse => self.log_amp - 2.0 * self.ratio.ln(),
        }
    }

    pub fn amplitudes(&self) -> SiteAmplitudes {
        let one = C64::new(1.0, 0.0);
        let log_scale = -0.5 * self.log_amp;
        match self.chart {
            Chart::Normal => SiteAmplitudes { log_scale, down: one, up: self.ratio },
            Chart::Inverse => SiteAmplitudes { log_scale, down: self.ratio, up: one },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ratio.is_finite() && self.log_amp.is_finite() && self.lowering.is_finite()
    }

    /// Moves to the other chart. `ξ⁺ = 0` (or `η = 0`) has no image.
    pub fn switch_chart(&self) -> Result<SiteState> {
        if self.ratio.norm() == 0.0 {
            return Err(Error::InvalidIntegrator("cannot invert a zero ratio".into()));
        }
        let chart = match self.chart {
            Chart::Normal => Chart::Inverse,
            Chart::Inverse => Chart::Normal,
        };
        // same formula both ways: p' = 1/p, l' = l - 2 log p
        Ok(SiteState {
            chart,
            ratio: self.ratio.inv(),
            log_amp: self.log_amp - 2.0 * self.ratio.ln(),
            lowering: self.lowering,
        })
    }
}

/// Switches chart if `|ratio|` exceeds `threshold`; otherwise returns the
/// state unchanged.
pub fn reparameterize(state: &SiteState, threshold: f64) -> Result<SiteState> {
    if state.ratio.norm() > threshold {
        state.switch_chart()
    } else {
        Ok(*state)
    }
}

/// Drift `(dξ⁺, dξᶻ, dξ⁻)/dt` of the normal-chart equations for given
/// `(Φ⁺, Φᶻ, Φ⁻)`. `xi` is `(ξ⁺, ξᶻ, ξ⁻)`.
pub fn drift(xi: [C64; 3], field: [C64; 3]) -> [C64; 3] {
    let i = C64::i();
    let [p, z, _] = xi;
    let [fp, fz, fm] = field;
    [
        i * (fp + fz * p - fm * p * p),
        i * (fz - 2.0 * fm * p),
        i * fm * z.exp(),
    ]
}

/// Real white-noise increments `ΔW` (variance `dt`) for every step and site.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    n_sites: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl NoisePath {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n_sites: usize, n_steps: usize, dt: f64) -> Self {
        let sd = dt.sqrt();
        let increments = (0..n_sites * n_steps)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { n_sites, dt, increments }
    }

    pub fn zeros(n_sites: usize, n_steps: usize, dt: f64) -> Self {
        Self { n_sites, dt, increments: vec![0.0; n_sites * n_steps] }
    }

    pub fn from_increments(n_sites: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if n_sites == 0 || increments.len() % n_sites != 0 {
            return Err(Error::DimensionMismatch { expected: n_sites, got: increments.len() });
        }
        Ok(Self { n_sites, dt, increments })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.n_sites
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, n: usize) -> &[f64] {
        &self.increments[n * self.n_sites..(n + 1) * self.n_sites]
    }

    /// Coarsens the path by summing groups of `factor` increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps() % factor != 0 {
            return Err(Error::InvalidIntegrator(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps()
            )));
        }
        let n = self.n_sites;
        let mut out = vec![0.0; self.increments.len() / factor];
        for (s, chunk) in self.increments.chunks(n * factor).enumerate() {
            for (k, v) in chunk.iter().enumerate() {
                out[s * n + k % n] += v;
            }
        }
        Ok(Self { n_sites: n, dt: self.dt * factor as f64, increments: out })
    }
}

/// Everything the integrator needs from the model, precomputed.
#[derive(Debug, Clone)]
pub(crate) struct Drive {
    n: usize,
    coupling: f64,
    /// `J O`, row major.
    k: Vec<C64>,
    /// `E[ΔY_j²]/dt` with `ΔY = J O ΔW`.
    ito: Vec<C64>,
    h_plus: Vec<C64>,
    h_minus: Vec<C64>,
    h_z: Vec<f64>,
}

impl Drive {
    pub fn new(model: &CouplingModel, transform: &NoiseTransform) -> Result<Self> {
        let n = model.n_sites();
        if transform.n_sites() != n {
            return Err(Error::DimensionMismatch { expected: n, got: transform.n_sites() });
        }
        let km = transform.coupling_matrix();
        let mut k = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                k.push(km[(r, c)]);
            }
        }
        let ito = (0..n).map(|r| (0..n).map(|c| k[r * n + c] * k[r * n + c]).sum()).collect();
        Ok(Self {
            n,
            coupling: model.coupling(),
            k,
            ito,
            h_plus: model.h_plus().to_vec(),
            h_minus: model.h_minus().to_vec(),
            h_z: model.h_z().to_vec(),
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    /// `ΔΘ_j = hᶻ_j dt + (J O ΔW)_j + J φ_j dt`.
    pub fn z_increments(&self, dw: &[f64], shift: Option<&[C64]>, dt: f64, out: &mut [C64]) {
        let n = self.n;
        for j in 0..n {
            let row = &self.k[j * n..(j + 1) * n];
            let mut acc = C64::new(self.h_z[j] * dt, 0.0);
            for (kj, w) in row.iter().zip(dw) {
                acc += kj * w;
            }
            if let Some(s) = shift {
                acc += s[j] * (self.coupling * dt);
            }
            out[j] = acc;
        }
    }
}

/// Advances one site by one step in its current chart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_site(
    state: &mut SiteState,
    h_plus: C64,
    h_minus: C64,
    dtheta: C64,
    ito: C64,
    dt: f64,
    scheme: Scheme,
    track_lowering: bool,
) {
    let i = C64::i();
    let sigma = state.chart.sign();
    let (a, b) = match state.chart {
        Chart::Normal => (h_plus, h_minus),
        Chart::Inverse => (h_minus, h_plus),
    };
    let p = state.ratio;
    let l = state.log_amp;
    let fp = |p: C64| i * (a - b * p * p);
    let fl = |p: C64| -2.0 * i * b * p;
    let isd = i * sigma * dtheta;

    let (p_new, l_new) = match scheme {
        Scheme::EulerMaruyama => {
            // Itô correction ½ b ∂b E[dΘ²] with b = iσp
            let p1 = p + fp(p) * dt + p * isd - 0.5 * ito * p * dt;
            (p1, l + fl(p) * dt + isd)
        }
        Scheme::Heun => {
            let ps = p + fp(p) * dt + p * isd;
            let p1 = p + 0.5 * (fp(p) + fp(ps)) * dt + 0.5 * (p + ps) * isd;
            (p1, l + 0.5 * (fl(p) + fl(ps)) * dt + isd)
        }
        Scheme::StrongOrder1 => {
            // Platen's derivative-free Milstein term (exact here since the
            // diffusion is linear in p); the drift and the drift-rotation
            // cross term are taken to second order so that deterministic
            // fields cost no accuracy. A step depends on ΔΘ only, which
            // keeps the change of measure exact on the grid.
            let sq = dt.sqrt();
            let support = p + i * sigma * p * sq;
            let rot = p * isd + i * sigma * (support - p) / (2.0 * sq) * dtheta * dtheta;
            let ps = p + fp(p) * dt + rot;
            let p1 = p + 0.5 * (fp(p) + fp(ps)) * dt + rot + 0.5 * isd * fp(p) * dt;
            (p1, l + 0.5 * (fl(p) + fl(ps)) * dt + isd)
        }
    };

    if track_lowering {
        let ez = |p: C64, l: C64| match state.chart {
            Chart::Normal => l.exp(),
            Chart::Inverse => l.exp() / (p * p),
        };
        let rate0 = i * h_minus * ez(p, l);
        let inc = match scheme {
            Scheme::Heun => 0.5 * (rate0 + i * h_minus * ez(p_new, l_new)) * dt,
            _ => rate0 * dt,
        };
        state.lowering += inc;
    }
    state.ratio = p_new;
    state.log_amp = l_new;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct StepOutcome {
    pub switches: u32,
    pub finite: bool,
}

/// Steps all sites of one branch.
pub(crate) struct Propagator<'a> {
    pub drive: &'a Drive,
    pub spec: &'a IntegratorSpec,
    pub shift: Option<&'a SaddleField>,
}

impl<'a> Propagator<'a> {
    pub fn new(
        drive: &'a Drive,
        spec: &'a IntegratorSpec,
        shift: Option<&'a SaddleField>,
        n_steps: usize,
    ) -> Result<Self> {
        if let Some(f) = shift {
            f.check_grid(drive.n_sites(), spec.dt, n_steps)?;
        }
        Ok(Self { drive, spec, shift })
    }

    pub fn advance(&self, n: usize, states: &mut [SiteState], dw: &[f64], scratch: &mut [C64]) -> StepOutcome {
        let dt = self.spec.dt;
        let shift = self.shift.map(|f| f.node(n));
        self.drive.z_increments(dw, shift, dt, scratch);
        let mut out = StepOutcome { switches: 0, finite: true };
        for (j, s) in states.iter_mut().enumerate() {
            step_site(
                s,
                self.drive.h_plus[j],
                self.drive.h_minus[j],
                scratch[j],
                self.drive.ito[j],
                dt,
                self.spec.scheme,
                self.spec.track_lowering,
            );
            if !s.is_finite() {
                out.finite = false;
                continue;
            }
            if s.ratio.norm() > self.spec.chart_threshold {
                if let Ok(sw) = s.switch_chart() {
                    *s = sw;
                    out.switches += 1;
                }
            }
        }
        out
    }
}

/// States of every site at every grid time.
#[derive(Debug, Clone)]
pub struct DisentanglingTrajectory {
    pub branch: Branch,
    pub dt: f64,
    pub n_sites: usize,
    states: Vec<SiteState>,
    z_increments: Vec<C64>,
    pub chart_switches: u64,
    /// First step index after which the state was no longer finite.
    pub diverged_at: Option<usize>,
}

impl DisentanglingTrajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() / self.n_sites - 1
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn states(&self, n: usize) -> &[SiteState] {
        &self.states[n * self.n_sites..(n + 1) * self.n_sites]
    }

    pub fn state(&self, n: usize, site: usize) -> &SiteState {
        &self.states[n * self.n_sites + site]
    }

    /// `ΔΘ_j` used on step `n` (`hᶻ dt` plus noise and shift).
    pub fn z_increment(&self, n: usize, site: usize) -> C64 {
        self.z_increments[n * self.n_sites + site]
    }

    pub fn is_valid(&self) -> bool {
        self.diverged_at.is_none()
    }
}

/// Integrates one branch from the identity over the whole noise path.
/// Both branches obey the same equations; conjugation of the backward
/// branch happens when observables are formed.
pub fn integrate_trajectory(
    model: &CouplingModel,
    transform: &NoiseTransform,
    spec: &IntegratorSpec,
    noise: &NoisePath,
    shift: Option<&SaddleField>,
    branch: Branch,
) -> Result<DisentanglingTrajectory> {
    spec.validate()?;
    let n = model.n_sites();
    if noise.n_sites() != n {
        return Err(Error::DimensionMismatch { expected: n, got: noise.n_sites() });
    }
    if (noise.dt() - spec.dt).abs() > 1e-12 * spec.dt {
        return Err(Error::InvalidIntegrator(format!(
            "noise dt {} differs from integrator dt {}",
            noise.dt(),
            spec.dt
        )));
    }
    let drive = Drive::new(model, transform)?;
    let n_steps = noise.n_steps();
    let prop = Propagator::new(&drive, spec, shift, n_steps)?;
    let mut current = vec![SiteState::initial(); n];
    let mut states = Vec::with_capacity((n_steps + 1) * n);
    states.extend_from_slice(&current);
    let mut z_increments = Vec::with_capacity(n_steps * n);
    let mut scratch = vec![C64::new(0.0, 0.0); n];
    let mut switches = 0u64;
    let mut diverged_at = None;
    for step in 0..n_steps {
        let out = prop.advance(step, &mut current, noise.step(step), &mut scratch);
        z_increments.extend_from_slice(&scratch);
        switches += out.switches as u64;
        if !out.finite && diverged_at.is_none() {
            diverged_at = Some(step);
        }
        states.extend_from_slice(&current);
    }
    Ok(DisentanglingTrajectory {
        branch,
        dt: spec.dt,
        n_sites: n,
        states,
        z_increments,
        chart_switches: switches,
        diverged_at,
    })
}
