//! Saddle-point fields for importance sampling.
//!
//! The effective action of an observable is `S_𝒪 = S_0 - log F_𝒪`. Its
//! stationarity condition reads `φ(t′) = 2𝒥 w(t′)` with `w_j(t′)` the weak
//! value of `Sᶻ_j` at time `t′`: the forward state propagated to `t′`,
//! contracted with the observable's bra propagated back from `t_f`.
//!
//! For the normalization the bra is the forward state itself and the weak
//! value collapses to `⟨Sᶻ⟩`, which is the mean-field condition; the field
//! is then real and independent of `t_f`. Loschmidt actions use `⟨↓…↓|` or
//! `⟨↑…↑|` as bra, which makes the field complex and `t_f` dependent.
//!
//! Fields are piecewise constant on the integrator grid: the value at node
//! `n` drives the step `[t_n, t_{n+1}]`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::CouplingModel;
use crate::sde::{steps_for, DisentanglingTrajectory};
use crate::spinor::{Spinor, StepPropagator};
use crate::C64;

/// Complex field `φ_SP,j(t_n)` on grid nodes `n = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleField {
    pub end_time: f64,
    pub dt: f64,
    pub n_sites: usize,
    values: Vec<C64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl SaddleField {
    pub fn from_values(dt: f64, n_sites: usize, values: Vec<C64>) -> Result<Self> {
        if n_sites == 0 || values.is_empty() || values.len() % n_sites != 0 {
            return Err(Error::DimensionMismatch { expected: n_sites, got: values.len() });
        }
        let n_steps = values.len() / n_sites - 1;
        Ok(Self {
            end_time: n_steps as f64 * dt,
            dt,
            n_sites,
            values,
            iterations: 0,
            converged: true,
            residual: 0.0,
        })
    }

    /// Zero field over `[0, t_max]`.
    pub fn zeros(n_sites: usize, t_max: f64, dt: f64) -> Result<Self> {
        let n = steps_for(t_max, dt)?;
        Self::from_values(dt, n_sites, vec![C64::new(0.0, 0.0); (n + 1) * n_sites])
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.n_sites - 1
    }

    pub fn node(&self, n: usize) -> &[C64] {
        &self.values[n * self.n_sites..(n + 1) * self.n_sites]
    }

    pub fn value(&self, n: usize, site: usize) -> C64 {
        self.values[n * self.n_sites + site]
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `max |Im φ|`; zero for a field that satisfies the reality condition.
    pub fn max_imag(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.im.abs()))
    }

    /// `max_j,n |φ_j - φ_0|`, zero for a translation-invariant field.
    pub fn site_spread(&self) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..=self.n_steps() {
            let node = self.node(n);
            for v in node {
                worst = worst.max((v - node[0]).norm());
            }
        }
        worst
    }

    /// Sup-norm distance over the first `nodes` grid nodes.
    pub fn distance(&self, other: &SaddleField, nodes: usize) -> Result<f64> {
        if self.n_sites != other.n_sites {
            return Err(Error::DimensionMismatch { expected: self.n_sites, got: other.n_sites });
        }
        let limit = nodes.min(self.n_steps() + 1).min(other.n_steps() + 1);
        let m = limit * self.n_sites;
        Ok(self.values[..m]
            .iter()
            .zip(&other.values[..m])
            .fold(0.0, |acc, (a, b)| acc.max((a - b).norm())))
    }

    /// Verifies that this field can shift a trajectory of `n_steps` steps.
    pub fn check_grid(&self, n_sites: usize, dt: f64, n_steps: usize) -> Result<()> {
        if self.n_sites != n_sites {
            return Err(Error::DimensionMismatch { expected: n_sites, got: self.n_sites });
        }
        if (self.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::InvalidPlan(format!(
                "saddle field dt {} differs from integrator dt {dt}",
                self.dt
            )));
        }
        if self.n_steps() < n_steps {
            return Err(Error::OutsideGrid { time: n_steps as f64 * dt, t_max: self.end_time });
        }
        Ok(())
    }

    /// Copy extended (or truncated) to `n_steps`, holding the last node.
    pub fn resized(&self, n_steps: usize) -> SaddleField {
        let n = self.n_sites;
        let mut values = Vec::with_capacity((n_steps + 1) * n);
        for k in 0..=n_steps {
            values.extend_from_slice(self.node(k.min(self.n_steps())));
        }
        SaddleField {
            end_time: n_steps as f64 * self.dt,
            dt: self.dt,
            n_sites: n,
            values,
            iterations: 0,
            converged: false,
            residual: f64::NAN,
        }
    }

    /// Rows `t,site,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,site,re,im\n");
        self.write_rows(&mut out, None);
        out
    }

    fn write_rows(&self, out: &mut String, prefix: Option<f64>) {
        for k in 0..=self.n_steps() {
            let t = k as f64 * self.dt;
            for (j, v) in self.node(k).iter().enumerate() {
                match prefix {
                    Some(tf) => {
                        let _ = writeln!(out, "{tf},{t},{j},{},{}", v.re, v.im);
                    }
                    None => {
                        let _ = writeln!(out, "{t},{j},{},{}", v.re, v.im);
                    }
                }
            }
        }
    }
}

/// Which `F_𝒪` the saddle point extremizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpAction {
    Normalization,
    /// Translation-averaged `Sᶻ`.
    MagnetizationZ,
    LoschmidtDd,
    LoschmidtUd,
}

impl SpAction {
    pub fn name(self) -> &'static str {
        match self {
            SpAction::Normalization => "normalization",
            SpAction::MagnetizationZ => "mz",
            SpAction::LoschmidtDd => "loschmidt-dd",
            SpAction::LoschmidtUd => "loschmidt-ud",
        }
    }
}

impl fmt::Display for SpAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalization" | "norm" => Ok(SpAction::Normalization),
            "mz" | "magnetization-z" => Ok(SpAction::MagnetizationZ),
            "loschmidt-dd" | "dd" => Ok(SpAction::LoschmidtDd),
            "loschmidt-ud" | "ud" => Ok(SpAction::LoschmidtUd),
            other => Err(Error::InvalidPlan(format!(
                "unknown saddle-point action '{other}' (expected normalization, mz, loschmidt-dd, loschmidt-ud)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpOptions {
    pub dt: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Switch to under-relaxation after `damping_trigger` non-monotone
    /// iterations.
    pub damping: bool,
    pub damping_factor: f64,
    pub damping_trigger: usize,
}

impl SpOptions {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            tolerance: 1e-8,
            max_iter: 1000,
            damping: true,
            damping_factor: 0.5,
            damping_trigger: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidPlan(format!("saddle dt must be positive, got {}", self.dt)));
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidPlan("tolerance and max_iter must be positive".into()));
        }
        if !(self.damping_factor > 0.0 && self.damping_factor <= 1.0) {
            return Err(Error::InvalidPlan("damping factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Outcome of one recursive solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SpTraceEntry {
    pub end_time: f64,
    /// Number of fixed-point map evaluations.
    pub iterations: usize,
    /// Last sup-norm change.
    pub residual: f64,
    pub converged: bool,
    pub damped: bool,
    /// Sup-norm change after every iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpIterationTrace {
    pub entries: Vec<SpTraceEntry>,
}

impl SpIterationTrace {
    /// Rows `t_f,n_sp,residual,converged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_f,n_sp,residual,converged\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.end_time, e.iterations, e.residual, e.converged);
        }
        out
    }
}

/// The map `φ ↦ 2𝒥 w[φ]`. Uniform models are solved on a single site.
struct FixedPointMap<'a> {
    model: &'a CouplingModel,
    action: SpAction,
    dt: f64,
    n_steps: usize,
    n_true: usize,
    n_eff: usize,
    row_sum: f64,
}

impl<'a> FixedPointMap<'a> {
    fn new(model: &'a CouplingModel, action: SpAction, t_f: f64, dt: f64) -> Result<Self> {
        let n_steps = steps_for(t_f, dt)?;
        let n_true = model.n_sites();
        let uniform = model.is_uniform();
        Ok(Self {
            model,
            action,
            dt,
            n_steps,
            n_true,
            n_eff: if uniform { 1 } else { n_true },
            row_sum: model.interaction().row(0).sum(),
        })
    }

    fn len(&self) -> usize {
        (self.n_steps + 1) * self.n_eff
    }

    fn expand(&self, reduced: &[C64]) -> Vec<C64> {
        if self.n_eff == self.n_true {
            return reduced.to_vec();
        }
        reduced
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(self.n_true))
            .collect()
    }

    fn reduce(&self, full: &SaddleField) -> Result<Vec<C64>> {
        if full.n_sites != self.n_true {
            return Err(Error::DimensionMismatch { expected: self.n_true, got: full.n_sites });
        }
        let f = full.resized(self.n_steps);
        if self.n_eff == self.n_true {
            return Ok(f.values);
        }
        Ok((0..=self.n_steps).map(|k| f.value(k, 0)).collect())
    }

    /// Writes `2𝒥 w[φ]` into `out`; returns false if it is not finite.
    fn apply(&self, phi: &[C64], out: &mut [C64]) -> bool {
        let (ne, ns, dt) = (self.n_eff, self.n_steps, self.dt);
        let j_coupling = self.model.coupling();
        let mut psi = vec![Spinor::down(); (ns + 1) * ne];
        let mut props = Vec::with_capacity(ns * ne);
        for n in 0..ns {
            for j in 0..ne {
                let u = StepPropagator::new(
                    self.model.h_plus()[j],
                    self.model.h_z()[j] + j_coupling * phi[n * ne + j],
                    self.model.h_minus()[j],
                    dt,
                );
                psi[(n + 1) * ne + j] = u.apply(psi[n * ne + j]);
                props.push(u);
            }
        }

        let mz = self.action == SpAction::MagnetizationZ;
        let mut w = vec![C64::new(0.0, 0.0); (ns + 1) * ne];
        let mut dm = if mz { vec![C64::new(0.0, 0.0); (ns + 1) * ne] } else { Vec::new() };
        let mut m_sum = C64::new(0.0, 0.0);
        for j in 0..ne {
            let last = psi[ns * ne + j];
            let zero = Spinor { up: C64::new(0.0, 0.0), down: C64::new(0.0, 0.0) };
            let (mut r, mut kappa) = match self.action {
                SpAction::Normalization | SpAction::MagnetizationZ => (last.conj(), last.conj().sz()),
                SpAction::LoschmidtDd => (Spinor::down(), zero),
                SpAction::LoschmidtUd => (Spinor::up(), zero),
            };
            let m_j = kappa.dot(last) / r.dot(last);
            m_sum += m_j;
            for n in (0..=ns).rev() {
                if n < ns {
                    let u = &props[n * ne + j];
                    r = u.apply_left(r);
                    if mz {
                        kappa = u.apply_left(kappa);
                    }
                }
                let s = psi[n * ne + j];
                let den = r.dot(s);
                let rz = r.dot(s.sz());
                w[n * ne + j] = rz / den;
                if mz {
                    dm[n * ne + j] = (kappa.dot(s.sz()) - m_j * rz) / den;
                }
            }
        }
        if mz {
            let f_o = m_sum / ne as f64;
            let scale = 1.0 / (self.n_true as f64 * f_o);
            for (wv, d) in w.iter_mut().zip(&dm) {
                *wv += d * scale;
            }
        }

        if ne == 1 {
            let factor = 2.0 * self.row_sum;
            for (o, v) in out.iter_mut().zip(&w) {
                *o = v * factor;
            }
        } else {
            let jm = self.model.interaction();
            for n in 0..=ns {
                for a in 0..ne {
                    let mut acc = C64::new(0.0, 0.0);
                    for b in 0..ne {
                        acc += w[n * ne + b] * (2.0 * jm[(a, b)]);
                    }
                    out[n * ne + a] = acc;
                }
            }
        }
        out.iter().all(|v| v.is_finite())
    }
}

fn sup_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| {
        let d = (x - y).norm();
        if d.is_nan() {
            f64::INFINITY
        } else {
            m.max(d)
        }
    })
}

/// Mean-field saddle point of the normalization: co-integrates the
/// single-site states and sets `φ_n = 2𝒥⟨Sᶻ⟩(t_n)`.
pub fn mean_field_sp(model: &CouplingModel, t_max: f64, dt: f64) -> Result<SaddleField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidPlan(format!("dt must be positive, got {dt}")));
    }
    let n_steps = steps_for(t_max, dt)?;
    let n = model.n_sites();
    let jm = model.interaction();
    let mut psi = vec![Spinor::down(); n];
    let mut values = Vec::with_capacity((n_steps + 1) * n);
    let mut v = vec![0.0; n];
    for step in 0..=n_steps {
        for (vj, s) in v.iter_mut().zip(&psi) {
            *vj = s.sz_expectation();
        }
        let node: Vec<f64> = (0..n)
            .map(|a| 2.0 * (0..n).map(|b| jm[(a, b)] * v[b]).sum::<f64>())
            .collect();
        if node.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPlan(format!("mean-field trajectory diverged at step {step}")));
        }
        values.extend(node.iter().map(|&x| C64::new(x, 0.0)));
        if step == n_steps {
            break;
        }
        for j in 0..n {
            let u = StepPropagator::new(
                model.h_plus()[j],
                C64::new(model.h_z()[j] + model.coupling() * node[j], 0.0),
                model.h_minus()[j],
                dt,
            );
            psi[j] = u.apply(psi[j]).normalized();
        }
    }
    SaddleField::from_values(dt, n, values)
}

/// `sup |2𝒥 w[φ] - φ|` for a given field over its own end time.
pub fn fixed_point_residual(model: &CouplingModel, action: SpAction, field: &SaddleField) -> Result<f64> {
    let map = FixedPointMap::new(model, action, field.end_time, field.dt)?;
    let phi = map.reduce(field)?;
    let mut out = vec![C64::new(0.0, 0.0); map.len()];
    map.apply(&phi, &mut out);
    let full = map.expand(&out);
    Ok(sup_diff(&full, field.values()))
}

/// Picard iteration for the saddle point of `action` at end time `t_f`.
/// Non-convergence is reported through the flag and trace, not as an error.
pub fn recursive_sp(
    model: &CouplingModel,
    action: SpAction,
    t_f: f64,
    options: &SpOptions,
    initial: Option<&SaddleField>,
) -> Result<(SaddleField, SpTraceEntry)> {
    options.validate()?;
    let map = FixedPointMap::new(model, action, t_f, options.dt)?;
    let mut phi = match initial {
        Some(f) => map.reduce(f)?,
        None => vec![C64::new(0.0, 0.0); map.len()],
    };
    let mut next = vec![C64::new(0.0, 0.0); map.len()];
    let mut history = Vec::new();
    let mut non_monotone = 0usize;
    let mut damped = false;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..options.max_iter {
        let finite = map.apply(&phi, &mut next);
        let change = if finite { sup_diff(&next, &phi) } else { f64::INFINITY };
        if let Some(&prev) = history.last() {
            if change > prev {
                non_monotone += 1;
            }
        }
        history.push(change);
        residual = change;
        if !finite {
            break;
        }
        if options.damping && !damped && non_monotone >= options.damping_trigger {
            damped = true;
        }
        if change < options.tolerance {
            std::mem::swap(&mut phi, &mut next);
            converged = true;
            break;
        }
        if damped {
            let a = options.damping_factor;
            for (p, q) in phi.iter_mut().zip(&next) {
                *p += (q - *p) * a;
            }
        } else {
            std::mem::swap(&mut phi, &mut next);
        }
    }
    let entry = SpTraceEntry {
        end_time: t_f,
        iterations: history.len(),
        residual,
        converged,
        damped,
        history,
    };
    let mut field = SaddleField::from_values(options.dt, map.n_true, map.expand(&phi))?;
    field.end_time = t_f;
    field.iterations = entry.iterations;
    field.converged = converged;
    field.residual = residual;
    Ok((field, entry))
}

/// Saddle points for a list of increasing end times.
#[derive(Debug, Clone)]
pub struct SpScan {
    pub fields: Vec<SaddleField>,
    pub trace: SpIterationTrace,
}

impl SpScan {
    /// Rows `t_f,t,site,re,im` for every solved end time.
    pub fn fields_csv(&self) -> String {
        let mut out = String::from("t_f,t,site,re,im\n");
        for f in &self.fields {
            f.write_rows(&mut out, Some(f.end_time));
        }
        out
    }
}

/// Solves [`recursive_sp`] for every end time. Without warm starts the
/// solves are independent and run in parallel.
pub fn sp_endtime_scan(
    model: &CouplingModel,
    action: SpAction,
    end_times: &[f64],
    options: &SpOptions,
    warm_start: bool,
) -> Result<SpScan> {
    if end_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidPlan("end times must be strictly increasing".into()));
    }
    let results: Vec<(SaddleField, SpTraceEntry)> = if warm_start {
        let mut out: Vec<(SaddleField, SpTraceEntry)> = Vec::with_capacity(end_times.len());
        for &tf in end_times {
            let init = out.last().filter(|(f, _)| f.converged).map(|(f, _)| f.clone());
            out.push(recursive_sp(model, action, tf, options, init.as_ref())?);
        }
        out
    } else {
        end_times
            .par_iter()
            .map(|&tf| recursive_sp(model, action, tf, options, None))
            .collect::<Result<Vec<_>>>()?
    };
    let (fields, entries) = results.into_iter().unzip();
    Ok(SpScan { fields, trace: SpIterationTrace { entries } })
}

/// Lie component of a field perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LieIndex {
    Plus,
    Z,
    Minus,
}

/// `δξ⁺(t_n)/δφ^a(t′)` and `δξᶻ(t_n)/δφ^a(t′)` for `n ≥ n′`.
#[derive(Debug, Clone)]
pub struct FunctionalDerivative {
    pub times: Vec<f64>,
    pub d_plus: Vec<C64>,
    pub d_z: Vec<C64>,
}

/// Response of one site's disentangling variables to a field kick at grid
/// node `n_prime`, by trapezoidal quadrature along a stored normal-chart
/// trajectory (equal-time convention `θ(0) = 1`).
pub fn functional_derivatives(
    model: &CouplingModel,
    trajectory: &DisentanglingTrajectory,
    site: usize,
    n_prime: usize,
    a: LieIndex,
) -> Result<FunctionalDerivative> {
    let n_steps = trajectory.n_steps();
    if n_prime > n_steps {
        return Err(Error::OutsideGrid { time: trajectory.time(n_prime), t_max: trajectory.time(n_steps) });
    }
    if site >= trajectory.n_sites {
        return Err(Error::DimensionMismatch { expected: trajectory.n_sites, got: site });
    }
    if (n_prime..=n_steps).any(|n| trajectory.state(n, site).chart != crate::sde::Chart::Normal) {
        return Err(Error::InvalidPlan(
            "functional derivatives need the normal chart after t′".into(),
        ));
    }
    let i = C64::i();
    let j_coupling = model.coupling();
    let h_minus = model.h_minus()[site];
    let dt = trajectory.dt;
    let xi0 = trajectory.state(n_prime, site).ratio;
    let (pref_plus, pref_z) = match a {
        LieIndex::Plus => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
        LieIndex::Z => (xi0, C64::new(1.0, 0.0)),
        LieIndex::Minus => (-xi0 * xi0, -2.0 * xi0),
    };
    let mut times = Vec::with_capacity(n_steps - n_prime + 1);
    let mut d_plus = Vec::with_capacity(times.capacity());
    let mut d_z = Vec::with_capacity(times.capacity());
    let mut exponent = C64::new(0.0, 0.0);
    let mut integral = C64::new(0.0, 0.0);
    let mut prev = C64::new(0.0, 0.0);
    for n in n_prime..=n_steps {
        if n > n_prime {
            let m = n - 1;
            let xa = trajectory.state(m, site).ratio;
            let xb = trajectory.state(n, site).ratio;
            exponent += i * (trajectory.z_increment(m, site) - h_minus * (xa + xb) * dt);
        }
        let dp = i * j_coupling * pref_plus * exponent.exp();
        if n > n_prime {
            integral += 0.5 * h_minus * (prev + dp) * dt;
        }
        prev = dp;
        times.push(trajectory.time(n));
        d_plus.push(dp);
        d_z.push(i * j_coupling * pref_z - 2.0 * i * integral);
    }
    Ok(FunctionalDerivative { times, d_plus, d_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ising_coupling, IsingParams, LatticeSpec};

    fn chain(n: usize, gamma: f64, h: f64) -> CouplingModel {
        build_ising_coupling(
            &LatticeSpec::chain(n).unwrap(),
            IsingParams { coupling: 1.0, transverse: gamma, longitudinal: h },
        )
        .unwrap()
    }

    #[test]
    fn mean_field_initial_value_is_minus_dimension() {
        let m = build_ising_coupling(
            &LatticeSpec::square(3, 3).unwrap(),
            IsingParams { coupling: 1.0, transverse: 2.0, longitudinal: 2.0 },
        )
        .unwrap();
        let f = mean_field_sp(&m, 0.5, 0.01).unwrap();
        for j in 0..9 {
            assert!((f.value(0, j) - C64::new(-2.0, 0.0)).norm() < 1e-14);
        }
        assert!(f.site_spread() < 1e-10);
        assert!(f.max_imag() == 0.0);
    }

    #[test]
    fn classical_quench_keeps_constant_field() {
        let m = chain(5, 0.0, 0.7);
        let f = mean_field_sp(&m, 1.0, 0.01).unwrap();
        for k in 0..=f.n_steps() {
            assert!((f.value(k, 2) - C64::new(-1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn normalization_recursion_matches_mean_field() {
        for model in [chain(5, 2.0, 1.0), chain(4, 1.0, 0.3)] {
            let opts = SpOptions::new(0.01);
            let (f, e) = recursive_sp(&model, SpAction::Normalization, 1.0, &opts, None).unwrap();
            assert!(e.converged, "{:?}", e.history);
            let mf = mean_field_sp(&model, 1.0, 0.01).unwrap();
            assert!(f.distance(&mf, usize::MAX).unwrap() < 1e-10);
        }
    }

    #[test]
    fn nonuniform_model_uses_full_map() {
        let lattice = LatticeSpec::chain(3).unwrap();
        let base = chain(3, 1.5, 0.5);
        let mut hz = base.h_z().to_vec();
        hz[1] = -0.8;
        let m = CouplingModel::from_parts(
            lattice,
            base.interaction().clone(),
            1.0,
            base.h_plus().to_vec(),
            hz,
            base.h_minus().to_vec(),
        )
        .unwrap();
        assert!(!m.is_uniform());
        let opts = SpOptions::new(0.01);
        let (f, e) = recursive_sp(&m, SpAction::Normalization, 0.8, &opts, None).unwrap();
        assert!(e.converged);
        let mf = mean_field_sp(&m, 0.8, 0.01).unwrap();
        assert!(f.distance(&mf, usize::MAX).unwrap() < 1e-10);
        assert!(f.site_spread() > 1e-3);
    }

    #[test]
    fn loschmidt_field_is_complex_and_converges_early() {
        let m = chain(10, 8.0, 0.0);
        let opts = SpOptions::new(1e-3);
        let (f, e) = recursive_sp(&m, SpAction::LoschmidtDd, 0.2, &opts, None).unwrap();
        assert!(e.converged && e.iterations < 50, "{}", e.iterations);
        assert!(f.max_imag() > 1e-3);
        assert!((f.value(0, 0).re + 1.0).abs() < 0.5);
        let r = fixed_point_residual(&m, SpAction::LoschmidtDd, &f).unwrap();
        assert!(r < 10.0 * opts.tolerance);
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let m = chain(6, 8.0, 0.0);
        let opts = SpOptions::new(1e-3);
        let times = [0.1, 0.15, 0.2];
        let cold = sp_endtime_scan(&m, SpAction::LoschmidtDd, &times, &opts, false).unwrap();
        let warm = sp_endtime_scan(&m, SpAction::LoschmidtDd, &times, &opts, true).unwrap();
        for (a, b) in cold.fields.iter().zip(&warm.fields) {
            assert!(a.distance(b, usize::MAX).unwrap() < 1e-7);
        }
        assert!(warm.trace.entries[2].iterations <= cold.trace.entries[2].iterations);
        assert_eq!(cold.trace.to_csv().lines().count(), 4);
    }

    #[test]
    fn scan_rejects_unsorted_times() {
        let m = chain(3, 1.0, 0.0);
        let opts = SpOptions::new(0.01);
        assert!(sp_endtime_scan(&m, SpAction::LoschmidtDd, &[0.2, 0.1], &opts, false).is_err());
    }

    #[test]
    fn action_names_roundtrip() {
        for a in [SpAction::Normalization, SpAction::MagnetizationZ, SpAction::LoschmidtDd, SpAction::LoschmidtUd] {
            assert_eq!(a.name().parse::<SpAction>().unwrap(), a);
        }
        assert!("bogus".parse::<SpAction>().is_err());
    }

    #[test]
    fn csv_export_rows() {
        let m = chain(2, 1.0, 0.0);
        let f = mean_field_sp(&m, 0.02, 0.01).unwrap();
        let csv = f.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,-1,0"));
    }
}
