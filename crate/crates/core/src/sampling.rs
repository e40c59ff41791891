//! Trajectory ensembles, importance weights and ensemble statistics.
//!
//! Each trajectory `k` draws its noise from its own ChaCha8 stream
//! `(seed, k)`, forward-branch increments before backward ones at every
//! step. Trajectories are grouped into fixed chunks inside contiguous
//! batches; chunk results are merged in index order, so estimates do not
//! depend on the number of worker threads.
//!
//! Under a shift `s = O⁻¹φ_SP` the noise is sampled around the saddle
//! point and every trajectory carries the weight
//! `W = exp(-Σ_n [s_n·ΔW_n + ½ s_n·s_n Δt])`. The backward branch enters
//! observables complex conjugated, so its weight uses `s*` while its
//! dynamics use the same shifted noise.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{CouplingModel, NoiseTransform};
use crate::observables::{
    evaluate_locals, log_loschmidt, return_probability, AmplitudeEstimate, LoschmidtKind, ObservableFn,
    RateEstimate,
};
use crate::saddle::{recursive_sp, SaddleField, SpAction, SpOptions, SpTraceEntry};
use crate::sde::{Branch, Drive, IntegratorSpec, NoisePath, Propagator, Scheme, SiteState};
use crate::C64;

/// Trajectories per reduction chunk.
const CHUNK: usize = 64;
/// Chunks handed to the thread pool at once.
const WAVE: usize = 64;
/// Fraction of invalid trajectories above which a run is unreliable.
pub const UNRELIABLE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    Direct,
    Importance,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Direct => "direct",
            SamplingMode::Importance => "importance",
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SamplingMode::Direct),
            "importance" => Ok(SamplingMode::Importance),
            other => Err(Error::InvalidPlan(format!(
                "unknown sampling mode '{other}' (expected direct or importance)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub mode: SamplingMode,
    pub n_traj: usize,
    pub n_batches: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl SamplingPlan {
    pub fn new(mode: SamplingMode, n_traj: usize, seed: u64) -> Self {
        Self { mode, n_traj, n_batches: 5, seed, workers: None }
    }

    pub fn with_batches(mut self, n_batches: usize) -> Self {
        self.n_batches = n_batches;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 || self.n_batches == 0 {
            return Err(Error::InvalidPlan("n_traj and n_batches must be positive".into()));
        }
        if self.n_traj % self.n_batches != 0 {
            return Err(Error::InvalidPlan(format!(
                "n_traj = {} is not divisible by n_batches = {}",
                self.n_traj, self.n_batches
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidPlan("workers must be positive".into()));
        }
        Ok(())
    }

    fn batch_size(&self) -> usize {
        self.n_traj / self.n_batches
    }
}

/// Independent stream for trajectory `k`.
pub fn trajectory_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Derives a sub-seed for an independent ensemble (splitmix64).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise-space shift `s_n = O⁻¹ φ_SP(t_n)` on every grid node.
#[derive(Debug, Clone)]
pub struct NoiseShift {
    n_sites: usize,
    values: Vec<C64>,
}

impl NoiseShift {
    pub fn new(transform: &NoiseTransform, field: &SaddleField) -> Result<Self> {
        let n = transform.n_sites();
        if field.n_sites != n {
            return Err(Error::DimensionMismatch { expected: n, got: field.n_sites });
        }
        let mut values = Vec::with_capacity(field.values().len());
        for k in 0..=field.n_steps() {
            values.extend(transform.noise_shift(field.node(k))?);
        }
        Ok(Self { n_sites: n, values })
    }

    pub fn node(&self, n: usize) -> &[C64] {
        &self.values[n * self.n_sites..(n + 1) * self.n_sites]
    }

    /// Contribution of step `n` to `log W` for one branch.
    fn log_weight_step(&self, n: usize, dw: &[f64], dt: f64, branch: Branch) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (s, w) in self.node(n).iter().zip(dw) {
            let s = match branch {
                Branch::Forward => *s,
                Branch::Backward => s.conj(),
            };
            acc += s * *w + 0.5 * s * s * dt;
        }
        -acc
    }
}

/// `log W` of one branch for a given noise path.
pub fn log_importance_weight(
    transform: &NoiseTransform,
    noise: &NoisePath,
    shift: &SaddleField,
    branch: Branch,
) -> Result<C64> {
    shift.check_grid(noise.n_sites(), noise.dt(), noise.n_steps())?;
    let s = NoiseShift::new(transform, shift)?;
    Ok((0..noise.n_steps())
        .map(|n| s.log_weight_step(n, noise.step(n), noise.dt(), branch))
        .sum())
}

/// `W = exp(-S_0[s] - Σ s·ΔW)` for one branch.
pub fn importance_weight(
    transform: &NoiseTransform,
    noise: &NoisePath,
    shift: &SaddleField,
    branch: Branch,
) -> Result<C64> {
    Ok(log_importance_weight(transform, noise, shift, branch)?.exp())
}

/// Running means and co-moments of a 4-vector (Welford/Chan updates).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CoMoments {
    n: f64,
    mean: [f64; 4],
    co: [[f64; 4]; 4],
}

impl CoMoments {
    fn push(&mut self, x: [f64; 4]) {
        self.n += 1.0;
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = x[i] - self.mean[i];
            self.mean[i] += d[i] / self.n;
        }
        for i in 0..4 {
            for j in 0..4 {
                self.co[i][j] += d[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn merge(&mut self, o: &CoMoments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = o.mean[i] - self.mean[i];
        }
        let f = self.n * o.n / n;
        for i in 0..4 {
            for j in 0..4 {
                self.co[i][j] += o.co[i][j] + d[i] * d[j] * f;
            }
            self.mean[i] += d[i] * o.n / n;
        }
        self.n = n;
    }

    fn quad(&self, a: &[f64; 4]) -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += a[i] * self.co[i][j] * a[j];
            }
        }
        s
    }

    /// Plain mean of components (0, 1) with covariance of that mean.
    fn mean_estimate(&self) -> (C64, f64, f64, f64) {
        let m = C64::new(self.mean[0], self.mean[1]);
        if self.n < 2.0 {
            return (m, f64::NAN, f64::NAN, f64::NAN);
        }
        let k = 1.0 / (self.n * (self.n - 1.0));
        (m, self.co[0][0] * k, self.co[1][1] * k, self.co[0][1] * k)
    }

    /// Ratio `(x0 + i x1)/(x2 + i x3)` with delta-method covariance.
    fn ratio_estimate(&self) -> (C64, f64, f64, f64) {
        let num = C64::new(self.mean[0], self.mean[1]);
        let den = C64::new(self.mean[2], self.mean[3]);
        let r = num / den;
        if self.n < 2.0 {
            return (r, f64::NAN, f64::NAN, f64::NAN);
        }
        // influence e = (N - R D)/D̄, split into real and imaginary rows
        let u = den.inv();
        let ur = u * r;
        let a_re = [u.re, -u.im, -ur.re, ur.im];
        let a_im = [u.im, u.re, -ur.im, -ur.re];
        let k = 1.0 / (self.n * (self.n - 1.0));
        let vr = self.quad(&a_re) * k;
        let vi = self.quad(&a_im) * k;
        let mut c = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                c += a_re[i] * self.co[i][j] * a_im[j];
            }
        }
        (r, vr.max(0.0), vi.max(0.0), c * k)
    }

    /// Population variance of the complex value in components (0, 1).
    fn spread(&self) -> f64 {
        if self.n == 0.0 {
            return f64::NAN;
        }
        (self.co[0][0] + self.co[1][1]) / self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Mean,
    Ratio,
}

#[derive(Debug, Clone, Default)]
struct TimeAcc {
    slots: Vec<CoMoments>,
}

impl TimeAcc {
    fn merge(&mut self, o: &TimeAcc) {
        for (a, b) in self.slots.iter_mut().zip(&o.slots) {
            a.merge(b);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ChunkResult {
    times: Vec<TimeAcc>,
    invalid: usize,
    switches: u64,
}

impl ChunkResult {
    fn empty(n_times: usize, n_slots: usize) -> Self {
        Self {
            times: vec![TimeAcc { slots: vec![CoMoments::default(); n_slots] }; n_times],
            invalid: 0,
            switches: 0,
        }
    }

    fn merge(&mut self, o: &ChunkResult) {
        for (a, b) in self.times.iter_mut().zip(&o.times) {
            a.merge(b);
        }
        self.invalid += o.invalid;
        self.switches += o.switches;
    }
}

/// One point of an estimated time series.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatePoint {
    pub mean: C64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub cov_re_im: f64,
    /// Standard deviation of the batch estimates over `√n_B`.
    pub stderr_batch: f64,
    pub batch_means: Vec<C64>,
    pub n_valid: usize,
}

impl EstimatePoint {
    pub fn amplitude(&self) -> AmplitudeEstimate {
        AmplitudeEstimate {
            mean: self.mean,
            var_re: self.stderr_re * self.stderr_re,
            var_im: self.stderr_im * self.stderr_im,
            cov_re_im: self.cov_re_im,
        }
    }
}

/// Time series of one observable.
#[derive(Debug, Clone)]
pub struct EnsembleEstimate {
    pub observable: ObservableFn,
    pub points: Vec<EstimatePoint>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub times: Vec<f64>,
    pub estimates: Vec<EnsembleEstimate>,
    /// Variance of `W·F_𝟙` (local runs) or of the first Loschmidt value.
    pub sigma_f2: Vec<f64>,
    pub n_valid: Vec<usize>,
    pub n_traj: usize,
    pub invalid: usize,
    pub chart_switches: u64,
    pub unreliable: bool,
    pub mode: SamplingMode,
    pub seed: u64,
    pub scheme: Scheme,
    pub dt: f64,
}

impl EnsembleRun {
    pub fn estimate(&self, o: ObservableFn) -> Option<&EnsembleEstimate> {
        self.estimates.iter().find(|e| e.observable == o)
    }
}

/// Node indices `0, every, 2·every, …` plus the final node.
pub fn record_grid(n_steps: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut v: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if *v.last().unwrap() != n_steps {
        v.push(n_steps);
    }
    v
}

#[derive(Debug, Clone)]
pub struct EnsembleRequest<'a> {
    pub model: &'a CouplingModel,
    pub transform: &'a NoiseTransform,
    pub integrator: &'a IntegratorSpec,
    pub observables: &'a [ObservableFn],
    pub plan: &'a SamplingPlan,
    pub t_max: f64,
    /// Grid nodes at which estimates are recorded (sorted, within range).
    pub record_steps: Vec<usize>,
    pub shift: Option<&'a SaddleField>,
}

enum Target {
    Local { ratio_obs: Vec<ObservableFn> },
    Loschmidt { kinds: Vec<LoschmidtKind> },
}

struct Engine<'a> {
    req: &'a EnsembleRequest<'a>,
    drive: Drive,
    shift: Option<NoiseShift>,
    n_steps: usize,
    target: Target,
    n_slots: usize,
    /// Slot per requested observable with its kind.
    layout: Vec<(usize, SlotKind)>,
}

impl<'a> Engine<'a> {
    fn new(req: &'a EnsembleRequest<'a>) -> Result<Self> {
        req.plan.validate()?;
        req.integrator.validate()?;
        let n_steps = req.integrator.steps_for(req.t_max)?;
        if req.observables.is_empty() {
            return Err(Error::InvalidPlan("no observables requested".into()));
        }
        if req.record_steps.is_empty()
            || req.record_steps.windows(2).any(|w| w[1] <= w[0])
            || *req.record_steps.last().unwrap() > n_steps
        {
            return Err(Error::InvalidPlan("record steps must be increasing and within the grid".into()));
        }
        match (req.plan.mode, req.shift) {
            (SamplingMode::Importance, None) => {
                return Err(Error::InvalidPlan("importance sampling needs a saddle field".into()))
            }
            (SamplingMode::Direct, Some(_)) => {
                return Err(Error::InvalidPlan("direct sampling takes no saddle field".into()))
            }
            _ => {}
        }
        let n_local = req.observables.iter().filter(|o| o.is_local()).count();
        let (target, n_slots, layout) = if n_local == req.observables.len() {
            let mut ratio_obs = Vec::new();
            let mut layout = Vec::new();
            for o in req.observables {
                if *o == ObservableFn::Norm {
                    layout.push((0, SlotKind::Mean));
                } else {
                    ratio_obs.push(*o);
                    layout.push((ratio_obs.len(), SlotKind::Ratio));
                }
            }
            let n = ratio_obs.len() + 1;
            (Target::Local { ratio_obs }, n, layout)
        } else if n_local == 0 {
            let kinds: Vec<LoschmidtKind> = req
                .observables
                .iter()
                .map(|o| match o {
                    ObservableFn::Loschmidt(k) => *k,
                    _ => unreachable!(),
                })
                .collect();
            if req.shift.is_some() && kinds.len() > 1 {
                return Err(Error::InvalidPlan(
                    "a shifted ensemble serves a single Loschmidt amplitude".into(),
                ));
            }
            let layout = (0..kinds.len()).map(|k| (k, SlotKind::Mean)).collect();
            let n = kinds.len();
            (Target::Loschmidt { kinds }, n, layout)
        } else {
            return Err(Error::InvalidPlan(
                "local observables and Loschmidt amplitudes need separate runs".into(),
            ));
        };
        let drive = Drive::new(req.model, req.transform)?;
        let shift = match req.shift {
            Some(f) => {
                f.check_grid(req.model.n_sites(), req.integrator.dt, n_steps)?;
                Some(NoiseShift::new(req.transform, f)?)
            }
            None => None,
        };
        Ok(Self { req, drive, shift, n_steps, target, n_slots, layout })
    }

    fn run_chunk(&self, start: usize, end: usize) -> ChunkResult {
        let req = self.req;
        let n = req.model.n_sites();
        let dt = req.integrator.dt;
        let sd = dt.sqrt();
        let prop = Propagator { drive: &self.drive, spec: req.integrator, shift: req.shift };
        let two = matches!(self.target, Target::Local { .. });
        let mut out = ChunkResult::empty(req.record_steps.len(), self.n_slots);
        let mut fwd = vec![SiteState::initial(); n];
        let mut bwd = vec![SiteState::initial(); n];
        let mut dw_f = vec![0.0; n];
        let mut dw_b = vec![0.0; n];
        let mut scratch = vec![C64::new(0.0, 0.0); n];
        for k in start..end {
            let mut rng = trajectory_rng(req.plan.seed, k as u64);
            fwd.fill(SiteState::initial());
            bwd.fill(SiteState::initial());
            let mut log_w = C64::new(0.0, 0.0);
            let mut rec = 0;
            let mut valid = true;
            for step in 0..=self.n_steps {
                if rec < req.record_steps.len() && req.record_steps[rec] == step {
                    self.record(&mut out.times[rec], &fwd, &bwd, log_w);
                    rec += 1;
                    if rec == req.record_steps.len() {
                        break;
                    }
                }
                for w in dw_f.iter_mut() {
                    *w = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
                if two {
                    for w in dw_b.iter_mut() {
                        *w = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    }
                }
                if let Some(s) = &self.shift {
                    log_w += s.log_weight_step(step, &dw_f, dt, Branch::Forward);
                    if two {
                        log_w += s.log_weight_step(step, &dw_b, dt, Branch::Backward);
                    }
                }
                let a = prop.advance(step, &mut fwd, &dw_f, &mut scratch);
                out.switches += a.switches as u64;
                let mut finite = a.finite;
                if two {
                    let b = prop.advance(step, &mut bwd, &dw_b, &mut scratch);
                    out.switches += b.switches as u64;
                    finite &= b.finite;
                }
                if !finite || !log_w.is_finite() {
                    valid = false;
                    break;
                }
            }
            if !valid {
                out.invalid += 1;
            }
        }
        out
    }

    fn record(&self, acc: &mut TimeAcc, fwd: &[SiteState], bwd: &[SiteState], log_w: C64) {
        match &self.target {
            Target::Local { ratio_obs } => {
                let Ok(Some(e)) = evaluate_locals(fwd, bwd, ratio_obs) else {
                    return;
                };
                let d = (log_w + e.log_norm).exp();
                if !d.is_finite() {
                    return;
                }
                acc.slots[0].push([d.re, d.im, 0.0, 0.0]);
                for (k, bar) in e.bars.iter().enumerate() {
                    let v = d * bar;
                    acc.slots[k + 1].push([v.re, v.im, d.re, d.im]);
                }
            }
            Target::Loschmidt { kinds } => {
                let vals: Vec<C64> = kinds
                    .iter()
                    .map(|&k| {
                        let l = log_w + log_loschmidt(fwd, k);
                        if l.re == f64::NEG_INFINITY {
                            C64::new(0.0, 0.0)
                        } else {
                            l.exp()
                        }
                    })
                    .collect();
                if vals.iter().any(|v| !v.is_finite()) {
                    return;
                }
                for (slot, v) in acc.slots.iter_mut().zip(&vals) {
                    slot.push([v.re, v.im, 0.0, 0.0]);
                }
            }
        }
    }

    fn run(&self) -> Result<EnsembleRun> {
        let plan = self.req.plan;
        let bs = plan.batch_size();
        let mut chunks = Vec::new();
        for b in 0..plan.n_batches {
            let mut s = b * bs;
            while s < (b + 1) * bs {
                let e = (s + CHUNK).min((b + 1) * bs);
                chunks.push((b, s, e));
                s = e;
            }
        }
        let n_times = self.req.record_steps.len();
        let mut batches = vec![ChunkResult::empty(n_times, self.n_slots); plan.n_batches];
        for wave in chunks.chunks(WAVE) {
            let results: Vec<ChunkResult> = wave.par_iter().map(|&(_, s, e)| self.run_chunk(s, e)).collect();
            for (&(b, _, _), r) in wave.iter().zip(&results) {
                batches[b].merge(r);
            }
        }
        let mut total = ChunkResult::empty(n_times, self.n_slots);
        for b in &batches {
            total.merge(b);
        }
        Ok(self.summarize(&total, &batches))
    }

    fn summarize(&self, total: &ChunkResult, batches: &[ChunkResult]) -> EnsembleRun {
        let req = self.req;
        let dt = req.integrator.dt;
        let times: Vec<f64> = req.record_steps.iter().map(|&s| s as f64 * dt).collect();
        let n_valid: Vec<usize> = total.times.iter().map(|t| t.slots[0].n as usize).collect();
        let sigma_f2 = total.times.iter().map(|t| t.slots[0].spread()).collect();
        let estimates = req
            .observables
            .iter()
            .zip(&self.layout)
            .map(|(&o, &(slot, kind))| {
                let points = (0..times.len())
                    .map(|ti| {
                        let est = |m: &CoMoments| match kind {
                            SlotKind::Mean => m.mean_estimate(),
                            SlotKind::Ratio => m.ratio_estimate(),
                        };
                        let m = &total.times[ti].slots[slot];
                        let (mean, vr, vi, c) = est(m);
                        let batch_means: Vec<C64> =
                            batches.iter().map(|b| est(&b.times[ti].slots[slot]).0).collect();
                        EstimatePoint {
                            mean,
                            stderr_re: vr.sqrt(),
                            stderr_im: vi.sqrt(),
                            cov_re_im: c,
                            stderr_batch: batch_stderr(&batch_means),
                            batch_means,
                            n_valid: m.n as usize,
                        }
                    })
                    .collect();
                EnsembleEstimate { observable: o, points }
            })
            .collect();
        EnsembleRun {
            times,
            estimates,
            sigma_f2,
            n_valid,
            n_traj: req.plan.n_traj,
            invalid: total.invalid,
            chart_switches: total.switches,
            unreliable: total.invalid as f64 > UNRELIABLE_FRACTION * req.plan.n_traj as f64,
            mode: req.plan.mode,
            seed: req.plan.seed,
            scheme: req.integrator.scheme,
            dt,
        }
    }
}

fn batch_stderr(means: &[C64]) -> f64 {
    let k = means.len();
    if k < 2 {
        return f64::NAN;
    }
    let avg = means.iter().map(|m| m.re).sum::<f64>() / k as f64;
    let var = means.iter().map(|m| (m.re - avg).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

/// Runs an ensemble and reduces it to estimates on the record grid.
pub fn run_ensemble(req: &EnsembleRequest) -> Result<EnsembleRun> {
    let engine = Engine::new(req)?;
    let run = match req.plan.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidPlan(format!("thread pool: {e}")))?
            .install(|| engine.run())?,
        None => engine.run()?,
    };
    if run.n_valid.last().copied().unwrap_or(0) == 0 {
        return Err(Error::AllInvalid { n_traj: run.n_traj, chart_switches: run.chart_switches });
    }
    Ok(run)
}

/// Least-squares fit of `log σ² = log α + β N t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFit {
    pub alpha: f64,
    pub beta: f64,
    pub points_used: usize,
}

/// Fits `σ_F²(t) ≈ α e^{βNt}` over `window = (t_lo, t_hi)`, skipping
/// non-positive and non-finite entries.
pub fn variance_fit(times: &[f64], variances: &[f64], n_sites: usize, window: (f64, f64)) -> Result<VarianceFit> {
    if times.len() != variances.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), got: variances.len() });
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(variances)
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && v.is_finite() && **v > 0.0)
        .map(|(t, v)| (*t * n_sites as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Statistics(format!("need at least two positive variances, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Statistics("fit window contains a single time".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let beta = sxy / sxx;
    Ok(VarianceFit { alpha: (my - beta * mx).exp(), beta, points_used: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioUncertainty {
    pub ratio: f64,
    pub stderr: f64,
    /// True when the denominator is within three standard errors of zero.
    pub flagged: bool,
}

/// First-order error of `N̄/D̄` for real scalars with errors `σ_N`, `σ_D`
/// and covariance `cov` of the means.
pub fn uncertainty_propagation(num: (f64, f64), den: (f64, f64), cov: f64) -> RatioUncertainty {
    let (n, sn) = num;
    let (d, sd) = den;
    let r = n / d;
    let var = (sn * sn + r * r * sd * sd - 2.0 * r * cov) / (d * d);
    RatioUncertainty { ratio: r, stderr: var.max(0.0).sqrt(), flagged: d.abs() <= 3.0 * sd }
}

/// Loschmidt amplitudes and rate at one end time.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub time: f64,
    pub dd: EstimatePoint,
    pub ud: EstimatePoint,
    pub rate: RateEstimate,
    pub sigma_f2_dd: f64,
    pub sigma_f2_ud: f64,
    pub invalid: usize,
    pub unreliable: bool,
    pub sp_dd: Option<SpTraceEntry>,
    pub sp_ud: Option<SpTraceEntry>,
}

/// Return-probability rate `λ(t_f)` from `A_dd` and `A_ud`.
///
/// Direct sampling estimates both amplitudes from one ensemble recorded at
/// every end time. Importance sampling solves the saddle point of each
/// amplitude at each end time (warm-started along the list) and runs a
/// separate shifted ensemble for it.
pub fn loschmidt_rate(
    model: &CouplingModel,
    transform: &NoiseTransform,
    integrator: &IntegratorSpec,
    plan: &SamplingPlan,
    end_times: &[f64],
    sp_options: &SpOptions,
) -> Result<Vec<RatePoint>> {
    if end_times.is_empty() || end_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidPlan("end times must be non-empty and increasing".into()));
    }
    let n = model.n_sites();
    let dd = ObservableFn::Loschmidt(LoschmidtKind::Dd);
    let ud = ObservableFn::Loschmidt(LoschmidtKind::Ud);
    match plan.mode {
        SamplingMode::Direct => {
            let t_max = *end_times.last().unwrap();
            let steps = end_times
                .iter()
                .map(|&t| integrator.steps_for(t))
                .collect::<Result<Vec<_>>>()?;
            let obs = [dd, ud];
            let req = EnsembleRequest {
                model,
                transform,
                integrator,
                observables: &obs,
                plan,
                t_max,
                record_steps: steps,
                shift: None,
            };
            let run = run_ensemble(&req)?;
            Ok((0..end_times.len())
                .map(|k| {
                    let a = run.estimates[0].points[k].clone();
                    let b = run.estimates[1].points[k].clone();
                    RatePoint {
                        time: run.times[k],
                        rate: return_probability(&a.amplitude(), &b.amplitude(), n),
                        dd: a,
                        ud: b,
                        sigma_f2_dd: run.sigma_f2[k],
                        sigma_f2_ud: f64::NAN,
                        invalid: run.invalid,
                        unreliable: run.unreliable,
                        sp_dd: None,
                        sp_ud: None,
                    }
                })
                .collect())
        }
        SamplingMode::Importance => {
            if (sp_options.dt - integrator.dt).abs() > 1e-12 * integrator.dt {
                return Err(Error::InvalidPlan("saddle and integrator grids differ".into()));
            }
            let mut out = Vec::with_capacity(end_times.len());
            let mut prev: [Option<SaddleField>; 2] = [None, None];
            for (k, &tf) in end_times.iter().enumerate() {
                let steps = integrator.steps_for(tf)?;
                let mut parts = Vec::with_capacity(2);
                for (slot, (obs, action)) in
                    [(dd, SpAction::LoschmidtDd), (ud, SpAction::LoschmidtUd)].into_iter().enumerate()
                {
                    let (field, trace) = recursive_sp(model, action, tf, sp_options, prev[slot].as_ref())?;
                    let sub = SamplingPlan {
                        seed: derive_seed(plan.seed, (k * 2 + slot) as u64),
                        ..plan.clone()
                    };
                    let obs_list = [obs];
                    let req = EnsembleRequest {
                        model,
                        transform,
                        integrator,
                        observables: &obs_list,
                        plan: &sub,
                        t_max: tf,
                        record_steps: vec![steps],
                        shift: Some(&field),
                    };
                    let run = run_ensemble(&req)?;
                    prev[slot] = if field.converged { Some(field) } else { None };
                    parts.push((run, trace));
                }
                let (ud_run, ud_trace) = parts.pop().unwrap();
                let (dd_run, dd_trace) = parts.pop().unwrap();
                let a = dd_run.estimates[0].points[0].clone();
                let b = ud_run.estimates[0].points[0].clone();
                out.push(RatePoint {
                    time: tf,
                    rate: return_probability(&a.amplitude(), &b.amplitude(), n),
                    dd: a,
                    ud: b,
                    sigma_f2_dd: dd_run.sigma_f2[0],
                    sigma_f2_ud: ud_run.sigma_f2[0],
                    invalid: dd_run.invalid + ud_run.invalid,
                    unreliable: dd_run.unreliable || ud_run.unreliable,
                    sp_dd: Some(dd_trace),
                    sp_ud: Some(ud_trace),
                });
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ising_coupling, IsingParams, LatticeSpec};
    use crate::observables::SiteSel;
    use crate::saddle::mean_field_sp;

    fn model(dims: Vec<usize>, gamma: f64, h: f64) -> CouplingModel {
        build_ising_coupling(
            &LatticeSpec::new(dims).unwrap(),
            IsingParams { coupling: 1.0, transverse: gamma, longitudinal: h },
        )
        .unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(SamplingPlan::new(SamplingMode::Direct, 12, 1).validate().is_err());
        assert!(SamplingPlan::new(SamplingMode::Direct, 12, 1).with_batches(2).validate().is_ok());
        assert!(SamplingPlan::new(SamplingMode::Direct, 0, 1).validate().is_err());
        assert!(SamplingPlan::new(SamplingMode::Direct, 10, 1).with_batches(5).with_workers(0).validate().is_err());
        assert_eq!("importance".parse::<SamplingMode>().unwrap(), SamplingMode::Importance);
        assert!("mcmc".parse::<SamplingMode>().is_err());
    }

    #[test]
    fn comoment_merge_matches_sequential() {
        let xs: Vec<[f64; 4]> = (0..37)
            .map(|i| {
                let t = i as f64;
                [t.sin(), (0.3 * t).cos(), 1.0 + 0.1 * t, (t * 0.7).sin() * 2.0]
            })
            .collect();
        let mut all = CoMoments::default();
        xs.iter().for_each(|x| all.push(*x));
        let mut a = CoMoments::default();
        let mut b = CoMoments::default();
        xs[..11].iter().for_each(|x| a.push(*x));
        xs[11..].iter().for_each(|x| b.push(*x));
        a.merge(&b);
        for i in 0..4 {
            assert!((a.mean[i] - all.mean[i]).abs() < 1e-13);
            for j in 0..4 {
                assert!((a.co[i][j] - all.co[i][j]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn ratio_of_proportional_series_has_zero_error() {
        let mut m = CoMoments::default();
        for i in 0..50 {
            let d = C64::new(1.0 + 0.3 * (i as f64).sin(), 0.2 * (i as f64).cos());
            let n = d * C64::new(-0.5, 0.0);
            m.push([n.re, n.im, d.re, d.im]);
        }
        let (r, vr, vi, _) = m.ratio_estimate();
        assert!((r - C64::new(-0.5, 0.0)).norm() < 1e-15);
        // zero up to cancellation in the quadratic form
        assert!(vr < 1e-18 && vi < 1e-18, "{vr} {vi}");
    }

    #[test]
    fn scalar_uncertainty_propagation() {
        let same = uncertainty_propagation((2.0, 0.1), (2.0, 0.1), 0.1 * 0.1);
        assert_eq!(same.ratio, 1.0);
        assert!(same.stderr < 1e-12);
        let ind = uncertainty_propagation((3.0, 0.3), (2.0, 0.1), 0.0);
        let textbook = 1.5 * ((0.3f64 / 3.0).powi(2) + (0.1f64 / 2.0).powi(2)).sqrt();
        assert!((ind.stderr - textbook).abs() < 1e-14);
        assert!(!ind.flagged);
        assert!(uncertainty_propagation((1.0, 0.1), (0.1, 0.2), 0.0).flagged);
    }

    #[test]
    fn exact_synthetic_variance_fit() {
        let times: Vec<f64> = (0..=30).map(|k| k as f64 * 0.05).collect();
        let vars: Vec<f64> = times.iter().map(|t| 1e-3 * (9.0 * t).exp()).collect();
        let f = variance_fit(&times, &vars, 9, (0.0, 1.5)).unwrap();
        assert!((f.alpha - 1e-3).abs() < 1e-9 && (f.beta - 1.0).abs() < 1e-6);
        let mut with_bad = vars.clone();
        with_bad[3] = -1.0;
        with_bad[4] = f64::NAN;
        let g = variance_fit(&times, &with_bad, 9, (0.0, 1.5)).unwrap();
        assert_eq!(g.points_used, 29);
        assert!(variance_fit(&times[..1], &vars[..1], 9, (0.0, 1.0)).is_err());
    }

    #[test]
    fn zero_shift_weight_is_one() {
        let m = model(vec![3], 1.0, 0.0);
        let t = NoiseTransform::new(&m).unwrap();
        let mut rng = trajectory_rng(3, 0);
        let noise = NoisePath::sample(&mut rng, 3, 20, 0.01);
        let zero = SaddleField::zeros(3, 0.2, 0.01).unwrap();
        assert_eq!(importance_weight(&t, &noise, &zero, Branch::Forward).unwrap(), C64::new(1.0, 0.0));
    }

    #[test]
    fn constant_shift_action() {
        // one site with O = √(-2i)... pick the field so that s = c real
        let m = model(vec![1], 0.0, 0.0);
        let m = CouplingModel::from_parts(
            m.lattice().clone(),
            m.interaction().clone(),
            1.0,
            m.h_plus().to_vec(),
            m.h_z().to_vec(),
            m.h_minus().to_vec(),
        )
        .unwrap();
        let t = NoiseTransform::new(&m).unwrap();
        let o = t.matrix().unwrap()[(0, 0)];
        let c = 0.7;
        let field = SaddleField::from_values(0.1, 1, vec![o * c; 11]).unwrap();
        let noise = NoisePath::zeros(1, 10, 0.1);
        let lw = log_importance_weight(&t, &noise, &field, Branch::Forward).unwrap();
        assert!((lw + C64::new(c * c * 1.0 / 2.0, 0.0)).norm() < 1e-12);
    }

    fn local_run(workers: Option<usize>, mode: SamplingMode) -> EnsembleRun {
        let m = model(vec![2, 2], 1.0, 0.5);
        let t = NoiseTransform::new(&m).unwrap();
        let spec = IntegratorSpec::new(Scheme::StrongOrder1, 0.02).unwrap();
        let mut plan = SamplingPlan::new(mode, 300, 17);
        plan.workers = workers;
        let sp = mean_field_sp(&m, 0.4, 0.02).unwrap();
        let obs = [
            ObservableFn::Norm,
            ObservableFn::MagnetizationZ(SiteSel::Average),
            ObservableFn::MagnetizationX(SiteSel::Site(0)),
        ];
        let req = EnsembleRequest {
            model: &m,
            transform: &t,
            integrator: &spec,
            observables: &obs,
            plan: &plan,
            t_max: 0.4,
            record_steps: record_grid(20, 5),
            shift: if mode == SamplingMode::Importance { Some(&sp) } else { None },
        };
        run_ensemble(&req).unwrap()
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let a = local_run(Some(1), SamplingMode::Importance);
        let b = local_run(Some(3), SamplingMode::Importance);
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(x.points, y.points);
        }
        assert_eq!(a.sigma_f2, b.sigma_f2);
    }

    #[test]
    fn first_point_is_exact_and_batches_average() {
        let r = local_run(None, SamplingMode::Direct);
        let norm = r.estimate(ObservableFn::Norm).unwrap();
        assert_eq!(norm.points[0].mean, C64::new(1.0, 0.0));
        let mz = r.estimate(ObservableFn::MagnetizationZ(SiteSel::Average)).unwrap();
        assert_eq!(mz.points[0].mean, C64::new(-0.5, 0.0));
        assert_eq!(r.times, vec![0.0, 0.1, 0.2, 0.3, 0.4]);
        for p in &norm.points {
            let avg: C64 = p.batch_means.iter().sum::<C64>() / p.batch_means.len() as f64;
            assert!((avg - p.mean).norm() < 1e-12);
        }
        assert_eq!(r.invalid, 0);
        assert!(!r.unreliable);
    }

    #[test]
    fn request_validation() {
        let m = model(vec![3], 1.0, 0.0);
        let t = NoiseTransform::new(&m).unwrap();
        let spec = IntegratorSpec::new(Scheme::Heun, 0.01).unwrap();
        let plan = SamplingPlan::new(SamplingMode::Importance, 10, 1);
        let obs = [ObservableFn::Norm];
        let mut req = EnsembleRequest {
            model: &m,
            transform: &t,
            integrator: &spec,
            observables: &obs,
            plan: &plan,
            t_max: 0.1,
            record_steps: vec![0, 10],
            shift: None,
        };
        assert!(run_ensemble(&req).is_err());
        let mixed = [ObservableFn::Norm, ObservableFn::Loschmidt(LoschmidtKind::Dd)];
        let direct = SamplingPlan::new(SamplingMode::Direct, 10, 1);
        req.plan = &direct;
        req.observables = &mixed;
        assert!(run_ensemble(&req).is_err());
        req.observables = &obs;
        req.record_steps = vec![0, 11];
        assert!(run_ensemble(&req).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|k| derive_seed(42, k)).collect();
        assert_eq!(s.len(), 100);
        assert_eq!(record_grid(10, 4), vec![0, 4, 8, 10]);
    }
}
