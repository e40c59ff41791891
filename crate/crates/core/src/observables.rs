//! Classical observable functions on trajectory endpoints.
//!
//! With both branches started from `|↓…↓⟩`, the forward state of site `i`
//! is `c_i^f = e^{L_f}(a_↓, a_↑)` and similarly for the backward branch. The
//! normalization is `F_𝟙 = ∏_i ⟨c_i^b|c_i^f⟩` and a local observable
//! contributes `F_𝟙 · F̄` with `F̄` a single-site ratio of matrix elements.
//! In the normal chart this reads
//!
//! ```text
//! F_𝟙  = ∏_i (1 + ξ⁺_f ξ⁺*_b) e^{-(ξᶻ_f + ξᶻ*_b)/2}
//! F̄_z = -½ (1 - ξ⁺_f ξ⁺*_b) / (1 + ξ⁺_f ξ⁺*_b)
//! F̄_x =  ½ (ξ⁺_f + ξ⁺*_b)   / (1 + ξ⁺_f ξ⁺*_b)
//! ```
//!
//! Everything is evaluated from chart-independent amplitudes, and products
//! over sites are accumulated as sums of logarithms.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sde::{SiteAmplitudes, SiteState};
use crate::C64;

/// Site selection for local observables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteSel {
    Site(usize),
    /// Average over all sites.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoschmidtKind {
    /// `⟨↓…↓|U|↓…↓⟩`.
    Dd,
    /// `⟨↑…↑|U|↓…↓⟩`.
    Ud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchRequirement {
    ForwardOnly,
    ForwardBackward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObservableFn {
    Norm,
    MagnetizationZ(SiteSel),
    MagnetizationX(SiteSel),
    Loschmidt(LoschmidtKind),
}

impl ObservableFn {
    pub fn branch_requirement(self) -> BranchRequirement {
        match self {
            ObservableFn::Loschmidt(_) => BranchRequirement::ForwardOnly,
            _ => BranchRequirement::ForwardBackward,
        }
    }

    pub fn is_local(self) -> bool {
        self.branch_requirement() == BranchRequirement::ForwardBackward
    }

    pub fn name(self) -> String {
        match self {
            ObservableFn::Norm => "norm".into(),
            ObservableFn::MagnetizationZ(SiteSel::Average) => "mz".into(),
            ObservableFn::MagnetizationZ(SiteSel::Site(i)) => format!("mz:{i}"),
            ObservableFn::MagnetizationX(SiteSel::Average) => "mx".into(),
            ObservableFn::MagnetizationX(SiteSel::Site(i)) => format!("mx:{i}"),
            ObservableFn::Loschmidt(LoschmidtKind::Dd) => "loschmidt-dd".into(),
            ObservableFn::Loschmidt(LoschmidtKind::Ud) => "loschmidt-ud".into(),
        }
    }
}

impl fmt::Display for ObservableFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ObservableFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, site) = match s.split_once(':') {
            Some((b, i)) => {
                let idx = i
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidPlan(format!("bad site index in '{s}'")))?;
                (b, SiteSel::Site(idx))
            }
            None => (s, SiteSel::Average),
        };
        match (base, site) {
            ("norm", SiteSel::Average) => Ok(ObservableFn::Norm),
            ("mz", sel) => Ok(ObservableFn::MagnetizationZ(sel)),
            ("mx", sel) => Ok(ObservableFn::MagnetizationX(sel)),
            ("loschmidt-dd", SiteSel::Average) => Ok(ObservableFn::Loschmidt(LoschmidtKind::Dd)),
            ("loschmidt-ud", SiteSel::Average) => Ok(ObservableFn::Loschmidt(LoschmidtKind::Ud)),
            _ => Err(Error::InvalidPlan(format!(
                "unknown observable '{s}' (expected norm, mz[:site], mx[:site], loschmidt-dd, loschmidt-ud)"
            ))),
        }
    }
}

/// `log ⟨c^b|c^f⟩` for one site, with the overlap's amplitude part
/// returned separately so the site ratios can reuse it.
fn site_overlap(f: &SiteAmplitudes, b: &SiteAmplitudes) -> (C64, C64) {
    let den = f.down * b.down.conj() + f.up * b.up.conj();
    (f.log_scale + b.log_scale.conj(), den)
}

/// `F_𝟙` in log form together with every requested `F̄`, sharing a single
/// pass over the sites.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEvaluation {
    pub log_norm: C64,
    pub bars: Vec<C64>,
}

impl LocalEvaluation {
    pub fn norm(&self) -> C64 {
        self.log_norm.exp()
    }

    /// `F_𝟙 · F̄_k`.
    pub fn weighted(&self, k: usize) -> C64 {
        self.norm() * self.bars[k]
    }
}

/// Evaluates `F_𝟙` and `F̄` for each local observable. Returns `None` when a
/// site overlap vanishes, which excludes the trajectory.
pub fn evaluate_locals(
    forward: &[SiteState],
    backward: &[SiteState],
    observables: &[ObservableFn],
) -> Result<Option<LocalEvaluation>> {
    if forward.len() != backward.len() {
        return Err(Error::DimensionMismatch { expected: forward.len(), got: backward.len() });
    }
    let n = forward.len();
    for o in observables {
        match o {
            ObservableFn::Loschmidt(_) => {
                return Err(Error::InvalidPlan(format!("{o} is not a local observable")))
            }
            ObservableFn::MagnetizationZ(SiteSel::Site(i)) | ObservableFn::MagnetizationX(SiteSel::Site(i))
                if *i >= n =>
            {
                return Err(Error::DimensionMismatch { expected: n, got: *i });
            }
            _ => {}
        }
    }
    let mut log_norm = C64::new(0.0, 0.0);
    let mut z_ratio = Vec::with_capacity(n);
    let mut x_ratio = Vec::with_capacity(n);
    for (sf, sb) in forward.iter().zip(backward) {
        let (f, b) = (sf.amplitudes(), sb.amplitudes());
        let (log_scale, den) = site_overlap(&f, &b);
        if den.norm() == 0.0 || !den.is_finite() {
            return Ok(None);
        }
        log_norm += log_scale + den.ln();
        z_ratio.push(0.5 * (f.up * b.up.conj() - f.down * b.down.conj()) / den);
        x_ratio.push(0.5 * (f.up * b.down.conj() + f.down * b.up.conj()) / den);
    }
    let pick = |v: &[C64], sel: SiteSel| match sel {
        SiteSel::Site(i) => v[i],
        SiteSel::Average => v.iter().sum::<C64>() / n as f64,
    };
    let bars = observables
        .iter()
        .map(|o| match *o {
            ObservableFn::Norm => C64::new(1.0, 0.0),
            ObservableFn::MagnetizationZ(sel) => pick(&z_ratio, sel),
            ObservableFn::MagnetizationX(sel) => pick(&x_ratio, sel),
            ObservableFn::Loschmidt(_) => unreachable!(),
        })
        .collect();
    Ok(Some(LocalEvaluation { log_norm, bars }))
}

pub fn eval_norm(forward: &[SiteState], backward: &[SiteState]) -> Result<C64> {
    Ok(evaluate_locals(forward, backward, &[])?
        .map(|e| e.norm())
        .unwrap_or(C64::new(0.0, 0.0)))
}

/// `F_𝟙 · F̄_z`, or `None` if a site overlap vanishes.
pub fn eval_mz(forward: &[SiteState], backward: &[SiteState], site: SiteSel) -> Result<Option<C64>> {
    Ok(evaluate_locals(forward, backward, &[ObservableFn::MagnetizationZ(site)])?.map(|e| e.weighted(0)))
}

/// `F_𝟙 · F̄_x`, or `None` if a site overlap vanishes.
pub fn eval_mx(forward: &[SiteState], backward: &[SiteState], site: SiteSel) -> Result<Option<C64>> {
    Ok(evaluate_locals(forward, backward, &[ObservableFn::MagnetizationX(site)])?.map(|e| e.weighted(0)))
}

/// `log f` for a Loschmidt amplitude (forward branch only).
pub fn log_loschmidt(forward: &[SiteState], kind: LoschmidtKind) -> C64 {
    forward
        .iter()
        .map(|s| {
            let a = s.amplitudes();
            let amp = match kind {
                LoschmidtKind::Dd => a.down,
                LoschmidtKind::Ud => a.up,
            };
            a.log_scale + amp.ln()
        })
        .sum()
}

/// `f_dd = e^{-½Σξᶻ}` or `f_ud = f_dd ∏ξ⁺`.
pub fn eval_loschmidt(forward: &[SiteState], kind: LoschmidtKind) -> C64 {
    let l = log_loschmidt(forward, kind);
    if l.re == f64::NEG_INFINITY {
        C64::new(0.0, 0.0)
    } else {
        l.exp()
    }
}

/// Complex amplitude estimate with the covariance of its mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeEstimate {
    pub mean: C64,
    pub var_re: f64,
    pub var_im: f64,
    pub cov_re_im: f64,
}

impl AmplitudeEstimate {
    pub fn exact(mean: C64) -> Self {
        Self { mean, var_re: 0.0, var_im: 0.0, cov_re_im: 0.0 }
    }

    /// Delta-method variance of `|A|²`.
    fn prob_variance(&self) -> f64 {
        let (x, y) = (self.mean.re, self.mean.im);
        4.0 * (x * x * self.var_re + y * y * self.var_im + 2.0 * x * y * self.cov_re_im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub probability: f64,
    pub probability_stderr: f64,
    pub rate: f64,
    pub rate_stderr: f64,
    /// False when `|A|²` is not significantly positive.
    pub reliable: bool,
}

/// `|A|² = |A_dd|² + |A_ud|²` and `λ = -log|A|²/N` with delta-method errors.
pub fn return_probability(dd: &AmplitudeEstimate, ud: &AmplitudeEstimate, n_sites: usize) -> RateEstimate {
    let p = dd.mean.norm_sqr() + ud.mean.norm_sqr();
    let sp = (dd.prob_variance() + ud.prob_variance()).max(0.0).sqrt();
    let n = n_sites as f64;
    let reliable = p > 0.0 && p.is_finite() && sp < p;
    let (rate, rate_stderr) = if p > 0.0 {
        (-p.ln() / n, sp / (n * p))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    RateEstimate { probability: p, probability_stderr: sp, rate, rate_stderr, reliable }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_trajectory_values() {
        let s = vec![SiteState::initial(); 4];
        assert_eq!(eval_norm(&s, &s).unwrap(), c(1.0, 0.0));
        assert_eq!(eval_mz(&s, &s, SiteSel::Average).unwrap().unwrap(), c(-0.5, 0.0));
        assert_eq!(eval_mx(&s, &s, SiteSel::Site(2)).unwrap().unwrap(), c(0.0, 0.0));
        assert_eq!(eval_loschmidt(&s, LoschmidtKind::Dd), c(1.0, 0.0));
        assert_eq!(eval_loschmidt(&s, LoschmidtKind::Ud), c(0.0, 0.0));
    }

    #[test]
    fn single_site_unit_ratio_doubles_norm() {
        let s = [SiteState::from_normal(c(1.0, 0.0), c(0.0, 0.0))];
        assert!((eval_norm(&s, &s).unwrap() - c(2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn factorized_evaluation_shares_norm() {
        let f = [
            SiteState::from_normal(c(0.3, 0.2), c(0.1, -0.4)),
            SiteState::from_normal(c(-0.5, 0.1), c(0.2, 0.3)),
        ];
        let b = [
            SiteState::from_normal(c(0.1, -0.7), c(-0.3, 0.2)),
            SiteState::from_normal(c(0.2, 0.2), c(0.0, 0.1)),
        ];
        let obs = [
            ObservableFn::Norm,
            ObservableFn::MagnetizationZ(SiteSel::Average),
            ObservableFn::MagnetizationX(SiteSel::Site(1)),
        ];
        let e = evaluate_locals(&f, &b, &obs).unwrap().unwrap();
        assert_eq!(e.weighted(0), eval_norm(&f, &b).unwrap());
        assert_eq!(e.weighted(1), eval_mz(&f, &b, SiteSel::Average).unwrap().unwrap());
        assert_eq!(e.weighted(2), eval_mx(&f, &b, SiteSel::Site(1)).unwrap().unwrap());
    }

    #[test]
    fn normal_chart_closed_forms() {
        let (xf, xb) = (c(0.3, 0.2), c(0.1, -0.7));
        let (zf, zb) = (c(0.1, -0.4), c(-0.3, 0.2));
        let f = [SiteState::from_normal(xf, zf)];
        let b = [SiteState::from_normal(xb, zb)];
        let d = 1.0 + xf * xb.conj();
        let norm = d * (-(zf + zb.conj()) / 2.0).exp();
        assert!((eval_norm(&f, &b).unwrap() - norm).norm() < 1e-14);
        let mz = norm * -0.5 * (1.0 - xf * xb.conj()) / d;
        assert!((eval_mz(&f, &b, SiteSel::Site(0)).unwrap().unwrap() - mz).norm() < 1e-14);
        let mx = norm * 0.5 * (xf + xb.conj()) / d;
        assert!((eval_mx(&f, &b, SiteSel::Site(0)).unwrap().unwrap() - mx).norm() < 1e-14);
        let fud = (-zf / 2.0).exp() * xf;
        assert!((eval_loschmidt(&f, LoschmidtKind::Ud) - fud).norm() < 1e-14);
    }

    #[test]
    fn vanishing_overlap_excludes_trajectory() {
        let f = [SiteState::from_normal(c(1.0, 0.0), c(0.0, 0.0))];
        let b = [SiteState::from_normal(c(-1.0, 0.0), c(0.0, 0.0))];
        assert!(eval_mz(&f, &b, SiteSel::Average).unwrap().is_none());
        assert_eq!(eval_norm(&f, &b).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn log_domain_survives_large_systems() {
        let s = vec![SiteState::from_normal(c(0.0, 0.0), c(-20.0, 0.0)); 200];
        let l = log_loschmidt(&s, LoschmidtKind::Dd);
        assert!((l - c(2000.0, 0.0)).norm() < 1e-9);
        let e = evaluate_locals(&s, &s, &[ObservableFn::MagnetizationZ(SiteSel::Average)]).unwrap().unwrap();
        assert!(e.log_norm.is_finite());
        assert_eq!(e.bars[0], c(-0.5, 0.0));
    }

    #[test]
    fn observable_names_roundtrip() {
        for o in [
            ObservableFn::Norm,
            ObservableFn::MagnetizationZ(SiteSel::Average),
            ObservableFn::MagnetizationX(SiteSel::Site(3)),
            ObservableFn::Loschmidt(LoschmidtKind::Dd),
            ObservableFn::Loschmidt(LoschmidtKind::Ud),
        ] {
            assert_eq!(o.name().parse::<ObservableFn>().unwrap(), o);
        }
        assert!("my".parse::<ObservableFn>().is_err());
        assert!("norm:2".parse::<ObservableFn>().is_err());
        assert_eq!(
            ObservableFn::Loschmidt(LoschmidtKind::Dd).branch_requirement(),
            BranchRequirement::ForwardOnly
        );
    }

    #[test]
    fn rate_at_unit_probability() {
        let r = return_probability(&AmplitudeEstimate::exact(c(1.0, 0.0)), &AmplitudeEstimate::exact(c(0.0, 0.0)), 9);
        assert_eq!(r.probability, 1.0);
        assert_eq!(r.rate, 0.0);
        assert!(r.reliable);
        let z = return_probability(&AmplitudeEstimate::exact(c(0.0, 0.0)), &AmplitudeEstimate::exact(c(0.0, 0.0)), 9);
        assert!(!z.reliable);
    }

    #[test]
    fn rate_error_propagation() {
        let dd = AmplitudeEstimate { mean: c(0.3, 0.4), var_re: 1e-4, var_im: 4e-4, cov_re_im: 0.0 };
        let ud = AmplitudeEstimate::exact(c(0.0, 0.0));
        let r = return_probability(&dd, &ud, 4);
        let sp = (4.0f64 * (0.09 * 1e-4 + 0.16 * 4e-4)).sqrt();
        assert!((r.probability_stderr - sp).abs() < 1e-15);
        assert!((r.rate_stderr - sp / (4.0 * 0.25)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn chart_choice_does_not_change_observables(
            re in -20.0f64..20.0, im in -20.0f64..20.0,
            zr in -2.0f64..2.0, zi in -3.0f64..3.0,
            bre in -3.0f64..3.0, bim in -3.0f64..3.0,
        ) {
            prop_assume!(re.hypot(im) > 1e-3);
            let f = SiteState::from_normal(c(re, im), c(zr, zi));
            let b = SiteState::from_normal(c(bre, bim), c(0.2, -0.1));
            let fi = f.switch_chart().unwrap();
            let obs = [ObservableFn::MagnetizationZ(SiteSel::Average), ObservableFn::MagnetizationX(SiteSel::Average)];
            if let (Some(a), Some(x)) = (
                evaluate_locals(&[f], &[b], &obs).unwrap(),
                evaluate_locals(&[fi], &[b], &obs).unwrap(),
            ) {
                let scale = a.norm().norm().max(1.0);
                prop_assert!((a.norm() - x.norm()).norm() < 1e-10 * scale);
                for k in 0..2 {
                    prop_assert!((a.bars[k] - x.bars[k]).norm() < 1e-9 * a.bars[k].norm().max(1.0));
                }
            }
            let l0 = eval_loschmidt(&[f], LoschmidtKind::Ud);
            let l1 = eval_loschmidt(&[fi], LoschmidtKind::Ud);
            prop_assert!((l0 - l1).norm() < 1e-10 * l0.norm().max(1.0));
        }
    }
}
