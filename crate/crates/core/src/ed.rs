//! Exact state-vector dynamics for small lattices.
//!
//! Basis states are bit strings with site 0 in the least significant bit and
//! bit value 1 meaning `|↑⟩`. The Hamiltonian is applied matrix-free and
//! `e^{-iHt}` is built from short Lanczos (Krylov) steps.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::lattice::CouplingModel;
use crate::C64;

pub const MAX_EVOLVE_SITES: usize = 20;
pub const MAX_GROUND_STATE_SITES: usize = 16;
pub const MAX_VARIANCE_SITES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    pub dim: usize,
    pub max_step: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { dim: 30, max_step: 0.05 }
    }
}

/// Matrix-free Ising Hamiltonian built from a [`CouplingModel`].
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    n_sites: usize,
    diagonal: Vec<f64>,
    /// `-h⁺_j` (raises site j).
    raise: Vec<C64>,
    /// `-h⁻_j` (lowers site j).
    lower: Vec<C64>,
    norm_bound: f64,
}

impl Hamiltonian {
    pub fn new(model: &CouplingModel) -> Result<Self> {
        let n = model.n_sites();
        if n > MAX_EVOLVE_SITES {
            return Err(Error::TooLarge { n_sites: n, limit: MAX_EVOLVE_SITES });
        }
        let dim = 1usize << n;
        let jm = model.interaction();
        let j = model.coupling();
        let hz = model.h_z();
        let mut diagonal = vec![0.0; dim];
        let mut sz = vec![0.0; n];
        for (s, d) in diagonal.iter_mut().enumerate() {
            for (k, v) in sz.iter_mut().enumerate() {
                *v = if s >> k & 1 == 1 { 0.5 } else { -0.5 };
            }
            let mut e = 0.0;
            for a in 0..n {
                let mut row = 0.0;
                for b in 0..n {
                    row += jm[(a, b)] * sz[b];
                }
                e -= j * sz[a] * row + hz[a] * sz[a];
            }
            *d = e;
        }
        let raise: Vec<C64> = model.h_plus().iter().map(|h| -h).collect();
        let lower: Vec<C64> = model.h_minus().iter().map(|h| -h).collect();
        let max_diag = diagonal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let offdiag: f64 = raise.iter().zip(&lower).map(|(a, b)| a.norm().max(b.norm())).sum();
        Ok(Self { n_sites: n, diagonal, raise, lower, norm_bound: max_diag + offdiag })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    /// Upper bound on the operator norm.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// `out = H v`.
    pub fn apply(&self, v: &[C64], out: &mut [C64]) {
        for ((o, x), d) in out.iter_mut().zip(v).zip(&self.diagonal) {
            *o = x * d;
        }
        for j in 0..self.n_sites {
            let bit = 1usize << j;
            let (r, l) = (self.raise[j], self.lower[j]);
            for s in 0..v.len() {
                if s & bit == 0 {
                    out[s | bit] += r * v[s];
                } else {
                    out[s & !bit] += l * v[s];
                }
            }
        }
    }

    /// Whether `H = H†` entry by entry.
    pub fn is_hermitian(&self) -> bool {
        self.raise.iter().zip(&self.lower).all(|(r, l)| *r == l.conj())
    }

    pub fn dense(&self) -> DMatrix<C64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        let mut e = vec![C64::new(0.0, 0.0); d];
        let mut col = vec![C64::new(0.0, 0.0); d];
        for c in 0..d {
            e[c] = C64::new(1.0, 0.0);
            self.apply(&e, &mut col);
            for r in 0..d {
                m[(r, c)] = col[r];
            }
            e[c] = C64::new(0.0, 0.0);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub n_sites: usize,
    pub amps: Vec<C64>,
}

impl DenseState {
    pub fn all_down(n_sites: usize) -> Self {
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n_sites];
        amps[0] = C64::new(1.0, 0.0);
        Self { n_sites, amps }
    }

    pub fn all_up(n_sites: usize) -> Self {
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n_sites];
        amps[(1 << n_sites) - 1] = C64::new(1.0, 0.0);
        Self { n_sites, amps }
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn overlap(&self, other: &DenseState) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn sz(&self, site: usize) -> f64 {
        let bit = 1usize << site;
        self.amps
            .iter()
            .enumerate()
            .map(|(s, a)| if s & bit != 0 { 0.5 } else { -0.5 } * a.norm_sqr())
            .sum()
    }

    pub fn sx(&self, site: usize) -> f64 {
        let bit = 1usize << site;
        let mut acc = C64::new(0.0, 0.0);
        for (s, a) in self.amps.iter().enumerate() {
            acc += a.conj() * self.amps[s ^ bit];
        }
        0.5 * acc.re
    }

    pub fn mz(&self) -> f64 {
        (0..self.n_sites).map(|j| self.sz(j)).sum::<f64>() / self.n_sites as f64
    }

    pub fn mx(&self) -> f64 {
        (0..self.n_sites).map(|j| self.sx(j)).sum::<f64>() / self.n_sites as f64
    }

    pub fn energy(&self, h: &Hamiltonian) -> f64 {
        let mut hv = vec![C64::new(0.0, 0.0); self.amps.len()];
        h.apply(&self.amps, &mut hv);
        self.amps.iter().zip(&hv).map(|(a, b)| a.conj() * b).sum::<C64>().re
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn vnorm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Lanczos with full reorthogonalization from `start`. Returns the basis and
/// the tridiagonal coefficients; stops early on an invariant subspace.
fn lanczos(h: &Hamiltonian, start: &[C64], m: usize) -> (Vec<Vec<C64>>, Vec<f64>, Vec<f64>) {
    let nrm = vnorm(start);
    let mut basis = vec![start.iter().map(|x| x / nrm).collect::<Vec<_>>()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut w = vec![C64::new(0.0, 0.0); start.len()];
    for k in 0..m {
        h.apply(&basis[k], &mut w);
        let a = dot(&basis[k], &w).re;
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = vnorm(&w);
        if k + 1 == m || b < 1e-12 * (1.0 + a.abs()) {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    (basis, alpha, beta)
}

fn tridiagonal(alpha: &[f64], beta: &[f64]) -> DMatrix<f64> {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    t
}

fn krylov_step(h: &Hamiltonian, v: &[C64], tau: f64, dim: usize) -> Result<Vec<C64>> {
    let nrm = vnorm(v);
    if nrm == 0.0 {
        return Ok(v.to_vec());
    }
    let (basis, alpha, beta) = lanczos(h, v, dim.min(h.dim()));
    let eig = SymmetricEigen::try_new(tridiagonal(&alpha, &beta), 1e-15, 10_000)
        .ok_or_else(|| Error::KrylovBreakdown("tridiagonal eigensolver failed".into()))?;
    let k = alpha.len();
    // y = V exp(-iΛτ) Vᵀ e₁
    let mut y = vec![C64::new(0.0, 0.0); k];
    for m in 0..k {
        let phase = C64::from_polar(1.0, -eig.eigenvalues[m] * tau) * eig.eigenvectors[(0, m)];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += phase * eig.eigenvectors[(r, m)];
        }
    }
    let mut out = vec![C64::new(0.0, 0.0); v.len()];
    for (q, c) in basis.iter().zip(&y) {
        let c = c * nrm;
        for (o, qi) in out.iter_mut().zip(q) {
            *o += c * qi;
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::KrylovBreakdown("non-finite Krylov propagation".into()));
    }
    Ok(out)
}

/// `e^{-iHt}|ψ⟩` with Krylov steps no longer than `max_step` (and short
/// enough that `‖H‖τ` stays moderate).
pub fn evolve(h: &Hamiltonian, state: &DenseState, t: f64, options: &KrylovOptions) -> Result<DenseState> {
    if state.n_sites != h.n_sites() {
        return Err(Error::DimensionMismatch { expected: h.n_sites(), got: state.n_sites });
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidPlan(format!("evolution time must be non-negative, got {t}")));
    }
    let cap = options.max_step.min(4.0 / h.norm_bound().max(1e-12));
    let n = (t / cap).ceil().max(if t > 0.0 { 1.0 } else { 0.0 }) as usize;
    let mut v = state.amps.clone();
    for _ in 0..n {
        v = krylov_step(h, &v, t / n as f64, options.dim)?;
    }
    Ok(DenseState { n_sites: state.n_sites, amps: v })
}

/// Exact reference values on a time grid.
#[derive(Debug, Clone, Default)]
pub struct EdSeries {
    pub times: Vec<f64>,
    pub mz: Vec<f64>,
    pub mx: Vec<f64>,
    pub a_dd: Vec<C64>,
    pub a_ud: Vec<C64>,
    /// `λ = -log(|A_dd|² + |A_ud|²)/N`.
    pub rate: Vec<f64>,
    /// `-log|A_dd|²/N`.
    pub rate_dd: Vec<f64>,
    /// `-log|A_ud|²/N`.
    pub rate_ud: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Evolves `|↓…↓⟩` under the model and records observables at `times`
/// (sorted, non-negative).
pub fn ed_observables(model: &CouplingModel, times: &[f64], options: &KrylovOptions) -> Result<EdSeries> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidPlan("ED times must be sorted".into()));
    }
    let h = Hamiltonian::new(model)?;
    let n = model.n_sites();
    let mut state = DenseState::all_down(n);
    let mut now = 0.0;
    let mut out = EdSeries::default();
    let last = (1usize << n) - 1;
    for &t in times {
        state = evolve(&h, &state, t - now, options)?;
        now = t;
        let dd = state.amps[0];
        let ud = state.amps[last];
        let nf = n as f64;
        out.times.push(t);
        out.mz.push(state.mz());
        out.mx.push(state.mx());
        out.a_dd.push(dd);
        out.a_ud.push(ud);
        out.rate.push(-(dd.norm_sqr() + ud.norm_sqr()).ln() / nf);
        out.rate_dd.push(-dd.norm_sqr().ln() / nf);
        out.rate_ud.push(-ud.norm_sqr().ln() / nf);
        out.energy.push(state.energy(&h));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub state: DenseState,
    pub first_excited: f64,
    pub gap: f64,
    pub degenerate: bool,
}

fn lowest_ritz(h: &Hamiltonian, start: &[C64], deflate: Option<&[C64]>) -> Result<(f64, Vec<C64>)> {
    let mut v = start.to_vec();
    let project = |v: &mut Vec<C64>| {
        if let Some(g) = deflate {
            let c = dot(g, v);
            for (x, gi) in v.iter_mut().zip(g) {
                *x -= c * gi;
            }
        }
    };
    project(&mut v);
    let mut energy = f64::INFINITY;
    // restarted Lanczos: a few cycles refine the Ritz vector
    for _ in 0..20 {
        let m = 120.min(h.dim());
        let (basis, alpha, beta) = lanczos_deflated(h, &v, m, deflate);
        let eig = SymmetricEigen::try_new(tridiagonal(&alpha, &beta), 1e-15, 10_000)
            .ok_or_else(|| Error::KrylovBreakdown("tridiagonal eigensolver failed".into()))?;
        let (idx, &e) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .ok_or_else(|| Error::KrylovBreakdown("empty Krylov space".into()))?;
        let mut next = vec![C64::new(0.0, 0.0); h.dim()];
        for (q, k) in basis.iter().zip(0..) {
            let c = eig.eigenvectors[(k, idx)];
            for (o, qi) in next.iter_mut().zip(q) {
                *o += qi * c;
            }
        }
        project(&mut next);
        let nrm = vnorm(&next);
        next.iter_mut().for_each(|x| *x /= nrm);
        let done = (energy - e).abs() < 1e-12 * (1.0 + e.abs());
        energy = e;
        v = next;
        if done {
            break;
        }
    }
    Ok((energy, v))
}

fn lanczos_deflated(
    h: &Hamiltonian,
    start: &[C64],
    m: usize,
    deflate: Option<&[C64]>,
) -> (Vec<Vec<C64>>, Vec<f64>, Vec<f64>) {
    match deflate {
        None => lanczos(h, start, m),
        Some(g) => {
            // Lanczos on (1 - |g⟩⟨g|) H (1 - |g⟩⟨g|)
            let proj = ProjectedH { h, g };
            proj.lanczos(start, m)
        }
    }
}

struct ProjectedH<'a> {
    h: &'a Hamiltonian,
    g: &'a [C64],
}

impl ProjectedH<'_> {
    fn lanczos(&self, start: &[C64], m: usize) -> (Vec<Vec<C64>>, Vec<f64>, Vec<f64>) {
        let nrm = vnorm(start);
        let mut basis = vec![start.iter().map(|x| x / nrm).collect::<Vec<_>>()];
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        let mut w = vec![C64::new(0.0, 0.0); start.len()];
        for k in 0..m {
            self.h.apply(&basis[k], &mut w);
            for _ in 0..2 {
                let c = dot(self.g, &w);
                for (wi, gi) in w.iter_mut().zip(self.g) {
                    *wi -= c * gi;
                }
            }
            let a = dot(&basis[k], &w).re;
            alpha.push(a);
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &w);
                    for (wi, qi) in w.iter_mut().zip(q) {
                        *wi -= c * qi;
                    }
                }
            }
            let b = vnorm(&w);
            if k + 1 == m || b < 1e-12 * (1.0 + a.abs()) {
                break;
            }
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
        (basis, alpha, beta)
    }
}

/// Ground state and first excited level by restarted Lanczos with
/// deflation. Levels closer than `1e-8` (relative) are reported as
/// degenerate.
pub fn ground_state_check(model: &CouplingModel) -> Result<GroundState> {
    let n = model.n_sites();
    if n > MAX_GROUND_STATE_SITES {
        return Err(Error::TooLarge { n_sites: n, limit: MAX_GROUND_STATE_SITES });
    }
    let h = Hamiltonian::new(model)?;
    // deterministic start with weight on every basis state
    let start: Vec<C64> = (0..h.dim())
        .map(|s| C64::new(1.0 + 0.1 * ((s as f64) * 0.7).sin(), 0.05 * ((s as f64) * 1.3).cos()))
        .collect();
    let (e0, g) = lowest_ritz(&h, &start, None)?;
    // a Krylov space only sees one vector per eigenspace, so the deflated run
    // needs a start that is not confined to span(start, g)
    let second: Vec<C64> = (0..h.dim())
        .map(|s| C64::new(1.0 + 0.3 * ((s as f64) * 2.1 + 0.4).cos(), 0.2 * ((s as f64) * 0.9).sin()))
        .collect();
    let (e1, _) = if h.dim() > 1 {
        lowest_ritz(&h, &second, Some(&g))?
    } else {
        (f64::INFINITY, vec![])
    };
    let gap = e1 - e0;
    Ok(GroundState {
        energy: e0,
        state: DenseState { n_sites: n, amps: g },
        first_excited: e1,
        gap,
        degenerate: gap.abs() < 1e-8 * (1.0 + e0.abs()),
    })
}

/// Exact variance `E|F_𝟙|² - |E F_𝟙|²` of the normalization function under
/// direct sampling, at each of `times` (sorted).
///
/// With `R = E[|Ψ⟩⟨Ψ|]` over the noise of one branch,
/// `dR/dt = -i[H, R] + m∘R` with `m_ab = s(a)ᵀ M s(b)`, where `s(a)` holds the
/// `Sᶻ` eigenvalues of basis state `a` and `M = K K† = 2|J| |𝒥|`. Both branches
/// share the law of `R`, so `E|F_𝟙|² = Tr R²` while `E F_𝟙 = 1`.
pub fn direct_norm_variance(model: &CouplingModel, times: &[f64]) -> Result<Vec<f64>> {
    let n = model.n_sites();
    if n > MAX_VARIANCE_SITES {
        return Err(Error::TooLarge { n_sites: n, limit: MAX_VARIANCE_SITES });
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidPlan("times must be sorted and non-negative".into()));
    }
    let h = Hamiltonian::new(model)?;
    let dim = h.dim();
    let eig = SymmetricEigen::new(model.interaction().clone());
    let abs = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::abs))
        * eig.eigenvectors.transpose();
    let mm = abs * (2.0 * model.coupling().abs());
    let spins: Vec<Vec<f64>> = (0..dim)
        .map(|a| (0..n).map(|k| if a >> k & 1 == 1 { 0.5 } else { -0.5 }).collect())
        .collect();
    let pulled: Vec<Vec<f64>> = spins
        .iter()
        .map(|s| (0..n).map(|j| (0..n).map(|l| mm[(j, l)] * s[l]).sum()).collect())
        .collect();
    // column-major, m[b * dim + a] = m_ab
    let mut m = vec![0.0; dim * dim];
    for b in 0..dim {
        for a in 0..dim {
            m[b * dim + a] = spins[a].iter().zip(&pulled[b]).map(|(x, y)| x * y).sum();
        }
    }
    let m_max = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let step_cap = (0.1 / (2.0 * h.norm_bound() + m_max).max(1e-12)).min(0.01);

    let mut r = vec![C64::new(0.0, 0.0); dim * dim];
    r[0] = C64::new(1.0, 0.0);
    let mut hr = vec![C64::new(0.0, 0.0); dim * dim];
    // dR = -i(HR - (HR)†) + m∘R, using R = R†
    let rhs = |r: &[C64], hr: &mut [C64], out: &mut [C64]| {
        for (col, dst) in r.chunks(dim).zip(hr.chunks_mut(dim)) {
            h.apply(col, dst);
        }
        let i = C64::i();
        for b in 0..dim {
            for a in 0..dim {
                let x = hr[b * dim + a] - hr[a * dim + b].conj();
                out[b * dim + a] = -i * x + m[b * dim + a] * r[b * dim + a];
            }
        }
    };
    let mut k = [(); 4].map(|_| vec![C64::new(0.0, 0.0); dim * dim]);
    let mut tmp = vec![C64::new(0.0, 0.0); dim * dim];
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let span = t - now;
        let steps = (span / step_cap).ceil() as usize;
        for _ in 0..steps {
            let dt = span / steps as f64;
            rhs(&r, &mut hr, &mut k[0]);
            for (x, (r0, k0)) in tmp.iter_mut().zip(r.iter().zip(&k[0])) {
                *x = r0 + k0 * (0.5 * dt);
            }
            rhs(&tmp, &mut hr, &mut k[1]);
            for (x, (r0, k1)) in tmp.iter_mut().zip(r.iter().zip(&k[1])) {
                *x = r0 + k1 * (0.5 * dt);
            }
            rhs(&tmp, &mut hr, &mut k[2]);
            for (x, (r0, k2)) in tmp.iter_mut().zip(r.iter().zip(&k[2])) {
                *x = r0 + k2 * dt;
            }
            rhs(&tmp, &mut hr, &mut k[3]);
            for (idx, x) in r.iter_mut().enumerate() {
                *x += (k[0][idx] + 2.0 * k[1][idx] + 2.0 * k[2][idx] + k[3][idx]) * (dt / 6.0);
            }
        }
        now = t;
        let second: f64 = r.iter().map(|x| x.norm_sqr()).sum();
        out.push(second - 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ising_coupling, IsingParams, LatticeSpec};

    fn chain(n: usize, j: f64, gamma: f64, h: f64) -> CouplingModel {
        build_ising_coupling(
            &LatticeSpec::chain(n).unwrap(),
            IsingParams { coupling: j, transverse: gamma, longitudinal: h },
        )
        .unwrap()
    }

    #[test]
    fn rabi_oscillation() {
        let m = chain(1, 0.0, 1.7, 0.0);
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let s = ed_observables(&m, &times, &KrylovOptions::default()).unwrap();
        for (k, &t) in times.iter().enumerate() {
            assert!((s.mz[k] + 0.5 * (1.7 * t).cos()).abs() < 1e-10);
            assert!((s.a_dd[k].norm_sqr() - (0.85 * t).cos().powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn classical_hamiltonian_only_adds_phases() {
        let m = chain(5, 1.0, 0.0, 0.3);
        let h = Hamiltonian::new(&m).unwrap();
        let mut s = DenseState::all_down(5);
        s.amps[0] = C64::new(0.0, 0.0);
        s.amps[13] = C64::new(1.0, 0.0);
        let out = evolve(&h, &s, 2.3, &KrylovOptions::default()).unwrap();
        assert!((s.overlap(&out).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_site_closed_form() {
        // Γ only couples |↓↓⟩ to the triplet sector; h = 0 and J = 1
        let m = chain(2, 1.0, 1.2, 0.0);
        let h = Hamiltonian::new(&m).unwrap();
        let dense = h.dense();
        assert!((dense.adjoint() - &dense).camax() < 1e-15);
        // diagonal: -J·𝒥_01·2·(±1/4) with 𝒥_01 = 1
        assert!((dense[(0, 0)].re + 0.5).abs() < 1e-15);
        assert!((dense[(1, 1)].re - 0.5).abs() < 1e-15);
        let eig = dense.clone().map(|z| z.re).symmetric_eigen();
        let t = 0.9;
        let mut exact = DMatrix::<C64>::zeros(4, 4);
        for k in 0..4 {
            let ph = C64::from_polar(1.0, -eig.eigenvalues[k] * t);
            let v = eig.eigenvectors.column(k);
            for r in 0..4 {
                for c in 0..4 {
                    exact[(r, c)] += ph * v[r] * v[c];
                }
            }
        }
        let out = evolve(&h, &DenseState::all_down(2), t, &KrylovOptions::default()).unwrap();
        for r in 0..4 {
            assert!((out.amps[r] - exact[(r, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn norm_and_energy_are_conserved() {
        let m = build_ising_coupling(
            &LatticeSpec::square(3, 3).unwrap(),
            IsingParams { coupling: 1.0, transverse: 2.0, longitudinal: 2.0 },
        )
        .unwrap();
        let times: Vec<f64> = (0..=6).map(|k| k as f64 * 0.25).collect();
        let s = ed_observables(&m, &times, &KrylovOptions::default()).unwrap();
        for e in &s.energy {
            assert!((e - s.energy[0]).abs() < 1e-8);
        }
        let h = Hamiltonian::new(&m).unwrap();
        let out = evolve(&h, &DenseState::all_down(9), 1.5, &KrylovOptions::default()).unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-10);
        assert!(h.is_hermitian());
    }

    #[test]
    fn initial_values() {
        let m = chain(4, 1.0, 1.0, 0.0);
        let s = ed_observables(&m, &[0.0], &KrylovOptions::default()).unwrap();
        assert_eq!(s.mz[0], -0.5);
        assert_eq!(s.mx[0], 0.0);
        assert_eq!(s.a_dd[0], C64::new(1.0, 0.0));
        assert_eq!(s.rate[0], 0.0);
    }

    #[test]
    fn krylov_step_size_does_not_matter() {
        let m = chain(6, 1.0, 3.0, 0.5);
        let h = Hamiltonian::new(&m).unwrap();
        let a = evolve(&h, &DenseState::all_down(6), 1.0, &KrylovOptions::default()).unwrap();
        let b = evolve(&h, &DenseState::all_down(6), 1.0, &KrylovOptions { dim: 20, max_step: 0.01 }).unwrap();
        let diff: f64 = a.amps.iter().zip(&b.amps).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-11);
    }

    #[test]
    fn classical_ground_states() {
        let m = chain(6, 1.0, 0.0, -0.3);
        let g = ground_state_check(&m).unwrap();
        // h < 0 favours ↓
        assert!((g.state.amps[0].norm() - 1.0).abs() < 1e-8);
        assert!(!g.degenerate);
        let m0 = chain(6, 1.0, 0.0, 0.0);
        let g0 = ground_state_check(&m0).unwrap();
        assert!(g0.degenerate);
        assert!((g0.energy + 6.0 * 0.25).abs() < 1e-10);
    }

    #[test]
    fn gap_opens_across_transition() {
        let small = ground_state_check(&chain(12, 1.0, 0.25, 0.0)).unwrap();
        let large = ground_state_check(&chain(12, 1.0, 1.0, 0.0)).unwrap();
        assert!(small.gap < 1e-3, "{}", small.gap);
        assert!(large.gap > 0.1, "{}", large.gap);
    }

    #[test]
    fn limits_enforced() {
        let m = chain(21, 1.0, 1.0, 0.0);
        assert!(matches!(Hamiltonian::new(&m), Err(Error::TooLarge { .. })));
        let m = chain(17, 1.0, 1.0, 0.0);
        assert!(matches!(ground_state_check(&m), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn direct_variance_single_site_closed_form() {
        let m = chain(1, 1.0, 0.0, 0.7);
        let lam = m.interaction()[(0, 0)].abs();
        let times = [0.0, 0.5, 1.0, 2.0];
        let v = direct_norm_variance(&m, &times).unwrap();
        for (t, got) in times.iter().zip(&v) {
            let want = (lam * t).exp() - 1.0;
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn direct_variance_grows_from_zero() {
        let m = chain(3, 1.0, 2.0, 1.0);
        let v = direct_norm_variance(&m, &[0.0, 0.2, 0.4, 0.8]).unwrap();
        assert!(v[0].abs() < 1e-14);
        assert!(v.windows(2).all(|w| w[1] > w[0]), "{v:?}");
    }

}
