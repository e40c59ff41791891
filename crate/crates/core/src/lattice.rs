//! Periodic hypercubic lattices, Ising couplings and the noise transform.
//!
//! The Hamiltonian is
//!
//! ```text
//! H = -J Σ_jk 𝒥_jk Sᶻ_j Sᶻ_k - Σ_j (h⁺_j S⁺_j + hᶻ_j Sᶻ_j + h⁻_j S⁻_j)
//! ```
//!
//! where the sum over `j, k` runs over ordered pairs, so a nearest-neighbour
//! bond carries `𝒥_jk = 𝒥_kj = 1/2`. The transverse field `Γ Sˣ` is encoded
//! as `h⁺ = h⁻ = Γ/2`.
//!
//! Decoupling the interaction with Hubbard-Stratonovich fields `φ` gives the
//! Gaussian weight `exp(-(iJ/4) ∫ φᵀ 𝒥⁻¹ φ)`. A complex matrix `O` with
//! `(iJ/2) Oᵀ 𝒥⁻¹ O = 1` maps real white noise `ϕ` onto `φ = O ϕ` and makes
//! the weight the standard `exp(-½ ∫ ϕ²)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::C64;

/// Default diagonal shift added to a dimension's coupling block when its
/// length is a multiple of 4 (the block is singular otherwise).
pub const DEFAULT_REGULARIZATION: f64 = 0.1;

/// Eigenvalues below this magnitude make the coupling matrix singular.
const SINGULAR_EIGENVALUE: f64 = 1e-9;

/// Shape of a periodic lattice. Site indices are row-major with the last
/// dimension varying fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeSpec {
    dims: Vec<usize>,
}

impl LatticeSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidLattice("at least one dimension is required".into()));
        }
        if let Some(pos) = dims.iter().position(|&n| n == 0) {
            return Err(Error::InvalidLattice(format!("dimension {pos} has zero sites")));
        }
        Ok(Self { dims })
    }

    pub fn chain(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn square(n1: usize, n2: usize) -> Result<Self> {
        Self::new(vec![n1, n2])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dimension(&self) -> usize {
        self.dims.len()
    }

    pub fn n_sites(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut rest = site;
        let mut out = vec![0; self.dims.len()];
        for (d, &n) in self.dims.iter().enumerate().rev() {
            out[d] = rest % n;
            rest /= n;
        }
        out
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &n)| acc * n + c % n)
    }

    /// Neighbour of `site` displaced by `step` (±1) along `dim`, with wrap.
    pub fn neighbor(&self, site: usize, dim: usize, step: isize) -> usize {
        let mut c = self.coords(site);
        let n = self.dims[dim] as isize;
        c[dim] = (c[dim] as isize + step).rem_euclid(n) as usize;
        self.index(&c)
    }
}

/// Record of the diagonal shift applied to singular coupling blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularization {
    pub epsilon: f64,
    /// Dimensions whose block received `epsilon · 1`.
    pub shifted_dims: Vec<usize>,
    /// Set when the assembled matrix was still singular (e.g. `2×2`, where
    /// eigenvalues of different dimensions cancel) and got one more
    /// `epsilon · 1`.
    pub whole_lattice: bool,
}

impl Regularization {
    pub fn is_active(&self) -> bool {
        (!self.shifted_dims.is_empty() || self.whole_lattice) && self.epsilon != 0.0
    }
}

/// Couplings and fields of a spin-1/2 model with a `zz` interaction block.
#[derive(Debug, Clone)]
pub struct CouplingModel {
    lattice: LatticeSpec,
    zz: DMatrix<f64>,
    h_plus: Vec<C64>,
    h_z: Vec<f64>,
    h_minus: Vec<C64>,
    coupling: f64,
    regularization: Regularization,
}

impl CouplingModel {
    /// Builds a model from explicit parts. The interaction matrix must be
    /// square, symmetric and match the lattice size.
    pub fn from_parts(
        lattice: LatticeSpec,
        zz: DMatrix<f64>,
        coupling: f64,
        h_plus: Vec<C64>,
        h_z: Vec<f64>,
        h_minus: Vec<C64>,
    ) -> Result<Self> {
        let n = lattice.n_sites();
        if zz.nrows() != n || zz.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: zz.nrows() });
        }
        for v in [h_plus.len(), h_z.len(), h_minus.len()] {
            if v != n {
                return Err(Error::DimensionMismatch { expected: n, got: v });
            }
        }
        if (&zz - zz.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidLattice("interaction matrix is not symmetric".into()));
        }
        Ok(Self {
            lattice,
            zz,
            h_plus,
            h_z,
            h_minus,
            coupling,
            regularization: Regularization { epsilon: 0.0, shifted_dims: vec![], whole_lattice: false },
        })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.n_sites()
    }

    /// The `zz` block of 𝒥 (including any regularization shift).
    pub fn interaction(&self) -> &DMatrix<f64> {
        &self.zz
    }

    /// Overall coupling `J`.
    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn h_plus(&self) -> &[C64] {
        &self.h_plus
    }

    pub fn h_z(&self) -> &[f64] {
        &self.h_z
    }

    pub fn h_minus(&self) -> &[C64] {
        &self.h_minus
    }

    pub fn regularization(&self) -> &Regularization {
        &self.regularization
    }

    /// Returns true when every site sees the same fields and the same
    /// coupling row sum.
    pub fn is_uniform(&self) -> bool {
        let n = self.n_sites();
        let row0: f64 = self.zz.row(0).sum();
        (0..n).all(|j| {
            (self.zz.row(j).sum() - row0).abs() < 1e-12
                && (self.zz[(j, j)] - self.zz[(0, 0)]).abs() < 1e-12
                && self.h_plus[j] == self.h_plus[0]
                && self.h_minus[j] == self.h_minus[0]
                && self.h_z[j] == self.h_z[0]
        })
    }

    /// Dumps the interaction matrix as CSV (no header).
    pub fn interaction_csv(&self) -> String {
        matrix_csv(&self.zz)
    }
}

/// Parameters of the transverse-field Ising model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsingParams {
    /// Overall coupling `J`.
    pub coupling: f64,
    /// Transverse field `Γ`.
    pub transverse: f64,
    /// Longitudinal field `h`.
    pub longitudinal: f64,
}

/// Nearest-neighbour Ising model with periodic wrap and the default
/// regularization.
pub fn build_ising_coupling(lattice: &LatticeSpec, params: IsingParams) -> Result<CouplingModel> {
    build_ising_coupling_with(lattice, params, DEFAULT_REGULARIZATION)
}

/// Nearest-neighbour Ising model. Every dimension whose length is a multiple
/// of 4 gets `epsilon · 1` added to its block; if the sum is still singular
/// the whole matrix gets one more `epsilon · 1`. Each shift only adds the
/// constant `-J ε N/4` to the Hamiltonian.
pub fn build_ising_coupling_with(
    lattice: &LatticeSpec,
    params: IsingParams,
    epsilon: f64,
) -> Result<CouplingModel> {
    if !epsilon.is_finite() {
        return Err(Error::InvalidLattice("regularization must be finite".into()));
    }
    let n = lattice.n_sites();
    let mut zz = DMatrix::<f64>::zeros(n, n);
    let mut shifted_dims = Vec::new();
    for (d, &len) in lattice.dims().iter().enumerate() {
        for site in 0..n {
            for step in [1isize, -1] {
                let nb = lattice.neighbor(site, d, step);
                zz[(site, nb)] += 0.5;
            }
        }
        if len % 4 == 0 && epsilon != 0.0 {
            for site in 0..n {
                zz[(site, site)] += epsilon;
            }
            shifted_dims.push(d);
        }
    }
    let mut whole_lattice = false;
    if epsilon != 0.0 {
        let eig = zz.clone().symmetric_eigenvalues();
        if eig.iter().any(|l| l.abs() < SINGULAR_EIGENVALUE) {
            for site in 0..n {
                zz[(site, site)] += epsilon;
            }
            whole_lattice = true;
        }
    }
    let half = C64::new(params.transverse / 2.0, 0.0);
    let mut model = CouplingModel::from_parts(
        lattice.clone(),
        zz,
        params.coupling,
        vec![half; n],
        vec![params.longitudinal; n],
        vec![half; n],
    )?;
    model.regularization = Regularization { epsilon, shifted_dims, whole_lattice };
    Ok(model)
}

/// The complex matrix `O = V diag(√(-2iλ/J))` built from the eigenpairs of
/// the `zz` block, using the principal branch of the square root.
#[derive(Debug, Clone)]
pub struct NoiseTransform {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    coupling: f64,
    /// `√(-2iλ_k/J)`; empty when `J = 0`.
    scales: Vec<C64>,
    /// `J · √(-2iλ_k/J)`, i.e. the columns of `J O` in the eigenbasis.
    coupled_scales: Vec<C64>,
    invertible: bool,
}

impl NoiseTransform {
    /// Branch convention for the complex square roots.
    pub const SQRT_BRANCH: &'static str = "principal";

    fn build(model: &CouplingModel, require_invertible: bool) -> Result<Self> {
        let eig = SymmetricEigen::try_new(model.interaction().clone(), 1e-14, 10_000)
            .ok_or_else(|| Error::EigenSolve("symmetric eigensolver did not converge".into()))?;
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::EigenSolve("non-finite eigenvalue".into()));
        }
        let min_abs = eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let invertible = min_abs > SINGULAR_EIGENVALUE;
        if require_invertible && !invertible {
            return Err(Error::SingularCoupling { min_abs_eigenvalue: min_abs });
        }
        let j = model.coupling();
        let i = C64::i();
        let (scales, coupled_scales) = if j == 0.0 {
            (Vec::new(), vec![C64::new(0.0, 0.0); eigenvalues.len()])
        } else {
            let s: Vec<C64> = eigenvalues.iter().map(|&l| (-2.0 * i * l / j).sqrt()).collect();
            let cs = s.iter().map(|&x| x * j).collect();
            (s, cs)
        };
        Ok(Self {
            eigenvalues,
            eigenvectors: eig.eigenvectors,
            coupling: j,
            scales,
            coupled_scales,
            invertible,
        })
    }

    /// Transform for a model with invertible coupling matrix.
    pub fn new(model: &CouplingModel) -> Result<Self> {
        Self::build(model, true)
    }

    /// Transform that tolerates zero eigenvalues. The noise representation
    /// only needs `O Oᵀ = (2/iJ) 𝒥`, so it stays valid for direct sampling;
    /// measure shifts need the inverse and will fail.
    pub fn allowing_singular(model: &CouplingModel) -> Result<Self> {
        Self::build(model, false)
    }

    pub fn n_sites(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Column scales `√(-2iλ_k/J)`.
    pub fn scales(&self) -> Result<&[C64]> {
        if self.coupling == 0.0 {
            return Err(Error::ZeroCoupling);
        }
        Ok(&self.scales)
    }

    pub fn is_invertible(&self) -> bool {
        self.invertible
    }

    /// The matrix `O`.
    pub fn matrix(&self) -> Result<DMatrix<C64>> {
        let scales = self.scales()?;
        Ok(self.scaled_columns(scales))
    }

    /// The matrix `J O`, which maps white-noise increments onto increments of
    /// the field `J φ` entering `Φᶻ`. Defined (as zero) for `J = 0`.
    pub fn coupling_matrix(&self) -> DMatrix<C64> {
        self.scaled_columns(&self.coupled_scales)
    }

    fn scaled_columns(&self, scales: &[C64]) -> DMatrix<C64> {
        let n = self.n_sites();
        DMatrix::from_fn(n, n, |r, c| scales[c] * self.eigenvectors[(r, c)])
    }

    /// Maximum entry of `|(iJ/2) Oᵀ 𝒥⁻¹ O - 1|`, with `𝒥⁻¹` from an
    /// independent dense inversion.
    pub fn identity_residual(&self, model: &CouplingModel) -> Result<f64> {
        let o = self.matrix()?;
        let inv = model
            .interaction()
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCoupling { min_abs_eigenvalue: 0.0 })?;
        let inv_c = inv.map(|x| C64::new(x, 0.0));
        let prod = o.transpose() * inv_c * &o * (C64::i() * self.coupling / 2.0);
        let n = self.n_sites();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((prod[(r, c)] - target).norm());
            }
        }
        Ok(worst)
    }

    /// Complex Hubbard-Stratonovich field `O ϕ` for a real noise vector.
    pub fn hs_field(&self, white_noise: &[f64]) -> Result<Vec<C64>> {
        let n = self.n_sites();
        if white_noise.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: white_noise.len() });
        }
        let scales = self.scales()?;
        // φ_j = Σ_k V_jk s_k ϕ_k
        Ok((0..n)
            .map(|j| {
                (0..n)
                    .map(|k| scales[k] * self.eigenvectors[(j, k)] * white_noise[k])
                    .sum()
            })
            .collect())
    }

    /// Noise-space shift `O⁻¹ φ` corresponding to a field-space shift `φ`.
    pub fn noise_shift(&self, field: &[C64]) -> Result<Vec<C64>> {
        let n = self.n_sites();
        if field.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: field.len() });
        }
        if !self.invertible {
            let min_abs = self.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            return Err(Error::SingularCoupling { min_abs_eigenvalue: min_abs });
        }
        let scales = self.scales()?;
        Ok((0..n)
            .map(|k| {
                let proj: C64 = (0..n).map(|r| field[r] * self.eigenvectors[(r, k)]).sum();
                proj / scales[k]
            })
            .collect())
    }

    /// Dumps `O` as CSV with interleaved real and imaginary columns.
    pub fn matrix_csv(&self) -> Result<String> {
        let o = self.matrix()?;
        let mut out = String::new();
        for r in 0..o.nrows() {
            let row: Vec<String> = (0..o.ncols())
                .map(|c| format!("{},{}", o[(r, c)].re, o[(r, c)].im))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        Ok(out)
    }
}

/// Convenience wrapper mirroring [`NoiseTransform::new`].
pub fn noise_transform(model: &CouplingModel) -> Result<NoiseTransform> {
    NoiseTransform::new(model)
}

/// Convenience wrapper mirroring [`NoiseTransform::hs_field`].
pub fn hs_field(transform: &NoiseTransform, white_noise: &[f64]) -> Result<Vec<C64>> {
    transform.hs_field(white_noise)
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
