//! Two-component single-site states in the `(↑, ↓)` basis and exact step
//! propagators for piecewise-constant fields.

use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Spinor {
    pub up: C64,
    pub down: C64,
}

impl Spinor {
    pub fn down() -> Self {
        Self { up: C64::new(0.0, 0.0), down: C64::new(1.0, 0.0) }
    }

    pub fn up() -> Self {
        Self { up: C64::new(1.0, 0.0), down: C64::new(0.0, 0.0) }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.up.norm_sqr() + self.down.norm_sqr()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm_sqr().sqrt();
        Self { up: self.up / n, down: self.down / n }
    }

    pub fn conj(self) -> Self {
        Self { up: self.up.conj(), down: self.down.conj() }
    }

    /// Bilinear pairing `Σ a_s b_s` (no conjugation).
    pub fn dot(self, other: Self) -> C64 {
        self.up * other.up + self.down * other.down
    }

    /// `Sᶻ` applied to the state.
    pub fn sz(self) -> Self {
        Self { up: self.up * 0.5, down: -self.down * 0.5 }
    }

    /// Normalized `⟨Sᶻ⟩`.
    pub fn sz_expectation(self) -> f64 {
        0.5 * (self.up.norm_sqr() - self.down.norm_sqr()) / self.norm_sqr()
    }
}

/// `exp(iΔ A)` with `A = [[Φᶻ/2, Φ⁺], [Φ⁻, -Φᶻ/2]]`, the propagator of
/// `i∂ₜ|ψ⟩ = -A|ψ⟩` over a step where the fields are constant.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepPropagator {
    m: [[C64; 2]; 2],
}

impl StepPropagator {
    pub fn new(plus: C64, z: C64, minus: C64, dt: f64) -> Self {
        let i = C64::i();
        let w2 = z * z * 0.25 + plus * minus;
        let w = w2.sqrt();
        let x = w * dt;
        let (cos, sinc) = if x.norm() < 1e-4 {
            let x2 = x * x;
            (1.0 - x2 * 0.5 + x2 * x2 / 24.0, 1.0 - x2 / 6.0 + x2 * x2 / 120.0)
        } else {
            (x.cos(), x.sin() / x)
        };
        let f = i * dt * sinc;
        Self {
            m: [
                [cos + f * z * 0.5, f * plus],
                [f * minus, cos - f * z * 0.5],
            ],
        }
    }

    /// `U ψ`.
    pub fn apply(&self, s: Spinor) -> Spinor {
        Spinor {
            up: self.m[0][0] * s.up + self.m[0][1] * s.down,
            down: self.m[1][0] * s.up + self.m[1][1] * s.down,
        }
    }

    /// Row vector times `U`: `(rᵀ U)ᵀ`.
    pub fn apply_left(&self, r: Spinor) -> Spinor {
        Spinor {
            up: r.up * self.m[0][0] + r.down * self.m[1][0],
            down: r.up * self.m[0][1] + r.down * self.m[1][1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn hermitian_fields_are_unitary() {
        let u = StepPropagator::new(C64::new(0.7, 0.2), C64::new(1.3, 0.0), C64::new(0.7, -0.2), 0.37);
        let a = u.apply(Spinor::down());
        let b = u.apply(Spinor::up());
        assert!((a.norm_sqr() - 1.0).abs() < 1e-13);
        assert!((b.norm_sqr() - 1.0).abs() < 1e-13);
        assert!(a.conj().dot(b).norm() < 1e-13);
    }

    #[test]
    fn matches_many_small_steps() {
        let (p, z, m) = (C64::new(0.3, 0.1), C64::new(-0.4, 0.6), C64::new(1.1, -0.2));
        let big = StepPropagator::new(p, z, m, 0.5).apply(Spinor::down());
        let mut s = Spinor::down();
        // second-order Taylor steps
        let n = 200_000;
        let dt = 0.5 / n as f64;
        let i = C64::i();
        for _ in 0..n {
            let a = |v: Spinor| Spinor {
                up: (z * 0.5 * v.up + p * v.down) * i,
                down: (m * v.up - z * 0.5 * v.down) * i,
            };
            let k1 = a(s);
            let k2 = a(k1);
            s = Spinor {
                up: s.up + k1.up * dt + k2.up * dt * dt * 0.5,
                down: s.down + k1.down * dt + k2.down * dt * dt * 0.5,
            };
        }
        assert!(close(big.up, s.up, 1e-8) && close(big.down, s.down, 1e-8));
    }

    #[test]
    fn degenerate_frequency_limit() {
        // Φᶻ = 0, Φ⁻ = 0: nilpotent generator
        let u = StepPropagator::new(C64::new(2.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), 0.3);
        let s = u.apply(Spinor::down());
        assert!(close(s.up, C64::new(0.0, 0.6), 1e-14));
        assert!(close(s.down, C64::new(1.0, 0.0), 1e-14));
    }

    #[test]
    fn left_and_right_agree() {
        let u = StepPropagator::new(C64::new(0.3, 0.1), C64::new(-0.4, 0.6), C64::new(1.1, -0.2), 0.2);
        let r = Spinor { up: C64::new(0.2, 0.5), down: C64::new(-1.0, 0.3) };
        let s = Spinor { up: C64::new(0.9, -0.1), down: C64::new(0.4, 0.4) };
        assert!(close(u.apply_left(r).dot(s), r.dot(u.apply(s)), 1e-14));
    }
}
