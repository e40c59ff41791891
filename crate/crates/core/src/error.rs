use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("interaction matrix is singular (smallest |eigenvalue| = {min_abs_eigenvalue:.3e})")]
    SingularCoupling { min_abs_eigenvalue: f64 },

    #[error("eigendecomposition failed: {0}")]
    EigenSolve(String),

    #[error("noise transform undefined for zero overall coupling")]
    ZeroCoupling,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid integrator settings: {0}")]
    InvalidIntegrator(String),

    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),

    #[error("time {time} outside grid [0, {t_max}]")]
    OutsideGrid { time: f64, t_max: f64 },

    #[error("all {n_traj} trajectories diverged ({chart_switches} chart switches recorded)")]
    AllInvalid { n_traj: usize, chart_switches: u64 },

    #[error("system of {n_sites} sites exceeds the exact-diagonalization limit of {limit}")]
    TooLarge { n_sites: usize, limit: usize },

    #[error("Krylov iteration broke down: {0}")]
    KrylovBreakdown(String),

    #[error("{0}")]
    Statistics(String),
}

pub type Result<T> = std::result::Result<T, Error>;
