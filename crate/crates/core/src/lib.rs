//! Optimal dividends under stochastically varying profitability.
//!
//! The value function of the singular-control problem is approximated by a
//! penalized HJB equation with bounded dividend rates, discretized with a
//! monotone finite-difference scheme and solved by policy iteration.

pub mod analysis;
pub mod closed_form;
pub mod extensions;
pub mod grid;
pub mod linsolve;
pub mod mc;
pub mod model;
pub mod operator;
pub mod solver;

/// Sets the worker count of the global rayon pool and the sparse
/// factorization. Call once, before any solve.
pub fn configure_threads(n: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    faer::set_global_parallelism(if n == 1 { faer::Par::Seq } else { faer::Par::rayon(n) });
    Ok(())
}
