//! Proximal indirect comparison toolkit.
//!
//! Estimates the average treatment effect of a treatment that is absent from a
//! target randomized trial by bridging through proxy variables measured in a
//! source trial. The crate provides:
//!
//! - two-trial tabular data handling and basis construction ([`data`]),
//! - regression primitives for nuisance models ([`regress`]),
//! - bridge-function fitting by the generalized method of moments ([`bridge`]),
//! - doubly/multiply robust point estimators with influence-function standard
//!   errors ([`estimate`]),
//! - a Monte Carlo simulation lab with a 19-experiment catalog ([`sim`]),
//! - a CSV analysis pipeline for two-trial individual-patient data
//!   ([`analysis`]).
//!
//! Replication-level work is data-parallel via rayon when the `parallel`
//! feature (default) is enabled; results are identical across thread counts.

pub mod analysis;
pub mod bridge;
pub mod data;
pub mod error;
pub mod estimate;
pub mod fixture;
pub mod regress;
pub mod sim;

mod linalg;
mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
///
/// Results are collected in index order, so the output is independent of the
/// number of worker threads.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
