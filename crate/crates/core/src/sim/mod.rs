//! Monte Carlo simulation lab: data-generating process, closed-form bridge
//! oracle, experiment catalog, replication runner, and summary aggregation.

pub(crate) mod dgp;
mod experiments;
mod runner;

pub use dgp::{
    closed_form_bridges, generate_full_data, monte_carlo_truth, DgpParams, FullData, ULaw,
};
pub use experiments::ExperimentConfig;
pub use runner::{
    aggregate_summary, run_experiment, run_experiment_with_truth_draws, run_replication,
    EstimatePoint, EstimatorSummary, ExperimentResult, MonteCarloSummary, RepResult,
    DEFAULT_TRUTH_DRAWS,
};
