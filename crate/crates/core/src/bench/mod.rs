//! Synthetic transfer benchmarks, baseline surrogates, the experiment
//! runner and regret/rank metrics.

mod ackley;
mod experiment;
mod forest;
mod hetero;
mod metrics;

pub use ackley::{de_trajectory, make_source_corpus_ackley, AckleyInstance};
pub use experiment::{
    make_surrogate, run_experiment, ExperimentConfig, ExperimentResult, Method, Objective, PreparedProblem, Problem,
    RunOutcome,
};
pub use forest::{ForestSurrogate, RandomForest, FOREST_TREES};
pub use hetero::{HeteroBenchmark, HeteroTask, NAME_POOL};
pub use metrics::{average_rank, median, normalized_regret, ranks, MetricRow, MetricTable, RegretRuns};
