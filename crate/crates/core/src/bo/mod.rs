//! Bayesian optimization: LCB acquisition minimized by differential
//! evolution, the outer loop with traces, and zero-shot ranking.

mod acquisition;
mod run;
mod surrogate;
pub mod trace;

pub use acquisition::{lcb, optimize_acquisition, optimize_acquisition_with, AcquisitionConfig, Proposal};
pub use run::{bo_loop, random_search, zero_shot_batch, Domain, LoopConfig, ZeroShotPick};
pub use surrogate::{FitDiagnostics, FtDklSurrogate, GpSurrogate, Surrogate, GP_FIT_LR, GP_FIT_STEPS};
pub use trace::{read_trace, ParamValue, Phase, RunTrace, TraceHeader, TraceRecord, TraceSummary, TraceWriter};
