//! Parameter spaces, dataset files and the normalization applied before
//! training.

mod dataset;
mod normalize;
mod space;

pub use dataset::{load_candidates, load_dataset, load_manifest, CandidateTable, LoadReport, Manifest, ManifestEntry, Schema, SourceDataset, OBJECTIVE_COLUMN};
pub use normalize::{
    check_kinds, normalize_features, normalize_objectives, normalize_sources, transform_row, FeatureScaling,
    FeatureTransform, NormalizerState, ObjectiveStats, QUANTILE_CLAMP, QUANTILE_KNOTS, STD_EPS,
};
pub use space::{Param, ParamKind, ParamSpace};
