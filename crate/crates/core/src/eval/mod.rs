//! Quantitative evaluation of discovered parts.

pub mod landmarks;
pub mod metrics;
pub mod report;
pub mod segmentation;

pub use landmarks::{fit_regressor, nme, part_centroids, CentroidRegressor, Centroid, LandmarkSet, NormKind};
pub use metrics::{ari, fg_metrics, nmi};
pub use report::{evaluate_dataset, score_predictions, EvalConfig, MetricsReport, Protocol};
