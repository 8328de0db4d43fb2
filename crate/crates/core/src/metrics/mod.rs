//! Attribution area ratio, saliency boxes and hit ratio, neuron coverage and
//! the per-epoch metrics log.

pub mod bbox;
pub mod coverage;
pub mod report;

pub use bbox::{hit_ratio, iou, is_hit, saliency_bbox, BBox};
pub use coverage::{coverage_indices, neuron_coverage, CoverageTracker, COVERAGE_BATCHES, COVERAGE_BATCH_SIZE};
pub use report::{area_ratio, generalization_gap, mean_area_ratio, MetricsReport, CSV_HEADER};
