//! Region-of-interest proposal, bandwidth-budgeted selection and evaluation
//! for drone imagery streamed over a constrained link.
//!
//! Geometry works in exact integer pixels. Anything that is a ratio
//! (IoU, IoGT, the streamable portion `r`, precision and recall) is generic
//! over [`Scalar`], implemented for `f32`, `f64` and exact rationals. The
//! aliases below fix the everyday choice of `f64` (and `f32` heatmaps); the
//! `Exact*` aliases use [`Rational64`].

pub mod bench;
pub mod dataset;
mod error;
pub mod geometry;
pub mod matching;
pub mod raster;
pub mod saliency;
pub mod scalar;
pub mod select;
pub mod sweep;

pub use error::Error;
pub use geometry::{concentric_fit, intersect, iogt, iou, union_area, FrameDims, RectPx};
pub use matching::{match_boxes, match_iogt, match_one_to_one, metrics, MatchCounts, MatchMode, MatchResult};
pub use num_rational::Rational64;
pub use saliency::{binarize, component_boxes, BinaryMap, Connectivity};
pub use scalar::Scalar;
pub use select::{select, select_with_reserved, Accounting, Selection, SelectionMode, SelectionPolicy};

pub type Heatmap = saliency::Heatmap<f32>;
pub type ProposeConfig = saliency::ProposeConfig<f32>;
pub type ScoredBox = select::ScoredBox<f64>;
pub type ProposalSet = select::ProposalSet<f64>;
pub type BudgetPortion = select::BudgetPortion<f64>;
pub type MatchConfig = matching::MatchConfig<f64>;
pub type MetricsPoint = matching::MetricsPoint<f64>;
pub type Dataset = dataset::Dataset<f64>;
pub type SweepConfig = sweep::SweepConfig<f64>;

pub type ExactProposalSet = select::ProposalSet<Rational64>;
pub type ExactBudgetPortion = select::BudgetPortion<Rational64>;
pub type ExactMatchConfig = matching::MatchConfig<Rational64>;
pub type ExactMetricsPoint = matching::MetricsPoint<Rational64>;

/// Proposals for a heatmap with the default `f64` confidence type.
pub fn propose_from_heatmap(heatmap: &Heatmap, cfg: &ProposeConfig) -> Result<ProposalSet, Error> {
    saliency::propose_from_heatmap(heatmap, cfg)
}
