//! Hidden-state probing for video anomaly detection.
//!
//! The crate works on per-layer hidden-state dumps exported from a
//! multimodal model. It finds the layer whose hidden states best separate
//! normal from anomalous samples, trains a logistic scorer on that layer and
//! turns per-keyframe anomaly probabilities into temporal segments.
//!
//! - [`dataset`]: the `HSD1` binary dump format, manifests, probing subsets
//! - [`saliency`]: per-layer KL / LDR / entropy / silhouette and layer selection
//! - [`scorer`]: standardized logistic regression trained with L-BFGS
//! - [`localizer`]: smoothing, adaptive thresholding and segmentation
//! - [`synthlab`]: synthetic corpora with planted ground truth
//! - [`pipeline`]: the stages wired together

pub mod dataset;
pub mod error;
pub mod localizer;
pub mod optim;
pub mod pipeline;
pub mod saliency;
pub mod scorer;
pub mod synthlab;

pub use dataset::{
    read_dump, stratified_subset, write_dump, HiddenStateDump, Label, LabelScheme, Manifest,
    ProbeSet, Record, VideoSequence,
};
pub use error::{Error, Result};
pub use localizer::{
    compute_threshold, segment_curve, smooth_curve, AnomalyCurve, AnomalySegment, SegmentKind,
    ThresholdConfig,
};
pub use saliency::{analyze_layers, LayerStats, SaliencyConfig, SaliencyReport};
pub use scorer::{ScorerModel, TrainConfig};
pub use synthlab::{GroundTruth, LayerProfile, PlantedStream};
