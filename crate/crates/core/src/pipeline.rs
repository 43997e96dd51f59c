//! End-to-end stages shared by the command-line front-end and the tests:
//! probe a labeled corpus for its most salient layer, train a scorer on it,
//! calibrate the threshold, and localize anomalies in video sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_subset, HiddenStateDump, ProbeSet, VideoSequence};
use crate::error::{Error, Result};
use crate::localizer::{
    expand_segments, segment_curve, AnomalyCurve, AnomalySegment, ThresholdConfig,
};
use crate::saliency::{analyze_layers, SaliencyConfig, SaliencyReport};
use crate::scorer::{train_on_layer, ScorerModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub fraction: f64,
    pub seed: u64,
    pub saliency: SaliencyConfig,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            seed: 0,
            saliency: SaliencyConfig::default(),
        }
    }
}

/// Subsamples the corpus and runs layer saliency analysis on the subset.
pub fn probe(set: &ProbeSet, options: &ProbeOptions) -> Result<SaliencyReport> {
    let subset = stratified_subset(set, options.fraction, options.seed)?;
    analyze_layers(&subset, &options.saliency)
}

/// Scorer probabilities for every sample of a probing set, used to calibrate
/// the adaptive threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub layer_index: usize,
    pub scores: Vec<f64>,
}

pub fn calibration_scores(model: &ScorerModel, set: &ProbeSet) -> Result<CalibrationSet> {
    let rows = set.layer_rows(model.layer_index)?;
    let scores = rows
        .rows()
        .into_iter()
        .map(|r| model.predict_proba_f64(r.as_slice().expect("standard layout")))
        .collect::<Result<_>>()?;
    Ok(CalibrationSet {
        layer_index: model.layer_index,
        scores,
    })
}

/// Trains on `layer` and scores the same samples for calibration.
pub fn train_and_calibrate(
    set: &ProbeSet,
    layer: usize,
    config: &TrainConfig,
) -> Result<(ScorerModel, CalibrationSet)> {
    let model = train_on_layer(set, layer, config)?;
    let calibration = calibration_scores(&model, set)?;
    Ok((model, calibration))
}

pub fn score_sequence(model: &ScorerModel, sequence: &VideoSequence) -> Result<Vec<f64>> {
    sequence
        .vectors()
        .iter()
        .map(|v| model.predict_proba(v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoLocalization {
    pub video_id: u64,
    pub threshold: f64,
    /// Segments over keyframe positions.
    pub segments: Vec<AnomalySegment>,
    /// The same segments mapped onto original frames.
    pub frame_segments: Vec<AnomalySegment>,
    pub frame_indices: Vec<u64>,
    pub raw_scores: Vec<f64>,
    pub smoothed_scores: Vec<f64>,
}

impl VideoLocalization {
    pub fn curve(&self) -> AnomalyCurve {
        AnomalyCurve {
            video_id: self.video_id,
            frame_indices: self.frame_indices.clone(),
            raw_scores: self.raw_scores.clone(),
            smoothed_scores: self.smoothed_scores.clone(),
        }
    }
}

/// Scores, smooths, thresholds and segments one sequence.
pub fn localize_sequence(
    model: &ScorerModel,
    sequence: &VideoSequence,
    threshold: &ThresholdConfig,
    frames_per_keyframe: u64,
) -> Result<VideoLocalization> {
    if sequence.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let raw = score_sequence(model, sequence)?;
    let curve = AnomalyCurve::from_raw(
        sequence.video_id,
        sequence.frame_indices().to_vec(),
        raw,
        threshold.sigma_smooth,
    )?;
    let t = threshold.threshold();
    let segments = segment_curve(&curve, t);
    Ok(VideoLocalization {
        video_id: curve.video_id,
        threshold: t,
        frame_segments: expand_segments(&segments, frames_per_keyframe),
        segments,
        frame_indices: curve.frame_indices,
        raw_scores: curve.raw_scores,
        smoothed_scores: curve.smoothed_scores,
    })
}

/// Localizes every video in a dump at the model's layer. Videos are
/// processed in parallel; output order follows video id.
pub fn localize_dump(
    model: &ScorerModel,
    dump: &HiddenStateDump,
    threshold: &ThresholdConfig,
    frames_per_keyframe: u64,
) -> Result<Vec<VideoLocalization>> {
    if dump.hidden_dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "model expects {} features, dump has {}",
            model.dim(),
            dump.hidden_dim()
        )));
    }
    let sequences = dump.sequences(model.layer_index)?;
    sequences
        .par_iter()
        .map(|s| localize_sequence(model, s, threshold, frames_per_keyframe))
        .collect()
}
