//! Temporal localization of anomalies from per-keyframe scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 0.2;
/// Smoothing kernel width in keyframe positions.
pub const DEFAULT_SIGMA: f64 = 0.4;

pub fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Unnormalized Gaussian weights for offsets `-r..=r`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Gaussian smoothing with the window clipped at the sequence ends and the
/// surviving weights renormalized to one.
pub fn smooth_curve(raw: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let r = kernel_radius(sigma);
    let n = raw.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let center = raw[i];
            let (mut total, mut weight) = (0.0, 0.0);
            let (mut min, mut max) = (center, center);
            for (j, &x) in raw.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel[j + r - i];
                // Accumulating offsets from the center keeps constant windows exact.
                total += w * (x - center);
                weight += w;
                min = min.min(x);
                max = max.max(x);
            }
            (center + total / weight).clamp(min, max)
        })
        .collect())
}

/// Adaptive threshold parameters together with the smoothing width used
/// alongside them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub kappa: f64,
    pub sigma_smooth: f64,
    pub calibration_mean: f64,
    pub calibration_std: f64,
}

impl ThresholdConfig {
    pub fn threshold(&self) -> f64 {
        self.calibration_mean + self.kappa * self.calibration_std
    }

    pub fn with_sigma(mut self, sigma_smooth: f64) -> Result<Self> {
        if !(sigma_smooth.is_finite() && sigma_smooth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {sigma_smooth}"
            )));
        }
        self.sigma_smooth = sigma_smooth;
        Ok(self)
    }
}

/// Mean and population standard deviation of calibration scores, packaged
/// with `kappa`. The threshold is `mean + kappa * std`.
pub fn compute_threshold(calibration_scores: &[f64], kappa: f64) -> Result<ThresholdConfig> {
    if calibration_scores.len() < 2 {
        return Err(Error::InsufficientCalibration(calibration_scores.len()));
    }
    if calibration_scores.iter().any(|s| !s.is_finite()) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(
            "calibration scores and kappa must be finite".into(),
        ));
    }
    let n = calibration_scores.len() as f64;
    let mean = calibration_scores.iter().sum::<f64>() / n;
    let var = calibration_scores
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / n;
    Ok(ThresholdConfig {
        kappa,
        sigma_smooth: DEFAULT_SIGMA,
        calibration_mean: mean,
        calibration_std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCurve {
    pub video_id: u64,
    pub frame_indices: Vec<u64>,
    pub raw_scores: Vec<f64>,
    pub smoothed_scores: Vec<f64>,
}

impl AnomalyCurve {
    pub fn from_raw(
        video_id: u64,
        frame_indices: Vec<u64>,
        raw_scores: Vec<f64>,
        sigma: f64,
    ) -> Result<Self> {
        if frame_indices.len() != raw_scores.len() {
            return Err(Error::Dimension(format!(
                "{} frame indices for {} scores",
                frame_indices.len(),
                raw_scores.len()
            )));
        }
        if frame_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("frame indices must increase".into()));
        }
        let smoothed_scores = smooth_curve(&raw_scores, sigma)?;
        Ok(Self {
            video_id,
            frame_indices,
            raw_scores,
            smoothed_scores,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Anomalous,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySegment {
    pub start_frame: u64,
    pub end_frame: u64,
    pub kind: SegmentKind,
    pub peak_score: f64,
}

impl AnomalySegment {
    pub fn len(&self) -> u64 {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Groups maximal runs of smoothed scores strictly above `threshold` into
/// anomalous segments and the remaining runs into normal segments.
pub fn segment_curve(curve: &AnomalyCurve, threshold: f64) -> Vec<AnomalySegment> {
    let scores = &curve.smoothed_scores;
    let frames = &curve.frame_indices;
    let mut segments = Vec::new();
    let mut start = 0;
    while start < scores.len() {
        let anomalous = scores[start] > threshold;
        let mut end = start;
        while end + 1 < scores.len() && (scores[end + 1] > threshold) == anomalous {
            end += 1;
        }
        let peak = scores[start..=end]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        segments.push(AnomalySegment {
            start_frame: frames[start],
            end_frame: frames[end],
            kind: if anomalous {
                SegmentKind::Anomalous
            } else {
                SegmentKind::Normal
            },
            peak_score: peak,
        });
        start = end + 1;
    }
    segments
}

/// Maps segments over keyframe positions onto original frames, where
/// keyframe `p` covers frames `p * span ..= p * span + span - 1`.
pub fn expand_segments(segments: &[AnomalySegment], span: u64) -> Vec<AnomalySegment> {
    let span = span.max(1);
    segments
        .iter()
        .map(|s| AnomalySegment {
            start_frame: s.start_frame * span,
            end_frame: s.end_frame * span + span - 1,
            ..*s
        })
        .collect()
}

fn merge(mut intervals: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    intervals.sort_unstable();
    let mut merged: Vec<(u64, u64)> = Vec::with_capacity(intervals.len());
    for (s, e) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1.saturating_add(1) => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn covered(intervals: &[(u64, u64)]) -> u64 {
    intervals.iter().map(|(s, e)| e - s + 1).sum()
}

/// Intersection over union of two sets of inclusive frame intervals.
/// Two empty sets are a perfect match.
pub fn interval_iou(predicted: &[(u64, u64)], truth: &[(u64, u64)]) -> f64 {
    let a = merge(predicted.to_vec());
    let b = merge(truth.to_vec());
    let (mut i, mut j, mut inter) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo <= hi {
            inter += hi - lo + 1;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = covered(&a) + covered(&b) - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Temporal IoU between the anomalous segments and ground-truth windows.
pub fn temporal_iou(segments: &[AnomalySegment], truth: &[(u64, u64)]) -> f64 {
    let predicted: Vec<(u64, u64)> = segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Anomalous)
        .map(|s| (s.start_frame, s.end_frame))
        .collect();
    interval_iou(&predicted, truth)
}

pub fn anomalous_frame_count(segments: &[AnomalySegment]) -> u64 {
    segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Anomalous)
        .map(AnomalySegment::len)
        .sum()
}
