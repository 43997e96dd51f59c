//! Synthetic layer stacks and video streams with known ground truth.
//!
//! At layer `l`, normal vectors are standard Gaussian in every dimension and
//! anomalous vectors are shifted by `s[l] * u_l`, where `u_l` is a fixed
//! random unit direction drawn per layer. The per-layer separation `s[l]` is
//! therefore the class-mean distance in units of the within-class standard
//! deviation, and the Gaussian KL divergence per dimension averages to
//! `s[l]^2 / (2 D)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{HiddenStateDump, Label, ProbeSet, Record, VideoSequence};
use crate::error::{Error, Result};

const DIRECTION_STREAM: u64 = 0;
const PROBE_STREAM: u64 = 1;
const VIDEO_STREAM: u64 = 2;

/// Required ratio between the peak separation and the runner-up.
pub const PEAK_RATIO: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub separations: Vec<f64>,
    pub peak_layer: usize,
    pub noise_seed: u64,
}

impl LayerProfile {
    /// A single peak of `peak_separation` at `peak_layer` over a background
    /// that decays linearly from `background` at the peak's neighbours to
    /// `background / reach` at the farthest layer.
    pub fn peaked(
        num_layers: usize,
        hidden_dim: usize,
        peak_layer: usize,
        peak_separation: f64,
        background: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        if num_layers == 0 || peak_layer >= num_layers {
            return Err(Error::Spec(format!(
                "peak layer {peak_layer} outside {num_layers} layers"
            )));
        }
        let reach = peak_layer.max(num_layers - 1 - peak_layer).max(1) as f64;
        let separations = (0..num_layers)
            .map(|l| {
                if l == peak_layer {
                    peak_separation
                } else {
                    let dist = l.abs_diff(peak_layer) as f64;
                    background * (reach - dist + 1.0) / reach
                }
            })
            .collect();
        let profile = Self {
            num_layers,
            hidden_dim,
            separations,
            peak_layer,
            noise_seed,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// No class separation anywhere.
    pub fn flat(num_layers: usize, hidden_dim: usize, noise_seed: u64) -> Self {
        Self {
            num_layers,
            hidden_dim,
            separations: vec![0.0; num_layers],
            peak_layer: 0,
            noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Spec(
                "num_layers and hidden_dim must be at least 1".into(),
            ));
        }
        if self.separations.len() != self.num_layers {
            return Err(Error::Spec(format!(
                "{} separations for {} layers",
                self.separations.len(),
                self.num_layers
            )));
        }
        if self
            .separations
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(Error::Spec(
                "separations must be finite and non-negative".into(),
            ));
        }
        if self.peak_layer >= self.num_layers {
            return Err(Error::Spec(format!(
                "peak layer {} out of range",
                self.peak_layer
            )));
        }
        let peak = self.separations[self.peak_layer];
        if peak == 0.0 && self.separations.iter().all(|&s| s == 0.0) {
            return Ok(());
        }
        let runner_up = self
            .separations
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != self.peak_layer)
            .map(|(_, &s)| s)
            .fold(0.0, f64::max);
        if !(peak > 0.0 && peak >= PEAK_RATIO * runner_up) {
            return Err(Error::Spec(format!(
                "peak separation {peak} must exceed {PEAK_RATIO} x runner-up {runner_up}"
            )));
        }
        Ok(())
    }

    /// Unit shift direction for every layer.
    pub fn directions(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(DIRECTION_STREAM);
        (0..self.num_layers)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.hidden_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }

    /// Per-dimension Gaussian KL between the classes at `layer`, averaged
    /// over dimensions.
    pub fn closed_form_kl(&self, layer: usize) -> f64 {
        let s = self.separations[layer];
        s * s / (2.0 * self.hidden_dim as f64)
    }

    fn sample_vectors(
        &self,
        rng: &mut ChaCha8Rng,
        directions: &[Vec<f64>],
        anomalous: bool,
    ) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_layers * self.hidden_dim);
        for (l, dir) in directions.iter().enumerate() {
            let shift = if anomalous { self.separations[l] } else { 0.0 };
            for &u in dir {
                let z: f64 = rng.sample(StandardNormal);
                out.push((z + shift * u) as f32);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub peak_layer: usize,
    pub anomaly_windows: Vec<(u64, u64)>,
}

/// `n_per_class` normal then `n_per_class` anomalous probing samples.
pub fn generate_probe_dataset(
    profile: &LayerProfile,
    n_per_class: usize,
) -> Result<(ProbeSet, GroundTruth)> {
    profile.validate()?;
    if n_per_class < 2 {
        return Err(Error::Spec(format!(
            "n_per_class must be at least 2, got {n_per_class}"
        )));
    }
    let directions = profile.directions();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.noise_seed);
    rng.set_stream(PROBE_STREAM);
    let mut records = Vec::with_capacity(2 * n_per_class);
    for (offset, label) in [(0, Label::Normal), (n_per_class, Label::Anomalous)] {
        for i in 0..n_per_class {
            records.push(Record {
                label,
                video_id: (offset + i) as u64,
                frame_index: 0,
                vectors: profile.sample_vectors(&mut rng, &directions, label == Label::Anomalous),
            });
        }
    }
    let set = ProbeSet::new(HiddenStateDump::from_records(
        profile.num_layers,
        profile.hidden_dim,
        records,
    )?)?;
    Ok((
        set,
        GroundTruth {
            peak_layer: profile.peak_layer,
            anomaly_windows: Vec::new(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStream {
    pub video_id: u64,
    pub total_frames: u64,
    /// Inclusive keyframe ranges.
    pub anomaly_windows: Vec<(u64, u64)>,
    pub seed: u64,
}

impl PlantedStream {
    pub fn validate(&self) -> Result<()> {
        if self.total_frames == 0 {
            return Err(Error::Spec("stream needs at least one frame".into()));
        }
        let mut windows = self.anomaly_windows.clone();
        windows.sort_unstable();
        for &(s, e) in &windows {
            if s > e || e >= self.total_frames {
                return Err(Error::Spec(format!(
                    "window [{s}, {e}] invalid for {} frames",
                    self.total_frames
                )));
            }
        }
        if let Some(w) = windows.windows(2).find(|w| w[1].0 <= w[0].1) {
            return Err(Error::Spec(format!(
                "windows [{}, {}] and [{}, {}] overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        Ok(())
    }

    pub fn is_anomalous(&self, frame: u64) -> bool {
        self.anomaly_windows
            .iter()
            .any(|&(s, e)| (s..=e).contains(&frame))
    }
}

/// A generated stream: all layers, frame-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedVideo {
    pub dump: HiddenStateDump,
    pub truth: GroundTruth,
}

impl PlantedVideo {
    pub fn sequence(&self, layer: usize) -> Result<VideoSequence> {
        Ok(self.dump.sequences(layer)?.remove(0))
    }
}

/// Frames inside the planted windows come from the anomalous distribution,
/// all others from the normal one. Shift directions are shared with
/// [`generate_probe_dataset`] for the same profile.
pub fn generate_video_stream(
    stream: &PlantedStream,
    profile: &LayerProfile,
) -> Result<PlantedVideo> {
    profile.validate()?;
    stream.validate()?;
    let directions = profile.directions();
    let mut rng = ChaCha8Rng::seed_from_u64(stream.seed);
    rng.set_stream(VIDEO_STREAM);
    let mut dump = HiddenStateDump::new(profile.num_layers, profile.hidden_dim)?;
    for frame in 0..stream.total_frames {
        let anomalous = stream.is_anomalous(frame);
        dump.push(Record {
            label: if anomalous {
                Label::Anomalous
            } else {
                Label::Normal
            },
            video_id: stream.video_id,
            frame_index: frame,
            vectors: profile.sample_vectors(&mut rng, &directions, anomalous),
        })?;
    }
    let mut windows = stream.anomaly_windows.clone();
    windows.sort_unstable();
    Ok(PlantedVideo {
        dump,
        truth: GroundTruth {
            peak_layer: profile.peak_layer,
            anomaly_windows: windows,
        },
    })
}

/// Nearest-centroid comparator: `d_N / (d_N + d_A)` with Euclidean
/// distances to the class centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceScorer {
    pub normal_centroid: Vec<f64>,
    pub anomalous_centroid: Vec<f64>,
}

impl DistanceScorer {
    pub fn fit(features: ndarray::ArrayView2<'_, f64>, anomalous: &[bool]) -> Result<Self> {
        if anomalous.len() != features.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                anomalous.len(),
                features.nrows()
            )));
        }
        let centroid = |class: bool| -> Result<Vec<f64>> {
            let rows: Vec<_> = features
                .rows()
                .into_iter()
                .zip(anomalous)
                .filter(|(_, &a)| a == class)
                .map(|(r, _)| r)
                .collect();
            if rows.is_empty() {
                return Err(Error::SingleClass(if class {
                    "normal"
                } else {
                    "anomalous"
                }));
            }
            let mut c = vec![0.0; features.ncols()];
            for r in &rows {
                c.iter_mut().zip(r).for_each(|(c, x)| *c += x);
            }
            Ok(c.into_iter().map(|v| v / rows.len() as f64).collect())
        };
        Ok(Self {
            normal_centroid: centroid(false)?,
            anomalous_centroid: centroid(true)?,
        })
    }

    pub fn score(&self, vector: &[f64]) -> Result<f64> {
        if vector.len() != self.normal_centroid.len() {
            return Err(Error::Dimension(format!(
                "scorer expects {} features, got {}",
                self.normal_centroid.len(),
                vector.len()
            )));
        }
        let dist = |c: &[f64]| {
            c.iter()
                .zip(vector)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let d_normal = dist(&self.normal_centroid);
        let d_anomalous = dist(&self.anomalous_centroid);
        let total = d_normal + d_anomalous;
        Ok(if total > 0.0 { d_normal / total } else { 0.5 })
    }
}

/// Fits a [`DistanceScorer`] on `train` and scores `test`.
pub fn baseline_distance_scorer(
    train: ndarray::ArrayView2<'_, f64>,
    anomalous: &[bool],
    test: &[f64],
) -> Result<f64> {
    DistanceScorer::fit(train, anomalous)?.score(test)
}

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// sharing their average rank.
pub fn roc_auc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            anomalous.len()
        )));
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count();
    let n_neg = anomalous.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(if n_pos == 0 {
            "normal"
        } else {
            "anomalous"
        }));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| anomalous[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
