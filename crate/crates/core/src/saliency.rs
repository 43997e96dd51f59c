//! Layer saliency probing.
//!
//! Every layer is scored by three class-discrimination statistics computed
//! from the probing set: the mean per-dimension Gaussian KL divergence
//! between the normal and anomalous fits, the mean local discriminant ratio,
//! and the mean binned feature entropy. Each statistic is z-scored across
//! layers and the three z-scores are summed into a saliency score; the layer
//! with the highest saliency is selected. The silhouette coefficient is
//! reported alongside for validation but does not enter the fused score.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, ProbeSet};
use crate::error::{Error, Result};

/// Lower bound applied to every fitted class variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Stabilizer added to the LDR denominator.
pub const LDR_EPSILON: f64 = 1e-8;
pub const DEFAULT_BINS: usize = 64;
/// Cross-layer spreads below this are treated as zero by the z-scoring.
pub const ZSCORE_STD_FLOOR: f64 = 1e-12;

/// Class-conditional per-dimension means and (population, floored)
/// variances for every layer, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    num_layers: usize,
    hidden_dim: usize,
    pub mean_normal: Vec<f64>,
    pub var_normal: Vec<f64>,
    pub mean_anomalous: Vec<f64>,
    pub var_anomalous: Vec<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

/// One layer's slice of [`LayerStats`].
#[derive(Debug, Clone, Copy)]
pub struct LayerMoments<'a> {
    pub mean_normal: &'a [f64],
    pub var_normal: &'a [f64],
    pub mean_anomalous: &'a [f64],
    pub var_anomalous: &'a [f64],
}

impl LayerStats {
    /// Builds stats from raw per-class moments, flooring the variances.
    #[allow(clippy::too_many_arguments)]
    pub fn from_moments(
        num_layers: usize,
        hidden_dim: usize,
        mean_normal: Vec<f64>,
        var_normal: Vec<f64>,
        mean_anomalous: Vec<f64>,
        var_anomalous: Vec<f64>,
        n_normal: usize,
        n_anomalous: usize,
    ) -> Result<Self> {
        let len = num_layers * hidden_dim;
        for (name, v) in [
            ("mean_normal", &mean_normal),
            ("var_normal", &var_normal),
            ("mean_anomalous", &mean_anomalous),
            ("var_anomalous", &var_anomalous),
        ] {
            if v.len() != len {
                return Err(Error::Dimension(format!(
                    "{name} has {} entries, expected {len}",
                    v.len()
                )));
            }
        }
        let floor = |v: Vec<f64>| v.into_iter().map(|x| x.max(VAR_FLOOR)).collect();
        Ok(Self {
            num_layers,
            hidden_dim,
            mean_normal,
            var_normal: floor(var_normal),
            mean_anomalous,
            var_anomalous: floor(var_anomalous),
            n_normal,
            n_anomalous,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn layer(&self, layer: usize) -> Result<LayerMoments<'_>> {
        if layer >= self.num_layers {
            return Err(Error::Dimension(format!(
                "layer {layer} out of range for {} layers",
                self.num_layers
            )));
        }
        let r = layer * self.hidden_dim..(layer + 1) * self.hidden_dim;
        Ok(LayerMoments {
            mean_normal: &self.mean_normal[r.clone()],
            var_normal: &self.var_normal[r.clone()],
            mean_anomalous: &self.mean_anomalous[r.clone()],
            var_anomalous: &self.var_anomalous[r],
        })
    }
}

#[derive(Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn population_variance(&self) -> f64 {
        (self.m2 / self.n as f64).max(0.0)
    }
}

/// Fits per-class Gaussians to every (layer, dimension).
pub fn compute_class_stats(set: &ProbeSet) -> Result<LayerStats> {
    let (n_normal, n_anomalous) = set.class_counts();
    for (class, count) in [("normal", n_normal), ("anomalous", n_anomalous)] {
        if count < 2 {
            return Err(Error::InsufficientClassData {
                class,
                count,
                required: 2,
            });
        }
    }
    let len = set.num_layers() * set.hidden_dim();
    let mut normal = vec![Welford::default(); len];
    let mut anomalous = vec![Welford::default(); len];
    for record in set.records() {
        let acc = match record.label {
            Label::Anomalous => &mut anomalous,
            _ => &mut normal,
        };
        for (w, &x) in acc.iter_mut().zip(&record.vectors) {
            w.push(x as f64);
        }
    }
    let means = |acc: &[Welford]| acc.iter().map(|w| w.mean).collect::<Vec<_>>();
    let vars = |acc: &[Welford]| {
        acc.iter()
            .map(Welford::population_variance)
            .collect::<Vec<_>>()
    };
    LayerStats::from_moments(
        set.num_layers(),
        set.hidden_dim(),
        means(&normal),
        vars(&normal),
        means(&anomalous),
        vars(&anomalous),
        n_normal,
        n_anomalous,
    )
}

/// KL(N(mean_p, var_p) || N(mean_q, var_q)).
pub fn gaussian_kl(mean_p: f64, var_p: f64, mean_q: f64, var_q: f64) -> f64 {
    let diff = mean_p - mean_q;
    0.5 * ((var_q / var_p).ln() + (var_p + diff * diff) / var_q - 1.0)
}

/// Mean over dimensions of KL(normal fit || anomalous fit).
pub fn kl_divergence_layer(stats: &LayerStats, layer: usize) -> Result<f64> {
    let m = stats.layer(layer)?;
    let total: f64 = (0..stats.hidden_dim)
        .map(|d| {
            gaussian_kl(
                m.mean_normal[d],
                m.var_normal[d],
                m.mean_anomalous[d],
                m.var_anomalous[d],
            )
        })
        .sum();
    Ok(total / stats.hidden_dim as f64)
}

/// Mean over dimensions of the squared class-mean gap over the summed
/// class variances.
pub fn ldr_layer(stats: &LayerStats, layer: usize) -> Result<f64> {
    let m = stats.layer(layer)?;
    let total: f64 = (0..stats.hidden_dim)
        .map(|d| {
            let gap = m.mean_normal[d] - m.mean_anomalous[d];
            gap * gap / (m.var_normal[d] + m.var_anomalous[d] + LDR_EPSILON)
        })
        .sum();
    Ok(total / stats.hidden_dim as f64)
}

fn column_entropy(column: ArrayView1<'_, f64>, counts: &mut [usize]) -> f64 {
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let width = hi - lo;
    if width.is_nan() || width <= 0.0 {
        return 0.0;
    }
    let bins = counts.len();
    counts.iter_mut().for_each(|c| *c = 0);
    for &x in column {
        let idx = (((x - lo) / width) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let n = column.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean per-dimension Shannon entropy (bits) of `bins` equal-width bins
/// spanning each dimension's pooled range.
pub fn entropy_layer(rows: ArrayView2<'_, f64>, bins: usize) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs at least 2 bins, got {bins}"
        )));
    }
    let mut counts = vec![0usize; bins];
    let total: f64 = rows
        .axis_iter(Axis(1))
        .map(|col| column_entropy(col, &mut counts))
        .sum();
    Ok(total / rows.ncols() as f64)
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient of the two-class partition under Euclidean
/// distance. A sample alone in its class contributes 0.
pub fn silhouette_layer(rows: ArrayView2<'_, f64>, anomalous: &[bool]) -> Result<f64> {
    let n = rows.nrows();
    if anomalous.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} samples",
            anomalous.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "silhouette needs at least 3 samples, got {n}"
        )));
    }
    let n_anomalous = anomalous.iter().filter(|&&a| a).count();
    if n_anomalous == 0 {
        return Err(Error::SingleClass("normal"));
    }
    if n_anomalous == n {
        return Err(Error::SingleClass("anomalous"));
    }
    let class_size = |a: bool| if a { n_anomalous } else { n - n_anomalous };

    let coefficients: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = anomalous[i];
            let (mut same, mut other) = (0.0, 0.0);
            for (j, &label) in anomalous.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = euclidean(rows.row(i), rows.row(j));
                if label == own {
                    same += d;
                } else {
                    other += d;
                }
            }
            let own_size = class_size(own);
            if own_size < 2 {
                return 0.0;
            }
            let a = same / (own_size - 1) as f64;
            let b = other / class_size(!own) as f64;
            let scale = a.max(b);
            if scale > 0.0 {
                (b - a) / scale
            } else {
                0.0
            }
        })
        .collect();
    Ok(coefficients.iter().sum::<f64>() / n as f64)
}

/// Z-scores a per-layer metric with the population standard deviation
/// across layers. A flat metric maps to all zeros.
pub fn normalize_metrics(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InsufficientLayers(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < ZSCORE_STD_FLOOR {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// Index of the largest saliency; ties go to the lowest layer and NaN
/// entries are never selected unless every entry is NaN.
pub fn select_optimal_layer(saliency: &[f64]) -> Result<usize> {
    if saliency.is_empty() {
        return Err(Error::InsufficientLayers(0));
    }
    let mut best = 0;
    for (l, &s) in saliency.iter().enumerate().skip(1) {
        if s > saliency[best] || (saliency[best].is_nan() && !s.is_nan()) {
            best = l;
        }
    }
    Ok(best)
}

/// Sums three z-scored metric vectors into per-layer saliency.
pub fn fuse_saliency(norm_kl: &[f64], norm_ldr: &[f64], norm_entropy: &[f64]) -> Result<Vec<f64>> {
    if norm_kl.len() != norm_ldr.len() || norm_kl.len() != norm_entropy.len() {
        return Err(Error::Dimension(format!(
            "metric vectors have lengths {}, {}, {}",
            norm_kl.len(),
            norm_ldr.len(),
            norm_entropy.len()
        )));
    }
    Ok(norm_kl
        .iter()
        .zip(norm_ldr)
        .zip(norm_entropy)
        .map(|((k, l), h)| k + l + h)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub bins: usize,
    pub silhouette: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            silhouette: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub num_samples: usize,
    pub num_normal: usize,
    pub num_anomalous: usize,
    pub bins: usize,
    pub kl: Vec<f64>,
    pub ldr: Vec<f64>,
    pub entropy: Vec<f64>,
    pub silhouette: Option<Vec<f64>>,
    pub norm_kl: Vec<f64>,
    pub norm_ldr: Vec<f64>,
    pub norm_entropy: Vec<f64>,
    pub saliency: Vec<f64>,
    pub selected_layer: usize,
}

impl SaliencyReport {
    /// Fuses raw per-layer metrics and picks the optimal layer.
    pub fn from_metrics(
        kl: Vec<f64>,
        ldr: Vec<f64>,
        entropy: Vec<f64>,
        silhouette: Option<Vec<f64>>,
    ) -> Result<Self> {
        let norm_kl = normalize_metrics(&kl)?;
        let norm_ldr = normalize_metrics(&ldr)?;
        let norm_entropy = normalize_metrics(&entropy)?;
        let saliency = fuse_saliency(&norm_kl, &norm_ldr, &norm_entropy)?;
        let selected_layer = select_optimal_layer(&saliency)?;
        Ok(Self {
            num_samples: 0,
            num_normal: 0,
            num_anomalous: 0,
            bins: DEFAULT_BINS,
            kl,
            ldr,
            entropy,
            silhouette,
            norm_kl,
            norm_ldr,
            norm_entropy,
            saliency,
            selected_layer,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.saliency.len()
    }
}

/// Scores every layer of a probing set and selects the most salient one.
pub fn analyze_layers(set: &ProbeSet, config: &SaliencyConfig) -> Result<SaliencyReport> {
    if set.num_layers() < 2 {
        return Err(Error::InsufficientLayers(set.num_layers()));
    }
    let stats = compute_class_stats(set)?;
    let labels: Vec<bool> = set
        .records()
        .iter()
        .map(|r| r.label == Label::Anomalous)
        .collect();

    let per_layer: Vec<(f64, f64, f64, Option<f64>)> = (0..set.num_layers())
        .into_par_iter()
        .map(|l| -> Result<_> {
            let rows: Array2<f64> = set.layer_rows(l)?;
            let silhouette = if config.silhouette {
                Some(silhouette_layer(rows.view(), &labels)?)
            } else {
                None
            };
            Ok((
                kl_divergence_layer(&stats, l)?,
                ldr_layer(&stats, l)?,
                entropy_layer(rows.view(), config.bins)?,
                silhouette,
            ))
        })
        .collect::<Result<_>>()?;

    let kl = per_layer.iter().map(|m| m.0).collect();
    let ldr = per_layer.iter().map(|m| m.1).collect();
    let entropy = per_layer.iter().map(|m| m.2).collect();
    let silhouette = config
        .silhouette
        .then(|| per_layer.iter().filter_map(|m| m.3).collect());

    let mut report = SaliencyReport::from_metrics(kl, ldr, entropy, silhouette)?;
    report.num_samples = set.len();
    report.num_normal = stats.n_normal;
    report.num_anomalous = stats.n_anomalous;
    report.bins = config.bins;
    Ok(report)
}
