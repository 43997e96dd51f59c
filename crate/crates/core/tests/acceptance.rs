//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hiprobe_core::dataset::{HiddenStateDump, Label, Manifest, ProbeSet, Record, HEADER_LEN};
use hiprobe_core::localizer::{
    compute_threshold, segment_curve, smooth_curve, temporal_iou, AnomalyCurve, SegmentKind,
    DEFAULT_KAPPA, DEFAULT_SIGMA,
};
use hiprobe_core::pipeline::{self, ProbeOptions};
use hiprobe_core::saliency::{
    entropy_layer, kl_divergence_layer, ldr_layer, LayerStats, SaliencyConfig,
};
use hiprobe_core::scorer::{bce_gradient, bce_loss, ScorerModel, TrainConfig};
use hiprobe_core::synthlab::{
    generate_probe_dataset, generate_video_stream, roc_auc, DistanceScorer, LayerProfile,
    PlantedStream,
};
use hiprobe_core::{read_dump, write_dump, Error, LabelScheme};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, elapsed: Duration, mut o: Outcome) -> Outcome {
    if elapsed > limit {
        o.pass = false;
        o.detail += &format!("; runtime {elapsed:.1?} exceeds {limit:?}");
    }
    o
}

// ---------------------------------------------------------------------------
// Oracles

/// KL(P || Q) of two 1-D Gaussians by composite Simpson quadrature over
/// +-12 standard deviations of P.
fn quadrature_kl(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let sp = vp.sqrt();
    let (a, b) = (mp - 12.0 * sp, mp + 12.0 * sp);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let log_pdf = |x: f64, m: f64, v: f64| {
        -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
    };
    let f = |x: f64| {
        let lp = log_pdf(x, mp, vp);
        lp.exp() * (lp - log_pdf(x, mq, vq))
    };
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Histogram entropy by explicit bin edges: bin k holds values in
/// `[edge_k, edge_{k+1})`, the last bin also holds the maximum.
fn histogram_entropy_oracle(column: &[f64], bins: usize) -> f64 {
    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut entropy = 0.0;
    for k in 0..bins {
        let left = lo + k as f64 * width;
        let right = lo + (k + 1) as f64 * width;
        let count = column
            .iter()
            .filter(|&&x| (x >= left || k == 0) && (x < right || k == bins - 1))
            .count();
        if count > 0 {
            let p = count as f64 / column.len() as f64;
            entropy -= p * p.log2();
        }
    }
    entropy
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Frame-by-frame grouping: a new segment starts wherever the above/below
/// state changes.
fn per_frame_segments(scores: &[f64], t: f64) -> Vec<(u64, u64, bool)> {
    let mut out: Vec<(u64, u64, bool)> = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        let above = s > t;
        match out.last_mut() {
            Some(last) if last.2 == above => last.1 = i as u64,
            _ => out.push((i as u64, i as u64, above)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shared synthetic setups

fn peak_profile(seed: u64) -> LayerProfile {
    LayerProfile::peaked(32, 64, 20, 4.0, 1.0, seed).expect("valid profile")
}

fn no_silhouette() -> ProbeOptions {
    ProbeOptions {
        saliency: SaliencyConfig {
            silhouette: false,
            ..SaliencyConfig::default()
        },
        ..ProbeOptions::default()
    }
}

/// Held-out draw from the same profile: `n` normal frames followed by `n`
/// anomalous ones.
fn held_out(profile: &LayerProfile, n: u64, seed: u64, layer: usize) -> (Array2<f64>, Vec<bool>) {
    let stream = PlantedStream {
        video_id: 0,
        total_frames: 2 * n,
        anomaly_windows: vec![(n, 2 * n - 1)],
        seed,
    };
    let video = generate_video_stream(&stream, profile).expect("stream");
    let set = ProbeSet::new(video.dump).expect("labeled stream");
    let rows = set.layer_rows(layer).expect("layer");
    let labels = set.targets().iter().map(|&y| y == 1.0).collect();
    (rows, labels)
}

fn model_scores(model: &ScorerModel, rows: &Array2<f64>) -> Vec<f64> {
    rows.rows()
        .into_iter()
        .map(|r| model.predict_proba_f64(r.as_slice().unwrap()).unwrap())
        .collect()
}

/// Keyframe-level IoU of the planted window after running the full
/// localization pipeline with a scorer trained on `layer`.
fn planted_window_iou(
    set: &ProbeSet,
    profile: &LayerProfile,
    layer: usize,
    stream_seed: u64,
    window: (u64, u64),
) -> f64 {
    let (model, calibration) =
        pipeline::train_and_calibrate(set, layer, &TrainConfig::default()).expect("train");
    let threshold = compute_threshold(&calibration.scores, DEFAULT_KAPPA).expect("threshold");
    let stream = PlantedStream {
        video_id: 1,
        total_frames: 1000,
        anomaly_windows: vec![window],
        seed: stream_seed,
    };
    let video = generate_video_stream(&stream, profile).expect("stream");
    let out = pipeline::localize_dump(&model, &video.dump, &threshold, 3).expect("localize");
    temporal_iou(&out[0].segments, &[window])
}

// ---------------------------------------------------------------------------
// Criteria

fn closed_form_metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 8;

    let mut worst_kl = 0.0f64;
    for _ in 0..100 {
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (mn, vn, ma, va) = (
            draw(-3.0, 3.0),
            draw(0.05, 4.0),
            draw(-3.0, 3.0),
            draw(0.05, 4.0),
        );
        let stats =
            LayerStats::from_moments(1, d, mn.clone(), vn.clone(), ma.clone(), va.clone(), 10, 10)
                .unwrap();
        let got = kl_divergence_layer(&stats, 0).unwrap();
        let oracle = (0..d)
            .map(|i| quadrature_kl(mn[i], vn[i], ma[i], va[i]))
            .sum::<f64>()
            / d as f64;
        worst_kl = worst_kl.max((got - oracle).abs());
    }

    let mut worst_ldr = 0.0f64;
    for _ in 0..100 {
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (mn, vn, ma, va) = (
            draw(-3.0, 3.0),
            draw(0.05, 4.0),
            draw(-3.0, 3.0),
            draw(0.05, 4.0),
        );
        let stats =
            LayerStats::from_moments(1, d, mn.clone(), vn.clone(), ma.clone(), va.clone(), 10, 10)
                .unwrap();
        let got = ldr_layer(&stats, 0).unwrap();
        let mut oracle = 0.0;
        for i in 0..d {
            oracle += (mn[i] - ma[i]).powi(2) / (vn[i] + va[i] + 1e-8);
        }
        oracle /= d as f64;
        worst_ldr = worst_ldr.max((got - oracle).abs());
    }

    let mut worst_entropy = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(1..200);
        let bins = [2, 8, 64][trial % 3];
        let rows = Array2::from_shape_fn((n, d), |(_, j)| {
            if j == 0 {
                1.5
            } else {
                rng.sample::<f64, _>(StandardNormal) * j as f64
            }
        });
        let got = entropy_layer(rows.view(), bins).unwrap();
        let oracle = rows
            .columns()
            .into_iter()
            .map(|c| histogram_entropy_oracle(&c.to_vec(), bins))
            .sum::<f64>()
            / d as f64;
        worst_entropy = worst_entropy.max((got - oracle).abs());
    }

    let pass = worst_kl < 1e-6 && worst_ldr < 1e-12 && worst_entropy < 1e-12;
    within(
        Duration::from_secs(10),
        start.elapsed(),
        outcome(
            pass,
            format!("max |KL err| {worst_kl:.2e}, |LDR err| {worst_ldr:.2e}, |entropy err| {worst_entropy:.2e}"),
        ),
    )
}

fn layer_selection() -> Outcome {
    let start = Instant::now();
    let hits = (0..100u64)
        .filter(|&seed| {
            let (set, truth) = generate_probe_dataset(&peak_profile(seed), 500).unwrap();
            pipeline::probe(&set, &no_silhouette())
                .unwrap()
                .selected_layer
                == truth.peak_layer
        })
        .count();
    within(
        Duration::from_secs(120),
        start.elapsed(),
        outcome(
            hits >= 95,
            format!("layer 20 selected in {hits}/100 seeds (need >= 95)"),
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..60);
        let d = rng.random_range(1..16);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_bool(0.5) as u8))
            .collect();
        let w: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: f64 = rng.sample(StandardNormal);
        let lambda = [0.0, 1e-4, 0.1][rng.random_range(0..3)];

        let (gw, gb) = bce_gradient(&w, b, x.view(), &y, lambda).unwrap();
        let mut analytic = gw;
        analytic.push(gb);

        let h = 1e-5;
        let loss_at = |w: &[f64], b: f64| bce_loss(w, b, x.view(), &y, lambda).unwrap();
        let mut numeric = Vec::with_capacity(d + 1);
        for k in 0..d {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[k] += h;
            minus[k] -= h;
            numeric.push((loss_at(&plus, b) - loss_at(&minus, b)) / (2.0 * h));
        }
        numeric.push((loss_at(&w, b + h) - loss_at(&w, b - h)) / (2.0 * h));

        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    outcome(
        worst < 1e-5,
        format!("max relative error {worst:.2e} over 100 instances (need < 1e-5)"),
    )
}

fn scorer_quality() -> Outcome {
    let mut worst_acc = 1.0f64;
    let mut worst_auc = 1.0f64;
    for seed in 0..20u64 {
        let profile = LayerProfile::peaked(2, 64, 1, 6.0, 0.0, seed).unwrap();
        let (set, _) = generate_probe_dataset(&profile, 200).unwrap();
        let (model, _) = pipeline::train_and_calibrate(&set, 1, &TrainConfig::default()).unwrap();
        let (rows, labels) = held_out(&profile, 1000, 1000 + seed, 1);
        let scores = model_scores(&model, &rows);
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(s, &a)| (**s > 0.5) == a)
            .count();
        worst_acc = worst_acc.min(correct as f64 / labels.len() as f64);
        worst_auc = worst_auc.min(roc_auc(&scores, &labels).unwrap());
    }
    outcome(
        worst_acc >= 0.99 && worst_auc >= 0.999,
        format!(
            "worst held-out accuracy {:.4}, worst ROC-AUC {worst_auc:.5} over 20 seeds",
            worst_acc
        ),
    )
}

fn logistic_vs_distance() -> Outcome {
    let mut wins = 0;
    for seed in 0..20u64 {
        let profile = LayerProfile::peaked(2, 64, 1, 2.0, 0.0, seed).unwrap();
        let (set, _) = generate_probe_dataset(&profile, 500).unwrap();
        let (model, _) = pipeline::train_and_calibrate(&set, 1, &TrainConfig::default()).unwrap();
        let train_rows = set.layer_rows(1).unwrap();
        let train_labels: Vec<bool> = set.targets().iter().map(|&y| y == 1.0).collect();
        let baseline = DistanceScorer::fit(train_rows.view(), &train_labels).unwrap();

        let (rows, labels) = held_out(&profile, 1000, 2000 + seed, 1);
        let logistic = roc_auc(&model_scores(&model, &rows), &labels).unwrap();
        let distance_scores: Vec<f64> = rows
            .rows()
            .into_iter()
            .map(|r| baseline.score(r.as_slice().unwrap()).unwrap())
            .collect();
        let distance = roc_auc(&distance_scores, &labels).unwrap();
        if logistic >= distance {
            wins += 1;
        }
    }
    outcome(
        wins >= 16,
        format!("logistic AUC >= distance AUC in {wins}/20 seeds (need >= 16)"),
    )
}

fn selected_vs_fixed_layer() -> Outcome {
    let mut wins = 0;
    let fixed = 16;
    for seed in 0..20u64 {
        let profile = peak_profile(seed);
        let (set, _) = generate_probe_dataset(&profile, 500).unwrap();
        let selected = pipeline::probe(&set, &no_silhouette())
            .unwrap()
            .selected_layer;
        let stream_seed = 3000 + seed;
        let iou_selected = planted_window_iou(&set, &profile, selected, stream_seed, (450, 549));
        let iou_fixed = planted_window_iou(&set, &profile, fixed, stream_seed, (450, 549));
        if iou_selected >= iou_fixed {
            wins += 1;
        }
    }
    outcome(
        wins >= 16,
        format!("selected-layer IoU >= layer-{fixed} IoU in {wins}/20 seeds (need >= 16)"),
    )
}

fn end_to_end_localization() -> Outcome {
    let start = Instant::now();
    let mut ious = Vec::new();
    for seed in 0..20u64 {
        let profile = peak_profile(seed);
        let (set, _) = generate_probe_dataset(&profile, 500).unwrap();
        let selected = pipeline::probe(&set, &no_silhouette())
            .unwrap()
            .selected_layer;
        ious.push(planted_window_iou(
            &set,
            &profile,
            selected,
            4000 + seed,
            (450, 549),
        ));
    }
    let hits = ious.iter().filter(|&&v| v >= 0.8).count();
    let min = ious.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    within(
        Duration::from_secs(60),
        start.elapsed(),
        outcome(
            hits >= 18,
            format!("IoU >= 0.8 in {hits}/20 seeds (need >= 18); mean {mean:.3}, min {min:.3}"),
        ),
    )
}

fn smoothing_threshold_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut failures = Vec::new();

    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let c: f64 = rng.random();
        let sigma = rng.random_range(0.05..5.0);
        if smooth_curve(&vec![c; n], sigma)
            .unwrap()
            .iter()
            .any(|&v| v != c)
        {
            failures.push(format!("constant {c} not preserved (n={n}, sigma={sigma})"));
            break;
        }
    }

    let mut worst_t = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..300);
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let kappa = rng.random_range(0.0..2.0);
        let cfg = compute_threshold(&scores, kappa).unwrap();
        let (mean, std) = mean_std(&scores);
        worst_t = worst_t.max((cfg.threshold() - (mean + kappa * std)).abs());
    }
    if worst_t > 1e-12 {
        failures.push(format!("threshold error {worst_t:.2e}"));
    }

    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..120);
        let raw: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let curve = AnomalyCurve::from_raw(0, (0..n as u64).collect(), raw, DEFAULT_SIGMA).unwrap();
        let t = rng.random();
        let got: Vec<(u64, u64, bool)> = segment_curve(&curve, t)
            .iter()
            .map(|s| (s.start_frame, s.end_frame, s.kind == SegmentKind::Anomalous))
            .collect();
        if got != per_frame_segments(&curve.smoothed_scores, t) {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        failures.push(format!(
            "{mismatches}/1000 curves differ from per-frame oracle"
        ));
    }

    if failures.is_empty() {
        outcome(
            true,
            format!("constants exact, threshold err {worst_t:.1e}, 1000/1000 curves match oracle"),
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

fn random_dump(rng: &mut ChaCha8Rng) -> HiddenStateDump {
    let layers = rng.random_range(1..5);
    let dim = rng.random_range(1..9);
    let n = rng.random_range(0..20);
    let records = (0..n)
        .map(|_| Record {
            label: [Label::Normal, Label::Anomalous, Label::Unlabeled][rng.random_range(0..3)],
            video_id: rng.random(),
            frame_index: rng.random(),
            vectors: (0..layers * dim)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect(),
        })
        .collect();
    HiddenStateDump::from_records(layers, dim, records).unwrap()
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let dump = random_dump(&mut rng);
        let manifest = Manifest::new(
            "roundtrip",
            dump.num_layers(),
            dump.hidden_dim(),
            LabelScheme::Unlabeled,
            "2026-01-01T00:00:00Z",
        );
        let path = dir.path().join(format!("dump{i}.hsd"));
        let written = write_dump(&dump, &manifest, &path).unwrap();
        let (m, back) = read_dump(&path).unwrap();
        let bits = |d: &HiddenStateDump| -> Vec<(u8, u64, u64, Vec<u32>)> {
            d.records()
                .iter()
                .map(|r| {
                    (
                        r.label.to_byte(),
                        r.video_id,
                        r.frame_index,
                        r.vectors.iter().map(|v| v.to_bits()).collect(),
                    )
                })
                .collect()
        };
        if m != manifest
            || bits(&back) != bits(&dump)
            || written != std::fs::metadata(&path).unwrap().len()
        {
            failures.push(format!("dump {i} did not round-trip"));
            break;
        }
    }

    let mut dump = HiddenStateDump::new(2, 3).unwrap();
    for k in 0..3 {
        dump.push(Record {
            label: Label::Normal,
            video_id: 0,
            frame_index: k,
            vectors: vec![1.0; 6],
        })
        .unwrap();
    }
    let good = dump.encode().unwrap();
    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = good.clone();
        f(&mut b);
        HiddenStateDump::decode(&b)
    };
    type Case = (
        &'static str,
        hiprobe_core::Result<HiddenStateDump>,
        fn(&Error) -> bool,
    );
    let cases: Vec<Case> = vec![
        ("bad magic", corrupt(&|b| b[0] = b'X'), |e| {
            matches!(e, Error::Format(_))
        }),
        ("bad version", corrupt(&|b| b[4] = 9), |e| {
            matches!(e, Error::Format(_))
        }),
        ("bad dtype", corrupt(&|b| b[24] = 2), |e| {
            matches!(e, Error::Format(_))
        }),
        ("short header", corrupt(&|b| b.truncate(10)), |e| {
            matches!(e, Error::Truncated { record: None })
        }),
        (
            "mid-record truncation",
            corrupt(&|b| b.truncate(HEADER_LEN + 41 + 7)),
            |e| matches!(e, Error::Truncated { record: Some(1) }),
        ),
        (
            "non-finite value",
            corrupt(&|b| {
                b[HEADER_LEN + 41 + 17..HEADER_LEN + 41 + 21]
                    .copy_from_slice(&f32::NAN.to_le_bytes())
            }),
            |e| matches!(e, Error::Data { record: 1, .. }),
        ),
    ];
    for (name, result, expected) in cases {
        match result {
            Err(e) if expected(&e) => {}
            other => failures.push(format!("{name}: got {other:?}")),
        }
    }

    if failures.is_empty() {
        outcome(
            true,
            "1000/1000 dumps bit-exact; 6/6 corruptions rejected with the expected error",
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("closed-form metric suite", closed_form_metrics),
        ("layer-selection identifiability", layer_selection),
        ("gradient correctness", gradient_check),
        ("scorer quality", scorer_quality),
        (
            "ablation: logistic vs distance scoring",
            logistic_vs_distance,
        ),
        (
            "ablation: selected vs fixed mid layer",
            selected_vs_fixed_layer,
        ),
        ("end-to-end localization", end_to_end_localization),
        ("smoothing/threshold suite", smoothing_threshold_suite),
        ("format round-trip", format_round_trip),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
