use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hiprobe_core::dataset::{self, LabelScheme, Manifest, ProbeSet};
use hiprobe_core::localizer::compute_threshold;
use hiprobe_core::pipeline::{self, CalibrationSet, ProbeOptions, VideoLocalization};
use hiprobe_core::saliency::{SaliencyConfig, SaliencyReport};
use hiprobe_core::scorer::{ScorerModel, TrainConfig};
use hiprobe_core::synthlab::{self, GroundTruth, LayerProfile, PlantedStream};
use hiprobe_core::{Error, Result, ThresholdConfig};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{
    LocalizeArgs, LocalizeFlags, ProbeArgs, ProfileArgs, ReportArgs, SubsetArgs, SynthProbeArgs,
    SynthStreamArgs, TrainArgs, TrainFlags,
};

/// Probe output: the saliency report plus the subset parameters, so that
/// `train` can rebuild the same probing subset.
#[derive(Debug, Serialize, Deserialize)]
struct ProbeOutput {
    fraction: f64,
    seed: u64,
    #[serde(flatten)]
    report: SaliencyReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn load_probe_set(path: &Path) -> Result<(Manifest, ProbeSet)> {
    let (manifest, dump) = dataset::read_dump(path)?;
    info!(
        "loaded {} records ({} layers x {}) from {}",
        dump.len(),
        dump.num_layers(),
        dump.hidden_dim(),
        path.display()
    );
    Ok((manifest, ProbeSet::new(dump)?))
}

fn probe_options(subset: &SubsetArgs, bins: usize, no_silhouette: bool) -> ProbeOptions {
    ProbeOptions {
        fraction: subset.fraction,
        seed: subset.seed,
        saliency: SaliencyConfig {
            bins,
            silhouette: !no_silhouette,
        },
    }
}

fn train_config(flags: &TrainFlags, seed: u64) -> TrainConfig {
    TrainConfig {
        max_iterations: flags.max_iterations,
        gradient_tolerance: flags.tolerance,
        l2_lambda: flags.l2,
        history_size: flags.history,
        seed,
    }
}

pub fn probe(args: ProbeArgs) -> Result<()> {
    let (_, set) = load_probe_set(&args.dump)?;
    let options = probe_options(&args.subset, args.bins, args.no_silhouette);
    let report = pipeline::probe(&set, &options)?;
    info!("selected layer {}", report.selected_layer);
    write_json(
        &args.out,
        &ProbeOutput {
            fraction: options.fraction,
            seed: options.seed,
            report,
        },
    )
}

pub fn train(args: TrainArgs) -> Result<()> {
    let probe: ProbeOutput = read_json(&args.report)?;
    let (_, set) = load_probe_set(&args.dump)?;
    let layer = probe.report.selected_layer;
    if layer >= set.num_layers() {
        return Err(Error::Dimension(format!(
            "selected layer {layer} outside dump with {} layers",
            set.num_layers()
        )));
    }
    let subset = dataset::stratified_subset(&set, probe.fraction, probe.seed)?;
    let config = train_config(&args.train, probe.seed);
    let (model, calibration) = pipeline::train_and_calibrate(&subset, layer, &config)?;
    info!(
        "trained on layer {layer}: loss {:.6}, {} iterations, converged {}",
        model.final_loss, model.iterations, model.converged
    );
    write_json(&args.out, &model)?;
    if let Some(path) = &args.calibration_out {
        write_json(path, &calibration)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LocalizeConfig {
    kappa: f64,
    sigma: f64,
    k: u32,
    model_layer: usize,
    calibration_mean: f64,
    calibration_std: f64,
}

#[derive(Debug, Serialize)]
struct LocalizedVideo {
    source: PathBuf,
    #[serde(flatten)]
    result: VideoLocalization,
}

#[derive(Debug, Serialize)]
struct LocalizeOutput {
    config: LocalizeConfig,
    threshold: f64,
    videos: Vec<LocalizedVideo>,
}

fn threshold_from(
    calibration: &CalibrationSet,
    model: &ScorerModel,
    flags: &LocalizeFlags,
) -> Result<ThresholdConfig> {
    if calibration.layer_index != model.layer_index {
        return Err(Error::Dimension(format!(
            "calibration is for layer {}, model for layer {}",
            calibration.layer_index, model.layer_index
        )));
    }
    if flags.k == 0 {
        return Err(Error::InvalidArgument("--k must be at least 1".into()));
    }
    compute_threshold(&calibration.scores, flags.kappa)?.with_sigma(flags.sigma)
}

fn localize_files(
    model: &ScorerModel,
    threshold: &ThresholdConfig,
    sequences: &[PathBuf],
    flags: &LocalizeFlags,
) -> Result<Vec<LocalizedVideo>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(flags.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_file: Vec<Vec<LocalizedVideo>> = pool.install(|| {
        sequences
            .par_iter()
            .map(|path| -> Result<Vec<LocalizedVideo>> {
                let (manifest, dump) = dataset::read_dump(path)?;
                if flags.k > manifest.segment_len {
                    return Err(Error::InvalidArgument(format!(
                        "--k {} exceeds segment length {} of {}",
                        flags.k,
                        manifest.segment_len,
                        path.display()
                    )));
                }
                let span = (manifest.segment_len / flags.k).max(1) as u64;
                let videos = pipeline::localize_dump(model, &dump, threshold, span)?;
                Ok(videos
                    .into_iter()
                    .map(|result| LocalizedVideo {
                        source: path.clone(),
                        result,
                    })
                    .collect())
            })
            .collect::<Result<_>>()
    })?;
    Ok(per_file.into_iter().flatten().collect())
}

fn curves_csv(videos: &[LocalizedVideo]) -> String {
    let mut out = String::from("source,video_id,frame_index,raw_score,smoothed_score,anomalous\n");
    for v in videos {
        let r = &v.result;
        for i in 0..r.frame_indices.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                v.source.display(),
                r.video_id,
                r.frame_indices[i],
                r.raw_scores[i],
                r.smoothed_scores[i],
                u8::from(r.smoothed_scores[i] > r.threshold)
            );
        }
    }
    out
}

pub fn localize(args: LocalizeArgs) -> Result<()> {
    let model: ScorerModel = read_json(&args.model)?;
    model.validate()?;
    let calibration: CalibrationSet = read_json(&args.calibration)?;
    let threshold = threshold_from(&calibration, &model, &args.flags)?;
    let videos = localize_files(&model, &threshold, &args.sequences, &args.flags)?;
    let output = LocalizeOutput {
        config: LocalizeConfig {
            kappa: args.flags.kappa,
            sigma: args.flags.sigma,
            k: args.flags.k,
            model_layer: model.layer_index,
            calibration_mean: threshold.calibration_mean,
            calibration_std: threshold.calibration_std,
        },
        threshold: threshold.threshold(),
        videos,
    };
    let csv = args.csv.as_ref().map(|_| curves_csv(&output.videos));
    write_json(&args.out, &output)?;
    if let (Some(path), Some(csv)) = (&args.csv, csv) {
        fs::write(path, csv)?;
    }
    Ok(())
}

fn profile_from(args: &ProfileArgs) -> Result<LayerProfile> {
    LayerProfile::peaked(
        args.layers,
        args.dim,
        args.peak,
        args.peak_sep,
        args.background,
        args.profile_seed,
    )
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn truth_path(dump: &Path) -> PathBuf {
    let mut name = dump.as_os_str().to_owned();
    name.push(".truth.json");
    PathBuf::from(name)
}

#[derive(Serialize)]
struct TruthFile<'a> {
    #[serde(flatten)]
    truth: &'a GroundTruth,
    separations: &'a [f64],
}

pub fn synth_probe(args: SynthProbeArgs) -> Result<()> {
    let profile = profile_from(&args.profile)?;
    let (set, truth) = synthlab::generate_probe_dataset(&profile, args.n_per_class)?;
    let manifest = Manifest::new(
        "synthlab",
        profile.num_layers,
        profile.hidden_dim,
        LabelScheme::VideoLevel,
        now_utc(),
    );
    dataset::write_dump(set.as_dump(), &manifest, &args.out)?;
    write_json(
        &truth_path(&args.out),
        &TruthFile {
            truth: &truth,
            separations: &profile.separations,
        },
    )
}

pub fn synth_stream(args: SynthStreamArgs) -> Result<()> {
    let profile = profile_from(&args.profile)?;
    let stream = PlantedStream {
        video_id: args.video_id,
        total_frames: args.frames,
        anomaly_windows: args.windows,
        seed: args.seed,
    };
    let video = synthlab::generate_video_stream(&stream, &profile)?;
    let mut manifest = Manifest::new(
        "synthlab",
        profile.num_layers,
        profile.hidden_dim,
        LabelScheme::FrameLevel,
        now_utc(),
    );
    manifest.sampling_k = args.k;
    dataset::write_dump(&video.dump, &manifest, &args.out)?;
    write_json(
        &truth_path(&args.out),
        &TruthFile {
            truth: &video.truth,
            separations: &profile.separations,
        },
    )
}

#[derive(Debug, Serialize)]
struct ScorerSummary {
    layer_index: usize,
    trained_on: usize,
    final_loss: f64,
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct VideoSummary {
    source: PathBuf,
    video_id: u64,
    threshold: f64,
    segments: Vec<hiprobe_core::AnomalySegment>,
    frame_segments: Vec<hiprobe_core::AnomalySegment>,
}

#[derive(Debug, Serialize)]
struct ReportConfig {
    fraction: f64,
    seed: u64,
    bins: usize,
    silhouette: bool,
    train: TrainConfig,
    kappa: f64,
    sigma: f64,
    k: u32,
}

#[derive(Debug, Serialize)]
struct StageTimings {
    probe_ms: f64,
    train_ms: f64,
    localize_ms: f64,
}

#[derive(Debug, Serialize)]
struct RunReport {
    config: ReportConfig,
    saliency: SaliencyReport,
    scorer: ScorerSummary,
    calibration_mean: f64,
    calibration_std: f64,
    threshold: f64,
    videos: Vec<VideoSummary>,
    timings: StageTimings,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn report(args: ReportArgs) -> Result<()> {
    let (_, set) = load_probe_set(&args.dump)?;
    let options = probe_options(&args.subset, args.bins, args.no_silhouette);
    let config = train_config(&args.train, args.subset.seed);

    let start = Instant::now();
    let subset = dataset::stratified_subset(&set, options.fraction, options.seed)?;
    let saliency = hiprobe_core::analyze_layers(&subset, &options.saliency)?;
    let probe_ms = elapsed_ms(start);

    let start = Instant::now();
    let (model, calibration) =
        pipeline::train_and_calibrate(&subset, saliency.selected_layer, &config)?;
    let train_ms = elapsed_ms(start);

    let start = Instant::now();
    let threshold = threshold_from(&calibration, &model, &args.localize)?;
    let videos = localize_files(&model, &threshold, &args.sequences, &args.localize)?;
    let localize_ms = elapsed_ms(start);

    let run = RunReport {
        config: ReportConfig {
            fraction: options.fraction,
            seed: options.seed,
            bins: options.saliency.bins,
            silhouette: options.saliency.silhouette,
            train: config,
            kappa: args.localize.kappa,
            sigma: args.localize.sigma,
            k: args.localize.k,
        },
        saliency,
        scorer: ScorerSummary {
            layer_index: model.layer_index,
            trained_on: model.trained_on,
            final_loss: model.final_loss,
            iterations: model.iterations,
            gradient_norm: model.gradient_norm,
            converged: model.converged,
        },
        calibration_mean: threshold.calibration_mean,
        calibration_std: threshold.calibration_std,
        threshold: threshold.threshold(),
        videos: videos
            .into_iter()
            .map(|v| VideoSummary {
                source: v.source,
                video_id: v.result.video_id,
                threshold: v.result.threshold,
                segments: v.result.segments,
                frame_segments: v.result.frame_segments,
            })
            .collect(),
        timings: StageTimings {
            probe_ms,
            train_ms,
            localize_ms,
        },
    };
    write_json(&args.out, &run)
}
