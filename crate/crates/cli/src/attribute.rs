use std::path::{Path, PathBuf};

use clap::Args;
use dncshap::attrib::{render_heatmap, AttributionSummary};
use dncshap::audio::{
    frame_timing, highlight_words, logmel, threshold_segments, time_importance, AlignedWord, MelConfig, WordAlignment,
};
use dncshap::io::{decode_image, decode_wav, matrix_to_csv};
use dncshap::{dnc_shap, AttributionConfig, ParallelNetMini, Predictor};
use serde::Serialize;

use crate::error::CliError;
use crate::files;
use crate::train::load_speech;

#[derive(Debug, Args)]
pub struct AttributeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM (P6) or PGM (P5) image.
    #[arg(long)]
    image: PathBuf,
    /// 16-bit PCM WAV; converted to a log-mel spectrogram.
    #[arg(long, conflicts_with = "spectrogram", required_unless_present = "spectrogram")]
    wav: Option<PathBuf>,
    /// Precomputed spectrogram as a CSV matrix (row 0 = lowest band).
    #[arg(long)]
    spectrogram: Option<PathBuf>,
    /// JSON list of {word, start, end} in seconds.
    #[arg(long)]
    alignment: Option<PathBuf>,
    /// Seconds per spectrogram column, needed with --alignment and --spectrogram.
    #[arg(long)]
    frame_seconds: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Output file stem (default: the image file stem).
    #[arg(long)]
    stem: Option<String>,
    /// Depth of the region tree.
    #[arg(long, default_value_t = 6)]
    times: usize,
    /// Value standing in for an absent pixel.
    #[arg(long, default_value_t = 0.0)]
    baseline: f64,
    /// Frames below this percentile of time importance are dropped.
    #[arg(long, default_value_t = 30.0)]
    percentile: f64,
    /// Ground-truth class, by index or name.
    #[arg(long)]
    ground_truth: Option<String>,
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    #[serde(flatten)]
    summary: AttributionSummary,
    #[serde(rename = "P")]
    predicted: String,
    #[serde(rename = "GT", skip_serializing_if = "Option::is_none")]
    ground_truth: Option<String>,
    score: f64,
    probabilities: Vec<f64>,
    times: usize,
    percentile: f64,
    time_importance: Vec<f64>,
    segments: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    words: Option<Vec<String>>,
}

struct Speech {
    tensor: dncshap::Tensor,
    /// Seconds per column and start offset of column 0, when known.
    timing: Option<(f64, f64)>,
    duration: Option<f64>,
}

fn load_speech_input(args: &AttributeArgs, rows: usize, cols: usize) -> Result<Speech, CliError> {
    if let Some(path) = &args.wav {
        let wave = decode_wav(&files::read(path)?).map_err(CliError::file(path))?;
        let config = MelConfig {
            n_mels: rows,
            n_frames: cols,
            fft_size: args.fft_size,
            ..MelConfig::default()
        };
        let matrix = logmel(&wave, &config).map_err(CliError::file(path))?;
        let timing = frame_timing(&wave, &config);
        return Ok(Speech {
            tensor: matrix,
            timing: Some((timing.hop_seconds, timing.offset_seconds)),
            duration: Some(wave.duration()),
        });
    }
    let path = args.spectrogram.as_ref().expect("clap requires --wav or --spectrogram");
    Ok(Speech {
        tensor: load_speech(path, rows, cols, args.fft_size)?,
        timing: args.frame_seconds.map(|s| (s, 0.0)),
        duration: None,
    })
}

fn highlighted(
    args: &AttributeArgs,
    speech: &Speech,
    segments: &[(usize, usize)],
) -> Result<Option<Vec<String>>, CliError> {
    let Some(path) = &args.alignment else {
        return Ok(None);
    };
    let (hop, offset) = speech
        .timing
        .ok_or_else(|| CliError::Usage("--alignment with --spectrogram needs --frame-seconds".into()))?;
    let alignment = WordAlignment::from_json(&files::read_text(path)?).map_err(CliError::file(path))?;
    alignment.validate(speech.duration).map_err(CliError::file(path))?;
    // Word times relative to the first retained column.
    let shifted = WordAlignment {
        words: alignment
            .words
            .into_iter()
            .map(|w| AlignedWord {
                start: w.start - offset,
                end: w.end - offset,
                word: w.word,
            })
            .collect(),
    };
    Ok(Some(highlight_words(segments, &shifted, hop)?))
}

fn stem(args: &AttributeArgs) -> Result<String, CliError> {
    match &args.stem {
        Some(s) => Ok(s.clone()),
        None => args
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage("cannot derive an output stem; pass --stem".into())),
    }
}

fn write_map(out: &Path, name: String, map: &dncshap::Tensor) -> Result<(), CliError> {
    files::write(&out.join(format!("{name}.csv")), matrix_to_csv(map)?)?;
    files::write(&out.join(format!("{name}.pgm")), render_heatmap(map)?)
}

pub fn run(args: AttributeArgs) -> Result<(), CliError> {
    if !(0.0..=100.0).contains(&args.percentile) {
        return Err(CliError::Usage(format!(
            "--percentile {} is outside [0, 100]",
            args.percentile
        )));
    }
    let model = ParallelNetMini::load_from_path(&args.model).map_err(CliError::file(&args.model))?;
    let (rows, cols, classes) = (model.config().rows, model.config().cols, model.config().classes);
    let ground_truth = args
        .ground_truth
        .as_deref()
        .map(|g| files::parse_class(g, classes).map_err(CliError::Usage))
        .transpose()?;

    let image = decode_image(&files::read(&args.image)?).map_err(CliError::file(&args.image))?;
    if image.shape() != [rows, cols, 3] {
        return Err(CliError::Input {
            path: args.image.clone(),
            reason: format!(
                "image is {}x{}, model expects {rows}x{cols}",
                image.shape()[0],
                image.shape()[1]
            ),
        });
    }
    let speech = load_speech_input(&args, rows, cols)?;
    let speech_tensor = speech.tensor.clone().reshape(&[rows, cols, 1])?;

    let config = AttributionConfig {
        times: args.times,
        baseline: args.baseline,
    };
    let attribution = dnc_shap(&model, &image, &speech_tensor, &config)?;
    let probabilities = model.predict(&image, &speech_tensor)?;

    let importance = time_importance(&attribution.shap_speech)?;
    let segments = threshold_segments(&importance, args.percentile)?;
    let words = highlighted(&args, &speech, &segments)?;

    let summary = attribution.summary();
    let report = Report {
        predicted: files::class_name(summary.arg_max, classes),
        ground_truth: ground_truth.map(|g| files::class_name(g, classes)),
        score: summary.pred_f,
        summary,
        probabilities,
        times: args.times,
        percentile: args.percentile,
        time_importance: importance,
        segments: segments.iter().map(|&(s, e)| [s, e]).collect(),
        words,
    };

    let stem = stem(&args)?;
    files::create_dir(&args.out)?;
    write_map(&args.out, format!("{stem}.img"), &attribution.shap_image)?;
    write_map(&args.out, format!("{stem}.spc"), &attribution.shap_speech)?;
    files::write(&args.out.join(format!("{stem}.json")), files::json(&report)?)?;
    println!(
        "P={} score={:.4} score_1={:.6} score_2={:.6} evaluations={}",
        report.predicted, report.score, report.summary.score_1, report.summary.score_2, report.summary.eval_count
    );
    Ok(())
}
