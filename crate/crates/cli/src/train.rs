use std::path::{Path, PathBuf};

use clap::Args;
use dncshap::audio::{logmel, MelConfig};
use dncshap::fusion::{FusionConfig, InputMode, ParallelNetMini, Topology};
use dncshap::io::{decode_image, decode_wav, matrix_from_csv};
use dncshap::synth::{multimodal_dataset, split, Sample};
use dncshap::train::{evaluate, predict_labels, train_toy, TrainConfig};
use serde::Serialize;

use crate::error::CliError;
use crate::files;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for model.ckpt, history.csv and the held-out split.
    #[arg(long)]
    out: PathBuf,
    /// Seeds data generation, initialization and batch order.
    #[arg(long)]
    seed: u64,
    /// `key = value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV manifest with columns image,speech,label. Synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    topology: Option<Topology>,
    #[arg(long)]
    input_mode: Option<InputMode>,
    /// Input height and width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Number of synthetic samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
struct Settings {
    model: FusionConfig,
    train: TrainConfig,
    samples: usize,
    train_fraction: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: FusionConfig::mini(16, 16),
            train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            samples: 400,
            train_fraction: 0.7,
        }
    }
}

impl Settings {
    /// Training keys are handled here, everything else goes to the model
    /// configuration.
    fn apply_kv(mut self, text: &str, path: &Path) -> Result<Self, CliError> {
        let bad = |line: usize, reason: String| CliError::Input {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut model_lines = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let Some((key, value)) = line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) else {
                model_lines.push_str(raw);
                model_lines.push('\n');
                continue;
            };
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| bad(i + 1, format!("'{value}' is not an integer")))
            };
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|_| bad(i + 1, format!("'{value}' is not a number")))
            };
            match key {
                "epochs" => self.train.epochs = int()?,
                "batch_size" => self.train.batch_size = int()?,
                "learning_rate" => self.train.learning_rate = real()?,
                "early_stopping_patience" => self.train.early_stopping_patience = int()?,
                "lr_patience" => self.train.lr_patience = int()?,
                "lr_factor" => self.train.lr_factor = real()?,
                "ce_weight" => self.train.loss.ce_weight = real()?,
                "focal_weight" => self.train.loss.focal_weight = real()?,
                "gamma" => self.train.loss.gamma = real()?,
                "samples" => self.samples = int()?,
                "train_fraction" => self.train_fraction = real()?,
                _ => {
                    model_lines.push_str(raw);
                    model_lines.push('\n');
                    continue;
                }
            }
            // Keep line numbers aligned for the model parser.
            model_lines.push('\n');
        }
        self.model = self.model.apply_kv(&model_lines).map_err(CliError::file(path))?;
        Ok(self)
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    topology: String,
    input_mode: String,
    parameters: usize,
    train_samples: usize,
    test_samples: usize,
    epochs_run: usize,
    stopped_early: bool,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
}

fn load_manifest(path: &Path, config: &FusionConfig) -> Result<Vec<Sample>, CliError> {
    let (rows, cols) = (config.rows, config.cols);
    let mut reader = files::csv_reader(path)?;
    let headers = reader.headers().map_err(|e| files::csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::Input {
            path: path.to_path_buf(),
            reason: format!("missing column '{name}'"),
        })
    };
    let (image_col, speech_col, label_col) = (column("image")?, column("speech")?, column("label")?);
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| files::csv_error(path, e))?;
        let image_path = files::relative_to(path, &record[image_col]);
        let image = decode_image(&files::read(&image_path)?).map_err(CliError::file(&image_path))?;
        if image.shape() != [rows, cols, 3] {
            return Err(CliError::Input {
                path: image_path,
                reason: format!("image is {:?}, model expects {rows}x{cols}", &image.shape()[..2]),
            });
        }
        let speech_path = files::relative_to(path, &record[speech_col]);
        let speech = load_speech(&speech_path, rows, cols, 1024)?;
        let label = files::parse_class(&record[label_col], config.classes).map_err(|reason| CliError::Input {
            path: path.to_path_buf(),
            reason,
        })?;
        samples.push(Sample { image, speech, label });
    }
    Ok(samples)
}

/// Spectrogram `(rows, cols, 1)` from a WAV file or a CSV matrix.
pub fn load_speech(path: &Path, rows: usize, cols: usize, fft_size: usize) -> Result<dncshap::Tensor, CliError> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let matrix = if is_wav {
        let wave = decode_wav(&files::read(path)?).map_err(CliError::file(path))?;
        let config = MelConfig {
            n_mels: rows,
            n_frames: cols,
            fft_size,
            ..MelConfig::default()
        };
        logmel(&wave, &config).map_err(CliError::file(path))?
    } else {
        matrix_from_csv(&files::read_text(path)?).map_err(CliError::file(path))?
    };
    if matrix.shape()[..2] != [rows, cols] {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            reason: format!("spectrogram is {:?}, model expects {rows}x{cols}", &matrix.shape()[..2]),
        });
    }
    matrix.reshape(&[rows, cols, 1]).map_err(CliError::file(path))
}

fn labels_csv(samples: &[Sample], labels: impl Fn(usize) -> usize, classes: usize) -> String {
    let mut out = String::from("sample_id,label\n");
    for i in 0..samples.len() {
        out.push_str(&format!("{i},{}\n", files::class_name(labels(i), classes)));
    }
    out
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let mut settings = Settings::default();
    if let Some(path) = &args.config {
        settings = settings.apply_kv(&files::read_text(path)?, path)?;
    }
    if let Some(t) = args.topology {
        settings.model = settings.model.with_topology(t);
    }
    if let Some(m) = args.input_mode {
        settings.model.input_mode = m;
    }
    if let Some(s) = args.size {
        settings.model.rows = s;
        settings.model.cols = s;
    }
    if let Some(v) = args.epochs {
        settings.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        settings.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        settings.train.learning_rate = v;
    }
    if let Some(v) = args.samples {
        settings.samples = v;
    }
    if let Some(v) = args.train_fraction {
        settings.train_fraction = v;
    }
    if !(0.0 < settings.train_fraction && settings.train_fraction <= 1.0) {
        return Err(CliError::Usage(format!(
            "train fraction {} is outside (0, 1]",
            settings.train_fraction
        )));
    }
    // Distinct streams for data, initialization and batch order.
    settings.model.seed = args.seed.wrapping_add(1);
    settings.train.seed = args.seed.wrapping_add(2);
    settings.model.validate()?;

    let config = &settings.model;
    let samples = match &args.data {
        Some(path) => load_manifest(path, config)?,
        None => {
            if config.classes != 4 {
                return Err(CliError::Usage("synthetic data has 4 classes; set classes = 4".into()));
            }
            multimodal_dataset(settings.samples, config.rows, config.cols, args.seed)
        }
    };
    let (train, test) = split(samples, settings.train_fraction);
    if train.is_empty() {
        return Err(CliError::Usage("no training samples".into()));
    }

    let mut model = ParallelNetMini::new(config.clone())?;
    let history = train_toy(&mut model, &train, &test, &settings.train)?;

    files::create_dir(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    model.save_to_path(&ckpt).map_err(CliError::file(&ckpt))?;
    files::write(&args.out.join("history.csv"), history.to_csv())?;

    let (_, train_accuracy) = evaluate(&model, &train, &settings.train.loss)?;
    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &test, &settings.train.loss)?.1)
    };
    let predicted = predict_labels(&model, &test)?;
    files::write(
        &args.out.join("test_labels.csv"),
        labels_csv(&test, |i| test[i].label, config.classes),
    )?;
    files::write(
        &args.out.join("test_predictions.csv"),
        labels_csv(&test, |i| predicted[i], config.classes),
    )?;

    let summary = Summary {
        topology: config.topology.to_string(),
        input_mode: config.input_mode.to_string(),
        parameters: model.parameter_count(),
        train_samples: train.len(),
        test_samples: test.len(),
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
        train_accuracy,
        test_accuracy,
    };
    files::write(&args.out.join("summary.json"), files::json(&summary)?)?;
    print!(
        "{}: {} epochs, train accuracy {train_accuracy:.4}",
        config.topology,
        history.epochs.len()
    );
    match test_accuracy {
        Some(a) => println!(", test accuracy {a:.4}"),
        None => println!(),
    }
    Ok(())
}
