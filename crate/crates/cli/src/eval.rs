use std::path::{Path, PathBuf};

use clap::Args;
use dncshap::labels::EmotionClass;
use dncshap::metrics::{report, ConfusionMatrix};

use crate::error::CliError;
use crate::files;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with a `label` column (or a single column) of predicted classes.
    #[arg(long)]
    predictions: PathBuf,
    /// CSV of ground-truth classes in the same row order.
    #[arg(long)]
    labels: PathBuf,
    /// Number of classes when labels are given as indices.
    #[arg(long)]
    classes: Option<usize>,
    /// Metrics JSON output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Column {
    ids: Option<Vec<String>>,
    labels: Vec<String>,
}

fn read_column(path: &Path) -> Result<Column, CliError> {
    let mut reader = files::csv_reader(path)?;
    let headers = reader.headers().map_err(|e| files::csv_error(path, e))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .or((headers.len() == 1).then_some(0))
        .ok_or_else(|| CliError::Input {
            path: path.to_path_buf(),
            reason: "no 'label' column".into(),
        })?;
    let id_col = headers.iter().position(|h| h == "sample_id");
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| files::csv_error(path, e))?;
        if let Some(c) = id_col {
            ids.push(record[c].to_string());
        }
        labels.push(record[label_col].to_string());
    }
    Ok(Column {
        ids: id_col.map(|_| ids),
        labels,
    })
}

/// Class count: four when any label is a name, otherwise `--classes` or
/// one more than the largest index.
fn class_count(all: &[&String], explicit: Option<usize>) -> usize {
    if all.iter().any(|l| l.parse::<usize>().is_err()) {
        return EmotionClass::ALL.len();
    }
    explicit.unwrap_or_else(|| {
        all.iter()
            .filter_map(|l| l.parse::<usize>().ok())
            .max()
            .map_or(1, |m| m + 1)
    })
}

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    let predicted = read_column(&args.predictions)?;
    let truth = read_column(&args.labels)?;
    if predicted.labels.len() != truth.labels.len() {
        return Err(CliError::Usage(format!(
            "{} has {} rows but {} has {}",
            args.predictions.display(),
            predicted.labels.len(),
            args.labels.display(),
            truth.labels.len()
        )));
    }
    if let (Some(a), Some(b)) = (&predicted.ids, &truth.ids) {
        if let Some(i) = (0..a.len()).find(|&i| a[i] != b[i]) {
            return Err(CliError::Usage(format!(
                "row {}: sample ids differ ({} vs {})",
                i + 1,
                a[i],
                b[i]
            )));
        }
    }
    let all: Vec<&String> = predicted.labels.iter().chain(&truth.labels).collect();
    let classes = class_count(&all, args.classes);
    let parse = |path: &Path, labels: &[String]| -> Result<Vec<usize>, CliError> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                files::parse_class(l, classes).map_err(|reason| CliError::Input {
                    path: path.to_path_buf(),
                    reason: format!("row {}: {reason}", i + 1),
                })
            })
            .collect()
    };
    let p = parse(&args.predictions, &predicted.labels)?;
    let t = parse(&args.labels, &truth.labels)?;
    let cm = ConfusionMatrix::from_labels(&t, &p, classes)?;
    let json = files::json(&report(&cm)?)?;
    match &args.out {
        Some(path) => files::write(path, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
