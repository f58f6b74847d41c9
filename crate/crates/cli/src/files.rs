use std::fs;
use std::path::{Path, PathBuf};

use dncshap::labels::EmotionClass;

use crate::error::CliError;

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn json(value: &impl serde::Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Internal(format!("json encoding: {e}")))
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

pub fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Resolves `entry` against the directory holding `base`.
pub fn relative_to(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Display name of a class index: emotion names for four-class models,
/// the index otherwise.
pub fn class_name(index: usize, classes: usize) -> String {
    match EmotionClass::from_index(index) {
        Some(c) if classes == EmotionClass::ALL.len() => c.name().to_string(),
        _ => index.to_string(),
    }
}

/// Parses a class given by index or by (source) emotion name.
pub fn parse_class(text: &str, classes: usize) -> Result<usize, String> {
    if let Ok(i) = text.parse::<usize>() {
        return if i < classes {
            Ok(i)
        } else {
            Err(format!("class {i} is out of range for {classes} classes"))
        };
    }
    if classes != EmotionClass::ALL.len() {
        return Err(format!("class names need a four-class model, found {text:?}"));
    }
    text.parse::<EmotionClass>()
        .map(|c| c.index())
        .map_err(|e| e.to_string())
}
