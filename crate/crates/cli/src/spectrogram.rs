use std::path::PathBuf;

use clap::Args;
use dncshap::attrib::render_heatmap;
use dncshap::audio::{logmel, MelConfig};
use dncshap::io::{decode_wav, matrix_to_csv};

use crate::error::CliError;
use crate::files;

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    #[arg(long)]
    wav: PathBuf,
    /// CSV matrix output, one row per mel band (row 0 = lowest).
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale rendering.
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    n_mels: usize,
    #[arg(long, default_value_t = 128)]
    n_frames: usize,
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
    /// Samples between frames (default: spread the frames over the clip).
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    fmin: f64,
    /// Upper band edge in Hz (default: Nyquist).
    #[arg(long)]
    fmax: Option<f64>,
}

pub fn run(args: SpectrogramArgs) -> Result<(), CliError> {
    let wave = decode_wav(&files::read(&args.wav)?).map_err(CliError::file(&args.wav))?;
    let config = MelConfig {
        n_mels: args.n_mels,
        n_frames: args.n_frames,
        fft_size: args.fft_size,
        hop: args.hop,
        fmin: args.fmin,
        fmax: args.fmax,
    };
    let spec = logmel(&wave, &config).map_err(CliError::file(&args.wav))?;
    let matrix = spec.reshape(&[args.n_mels, args.n_frames])?;
    files::write(&args.out, matrix_to_csv(&matrix)?)?;
    if let Some(pgm) = &args.pgm {
        files::write(pgm, render_heatmap(&matrix)?)?;
    }
    Ok(())
}
