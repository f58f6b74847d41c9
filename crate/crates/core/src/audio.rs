//! Waveform to log-mel spectrogram, plus post-processing of speech
//! attribution maps into time segments and highlighted words.
//!
//! Spectrogram rasters are `(mel bins, frames)` with row 0 the lowest band.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform", "no samples"));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid("waveform", format!("sample rate {sample_rate}")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: "waveform samples".into(),
            });
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub fft_size: usize,
    /// Frame step in samples; `None` spreads `n_frames` frames over the clip.
    pub hop: Option<usize>,
    pub fmin: f64,
    /// Upper band edge; `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 128,
            n_frames: 128,
            fft_size: 1024,
            hop: None,
            fmin: 0.0,
            fmax: None,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (fft_size/2 + 1)`.
pub fn mel_filterbank(config: &MelConfig, sample_rate: f64) -> Result<Vec<Vec<f64>>> {
    let fmax = config.fmax.unwrap_or(sample_rate / 2.0);
    if config.n_mels == 0 || config.fft_size < 2 {
        return Err(Error::invalid("mel config", "n_mels and fft_size must be positive"));
    }
    if !(0.0 <= config.fmin && config.fmin < fmax && fmax <= sample_rate / 2.0) {
        return Err(Error::invalid(
            "mel config",
            format!(
                "band [{}, {fmax}] does not fit below Nyquist {}",
                config.fmin,
                sample_rate / 2.0
            ),
        ));
    }
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bins = config.fft_size / 2 + 1;
    let bin_hz = sample_rate / config.fft_size as f64;
    Ok((0..config.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect())
}

fn frame_layout(len: usize, config: &MelConfig) -> (usize, usize) {
    let fft = config.fft_size;
    if len <= fft {
        return (1, 1);
    }
    let hop = config
        .hop
        .unwrap_or_else(|| ((len - fft) / config.n_frames.saturating_sub(1).max(1)).max(1))
        .max(1);
    (hop, 1 + (len - fft) / hop)
}

/// Where the columns of a [`logmel`] output sit in time: column `t` covers
/// `[offset + t * hop, offset + (t + 1) * hop)` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameTiming {
    pub hop_seconds: f64,
    pub offset_seconds: f64,
}

pub fn frame_timing(wave: &Waveform, config: &MelConfig) -> FrameTiming {
    let (hop, frames) = frame_layout(wave.samples().len(), config);
    let offset = (frames - frames.min(config.n_frames)) / 2;
    FrameTiming {
        hop_seconds: hop as f64 / wave.sample_rate(),
        offset_seconds: (offset * hop) as f64 / wave.sample_rate(),
    }
}

/// Mel band energies before compression, `(n_mels, frames)` with the
/// natural frame count of the clip (no cropping or padding).
pub fn mel_energies(wave: &Waveform, config: &MelConfig) -> Result<Tensor> {
    if config.n_frames == 0 {
        return Err(Error::invalid("mel config", "n_frames must be positive"));
    }
    let bank = mel_filterbank(config, wave.sample_rate())?;
    let fft_size = config.fft_size;
    let (hop, frames) = frame_layout(wave.samples().len(), config);
    let window: Vec<f64> = (0..fft_size)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / fft_size as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let bins = fft_size / 2 + 1;
    let mut out = Tensor::zeros(&[config.n_mels, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let samples = wave.samples();
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let s = samples.get(start + n).copied().unwrap_or(0.0);
            *slot = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        let magnitude: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
        let data = out.data_mut();
        for (m, filter) in bank.iter().enumerate() {
            data[m * frames + t] = filter.iter().zip(&magnitude).map(|(w, a)| w * a).sum();
        }
    }
    Ok(out)
}

/// Log-mel spectrogram `(n_mels, n_frames, 1)` scaled to [0, 1].
///
/// Energies are compressed with `ln(1 + x)`. A clip with more frames than
/// `n_frames` is center-cropped before scaling; a shorter one is padded with
/// zero columns after scaling. A constant spectrogram maps to all zeros.
pub fn logmel(wave: &Waveform, config: &MelConfig) -> Result<Tensor> {
    let energies = mel_energies(wave, config)?;
    let (mels, frames) = (config.n_mels, energies.shape()[1]);
    let keep = frames.min(config.n_frames);
    let offset = (frames - keep) / 2;
    let mut cropped = Vec::with_capacity(mels * keep);
    for m in 0..mels {
        let row = &energies.data()[m * frames..(m + 1) * frames];
        cropped.extend(row[offset..offset + keep].iter().map(|e| e.ln_1p()));
    }
    let (lo, hi) = cropped.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let mut out = Tensor::zeros(&[mels, config.n_frames, 1]);
    let data = out.data_mut();
    if span > 0.0 {
        for m in 0..mels {
            for t in 0..keep {
                data[m * config.n_frames + t] = (cropped[m * keep + t] - lo) / span;
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite {
            context: "log-mel spectrogram".into(),
        });
    }
    Ok(out)
}

/// Mean over the frequency axis: one value per time frame (column).
pub fn time_importance(shap_speech: &Tensor) -> Result<Vec<f64>> {
    if shap_speech.rank() != 2 {
        return Err(Error::shape("time_importance", "rank", 2, shap_speech.rank()));
    }
    let (rows, cols) = (shap_speech.shape()[0], shap_speech.shape()[1]);
    let mut sums = vec![0.0; cols];
    for row in shap_speech.data().chunks(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile input", "no values"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid("percentile", format!("{p} is outside [0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "percentile input".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Frames at or above the `p`-th percentile, as maximal `[start, end)` runs.
pub fn threshold_segments(importance: &[f64], p: f64) -> Result<Vec<(usize, usize)>> {
    let threshold = percentile(importance, p)?;
    let mut segments = Vec::new();
    let mut start = None;
    for (i, &v) in importance.iter().enumerate() {
        match (v >= threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                segments.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push((s, importance.len()));
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

/// Word timings in seconds, sorted and non-overlapping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordAlignment {
    pub words: Vec<AlignedWord>,
}

impl WordAlignment {
    pub fn from_json(text: &str) -> Result<Self> {
        let alignment: WordAlignment =
            serde_json::from_str(text).map_err(|e| Error::format("alignment json", e.to_string()))?;
        alignment.validate(None)?;
        Ok(alignment)
    }

    /// Checks ordering, overlap, and (when given) the clip duration.
    pub fn validate(&self, duration: Option<f64>) -> Result<()> {
        let mut previous_end = 0.0;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start.is_finite() && w.end.is_finite()) || w.start < 0.0 || w.end <= w.start {
                return Err(Error::invalid(
                    "alignment",
                    format!("word {i} '{}' has interval [{}, {})", w.word, w.start, w.end),
                ));
            }
            if w.start < previous_end {
                return Err(Error::invalid(
                    "alignment",
                    format!("word {i} '{}' starts before the previous word ends", w.word),
                ));
            }
            if let Some(d) = duration {
                if w.end > d + 1e-9 {
                    return Err(Error::invalid(
                        "alignment",
                        format!("word {i} '{}' ends at {} past the clip end {d}", w.word, w.end),
                    ));
                }
            }
            previous_end = w.end;
        }
        Ok(())
    }
}

/// Words whose time span lies at least half inside the retained frames.
pub fn highlight_words(
    intervals: &[(usize, usize)],
    alignment: &WordAlignment,
    frame_duration: f64,
) -> Result<Vec<String>> {
    if !(frame_duration.is_finite() && frame_duration > 0.0) {
        return Err(Error::invalid(
            "frame duration",
            format!("{frame_duration} is not positive"),
        ));
    }
    Ok(alignment
        .words
        .iter()
        .filter(|w| {
            let overlap: f64 = intervals
                .iter()
                .map(|&(s, e)| {
                    let (s, e) = (s as f64 * frame_duration, e as f64 * frame_duration);
                    (w.end.min(e) - w.start.max(s)).max(0.0)
                })
                .sum();
            overlap >= 0.5 * (w.end - w.start)
        })
        .map(|w| w.word.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, len: usize, amp: f64) -> Waveform {
        let s = (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / rate).sin())
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    #[test]
    fn silence_is_all_zero() {
        let spec = logmel(
            &Waveform::new(vec![0.0; 16000], 16000.0).unwrap(),
            &MelConfig::default(),
        )
        .unwrap();
        assert_eq!(spec.shape(), &[128, 128, 1]);
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_is_fixed_for_any_length() {
        for len in [1, 500, 1024, 1100, 16000, 40000] {
            let spec = logmel(&sine(440.0, 16000.0, len, 0.5), &MelConfig::default()).unwrap();
            assert_eq!(spec.shape(), &[128, 128, 1], "length {len}");
            assert!(spec.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(Waveform::new(vec![], 16000.0).is_err());
    }

    #[test]
    fn hop_rule_yields_at_least_the_frame_count() {
        let cfg = MelConfig::default();
        assert_eq!(frame_layout(16000, &cfg), (117, 129));
        assert_eq!(frame_layout(1024 + 127, &cfg), (1, 128));
        assert_eq!(frame_layout(1100, &cfg), (1, 77));
    }

    #[test]
    fn doubling_amplitude_never_lowers_energy() {
        let cfg = MelConfig::default();
        let quiet = mel_energies(&sine(700.0, 16000.0, 8000, 0.2), &cfg).unwrap();
        let loud = mel_energies(&sine(700.0, 16000.0, 8000, 0.4), &cfg).unwrap();
        assert!(quiet.data().iter().zip(loud.data()).all(|(q, l)| l >= q));
    }

    #[test]
    fn time_importance_means() {
        let c = Tensor::full(&[4, 3], 2.5);
        assert_eq!(time_importance(&c).unwrap(), vec![2.5; 3]);
        let mut one = Tensor::zeros(&[128, 128]);
        one.data_mut()[5 * 128 + 9] = 3.2;
        let v = time_importance(&one).unwrap();
        assert_eq!(v[9], 3.2 / 128.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn threshold_fixtures() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((percentile(&v, 30.0).unwrap() - 3.7).abs() < 1e-12);
        assert_eq!(threshold_segments(&v, 30.0).unwrap(), vec![(3, 10)]);
        assert_eq!(threshold_segments(&v, 0.0).unwrap(), vec![(0, 10)]);
        assert_eq!(threshold_segments(&v, 100.0).unwrap(), vec![(9, 10)]);
        assert_eq!(
            threshold_segments(&[1.0, 5.0, 1.0, 5.0, 5.0], 100.0).unwrap(),
            vec![(1, 2), (3, 5)]
        );
        assert!(threshold_segments(&v, 101.0).is_err());
    }

    #[test]
    fn word_overlap_rule() {
        let words = WordAlignment {
            words: vec![
                AlignedWord {
                    word: "forty".into(),
                    start: 0.0,
                    end: 1.0,
                },
                AlignedWord {
                    word: "sixty".into(),
                    start: 2.0,
                    end: 3.0,
                },
            ],
        };
        // Frames of 0.1 s: [6, 10) covers 40% of the first word, [20, 26) 60% of the second.
        let picked = highlight_words(&[(6, 10), (20, 26)], &words, 0.1).unwrap();
        assert_eq!(picked, vec!["sixty".to_string()]);
        assert_eq!(highlight_words(&[(0, 30)], &words, 0.1).unwrap().len(), 2);
        assert!(highlight_words(&[], &words, 0.1).unwrap().is_empty());
        assert!(highlight_words(&[(0, 30)], &WordAlignment::default(), 0.1)
            .unwrap()
            .is_empty());
        assert!(highlight_words(&[(0, 1)], &words, 0.0).is_err());
    }

    #[test]
    fn alignment_validation() {
        let ok = WordAlignment::from_json(r#"[{"word":"a","start":0.0,"end":0.5},{"word":"b","start":0.5,"end":0.9}]"#);
        assert_eq!(ok.unwrap().words.len(), 2);
        assert!(
            WordAlignment::from_json(r#"[{"word":"a","start":0.0,"end":0.5},{"word":"b","start":0.4,"end":0.9}]"#)
                .is_err()
        );
        let w = WordAlignment::from_json(r#"[{"word":"a","start":0.0,"end":2.0}]"#).unwrap();
        assert!(w.validate(Some(1.0)).is_err());
    }
}
