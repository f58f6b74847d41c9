//! Dependency-free readers and writers: RIFF/WAVE PCM16, binary PPM/PGM,
//! and numeric CSV matrices.

use std::fmt::Write as _;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// WAV

fn wav_err(reason: impl Into<String>) -> Error {
    Error::format("wav", reason)
}

/// Decodes 16-bit PCM WAV. Multi-channel audio is averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| wav_err(format!("chunk '{}' runs past end of file", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(wav_err("fmt chunk too short"));
                }
                let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                format = Some((u16_at(0), u16_at(2), rate, u16_at(14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let (tag, channels, sample_rate, bits) = format.ok_or_else(|| wav_err("no fmt chunk"))?;
    // 0xFFFE is WAVE_FORMAT_EXTENSIBLE; accepted when the sample layout is PCM16.
    if (tag != 1 && tag != 0xFFFE) || bits != 16 {
        return Err(wav_err(format!(
            "only 16-bit PCM is supported (format {tag}, {bits} bits)"
        )));
    }
    if channels == 0 || sample_rate == 0 {
        return Err(wav_err("zero channels or sample rate"));
    }
    let data = data.ok_or_else(|| wav_err("no data chunk"))?;
    let frame = 2 * channels as usize;
    let samples = data
        .chunks_exact(frame)
        .map(|f| {
            let sum: f64 = f
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                .sum();
            sum / channels as f64
        })
        .collect();
    Waveform::new(samples, sample_rate as f64)
}

/// Encodes mono 16-bit PCM. Samples are clamped to [-1, 1].
pub fn encode_wav(wave: &Waveform) -> Vec<u8> {
    let n = wave.samples().len();
    let rate = wave.sample_rate().round() as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + 2 * n) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&((2 * n) as u32).to_le_bytes());
    for &s in wave.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// PPM / PGM

struct Header<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    pixels: &'a [u8],
}

fn parse_netpbm(bytes: &[u8]) -> Result<Header<'_>> {
    let err = |r: &str| Error::format("netpbm", r.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err("missing P5/P6 magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with whitespace"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "netpbm",
            format!("maxval {maxval} unsupported (8-bit only)"),
        ));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        pixels: &bytes[pos + 1..],
    })
}

/// Reads a binary PPM (P6) or PGM (P5) as `(rows, cols, 3)` scaled to
/// [0, 1]. Grayscale is replicated across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_netpbm(bytes)?;
    let channels = match &h.magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::format(
                "netpbm",
                format!("unsupported magic {}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let need = h.width * h.height * channels;
    if h.pixels.len() < need {
        return Err(Error::format(
            "netpbm",
            format!("expected {need} pixel bytes, found {}", h.pixels.len()),
        ));
    }
    let scale = h.maxval as f64;
    let data = h.pixels[..need]
        .chunks_exact(channels)
        .flat_map(|px| {
            let v = |c: usize| px[c.min(channels - 1)] as f64 / scale;
            [v(0), v(1), v(2)]
        })
        .collect();
    Tensor::new(vec![h.height, h.width, 3], data)
}

/// Binary PGM bytes for `width x height` 8-bit pixels.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("encode_pgm", "pixel count", width * height, pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Binary PPM bytes for an image `(rows, cols, 3)` with values in [0, 1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(
            "encode_ppm",
            "image shape",
            "(rows, cols, 3)",
            format!("{s:?}"),
        ));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV matrices

/// Comma-separated rows using the shortest representation that parses back
/// to the same `f64`.
pub fn matrix_to_csv(matrix: &Tensor) -> Result<String> {
    if matrix.rank() != 2 {
        return Err(Error::shape("matrix_to_csv", "rank", 2, matrix.rank()));
    }
    let cols = matrix.shape()[1];
    let mut out = String::with_capacity(matrix.len() * 12);
    for row in matrix.data().chunks(cols) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format("csv", format!("line {}: '{}' is not a number", lineno + 1, f.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    "csv",
                    format!("line {}: {} fields, expected {}", lineno + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format("csv", "no rows"));
    }
    Tensor::from_rows(&rows)
}
