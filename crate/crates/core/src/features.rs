//! Log-mel feature extraction for 1-second audio clips.
//!
//! A 40 ms periodic Hamming window with a 20 ms hop over a center-padded
//! (reflection) signal gives 51 frames for one second of audio; squared
//! magnitudes pass through a 40-band Slaney-normalized triangular mel
//! filterbank (fmin 0, fmax sample_rate/2) and a natural log with a 1e-10
//! floor. The result is the fixed 40x51 network input.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
pub const WINDOW_MS: u32 = 40;
pub const HOP_MS: u32 = 20;
pub const MEL_BANDS: usize = 40;
/// Floor applied to mel energies before the log.
pub const LOG_FLOOR: f32 = 1e-10;

pub const LMEL_MAGIC: &[u8; 4] = b"LMEL";
pub const LMEL_VERSION: u8 = 1;

/// Mono audio clip with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Magnitude spectrogram: `bins x frames`, row-major by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f32>,
    pub sample_rate: u32,
    pub fft_size: usize,
}

/// Log-mel feature matrix: `bands x frames`, row-major by band.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeature {
    pub bands: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl LogMelFeature {
    /// Network input layout `[bands, frames, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.bands, self.frames, 1], self.values.clone())
            .expect("bands * frames elements by construction")
    }
}

fn hamming_periodic(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

/// Reflection without edge duplication, valid for any pad size.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Magnitude STFT with a periodic Hamming window, center reflection
/// padding and an FFT sized to the next power of two above the window
/// (window zero-padded). Frame count is `1 + floor(len / hop)`.
pub fn stft_magnitude(clip: &AudioClip, window_ms: u32, hop_ms: u32) -> Result<Spectrogram> {
    if clip.samples.is_empty() {
        return Err(Error::Audio("empty clip".into()));
    }
    let win = (clip.sample_rate as u64 * window_ms as u64 / 1000) as usize;
    let hop = (clip.sample_rate as u64 * hop_ms as u64 / 1000) as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Audio(format!(
            "window {window_ms} ms / hop {hop_ms} ms too short at {} Hz",
            clip.sample_rate
        )));
    }
    if clip.samples.len() < win {
        return Err(Error::Audio(format!(
            "clip of {} samples shorter than one {win}-sample window",
            clip.samples.len()
        )));
    }
    let fft_size = win.next_power_of_two();
    let bins = fft_size / 2 + 1;
    let window = hamming_periodic(win);
    let len = clip.samples.len();
    let pad_left = win / 2;
    let frames = 1 + len / hop;

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut values = vec![0.0f32; bins * frames];
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); fft_size];
    for frame in 0..frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let start = frame as isize * hop as isize - pad_left as isize;
        for (n, w) in window.iter().enumerate() {
            let src = reflect_index(start + n as isize, len);
            buf[n] = Complex::new(clip.samples[src] * w, 0.0);
        }
        fft.process(&mut buf);
        for (bin, v) in buf.iter().take(bins).enumerate() {
            values[bin * frames + frame] = v.norm();
        }
    }
    Ok(Spectrogram {
        bins,
        frames,
        values,
        sample_rate: clip.sample_rate,
        fft_size,
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Triangular mel filterbank, Slaney scale and Slaney (area) normalization,
/// `n_mels x bins` row-major.
pub fn mel_filterbank(n_mels: usize, sample_rate: u32, fft_size: usize) -> Vec<f32> {
    let bins = fft_size / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(fmax);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0f32; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for k in 0..bins {
            let freq = k as f64 * sample_rate as f64 / fft_size as f64;
            let up = (freq - lo) / (center - lo);
            let down = (hi - freq) / (hi - center);
            let w = up.min(down).max(0.0);
            weights[m * bins + k] = (w * enorm) as f32;
        }
    }
    weights
}

/// Applies the mel filterbank to squared magnitudes and takes the natural
/// log with the 1e-10 floor.
pub fn logmel(spectrogram: &Spectrogram, n_mels: usize) -> LogMelFeature {
    let fb = mel_filterbank(n_mels, spectrogram.sample_rate, spectrogram.fft_size);
    let bins = spectrogram.bins;
    let frames = spectrogram.frames;
    let mut values = vec![0.0f32; n_mels * frames];
    for m in 0..n_mels {
        let fb_row = &fb[m * bins..(m + 1) * bins];
        for t in 0..frames {
            let mut acc = 0.0f64;
            for (k, w) in fb_row.iter().enumerate() {
                if *w != 0.0 {
                    let mag = spectrogram.values[k * frames + t] as f64;
                    acc += *w as f64 * mag * mag;
                }
            }
            values[m * frames + t] = (acc.max(LOG_FLOOR as f64)).ln() as f32;
        }
    }
    LogMelFeature {
        bands: n_mels,
        frames,
        values,
    }
}

/// Full pipeline for a 1-second clip at the default settings; the clip
/// length must equal the sample rate.
pub fn extract_logmel(clip: &AudioClip) -> Result<LogMelFeature> {
    if clip.samples.len() != clip.sample_rate as usize {
        return Err(Error::Audio(format!(
            "expected a 1-second clip ({} samples at {} Hz), got {} samples",
            clip.sample_rate,
            clip.sample_rate,
            clip.samples.len()
        )));
    }
    let spec = stft_magnitude(clip, WINDOW_MS, HOP_MS)?;
    Ok(logmel(&spec, MEL_BANDS))
}

// ------------------------------------------------------------------- WAV

fn chunk_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn chunk_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Reads a 16-bit PCM mono WAV at 44.1 kHz, scaling samples to [-1, 1] by
/// 1/32768. Anything else is rejected outright; there is no resampling.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let bytes = fs::read(path.as_ref())?;
    let name = path.as_ref().display().to_string();
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Audio(format!("{name}: not a RIFF/WAVE file")));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = chunk_u32(&bytes, at + 4) as usize;
        let body_end = (at + 8 + size).min(bytes.len());
        let body = &bytes[at + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Audio(format!("{name}: fmt chunk too short")));
                }
                fmt = Some((
                    chunk_u16(body, 0),  // format code
                    chunk_u16(body, 2),  // channels
                    chunk_u32(body, 4),  // sample rate
                    chunk_u16(body, 14), // bits per sample
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        at = at + 8 + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) = fmt
        .ok_or_else(|| Error::Audio(format!("{name}: missing fmt chunk")))?;
    if format != 1 {
        return Err(Error::Audio(format!(
            "{name}: format code {format}, only PCM (1) supported"
        )));
    }
    if channels != 1 {
        return Err(Error::Audio(format!(
            "{name}: {channels} channels, expected mono"
        )));
    }
    if bits != 16 {
        return Err(Error::Audio(format!(
            "{name}: {bits} bits per sample, expected 16"
        )));
    }
    if rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{name}: sample rate {rate} Hz, expected {DEFAULT_SAMPLE_RATE} Hz (no resampling)"
        )));
    }
    let data = data.ok_or_else(|| Error::Audio(format!("{name}: missing data chunk")))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: rate,
    })
}

// ------------------------------------------------------------- lmel cache

/// Writes a feature to the `.lmel` cache format: magic, version byte, u16
/// rows, u16 cols, then little-endian f32 values row-major. Atomic.
pub fn save_lmel(path: impl AsRef<Path>, feature: &LogMelFeature) -> Result<()> {
    if feature.bands > u16::MAX as usize || feature.frames > u16::MAX as usize {
        return Err(Error::Audio(format!(
            "feature {}x{} too large for the cache format",
            feature.bands, feature.frames
        )));
    }
    let mut out = Vec::with_capacity(9 + 4 * feature.values.len());
    out.extend_from_slice(LMEL_MAGIC);
    out.push(LMEL_VERSION);
    out.extend_from_slice(&(feature.bands as u16).to_le_bytes());
    out.extend_from_slice(&(feature.frames as u16).to_le_bytes());
    for v in &feature.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let path = path.as_ref();
    let tmp = path.with_extension("lmel.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&out)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_lmel(path: impl AsRef<Path>) -> Result<LogMelFeature> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 9 || &bytes[0..4] != LMEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not an LMEL feature file".into(),
        });
    }
    if bytes[4] != LMEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported LMEL version {}", bytes[4]),
        });
    }
    let bands = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let frames = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let expected = 9 + 4 * bands * frames;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            reason: format!(
                "LMEL payload length {} does not match {bands}x{frames} header",
                bytes.len() - 9
            ),
        });
    }
    let values = bytes[9..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(LogMelFeature {
        bands,
        frames,
        values,
    })
}
