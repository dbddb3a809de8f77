//! Log-mel spectrograms for spoken words and channel normalisation for
//! images.

use std::fs;
use std::io;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// ImageNet per-channel statistics (RGB).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform has {len} samples, shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("image must have 3 channels of {expected} values, got {actual}")]
    ImageShape { expected: usize, actual: usize },
    #[error("channel standard deviations must be positive")]
    NonPositiveStd,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidWaveform("sample rate is zero".into()));
        }
        if samples.is_empty() {
            return Err(FeatureError::InvalidWaveform("no samples".into()));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(FeatureError::InvalidWaveform(
                "samples must be finite and within [-1, 1]".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Writes `<path>` as little-endian f32 PCM and `<path>.json` with the
    /// sample rate.
    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut bytes = Vec::with_capacity(self.samples.len() * 4);
        for &s in &self.samples {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        write(path, &bytes)?;
        let sidecar = serde_json::json!({ "sample_rate": self.sample_rate, "samples": self.samples.len() });
        write(&sidecar_path(path), format!("{sidecar}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        #[derive(Deserialize)]
        struct Sidecar {
            sample_rate: u32,
        }
        let side = sidecar_path(path);
        let text = read(&side)?;
        let meta: Sidecar = serde_json::from_slice(&text).map_err(|source| FeatureError::Sidecar {
            path: side.display().to_string(),
            source,
        })?;
        let bytes = read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(FeatureError::InvalidWaveform(format!(
                "{} is not a whole number of f32 samples",
                path.display()
            )));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(samples, meta.sample_rate)
    }

    /// Samples rounded to the precision of the on-disk format.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s as f32 as f64).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), FeatureError> {
    fs::write(path, bytes).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, FeatureError> {
    fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub hop_ms: f64,
    pub win_ms: f64,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            hop_ms: 10.0,
            win_ms: 25.0,
            n_mels: 40,
            n_frames: 256,
        }
    }
}

impl MelConfig {
    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Log-mel energies stored mel-major: `values[m * n_frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
    /// Frames that carry signal; the rest is padding.
    pub valid_frames: usize,
}

impl MelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.get(m, t)).collect()
    }

    /// Mean log-mel vector over the valid frames.
    pub fn mean_spectrum(&self) -> Vec<f64> {
        let n = self.valid_frames.max(1);
        (0..self.n_mels)
            .map(|m| (0..n).map(|t| self.get(m, t)).sum::<f64>() / n as f64)
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist, area
/// normalised, evaluated on the `n_fft / 2 + 1` FFT bin frequencies.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    norm * up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Centre frequency of each mel filter.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrum frames of an uncentred STFT (Hann window, FFT size the
/// next power of two above the window).
pub fn power_frames(w: &Waveform, cfg: &MelConfig) -> Result<(Vec<Vec<f64>>, usize), FeatureError> {
    let win = cfg.win_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate).max(1);
    if w.samples.len() < win || win == 0 {
        return Err(FeatureError::TooShort {
            len: w.samples.len(),
            win,
        });
    }
    let n_fft = win.next_power_of_two();
    let frames = 1 + (w.samples.len() - win) / hop;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let seg = &w.samples[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(seg[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok((out, n_fft))
}

pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, FeatureError> {
    let (power, n_fft) = power_frames(w, cfg)?;
    let bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate);
    let n_frames = power.len();
    let mut values = vec![0.0; cfg.n_mels * n_frames];
    for (m, filt) in bank.iter().enumerate() {
        for (t, frame) in power.iter().enumerate() {
            let e: f64 = filt.iter().zip(frame).map(|(a, b)| a * b).sum();
            values[m * n_frames + t] = (e + LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        values,
        n_mels: cfg.n_mels,
        n_frames,
        valid_frames: n_frames,
    })
}

/// Zero-pads (at the log floor) or truncates to exactly `target` frames,
/// keeping the earliest frames.
pub fn pad_or_truncate(m: &MelSpectrogram, target: usize) -> MelSpectrogram {
    if m.n_frames == target {
        return m.clone();
    }
    let floor = LOG_FLOOR.ln();
    let keep = m.n_frames.min(target);
    let mut values = vec![floor; m.n_mels * target];
    for mel in 0..m.n_mels {
        values[mel * target..mel * target + keep]
            .copy_from_slice(&m.values[mel * m.n_frames..mel * m.n_frames + keep]);
    }
    MelSpectrogram {
        values,
        n_mels: m.n_mels,
        n_frames: target,
        valid_frames: m.valid_frames.min(target),
    }
}

/// Full audio featurisation: log-mel then pad/truncate to the frame cap.
pub fn featurize_audio(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, FeatureError> {
    Ok(pad_or_truncate(&mel_spectrogram(w, cfg)?, cfg.n_frames))
}

/// Per-channel `(x - mean) / std` on a channel-major `3 x H x W` buffer.
pub fn normalize_image(
    raw: &[f64],
    size: usize,
    means: [f64; 3],
    stds: [f64; 3],
) -> Result<Vec<f64>, FeatureError> {
    let plane = size * size;
    if raw.len() != 3 * plane {
        return Err(FeatureError::ImageShape {
            expected: plane,
            actual: raw.len(),
        });
    }
    if stds.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(FeatureError::NonPositiveStd);
    }
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = i / plane;
            (x - means[c]) / stds[c]
        })
        .collect())
}
