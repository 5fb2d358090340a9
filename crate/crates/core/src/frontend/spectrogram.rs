use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioWaveform;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hamming,
}

/// Log-mel front-end settings. Defaults: 16 kHz, 25 ms Hamming window,
/// 10 ms stride, 40 mel bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mel_bands: usize,
    pub window_kind: WindowKind,
    /// Energies are clamped to at least this value before the log.
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate_hz: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mel_bands: 40,
            window_kind: WindowKind::Hamming,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample_rate_hz must be positive".into()));
        }
        if !(self.hop_ms > 0.0 && self.window_ms >= self.hop_ms) {
            return Err(Error::InvalidConfig(format!(
                "need window_ms >= hop_ms > 0, got window {} hop {}",
                self.window_ms, self.hop_ms
            )));
        }
        if self.num_mel_bands == 0 {
            return Err(Error::InvalidConfig("num_mel_bands must be at least 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        if self.hop_samples() == 0 {
            return Err(Error::InvalidConfig("hop shorter than one sample".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Smallest power of two holding one window.
    pub fn fft_len(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Value of a frame entry whose energy is at or below the floor.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// Log-mel energies, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<f64>,
    pub config: SpectrogramConfig,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bands(&self) -> usize {
        self.frames.ncols()
    }

    /// Exports as an audio feature stream; timestamps mark frame starts.
    pub fn to_feature_sequence(&self) -> FeatureSequence {
        let hop = self.config.hop_ms;
        let timestamps_ms = (0..self.num_frames())
            .map(|i| (i as f64 * hop).round() as u64)
            .collect();
        FeatureSequence {
            modality: Modality::Audio,
            values: self.frames.clone(),
            timestamps_ms,
        }
    }

    pub fn from_feature_sequence(seq: &FeatureSequence, config: SpectrogramConfig) -> Result<Self> {
        if seq.modality != Modality::Audio {
            return Err(Error::ModalityMismatch(format!("expected audio, got {}", seq.modality)));
        }
        if seq.dim() != config.num_mel_bands {
            return Err(Error::ShapeMismatch(format!(
                "{} bands in features, config has {}",
                seq.dim(),
                config.num_mel_bands
            )));
        }
        Ok(Spectrogram {
            frames: seq.values.clone(),
            config,
        })
    }
}

/// Number of full frames for a signal of `len` samples, or `None` when the
/// signal is shorter than one window.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    (len >= window && hop > 0).then(|| 1 + (len - window) / hop)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters spanning 0 Hz to Nyquist, unit peak height.
/// Shape `[num_bands, fft_len/2 + 1]`.
pub fn mel_filterbank(num_bands: usize, fft_len: usize, sample_rate_hz: u32) -> Array2<f64> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_bands + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (num_bands + 1) as f64))
        .collect();
    let bins = fft_len / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / fft_len as f64;
    Array2::from_shape_fn((num_bands, bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rising = (f - lo) / (mid - lo);
        let falling = (hi - f) / (hi - mid);
        rising.min(falling).max(0.0)
    })
}

fn window_coefficients(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hamming if len == 1 => vec![1.0],
        WindowKind::Hamming => (0..len)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
            .collect(),
    }
}

/// Framewise log-mel filterbank energies: Hamming window, power spectrum,
/// mel filterbank, then `ln(max(energy, log_floor))`.
pub fn log_mel_spectrogram(waveform: &AudioWaveform, config: &SpectrogramConfig) -> Result<Spectrogram> {
    config.validate()?;
    if waveform.sample_rate_hz != config.sample_rate_hz {
        return Err(Error::RateMismatch {
            waveform: waveform.sample_rate_hz,
            config: config.sample_rate_hz,
        });
    }
    let window = config.window_samples();
    let hop = config.hop_samples();
    let n = waveform.samples.len();
    let frames = frame_count(n, window, hop).ok_or(Error::TooShort { samples: n, window })?;

    let fft_len = config.fft_len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let coeffs = window_coefficients(config.window_kind, window);
    let bank = mel_filterbank(config.num_mel_bands, fft_len, config.sample_rate_hz);
    let bins = fft_len / 2 + 1;

    let mut out = Array2::zeros((frames, config.num_mel_bands));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut power = vec![0.0; bins];
    for (f, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = if i < window {
                let s = waveform.samples[start + i];
                // Non-finite samples carry no usable energy.
                if s.is_finite() { s * coeffs[i] } else { 0.0 }
            } else {
                0.0
            };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..bins]) {
            *p = c.norm_sqr();
        }
        for (m, out) in row.iter_mut().enumerate() {
            let energy: f64 = bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            let energy = if energy.is_finite() { energy } else { f64::MAX };
            *out = energy.max(config.log_floor).ln();
        }
    }
    Ok(Spectrogram {
        frames: out,
        config: config.clone(),
    })
}
