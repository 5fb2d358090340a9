use crate::error::{Error, Result};

/// Mono PCM audio scaled to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWaveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(AudioWaveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

const PCM: u16 = 1;

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Decodes a RIFF/WAVE container holding 16-bit signed mono PCM.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioWaveform> {
    if bytes.len() < 12 {
        return Err(Error::MalformedHeader("shorter than the RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedHeader("missing RIFF/WAVE magic".into()));
    }
    let riff_len = le_u32(&bytes[4..8]) as usize;
    if riff_len < 4 || riff_len + 8 > bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "RIFF size {riff_len} inconsistent with {} byte file",
            bytes.len()
        )));
    }
    let body = &bytes[12..8 + riff_len];

    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 0;
    while pos + 8 <= body.len() {
        let id = &body[pos..pos + 4];
        let len = le_u32(&body[pos + 4..pos + 8]) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "chunk {:?} declares {len} bytes past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::MalformedHeader("fmt chunk shorter than 16 bytes".into()));
                }
                let c = &body[start..end];
                format = Some((le_u16(&c[0..2]), le_u16(&c[2..4]), le_u32(&c[4..8]), le_u16(&c[14..16])));
            }
            b"data" => data = Some(&body[start..end]),
            _ => {}
        }
        // Chunks are word aligned.
        pos = end + (len & 1);
    }

    let (audio_format, channels, sample_rate, bits) =
        format.ok_or_else(|| Error::MalformedHeader("missing fmt chunk".into()))?;
    if audio_format != PCM {
        return Err(Error::UnsupportedFormat(format!("format tag {audio_format}, expected PCM")));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples, expected 16-bit")));
    }
    if sample_rate == 0 {
        return Err(Error::MalformedHeader("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| Error::MalformedHeader("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::MalformedHeader("odd data chunk length for 16-bit audio".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    AudioWaveform::new(samples, sample_rate)
}

/// Encodes samples as a canonical 44-byte-header 16-bit mono WAV file.
/// Samples are clamped to `[-1, 1]` and rounded to the nearest step.
pub fn encode_wav(waveform: &AudioWaveform) -> Vec<u8> {
    let data_len = waveform.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&waveform.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(waveform.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &waveform.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
