//! Audio front end: WAV decoding and log-mel filterbank spectrograms.

mod spectrogram;
mod wav;

pub use spectrogram::{
    frame_count, hz_to_mel, log_mel_spectrogram, mel_filterbank, mel_to_hz, Spectrogram,
    SpectrogramConfig, WindowKind,
};
pub use wav::{decode_wav, encode_wav, AudioWaveform};
