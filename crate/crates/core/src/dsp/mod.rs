//! STFT analysis/synthesis and WAV I/O.

mod stft;
mod wav;

pub use stft::{
    istft, stft, ComplexSpectrogram, MagnitudeSpectrogram, StftConfig, Waveform, Window,
};
pub use wav::{quantize, read_wav, write_wav};
