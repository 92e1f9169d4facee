//! 16-bit PCM mono WAV reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        // hound reports short reads as a custom io error
        hound::Error::IoError(e)
            if e.kind() == ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes") =>
        {
            Error::Truncated(path.display().to_string())
        }
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => {
            Error::UnsupportedEncoding(format!("{}: unsupported WAV variant", path.display()))
        }
        hound::Error::FormatError(msg) if msg.contains("EOF") || msg.contains("truncated") => {
            Error::Truncated(format!("{}: {msg}", path.display()))
        }
        other => Error::MalformedWav(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM mono file into samples scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = WavReader::new(BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {:?} {}-bit, expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::ChannelCount(spec.channels));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.len() != declared {
        return Err(Error::Truncated(format!(
            "{}: header declares {declared} samples, found {}",
            path.display(),
            samples.len()
        )));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes a sample to 16 bits, clipping to the representable range.
pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = WavWriter::new(BufWriter::new(file), spec).map_err(|e| map_hound(path, e))?;
    let mut w16 = writer.get_i16_writer(wave.len() as u32);
    for &x in wave.samples() {
        w16.write_sample(quantize(x));
    }
    w16.flush().map_err(|e| map_hound(path, e))?;
    writer.finalize().map_err(|e| map_hound(path, e))
}
