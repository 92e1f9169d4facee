use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads (or truncates) to exactly `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::SqrtHann => (0..len)
                .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: Window,
}

const COLA_TOLERANCE: f64 = 1e-9;

impl Default for StftConfig {
    /// 32 ms frames with a 16 ms shift at 8 kHz.
    fn default() -> Self {
        Self {
            frame_len: 256,
            hop: 128,
            fft_len: 256,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    /// 32 ms / 16 ms geometry at 16 kHz, giving 257 bins.
    pub fn wideband() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            fft_len: 512,
            window: Window::SqrtHann,
        }
    }

    /// Frame geometry for a given sample rate and frame/shift durations in milliseconds.
    pub fn from_millis(sample_rate: u32, frame_ms: f64, shift_ms: f64) -> Result<Self> {
        let frame_len = (sample_rate as f64 * frame_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * shift_ms / 1000.0).round() as usize;
        let cfg = Self {
            frame_len,
            hop,
            fft_len: frame_len.next_power_of_two(),
            window: Window::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len || self.frame_len > self.fft_len {
            return Err(Error::InvalidConfig(format!(
                "STFT requires 0 < hop <= frame_len <= fft_len, got hop={} frame_len={} fft_len={}",
                self.hop, self.frame_len, self.fft_len
            )));
        }
        if !self.fft_len.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "fft_len must be even, got {}",
                self.fft_len
            )));
        }
        let envelope = self.ola_period();
        let (lo, hi) = envelope
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if lo <= 0.0 || hi - lo > COLA_TOLERANCE * hi {
            return Err(Error::InvalidConfig(format!(
                "window {:?} with frame_len={} does not satisfy constant overlap-add at hop={}",
                self.window, self.frame_len, self.hop
            )));
        }
        Ok(())
    }

    /// One hop-length period of the steady-state analysis*synthesis overlap envelope.
    pub fn ola_period(&self) -> Vec<f64> {
        let w = self.window.coefficients(self.frame_len);
        (0..self.hop)
            .map(|n| {
                (n..self.frame_len)
                    .step_by(self.hop)
                    .map(|i| w[i] * w[i])
                    .sum()
            })
            .collect()
    }

    /// Steady-state value of the overlap envelope.
    pub fn ola_gain(&self) -> f64 {
        let p = self.ola_period();
        p.iter().sum::<f64>() / p.len() as f64
    }

    /// Number of frames produced for a signal of `len` samples. The final partial
    /// frame is kept and zero-padded.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(Error::TooShort {
                len,
                frame_len: self.frame_len,
            });
        }
        Ok(1 + (len - self.frame_len).div_ceil(self.hop))
    }

    /// Length of the waveform synthesized from `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    /// Sample range fully covered by overlapping frames, where reconstruction is exact.
    pub fn interior(&self, frames: usize) -> Range<usize> {
        let edge = self.frame_len - self.hop;
        let end = self.synthesis_len(frames).saturating_sub(edge);
        edge.min(end)..end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    values: Array2<Complex64>,
}

impl ComplexSpectrogram {
    pub fn new(values: Array2<Complex64>) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values: self.values.mapv(|c| c.norm()),
        }
    }

    /// Unit phasors of every bin; zero bins get phase 0.
    pub fn phase(&self) -> Array2<Complex64> {
        self.values.mapv(|c| {
            let r = c.norm();
            if r > 0.0 {
                c / r
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
    }

    /// Combines a magnitude grid with unit phasors.
    pub fn from_polar(mag: ArrayView2<f64>, phase: ArrayView2<Complex64>) -> Result<Self> {
        if mag.dim() != phase.dim() {
            return Err(Error::shape(
                format!("{:?}", phase.dim()),
                format!("{:?}", mag.dim()),
            ));
        }
        let mut values = phase.to_owned();
        values.zip_mut_with(&mag, |p, &m| *p *= m);
        Ok(Self { values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    values: Array2<f64>,
}

impl MagnitudeSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite(
                "magnitude spectrogram must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let frames = cfg.frame_count(wave.len())?;
    let bins = cfg.bins();
    let window = cfg.window.coefficients(cfg.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let samples = wave.samples();

    let mut values = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    for (t, mut row) in values.rows_mut().into_iter().enumerate() {
        buf.fill(Complex64::new(0.0, 0.0));
        let start = t * cfg.hop;
        for (n, slot) in buf.iter_mut().take(cfg.frame_len).enumerate() {
            if let Some(x) = samples.get(start + n) {
                slot.re = x * window[n];
            }
        }
        fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(&buf) {
            *dst = *src;
        }
    }
    Ok(ComplexSpectrogram { values })
}

/// Overlap-add synthesis, normalized by the constant overlap-add gain of the window pair.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    cfg.validate()?;
    if spec.bins() != cfg.bins() {
        return Err(Error::shape(
            format!("{} bins", cfg.bins()),
            format!("{} bins", spec.bins()),
        ));
    }
    let frames = spec.frames();
    let window = cfg.window.coefficients(cfg.frame_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_len);
    let scale = 1.0 / (cfg.fft_len as f64 * cfg.ola_gain());
    let half = cfg.fft_len / 2;

    let mut out = vec![0.0; cfg.synthesis_len(frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    for (t, row) in spec.values.rows().into_iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            buf[k] = *v;
        }
        // DC and Nyquist bins of a real signal carry no imaginary part.
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in 1..half {
            buf[cfg.fft_len - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for n in 0..cfg.frame_len {
            out[start + n] += buf[n].re * window[n] * scale;
        }
    }
    Waveform::new(out, sample_rate)
}
