use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::StreamMagnitudes;

/// Input/output window sizes (in STFT frames) and the step between meta-frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaFrameSpec {
    pub input_frames: usize,
    pub output_frames: usize,
    pub shift: usize,
}

impl MetaFrameSpec {
    pub fn new(input_frames: usize, output_frames: usize, shift: usize) -> Result<Self> {
        let spec = Self {
            input_frames,
            output_frames,
            shift,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_frames == 0 || self.input_frames < self.output_frames || self.shift == 0 {
            return Err(Error::InvalidConfig(format!(
                "meta-frame spec needs input >= output >= 1 and shift >= 1, got {}\\{} shift {}",
                self.input_frames, self.output_frames, self.shift
            )));
        }
        Ok(())
    }

    /// Number of meta-frames over `frames` spectrogram frames; independent of window sizes.
    pub fn count(&self, frames: usize) -> usize {
        frames.div_ceil(self.shift)
    }

    /// Center frame of meta-frame `index`; consecutive output windows tile the signal
    /// whenever `shift <= output_frames`.
    pub fn center(&self, index: usize) -> usize {
        index * self.shift + self.shift / 2
    }

    /// First frame (possibly negative, i.e. in the padding) of the input window.
    pub fn input_start(&self, center: usize) -> isize {
        center as isize - (self.input_frames / 2) as isize
    }

    /// First frame (possibly negative) of the output window.
    pub fn output_start(&self, center: usize) -> isize {
        center as isize - (self.output_frames / 2) as isize
    }

    /// How many output windows cover each of `frames` frames.
    pub fn coverage(&self, frames: usize) -> Vec<usize> {
        let mut counts = vec![0; frames];
        for k in 0..self.count(frames) {
            let start = self.output_start(self.center(k));
            for t in start..start + self.output_frames as isize {
                if (0..frames as isize).contains(&t) {
                    counts[t as usize] += 1;
                }
            }
        }
        counts
    }
}

/// One training or inference unit: stacked input magnitudes and the output window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaFrame {
    pub center: usize,
    /// `input_frames * bins` mixture magnitudes, frame-major, zero outside the signal.
    pub features: Array1<f64>,
    /// Mixture magnitudes of the output window, `output_frames x bins`.
    pub mixture: Array2<f64>,
    /// Reference magnitudes of the output window, `streams x output_frames x bins`.
    pub references: Option<StreamMagnitudes>,
}

fn padded_window(mag: ArrayView2<f64>, start: isize, len: usize) -> Array2<f64> {
    let frames = mag.nrows() as isize;
    let mut out = Array2::zeros((len, mag.ncols()));
    let lo = start.max(0);
    let hi = (start + len as isize).min(frames);
    if lo < hi {
        out.slice_mut(s![(lo - start) as usize..(hi - start) as usize, ..])
            .assign(&mag.slice(s![lo as usize..hi as usize, ..]));
    }
    out
}

/// Cuts meta-frame `index` out of a magnitude spectrogram and optional per-stream references.
/// Frames outside the signal read as zero.
pub fn metaframe_at(
    mix_mag: ArrayView2<f64>,
    refs_mag: Option<ArrayView3<f64>>,
    spec: &MetaFrameSpec,
    index: usize,
) -> Result<MetaFrame> {
    let bins = mix_mag.ncols();
    let center = spec.center(index);
    let input = padded_window(mix_mag, spec.input_start(center), spec.input_frames);
    let out_start = spec.output_start(center);
    let mixture = padded_window(mix_mag, out_start, spec.output_frames);
    let references = refs_mag
        .map(|r| {
            let mut w = Array3::zeros((r.dim().0, spec.output_frames, bins));
            for (s, mut dst) in w.outer_iter_mut().enumerate() {
                dst.assign(&padded_window(
                    r.index_axis(Axis(0), s),
                    out_start,
                    spec.output_frames,
                ));
            }
            StreamMagnitudes::new(w)
        })
        .transpose()?;
    Ok(MetaFrame {
        center,
        features: Array1::from_iter(input),
        mixture,
        references,
    })
}

fn check_references(mix_mag: ArrayView2<f64>, refs_mag: Option<&ArrayView3<f64>>) -> Result<()> {
    let (frames, bins) = mix_mag.dim();
    if let Some(r) = refs_mag {
        if (r.dim().1, r.dim().2) != (frames, bins) {
            return Err(Error::shape(
                format!("references of {frames}x{bins}"),
                format!("{:?}", r.dim()),
            ));
        }
    }
    Ok(())
}

/// Cuts a magnitude spectrogram (and optional per-stream references) into meta-frames.
/// Frames outside the signal are zero, so every frame is the center of some meta-frame.
pub fn make_metaframes(
    mix_mag: ArrayView2<f64>,
    refs_mag: Option<ArrayView3<f64>>,
    spec: &MetaFrameSpec,
) -> Result<Vec<MetaFrame>> {
    spec.validate()?;
    check_references(mix_mag, refs_mag.as_ref())?;
    (0..spec.count(mix_mag.nrows()))
        .map(|k| metaframe_at(mix_mag, refs_mag, spec, k))
        .collect()
}

/// Spectrograms of many utterances from which meta-frames are cut on demand.
#[derive(Debug, Clone, Default)]
pub struct MetaFramePool {
    spec: Option<MetaFrameSpec>,
    mixtures: Vec<Array2<f64>>,
    references: Vec<Array3<f64>>,
    index: Vec<(usize, usize)>,
}

impl MetaFramePool {
    pub fn new(spec: MetaFrameSpec) -> Self {
        Self {
            spec: Some(spec),
            ..Self::default()
        }
    }

    /// Adds one utterance: mixture `T x F` and references `S x T x F`.
    pub fn push(&mut self, mixture: Array2<f64>, references: Array3<f64>) -> Result<()> {
        let spec = self
            .spec
            .ok_or_else(|| Error::InvalidConfig("pool has no spec".into()))?;
        check_references(mixture.view(), Some(&references.view()))?;
        if let Some(first) = self.references.first() {
            if first.dim().0 != references.dim().0 || first.dim().2 != references.dim().2 {
                return Err(Error::shape(
                    format!("{:?}", first.dim()),
                    format!("{:?}", references.dim()),
                ));
            }
        }
        let u = self.mixtures.len();
        self.index
            .extend((0..spec.count(mixture.nrows())).map(|k| (u, k)));
        self.mixtures.push(mixture);
        self.references.push(references);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn utterances(&self) -> usize {
        self.mixtures.len()
    }

    pub fn get(&self, i: usize) -> MetaFrame {
        let (u, k) = self.index[i];
        metaframe_at(
            self.mixtures[u].view(),
            Some(self.references[u].view()),
            self.spec.as_ref().expect("non-empty pool has a spec"),
            k,
        )
        .expect("pool entries were validated on insertion")
    }

    pub fn take(&self, indices: &[usize]) -> Vec<MetaFrame> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    pub fn all(&self) -> Vec<MetaFrame> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}
