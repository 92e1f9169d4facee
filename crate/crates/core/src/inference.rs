//! Sliding-window separation: per-meta-frame estimates, stitching and resynthesis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::{best_permutation, pairwise_cost, CostMatrix, Permutation};
use crate::dsp::{istft, stft, ComplexSpectrogram, MagnitudeSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::masking::StreamMagnitudes;
use crate::model::{make_metaframes, MetaFrame, MetaFrameSpec, Model};

/// How per-meta-frame outputs are mapped onto output streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentMode {
    /// Output `s` of every meta-frame feeds stream `s`.
    Default,
    /// Oracle: each meta-frame is matched to the reference windows.
    Optimal,
    /// Each meta-frame is matched to what has already been stitched on overlapping frames.
    Greedy,
}

impl AssignmentMode {
    pub const ALL: [AssignmentMode; 3] = [Self::Default, Self::Optimal, Self::Greedy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::Optimal => "optimal",
            Self::Greedy => "greedy",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn needs_references(self) -> bool {
        self == Self::Optimal
    }
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full-length stream magnitudes assembled from meta-frame outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedEstimate {
    /// `streams x frames x bins`.
    pub magnitudes: Array3<f64>,
    /// Per meta-frame: output `i` was written to stream `trace[k].target(i)`.
    pub trace: Vec<Permutation>,
    /// Number of meta-frames covering each frame.
    pub coverage: Vec<usize>,
}

impl StitchedEstimate {
    pub fn streams(&self) -> usize {
        self.magnitudes.len_of(Axis(0))
    }

    pub fn frames(&self) -> usize {
        self.magnitudes.len_of(Axis(1))
    }

    pub fn stream(&self, s: usize) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram::new(self.magnitudes.index_axis(Axis(0), s).to_owned())
            .expect("stitched magnitudes are averages of nonnegative values")
    }

    /// Trace as CSV rows `metaframe_index,perm`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("metaframe_index,perm\n");
        for (k, p) in self.trace.iter().enumerate() {
            writeln!(out, "{k},{p}").expect("writing to a String");
        }
        out
    }
}

/// Accumulates permuted meta-frame outputs into per-frame sums.
struct Accumulator {
    sums: Array3<f64>,
    coverage: Vec<usize>,
}

impl Accumulator {
    fn new(streams: usize, frames: usize, bins: usize) -> Self {
        Self {
            sums: Array3::zeros((streams, frames, bins)),
            coverage: vec![0; frames],
        }
    }

    /// Valid `(window row, frame)` pairs of a window starting at `start`.
    fn rows(&self, start: isize, len: usize) -> impl Iterator<Item = (usize, usize)> {
        let frames = self.coverage.len() as isize;
        (0..len).filter_map(move |j| {
            let t = start + j as isize;
            (0..frames).contains(&t).then_some((j, t as usize))
        })
    }

    fn add(&mut self, out: &StreamMagnitudes, perm: &Permutation, start: isize) {
        let v = out.values();
        let rows: Vec<_> = self.rows(start, v.len_of(Axis(1))).collect();
        for &(j, t) in &rows {
            for i in 0..v.len_of(Axis(0)) {
                let mut dst = self.sums.slice_mut(s![perm.target(i), t, ..]);
                dst += &v.slice(s![i, j, ..]);
            }
            self.coverage[t] += 1;
        }
    }

    /// Squared distance between output `i` and the running average of stream `j`
    /// over already-covered frames; `None` when nothing overlaps.
    fn overlap_cost(&self, out: &StreamMagnitudes, start: isize) -> Option<CostMatrix> {
        let v = out.values();
        let n = v.len_of(Axis(0));
        let rows: Vec<_> = self
            .rows(start, v.len_of(Axis(1)))
            .filter(|&(_, t)| self.coverage[t] > 0)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut cost = vec![vec![0.0; n]; n];
        for (i, row) in cost.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                for &(w, t) in &rows {
                    let inv = 1.0 / self.coverage[t] as f64;
                    *c += v
                        .slice(s![i, w, ..])
                        .iter()
                        .zip(self.sums.slice(s![j, t, ..]))
                        .map(|(a, b)| (a - b * inv).powi(2))
                        .sum::<f64>();
                }
            }
        }
        Some(CostMatrix::from_rows(&cost).expect("finite square costs"))
    }

    fn finish(self, trace: Vec<Permutation>) -> Result<StitchedEstimate> {
        if let Some(t) = self.coverage.iter().position(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "frame {t} is not covered by any meta-frame"
            )));
        }
        let mut magnitudes = self.sums;
        for (t, &c) in self.coverage.iter().enumerate() {
            magnitudes
                .slice_mut(s![.., t, ..])
                .mapv_inplace(|v| v / c as f64);
        }
        Ok(StitchedEstimate {
            magnitudes,
            trace,
            coverage: self.coverage,
        })
    }
}

fn check_outputs(outputs: &[StreamMagnitudes], spec: &MetaFrameSpec) -> Result<(usize, usize)> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidConfig("stitching needs at least one meta-frame".into()))?;
    let (streams, m, bins) = first.dim();
    if m != spec.output_frames {
        return Err(Error::shape(spec.output_frames, m));
    }
    if let Some(o) = outputs.iter().find(|o| o.dim() != (streams, m, bins)) {
        return Err(Error::shape(
            format!("{:?}", (streams, m, bins)),
            format!("{:?}", o.dim()),
        ));
    }
    Ok((streams, bins))
}

fn stitch_with(
    outputs: &[StreamMagnitudes],
    spec: &MetaFrameSpec,
    frames: usize,
    mut choose: impl FnMut(usize, &StreamMagnitudes, &Accumulator) -> Result<Permutation>,
) -> Result<StitchedEstimate> {
    let (streams, bins) = check_outputs(outputs, spec)?;
    if outputs.len() != spec.count(frames) {
        return Err(Error::shape(
            format!("{} meta-frames", spec.count(frames)),
            outputs.len(),
        ));
    }
    let mut acc = Accumulator::new(streams, frames, bins);
    let mut trace = Vec::with_capacity(outputs.len());
    for (k, out) in outputs.iter().enumerate() {
        let perm = choose(k, out, &acc)?;
        acc.add(out, &perm, spec.output_start(spec.center(k)));
        trace.push(perm);
    }
    acc.finish(trace)
}

/// Stream `s` of every meta-frame feeds output stream `s`.
pub fn stitch_default(
    outputs: &[StreamMagnitudes],
    spec: &MetaFrameSpec,
    frames: usize,
) -> Result<StitchedEstimate> {
    stitch_with(outputs, spec, frames, |_, o, _| {
        Ok(Permutation::identity(o.streams()))
    })
}

/// Each meta-frame takes the permutation that best matches its reference window.
pub fn stitch_optimal(
    outputs: &[StreamMagnitudes],
    ref_windows: &[StreamMagnitudes],
    spec: &MetaFrameSpec,
    frames: usize,
) -> Result<StitchedEstimate> {
    if ref_windows.len() != outputs.len() {
        return Err(Error::MissingReferences);
    }
    stitch_with(outputs, spec, frames, |k, o, _| {
        Ok(best_permutation(&pairwise_cost(o, &ref_windows[k])?).0)
    })
}

/// Traces speakers through overlapping frames: each meta-frame takes the permutation closest
/// to the content stitched so far. Without overlap this degrades to [`stitch_default`].
pub fn stitch_greedy(
    outputs: &[StreamMagnitudes],
    spec: &MetaFrameSpec,
    frames: usize,
) -> Result<StitchedEstimate> {
    if spec.shift >= spec.output_frames {
        log::warn!(
            "greedy stitching needs overlapping output windows (shift {} >= {}); using default",
            spec.shift,
            spec.output_frames
        );
        return stitch_default(outputs, spec, frames);
    }
    stitch_with(outputs, spec, frames, |k, o, acc| {
        Ok(
            match acc.overlap_cost(o, spec.output_start(spec.center(k))) {
                Some(c) => best_permutation(&c).0,
                None => Permutation::identity(o.streams()),
            },
        )
    })
}

/// Magnitude MSE of each meta-frame's outputs against its reference window under `trace`.
pub fn metaframe_mse(
    outputs: &[StreamMagnitudes],
    ref_windows: &[StreamMagnitudes],
    trace: &[Permutation],
) -> Result<Vec<f64>> {
    if outputs.len() != ref_windows.len() || outputs.len() != trace.len() {
        return Err(Error::shape(
            outputs.len(),
            ref_windows.len().min(trace.len()),
        ));
    }
    outputs
        .iter()
        .zip(ref_windows)
        .zip(trace)
        .map(|((o, r), p)| {
            let c = pairwise_cost(o, r)?;
            Ok(c.total(p) / o.values().len().max(1) as f64)
        })
        .collect()
}

/// Everything produced by separating one mixture.
#[derive(Debug, Clone)]
pub struct Separation {
    pub waveforms: Vec<Waveform>,
    pub estimate: StitchedEstimate,
    /// Raw per-meta-frame network outputs (masked mixture magnitudes).
    pub outputs: Vec<StreamMagnitudes>,
    /// Reference windows, present when references were supplied.
    pub ref_windows: Option<Vec<StreamMagnitudes>>,
}

impl Separation {
    /// Per-meta-frame MSE of the chosen trace against the references.
    pub fn metaframe_mse(&self) -> Result<Vec<f64>> {
        let refs = self.ref_windows.as_ref().ok_or(Error::MissingReferences)?;
        metaframe_mse(&self.outputs, refs, &self.estimate.trace)
    }
}

const ESTIMATE_CHUNK: usize = 256;

/// Network outputs for every meta-frame, in order.
pub fn estimate_metaframes(model: &Model, frames: &[MetaFrame]) -> Result<Vec<StreamMagnitudes>> {
    use rayon::prelude::*;
    let chunks: Vec<Vec<StreamMagnitudes>> = frames
        .par_chunks(ESTIMATE_CHUNK)
        .map(|c| model.estimate(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Resynthesizes stream magnitudes with a shared phase, cut to `len` samples.
pub fn resynthesize(
    magnitudes: &Array3<f64>,
    phase: ArrayView2<rustfft::num_complex::Complex64>,
    model_stft: &crate::dsp::StftConfig,
    sample_rate: u32,
    len: usize,
) -> Result<Vec<Waveform>> {
    magnitudes
        .outer_iter()
        .map(|m| {
            let spec = ComplexSpectrogram::from_polar(m, phase)?;
            Ok(istft(&spec, model_stft, sample_rate)?.resized(len))
        })
        .collect()
}

/// Stacks reference spectrogram magnitudes into `S x T x F`.
pub fn reference_magnitudes(
    refs: &[Waveform],
    cfg: &crate::dsp::StftConfig,
) -> Result<Array3<f64>> {
    let mags = refs
        .iter()
        .map(|r| Ok(stft(r, cfg)?.magnitude().into_values()))
        .collect::<Result<Vec<Array2<f64>>>>()?;
    let views: Vec<_> = mags.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape("equal reference lengths", e))
}

/// Separates `mixture` with meta-frames advanced by `shift` frames.
///
/// `refs` (in the order scores should use) are required for [`AssignmentMode::Optimal`] and
/// optional otherwise; when given, their windows are kept for per-meta-frame scoring.
pub fn separate(
    model: &Model,
    mixture: &Waveform,
    shift: usize,
    mode: AssignmentMode,
    refs: Option<&[Waveform]>,
) -> Result<Separation> {
    Ok(separate_modes(model, mixture, shift, &[mode], refs)?.remove(0))
}

/// Like [`separate`] for several modes at once; the network runs once per meta-frame.
pub fn separate_modes(
    model: &Model,
    mixture: &Waveform,
    shift: usize,
    modes: &[AssignmentMode],
    refs: Option<&[Waveform]>,
) -> Result<Vec<Separation>> {
    if modes.iter().any(|m| m.needs_references()) && refs.is_none() {
        return Err(Error::MissingReferences);
    }
    if mixture.sample_rate() != model.sample_rate {
        return Err(Error::InvalidConfig(format!(
            "mixture is {} Hz but the model expects {} Hz",
            mixture.sample_rate(),
            model.sample_rate
        )));
    }
    let spec = model.layout.metaframe_spec(shift)?;
    let complex = stft(mixture, &model.stft)?;
    let mag = complex.magnitude().into_values();
    let ref_mag = match refs {
        Some(r) => {
            if r.len() != model.layout.streams {
                return Err(Error::shape(model.layout.streams, r.len()));
            }
            if let Some(bad) = r.iter().find(|w| w.len() != mixture.len()) {
                return Err(Error::shape(
                    format!("{} reference samples", mixture.len()),
                    bad.len(),
                ));
            }
            Some(reference_magnitudes(r, &model.stft)?)
        }
        None => None,
    };
    let frames_in = make_metaframes(mag.view(), ref_mag.as_ref().map(|r| r.view()), &spec)?;
    let outputs = estimate_metaframes(model, &frames_in)?;
    let ref_windows: Option<Vec<StreamMagnitudes>> = ref_mag
        .is_some()
        .then(|| frames_in.into_iter().filter_map(|f| f.references).collect());
    let frames = mag.nrows();
    let phase = complex.phase();
    modes
        .iter()
        .map(|&mode| {
            let estimate = match mode {
                AssignmentMode::Default => stitch_default(&outputs, &spec, frames)?,
                AssignmentMode::Greedy => stitch_greedy(&outputs, &spec, frames)?,
                AssignmentMode::Optimal => stitch_optimal(
                    &outputs,
                    ref_windows.as_deref().ok_or(Error::MissingReferences)?,
                    &spec,
                    frames,
                )?,
            };
            let waveforms = resynthesize(
                &estimate.magnitudes,
                phase.view(),
                &model.stft,
                mixture.sample_rate(),
                mixture.len(),
            )?;
            Ok(Separation {
                waveforms,
                estimate,
                outputs: outputs.clone(),
                ref_windows: ref_windows.clone(),
            })
        })
        .collect()
}

/// Writes `<id>.s1.wav`, `<id>.s2.wav`, ... and optionally `<id>.trace.csv` into `dir`.
pub fn write_separation(sep: &Separation, dir: &Path, id: &str, with_trace: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, w) in sep.waveforms.iter().enumerate() {
        crate::dsp::write_wav(dir.join(format!("{id}.s{}.wav", s + 1)), w)?;
    }
    if with_trace {
        let path = dir.join(format!("{id}.trace.csv"));
        fs::write(&path, sep.estimate.trace_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::model::ModelLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mags(v: Array3<f64>) -> StreamMagnitudes {
        StreamMagnitudes::new(v).unwrap()
    }

    /// Two speakers with distinct constant spectra, `frames x bins` each.
    fn speakers(frames: usize, bins: usize) -> Array3<f64> {
        Array3::from_shape_fn((2, frames, bins), |(s, t, f)| {
            1.0 + (s * 7 + f) as f64 * 0.5 + 0.01 * t as f64
        })
    }

    fn windows(full: &Array3<f64>, spec: &MetaFrameSpec) -> Vec<StreamMagnitudes> {
        let mix = full.sum_axis(Axis(0));
        make_metaframes(mix.view(), Some(full.view()), spec)
            .unwrap()
            .into_iter()
            .map(|m| m.references.unwrap())
            .collect()
    }

    #[test]
    fn constant_outputs_stitch_to_constant() {
        let spec = MetaFrameSpec::new(9, 5, 2).unwrap();
        let frames = 23;
        let outs: Vec<_> = (0..spec.count(frames))
            .map(|_| mags(Array3::from_elem((2, 5, 3), 0.75)))
            .collect();
        for est in [
            stitch_default(&outs, &spec, frames).unwrap(),
            stitch_greedy(&outs, &spec, frames).unwrap(),
        ] {
            assert!(est.magnitudes.iter().all(|&v| (v - 0.75).abs() < 1e-15));
            assert!(est.trace.iter().all(Permutation::is_identity));
        }
    }

    #[test]
    fn coverage_matches_spec() {
        for (m, shift) in [(5, 1), (7, 3), (31, 1), (1, 1)] {
            let spec = MetaFrameSpec::new(31, m, shift).unwrap();
            let frames = 40;
            let outs: Vec<_> = (0..spec.count(frames))
                .map(|_| mags(Array3::ones((2, m, 2))))
                .collect();
            let est = stitch_default(&outs, &spec, frames).unwrap();
            assert_eq!(est.coverage, spec.coverage(frames));
            assert_eq!(est.trace.len(), spec.count(frames));
        }
    }

    #[test]
    fn half_swapped_outputs() {
        let (frames, bins) = (20, 4);
        let spec = MetaFrameSpec::new(5, 3, 1).unwrap();
        let full = speakers(frames, bins);
        let refs = windows(&full, &spec);
        let outs: Vec<_> = refs
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if k % 2 == 1 {
                    r.reordered(&[1, 0])
                } else {
                    r.clone()
                }
            })
            .collect();
        let opt = stitch_optimal(&outs, &refs, &spec, frames).unwrap();
        assert!((&opt.magnitudes - &full).iter().all(|d| d.abs() < 1e-12));
        let def = stitch_default(&outs, &spec, frames).unwrap();
        let err = (&def.magnitudes - &full)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(err > 1.0);
        let opt_mse = metaframe_mse(&outs, &refs, &opt.trace).unwrap();
        let def_mse = metaframe_mse(&outs, &refs, &def.trace).unwrap();
        assert!(opt_mse.iter().all(|&v| v == 0.0));
        assert!(def_mse.iter().zip(&opt_mse).all(|(d, o)| o <= d));
    }

    #[test]
    fn greedy_recovers_single_swap() {
        let (frames, bins) = (30, 4);
        let spec = MetaFrameSpec::new(7, 5, 1).unwrap();
        let full = speakers(frames, bins);
        let refs = windows(&full, &spec);
        let outs: Vec<_> = refs
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if k >= 12 {
                    r.reordered(&[1, 0])
                } else {
                    r.clone()
                }
            })
            .collect();
        let greedy = stitch_greedy(&outs, &spec, frames).unwrap();
        let swaps: Vec<usize> = greedy
            .trace
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_identity())
            .map(|(k, _)| k)
            .collect();
        assert_eq!(swaps, (12..30).collect::<Vec<_>>());
        assert!((&greedy.magnitudes - &full).iter().all(|d| d.abs() < 1e-12));
        let default = stitch_default(&outs, &spec, frames).unwrap();
        let mse = |e: &StitchedEstimate| (&e.magnitudes - &full).mapv(|d| d * d).sum();
        assert!(mse(&greedy) <= mse(&default));
        assert_ne!(greedy.trace, default.trace);
    }

    #[test]
    fn greedy_without_overlap_falls_back() {
        let spec = MetaFrameSpec::new(3, 1, 1).unwrap();
        let full = speakers(6, 2);
        let outs: Vec<_> = windows(&full, &spec)
            .into_iter()
            .map(|r| r.reordered(&[1, 0]))
            .collect();
        let g = stitch_greedy(&outs, &spec, 6).unwrap();
        assert_eq!(g, stitch_default(&outs, &spec, 6).unwrap());
    }

    #[test]
    fn optimal_never_worse_than_default_per_metaframe() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = MetaFrameSpec::new(3, 3, 1).unwrap();
        for _ in 0..20 {
            let full = Array3::from_shape_simple_fn((3, 12, 4), || rng.gen_range(0.0..1.0));
            let refs = windows(&full, &spec);
            let outs: Vec<_> = refs
                .iter()
                .map(|_| {
                    mags(Array3::from_shape_simple_fn((3, 3, 4), || {
                        rng.gen_range(0.0..1.0)
                    }))
                })
                .collect();
            let opt = stitch_optimal(&outs, &refs, &spec, 12).unwrap();
            let def = stitch_default(&outs, &spec, 12).unwrap();
            let greedy = stitch_greedy(&outs, &spec, 12).unwrap();
            let o = metaframe_mse(&outs, &refs, &opt.trace).unwrap();
            for other in [&def, &greedy] {
                let d = metaframe_mse(&outs, &refs, &other.trace).unwrap();
                assert!(o.iter().zip(&d).all(|(o, d)| o <= d));
            }
        }
    }

    #[test]
    fn single_metaframe_matches_pit_permutation() {
        let spec = MetaFrameSpec::new(5, 5, 5).unwrap();
        let full = speakers(5, 3);
        let refs = windows(&full, &spec);
        assert_eq!(refs.len(), 1);
        let outs = vec![refs[0].reordered(&[1, 0])];
        let opt = stitch_optimal(&outs, &refs, &spec, 5).unwrap();
        let (loss, perm) = crate::assignment::pit_loss(&outs[0], &refs[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(opt.trace[0], perm);
        let def = stitch_default(&outs, &spec, 5).unwrap();
        assert_ne!(def.trace[0], opt.trace[0]);
    }

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn single_stream_output_is_the_mixture() {
        let layout = ModelLayout {
            streams: 1,
            bins: 129,
            input_frames: 3,
            output_frames: 3,
        };
        let model = Model::init(layout, &[8], StftConfig::default(), 8000, 1).unwrap();
        let mix = tone(440.0, 3000, 0.3);
        let sep = separate(&model, &mix, 1, AssignmentMode::Default, None).unwrap();
        assert_eq!(sep.waveforms.len(), 1);
        assert_eq!(sep.waveforms[0].len(), mix.len());
        assert!(sep.estimate.trace.iter().all(Permutation::is_identity));
        let mag = stft(&mix, &model.stft).unwrap().magnitude().into_values();
        let diff = (&sep.estimate.magnitudes.index_axis(Axis(0), 0) - &mag)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
        let cfg = model.stft;
        let interior = cfg.interior(mag.nrows());
        let err = sep.waveforms[0].samples()[interior.clone()]
            .iter()
            .zip(&mix.samples()[interior])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn separation_conserves_mixture_and_length() {
        let layout = ModelLayout {
            streams: 2,
            bins: 129,
            input_frames: 5,
            output_frames: 3,
        };
        let model = Model::init(layout, &[16], StftConfig::default(), 8000, 5).unwrap();
        let a = tone(300.0, 2500, 0.2);
        let b = tone(1200.0, 2500, 0.1);
        let mix = Waveform::new(
            a.samples()
                .iter()
                .zip(b.samples())
                .map(|(x, y)| x + y)
                .collect(),
            8000,
        )
        .unwrap();
        let refs = [a, b];
        assert!(matches!(
            separate(&model, &mix, 1, AssignmentMode::Optimal, None),
            Err(Error::MissingReferences)
        ));
        let mag = stft(&mix, &model.stft).unwrap().magnitude().into_values();
        for mode in AssignmentMode::ALL {
            let sep = separate(&model, &mix, 1, mode, Some(&refs)).unwrap();
            assert!(sep.waveforms.iter().all(|w| w.len() == mix.len()));
            let total = sep.estimate.magnitudes.sum_axis(Axis(0));
            for (t, m) in total.iter().zip(mag.iter()) {
                assert!((t - m).abs() <= 1e-6 * m.abs().max(1e-12), "{t} vs {m}");
            }
            assert_eq!(sep.metaframe_mse().unwrap().len(), mag.nrows());
        }
    }

    #[test]
    fn trace_csv_format() {
        let est = StitchedEstimate {
            magnitudes: Array3::zeros((2, 1, 1)),
            trace: vec![
                Permutation::identity(2),
                Permutation::new(vec![1, 0]).unwrap(),
            ],
            coverage: vec![1],
        };
        assert_eq!(est.trace_csv(), "metaframe_index,perm\n0,0 1\n1,1 0\n");
        assert_eq!(
            AssignmentMode::parse("greedy"),
            Some(AssignmentMode::Greedy)
        );
        assert_eq!(AssignmentMode::parse("x"), None);
    }
}
