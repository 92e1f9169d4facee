//! SDR scoring, oracle masks and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::{best_permutation, CostMatrix, Permutation};
use crate::corpus::MixtureSample;
use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::inference::{
    reference_magnitudes, resynthesize, separate_modes, AssignmentMode, Separation,
};
use crate::masking::{apply_masks, irm};
use crate::model::Model;

/// Bound on reported SDR magnitudes, in dB.
pub const SDR_CAP_DB: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gain-projected SDR in dB, clamped to `[-60, 60]`.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(reference.len(), est.len()));
    }
    let (e, r) = (est.samples(), reference.samples());
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::SilentReference);
    }
    let alpha = dot(e, r) / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = e.iter().zip(r).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    let db = if noise == 0.0 {
        SDR_CAP_DB
    } else if target == 0.0 {
        -SDR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// Mean over streams of `SDR(est_s, ref_s) - SDR(mixture, ref_s)`; streams must already be
/// paired with references. Returns the improvement and the per-stream SDRs.
pub fn sdr_improvement(
    est: &[Waveform],
    refs: &[Waveform],
    mixture: &Waveform,
) -> Result<(f64, Vec<f64>)> {
    if est.len() != refs.len() || est.is_empty() {
        return Err(Error::shape(refs.len(), est.len()));
    }
    let mut per_stream = Vec::with_capacity(est.len());
    let mut total = 0.0;
    for (e, r) in est.iter().zip(refs) {
        let s = sdr(e, r)?;
        total += s - sdr(mixture, r)?;
        per_stream.push(s);
    }
    Ok((total / est.len() as f64, per_stream))
}

/// Utterance-level pairing of estimates with references maximizing the mean SDR;
/// `est[i]` is paired with `refs[perm.target(i)]`.
pub fn best_pairing(est: &[Waveform], refs: &[Waveform]) -> Result<Permutation> {
    if est.len() != refs.len() {
        return Err(Error::shape(refs.len(), est.len()));
    }
    let rows = est
        .iter()
        .map(|e| refs.iter().map(|r| sdr(e, r).map(|v| -v)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(best_permutation(&CostMatrix::from_rows(&rows)?).0)
}

/// Estimates reordered so that entry `j` is the one paired with reference `j`.
pub fn paired<T: Clone>(est: &[T], perm: &Permutation) -> Vec<T> {
    let inv = perm.inverse();
    (0..est.len()).map(|j| est[inv.target(j)].clone()).collect()
}

/// Oracle separation: ideal ratio masks on the full spectrogram, resynthesized with the
/// mixture phase. Returns waveforms in reference order and the masked magnitudes.
pub fn irm_separate(
    mixture: &Waveform,
    refs: &[Waveform],
    cfg: &StftConfig,
) -> Result<(Vec<Waveform>, Array3<f64>)> {
    let complex = stft(mixture, cfg)?;
    let mag = complex.magnitude().into_values();
    let ref_mag = crate::masking::StreamMagnitudes::new(reference_magnitudes(refs, cfg)?)?;
    let masks = irm(&ref_mag, mag.view())?;
    let est = apply_masks(&masks, mag.view())?.into_values();
    let waves = resynthesize(
        &est,
        complex.phase().view(),
        cfg,
        mixture.sample_rate(),
        mixture.len(),
    )?;
    Ok((waves, est))
}

/// Label for a scored system: an assignment mode or the ideal-ratio-mask oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Assign(AssignmentMode),
    Irm,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Assign(m) => m.name(),
            EvalMode::Irm => "irm",
        }
    }
}

/// One scored (sample, system, window) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub split: String,
    pub mode: EvalMode,
    /// `None` for the oracle, which has no windows.
    pub in_window: Option<usize>,
    pub out_window: Option<usize>,
    /// Per-stream SDR in reference order.
    pub sdr: Vec<f64>,
    pub sdri: f64,
    /// Magnitude MSE of the stitched spectrograms against the paired references.
    pub mse: f64,
}

fn magnitude_mse(est: &Array3<f64>, refs: &Array3<f64>, perm: &Permutation) -> f64 {
    let mut total = 0.0;
    for (i, e) in est.outer_iter().enumerate() {
        let r = refs.index_axis(Axis(0), perm.target(i));
        total += e.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total / est.len().max(1) as f64
}

#[allow(clippy::too_many_arguments)]
fn record(
    id: &str,
    split: &str,
    mode: EvalMode,
    windows: Option<(usize, usize)>,
    est: &[Waveform],
    est_mag: &Array3<f64>,
    refs: &[Waveform],
    ref_mag: &Array3<f64>,
    mixture: &Waveform,
) -> Result<EvalRecord> {
    let perm = best_pairing(est, refs)?;
    let (sdri, sdr) = sdr_improvement(&paired(est, &perm), refs, mixture)?;
    Ok(EvalRecord {
        id: id.to_string(),
        split: split.to_string(),
        mode,
        in_window: windows.map(|w| w.0),
        out_window: windows.map(|w| w.1),
        sdr,
        sdri,
        mse: magnitude_mse(est_mag, ref_mag, &perm),
    })
}

/// Scores one sample under every requested mode; references are taken in speaker-id order.
pub fn evaluate_sample(
    model: &Model,
    id: &str,
    split: &str,
    sample: &MixtureSample,
    modes: &[AssignmentMode],
    shift: usize,
) -> Result<Vec<EvalRecord>> {
    Ok(evaluate_separations(model, id, split, sample, modes, shift)?.0)
}

/// [`evaluate_sample`] that also returns the separations behind each record.
pub fn evaluate_separations(
    model: &Model,
    id: &str,
    split: &str,
    sample: &MixtureSample,
    modes: &[AssignmentMode],
    shift: usize,
) -> Result<(Vec<EvalRecord>, Vec<Separation>)> {
    let refs: Vec<Waveform> = sample
        .references_by_speaker()
        .into_iter()
        .cloned()
        .collect();
    let ref_mag = reference_magnitudes(&refs, &model.stft)?;
    let windows = Some((model.layout.input_frames, model.layout.output_frames));
    let seps = separate_modes(model, &sample.mixture, shift, modes, Some(&refs))?;
    let records = seps
        .iter()
        .zip(modes)
        .map(|(sep, &mode)| {
            record(
                id,
                split,
                EvalMode::Assign(mode),
                windows,
                &sep.waveforms,
                &sep.estimate.magnitudes,
                &refs,
                &ref_mag,
                &sample.mixture,
            )
        })
        .collect::<Result<_>>()?;
    Ok((records, seps))
}

/// Scores the ideal-ratio-mask oracle on one sample.
pub fn evaluate_irm(
    id: &str,
    split: &str,
    sample: &MixtureSample,
    cfg: &StftConfig,
) -> Result<EvalRecord> {
    let refs: Vec<Waveform> = sample
        .references_by_speaker()
        .into_iter()
        .cloned()
        .collect();
    let (waves, est_mag) = irm_separate(&sample.mixture, &refs, cfg)?;
    let ref_mag = reference_magnitudes(&refs, cfg)?;
    record(
        id,
        split,
        EvalMode::Irm,
        None,
        &waves,
        &est_mag,
        &refs,
        &ref_mag,
        &sample.mixture,
    )
}

/// What to score in [`eval_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<AssignmentMode>,
    pub shift: usize,
    pub with_irm: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![AssignmentMode::Optimal, AssignmentMode::Default],
            shift: 1,
            with_irm: false,
        }
    }
}

/// Records for every (sample, model, mode), in sample order then model order, followed by
/// the oracle when requested. Sample failures carry the sample id.
pub fn eval_report(
    models: &[&Model],
    split: &str,
    samples: &[(String, MixtureSample)],
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    use rayon::prelude::*;
    let per_sample: Vec<Vec<EvalRecord>> = samples
        .par_iter()
        .map(|(id, sample)| {
            let mut out = Vec::new();
            for model in models {
                out.extend(evaluate_sample(
                    model, id, split, sample, &cfg.modes, cfg.shift,
                )?);
            }
            if cfg.with_irm {
                let stft_cfg = models.first().map(|m| m.stft).unwrap_or_default();
                out.push(evaluate_irm(id, split, sample, &stft_cfg)?);
            }
            Ok(out)
        })
        .zip(samples.par_iter())
        .map(|(r, (id, _)): (Result<Vec<EvalRecord>>, _)| {
            r.map_err(|e| e.context(format!("sample {id}")))
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Mean SDRi and MSE of one (split, mode, window) condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub split: String,
    pub mode: EvalMode,
    pub in_window: Option<usize>,
    pub out_window: Option<usize>,
    pub count: usize,
    pub sdri: f64,
    pub mse: f64,
}

type GroupKey = (String, EvalMode, Option<usize>, Option<usize>);

pub fn aggregate(records: &[EvalRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<GroupKey, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.split.clone(), r.mode, r.in_window, r.out_window))
            .or_default();
        g.0 += 1;
        g.1 += r.sdri;
        g.2 += r.mse;
    }
    groups
        .into_iter()
        .map(
            |((split, mode, in_window, out_window), (n, sdri, mse))| Aggregate {
                split,
                mode,
                in_window,
                out_window,
                count: n,
                sdri: sdri / n as f64,
                mse: mse / n as f64,
            },
        )
        .collect()
}

fn window(w: Option<usize>) -> String {
    w.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-record CSV; `streams` sets the number of `sdr_s*` columns when `records` is empty.
pub fn records_csv(records: &[EvalRecord], streams: usize) -> String {
    let streams = records.first().map_or(streams, |r| r.sdr.len());
    let mut out = String::from("id,split,mode,in_window,out_window");
    for s in 1..=streams {
        write!(out, ",sdr_s{s}").expect("writing to a String");
    }
    out.push_str(",sdri,mse\n");
    for r in records {
        write!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.split,
            r.mode.name(),
            window(r.in_window),
            window(r.out_window)
        )
        .expect("writing to a String");
        for v in &r.sdr {
            write!(out, ",{v}").expect("writing to a String");
        }
        writeln!(out, ",{},{}", r.sdri, r.mse).expect("writing to a String");
    }
    out
}

pub fn aggregate_csv(aggregates: &[Aggregate]) -> String {
    let mut out = String::from("split,mode,in_window,out_window,count,sdri,mse\n");
    for a in aggregates {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a.split,
            a.mode.name(),
            window(a.in_window),
            window(a.out_window),
            a.count,
            a.sdri,
            a.mse
        )
        .expect("writing to a String");
    }
    out
}

/// Writes `<stem>.csv` with every record and `<stem>.aggregate.csv` with condition means.
pub fn write_report(records: &[EvalRecord], streams: usize, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rec = dir.join(format!("{stem}.csv"));
    fs::write(&rec, records_csv(records, streams)).map_err(|e| Error::io(rec, e))?;
    let agg = dir.join(format!("{stem}.aggregate.csv"));
    fs::write(&agg, aggregate_csv(&aggregate(records))).map_err(|e| Error::io(agg, e))
}
