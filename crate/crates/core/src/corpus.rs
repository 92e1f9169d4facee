//! Synthetic harmonic "speakers", SNR mixing, and train/valid/test manifests.
//!
//! Speakers are pitch-distinguished harmonic sources with syllable-rate amplitude
//! modulation and silent pauses. Speaker ids are shuffled independently of pitch, so
//! an ordering by id carries no acoustic cue.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};

/// Mixes two values into a new seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Fundamental frequency bounds in Hz.
    pub f0_range: (f64, f64),
    pub harmonic_count: usize,
    /// Expected fraction of silent time.
    pub pause_rate: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f0_range;
        if !(lo > 50.0 && hi < 500.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "speaker {}: f0 range {:?} must lie within (50, 500) Hz",
                self.speaker_id, self.f0_range
            )));
        }
        if !(0.0..1.0).contains(&self.pause_rate) {
            return Err(Error::InvalidConfig(format!(
                "speaker {}: pause rate {} outside [0, 1)",
                self.speaker_id, self.pause_rate
            )));
        }
        if self.harmonic_count == 0 {
            return Err(Error::InvalidConfig(format!(
                "speaker {}: needs at least one harmonic",
                self.speaker_id
            )));
        }
        Ok(())
    }

    /// Relative harmonic amplitudes: a speaker-specific spectral tilt with jitter.
    fn harmonic_amplitudes(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let tilt = rng.gen_range(0.4..1.2);
        (1..=self.harmonic_count)
            .map(|k| (k as f64).powf(-tilt) * rng.gen_range(0.5..1.0))
            .collect()
    }
}

/// Piecewise-linear random contour through control points spaced `step` samples apart.
fn contour(len: usize, step: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let points: Vec<f64> = (0..=len / step + 1)
        .map(|_| rng.gen_range(lo..=hi))
        .collect();
    (0..len)
        .map(|n| {
            let i = n / step;
            let frac = (n % step) as f64 / step as f64;
            points[i] * (1.0 - frac) + points[i + 1] * frac
        })
        .collect()
}

/// Voiced/paused gating with short linear ramps at the segment edges.
fn pause_gate(len: usize, sample_rate: u32, pause_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut gate = vec![1.0; len];
    if pause_rate <= 0.0 {
        return gate;
    }
    let sr = sample_rate as f64;
    let ramp = ((0.005 * sr) as usize).max(1);
    let ratio = pause_rate / (1.0 - pause_rate);
    // start partway into a voiced segment
    let mut pos = -(rng.gen_range(0.0..0.3) * sr) as isize;
    while (pos as i64) < len as i64 {
        let voiced = rng.gen_range(0.15..0.5) * sr;
        let pause = voiced * ratio * rng.gen_range(0.6..1.4);
        let start = pos + voiced as isize;
        let end = start + pause as isize;
        for n in start.max(0)..end.min(len as isize) {
            let n = n as usize;
            let from_start = (n as isize - start) as usize;
            let to_end = (end - n as isize) as usize;
            let edge = from_start.min(to_end);
            gate[n] = if edge < ramp {
                1.0 - edge as f64 / ramp as f64
            } else {
                0.0
            };
        }
        pos = end;
    }
    gate
}

/// Harmonic tone with drifting f0, amplitude envelope, and pauses; peak normalized to 0.5.
pub fn synth_source(
    profile: &SpeakerProfile,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    profile.validate()?;
    if !(duration > 0.0) || sample_rate == 0 {
        return Err(Error::InvalidConfig(format!(
            "duration {duration} s at {sample_rate} Hz"
        )));
    }
    let len = (duration * sample_rate as f64).round().max(1.0) as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, seed));
    let amps = profile.harmonic_amplitudes();
    let (lo, hi) = profile.f0_range;

    let f0 = contour(len, (0.12 * sr) as usize + 1, lo, hi, &mut rng);
    let envelope = contour(len, (0.06 * sr) as usize + 1, 0.4, 1.0, &mut rng);
    let gate = pause_gate(len, sample_rate, profile.pause_rate, &mut rng);

    let mut phases: Vec<f64> = (0..amps.len())
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let nyquist_guard = 0.45 * sr;
    let mut samples = vec![0.0; len];
    for n in 0..len {
        let mut x = 0.0;
        for (k, (phase, amp)) in phases.iter_mut().zip(&amps).enumerate() {
            let freq = f0[n] * (k + 1) as f64;
            if freq < nyquist_guard {
                x += amp * phase.sin();
            }
            *phase = (*phase + 2.0 * PI * freq / sr) % (2.0 * PI);
        }
        samples[n] = x * envelope[n] * gate[n];
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    Waveform::new(samples, sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub references: Vec<Waveform>,
    pub snr_db: f64,
    pub speaker_ids: Vec<u32>,
}

fn sum_references(refs: &[Waveform]) -> Result<Waveform> {
    let len = refs[0].len();
    let mut mix = vec![0.0; len];
    for r in refs {
        for (m, x) in mix.iter_mut().zip(r.samples()) {
            *m += x;
        }
    }
    Waveform::new(mix, refs[0].sample_rate())
}

impl MixtureSample {
    /// Scales every reference by `gain` and recomputes the mixture as their exact sum.
    pub fn rescaled(&self, gain: f64) -> Result<Self> {
        let references: Vec<Waveform> = self.references.iter().map(|r| r.scaled(gain)).collect();
        Ok(Self {
            mixture: sum_references(&references)?,
            references,
            snr_db: self.snr_db,
            speaker_ids: self.speaker_ids.clone(),
        })
    }

    /// References ordered by ascending speaker id.
    pub fn references_by_speaker(&self) -> Vec<&Waveform> {
        let mut order: Vec<usize> = (0..self.references.len()).collect();
        order.sort_by_key(|&i| self.speaker_ids[i]);
        order.into_iter().map(|i| &self.references[i]).collect()
    }
}

/// Mixes sources so that power(source 1) / power(source s) = 10^(snr_db / 10) for s > 1.
/// Shorter sources are zero-padded to the longest.
pub fn mix(sources: &[Waveform], snr_db: f64) -> Result<MixtureSample> {
    if sources.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "mixing needs at least two sources, got {}",
            sources.len()
        )));
    }
    let sample_rate = sources[0].sample_rate();
    if sources.iter().any(|s| s.sample_rate() != sample_rate) {
        return Err(Error::InvalidConfig("sources differ in sample rate".into()));
    }
    let len = sources.iter().map(Waveform::len).max().unwrap_or(0);
    let padded: Vec<Waveform> = sources.iter().map(|s| s.resized(len)).collect();
    let powers: Vec<f64> = padded.iter().map(Waveform::power).collect();
    if let Some(i) = powers.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::SilentSource(i));
    }
    let ratio = 10f64.powf(snr_db / 10.0);
    let references: Vec<Waveform> = padded
        .iter()
        .zip(&powers)
        .enumerate()
        .map(|(i, (s, &p))| {
            if i == 0 {
                s.clone()
            } else {
                s.scaled((powers[0] / (p * ratio)).sqrt())
            }
        })
        .collect();
    Ok(MixtureSample {
        mixture: sum_references(&references)?,
        references,
        snr_db,
        speaker_ids: (0..sources.len() as u32).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    TestCc,
    TestOc,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::TestCc, Split::TestOc];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestCc => "test-cc",
            Split::TestOc => "test-oc",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    /// Utterance duration in seconds.
    pub duration: f64,
    pub sources: usize,
    pub train_speakers: usize,
    pub heldout_speakers: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test_cc: usize,
    pub num_test_oc: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub pause_rate: (f64, f64),
    pub harmonics: (usize, usize),
    /// RMS level each mixture is normalized to before peak limiting.
    pub mixture_rms: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration: 1.0,
            sources: 2,
            train_speakers: 20,
            heldout_speakers: 10,
            num_train: 1000,
            num_valid: 200,
            num_test_cc: 200,
            num_test_oc: 200,
            snr_min_db: 0.0,
            snr_max_db: 5.0,
            pause_rate: (0.1, 0.3),
            harmonics: (8, 16),
            mixture_rms: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sources < 2 {
            return bad(format!("need at least 2 sources, got {}", self.sources));
        }
        if self.train_speakers < self.sources {
            return bad(format!(
                "{} training speakers cannot form {}-speaker mixtures",
                self.train_speakers, self.sources
            ));
        }
        if self.num_test_oc > 0 && self.heldout_speakers < self.sources {
            return bad(format!(
                "{} held-out speakers cannot form {}-speaker open-condition mixtures",
                self.heldout_speakers, self.sources
            ));
        }
        if !(self.snr_min_db <= self.snr_max_db) {
            return bad("snr_min_db exceeds snr_max_db".into());
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 || !(self.mixture_rms > 0.0) {
            return bad("duration, sample rate and mixture level must be positive".into());
        }
        let (plo, phi) = self.pause_rate;
        if !(0.0 <= plo && plo <= phi && phi < 1.0) {
            return bad(format!("pause rate range {:?}", self.pause_rate));
        }
        if self.harmonics.0 == 0 || self.harmonics.0 > self.harmonics.1 {
            return bad(format!("harmonic range {:?}", self.harmonics));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Valid => self.num_valid,
            Split::TestCc => self.num_test_cc,
            Split::TestOc => self.num_test_oc,
        }
    }
}

/// Speaker pools: low- and high-pitched profiles alternate, ids are shuffled.
pub fn speaker_pool(cfg: &CorpusConfig, seed: u64) -> (Vec<SpeakerProfile>, Vec<SpeakerProfile>) {
    let total = cfg.train_speakers + cfg.heldout_speakers;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed_5bea_4e25));
    let mut ids: Vec<u32> = (0..total as u32).collect();
    ids.shuffle(&mut rng);
    let profiles: Vec<SpeakerProfile> = ids
        .into_iter()
        .enumerate()
        .map(|(i, speaker_id)| {
            let centre = if i % 2 == 0 {
                rng.gen_range(90.0..150.0)
            } else {
                rng.gen_range(170.0..280.0)
            };
            let spread = rng.gen_range(0.06..0.15);
            SpeakerProfile {
                speaker_id,
                f0_range: (centre * (1.0 - spread), centre * (1.0 + spread)),
                harmonic_count: rng.gen_range(cfg.harmonics.0..=cfg.harmonics.1),
                pause_rate: rng.gen_range(cfg.pause_rate.0..=cfg.pause_rate.1),
                seed: rng.gen(),
            }
        })
        .collect();
    let heldout = profiles[cfg.train_speakers..].to_vec();
    let mut train = profiles;
    train.truncate(cfg.train_speakers);
    (train, heldout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub mixture_path: String,
    pub reference_paths: Vec<String>,
    pub snr_db: f64,
    pub speaker_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub samples: Vec<MixtureSample>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub train_speakers: Vec<SpeakerProfile>,
    pub heldout_speakers: Vec<SpeakerProfile>,
    pub splits: Vec<SplitData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        self.splits
            .iter()
            .find(|s| s.manifest.split == split)
            .expect("every split is generated")
    }
}

fn generate_sample(
    cfg: &CorpusConfig,
    pool: &[SpeakerProfile],
    seed: u64,
    split: Split,
    index: usize,
) -> Result<MixtureSample> {
    let sample_seed = derive_seed(derive_seed(seed, split as u64 + 1), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let speakers: Vec<&SpeakerProfile> = pool.choose_multiple(&mut rng, cfg.sources).collect();
    let snr_db = if cfg.snr_max_db > cfg.snr_min_db {
        rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db)
    } else {
        cfg.snr_min_db
    };
    let sources = speakers
        .iter()
        .map(|p| synth_source(p, cfg.duration, cfg.sample_rate, rng.gen()))
        .collect::<Result<Vec<_>>>()?;
    let mut sample = mix(&sources, snr_db)?;
    sample.speaker_ids = speakers.iter().map(|p| p.speaker_id).collect();
    let rms = sample.mixture.power().sqrt();
    let peak = sample
        .mixture
        .samples()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = (cfg.mixture_rms / rms).min(0.95 / peak);
    sample.rescaled(gain)
}

/// Generates every split in memory. Train, valid and test-cc draw from the training
/// speakers; test-oc only from the held-out speakers.
pub fn build_dataset(cfg: &CorpusConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let (train_speakers, heldout_speakers) = speaker_pool(cfg, seed);
    let splits = Split::ALL
        .into_iter()
        .map(|split| {
            let pool = if split == Split::TestOc {
                &heldout_speakers
            } else {
                &train_speakers
            };
            let samples = (0..cfg.count(split))
                .into_par_iter()
                .map(|i| generate_sample(cfg, pool, seed, split, i))
                .collect::<Result<Vec<_>>>()?;
            let records = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let id = format!("{}-{i:05}", split.name());
                    SampleRecord {
                        mixture_path: format!("{}/{id}.mix.wav", split.name()),
                        reference_paths: (1..=s.references.len())
                            .map(|k| format!("{}/{id}.s{k}.wav", split.name()))
                            .collect(),
                        snr_db: s.snr_db,
                        speaker_ids: s.speaker_ids.clone(),
                        id,
                    }
                })
                .collect();
            Ok(SplitData {
                manifest: DatasetManifest {
                    split,
                    seed,
                    records,
                },
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        train_speakers,
        heldout_speakers,
        splits,
    })
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes `<split>.jsonl` manifests plus one WAV per mixture and reference.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for split in &dataset.splits {
        let sub = dir.join(split.manifest.split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        split
            .samples
            .par_iter()
            .zip(&split.manifest.records)
            .try_for_each(|(sample, record)| -> Result<()> {
                write_wav(dir.join(&record.mixture_path), &sample.mixture)?;
                for (path, r) in record.reference_paths.iter().zip(&sample.references) {
                    write_wav(dir.join(path), r)?;
                }
                Ok(())
            })?;
        write_manifest(
            &manifest_path(dir, split.manifest.split),
            &split.manifest.records,
        )?;
    }
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::from(e).context(format!("{} line {}", path.display(), n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Loads the audio of one record; paths are resolved against `root`.
pub fn load_sample(root: &Path, record: &SampleRecord) -> Result<MixtureSample> {
    let load = || -> Result<MixtureSample> {
        let mixture = read_wav(root.join(&record.mixture_path))?;
        let references = record
            .reference_paths
            .iter()
            .map(|p| read_wav(root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if references.iter().any(|r| r.len() != mixture.len()) {
            return Err(Error::shape(
                format!("{} samples per reference", mixture.len()),
                "references of different length",
            ));
        }
        if record.speaker_ids.len() != references.len() {
            return Err(Error::shape(
                format!("{} speaker ids", references.len()),
                record.speaker_ids.len(),
            ));
        }
        Ok(MixtureSample {
            mixture,
            references,
            snr_db: record.snr_db,
            speaker_ids: record.speaker_ids.clone(),
        })
    };
    load().map_err(|e| e.context(format!("sample {}", record.id)))
}

/// Reads a manifest and all audio it lists.
pub fn load_split(manifest: &Path) -> Result<(Vec<SampleRecord>, Vec<MixtureSample>)> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    let samples = records
        .par_iter()
        .map(|r| load_sample(root, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, samples))
}
