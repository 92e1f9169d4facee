//! Mini-batch SGD over meta-frames with plateau-driven learning-rate decay.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, MixtureSample};
use crate::dsp::{stft, StftConfig};
use crate::error::{Error, Result};
use crate::model::{FeatureNorm, MetaFrame, MetaFramePool, MetaFrameSpec, Mlp, Model, ModelLayout};

/// Which assignment the loss uses between outputs and references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// Best permutation per meta-frame.
    Pit,
    /// Fixed order: output `s` is scored against the `s`-th reference by ascending speaker id.
    Conventional,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Pit => "pit",
            Criterion::Conventional => "conventional",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "pit" => Some(Criterion::Pit),
            "conventional" => Some(Criterion::Conventional),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Meta-frames per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after `patience` epochs without validation gain.
    pub lr_decay: f64,
    pub patience: usize,
    pub momentum: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub input_frames: usize,
    pub output_frames: usize,
    pub shift: usize,
    pub hidden: Vec<usize>,
    /// Random subset of training meta-frames kept per run; all when `None`.
    pub max_train_metaframes: Option<usize>,
    pub max_valid_metaframes: Option<usize>,
    /// When set, every epoch draws this many fresh meta-frames from all training utterances
    /// instead of revisiting a fixed set.
    pub epoch_metaframes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 0.5,
            patience: 3,
            momentum: 0.9,
            seed: 0,
            criterion: Criterion::Pit,
            input_frames: 11,
            output_frames: 5,
            shift: 1,
            hidden: vec![128, 128, 128],
            max_train_metaframes: None,
            max_valid_metaframes: None,
            epoch_metaframes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if [
            self.max_train_metaframes,
            self.max_valid_metaframes,
            self.epoch_metaframes,
        ]
        .contains(&Some(0))
        {
            return bad("meta-frame limits must be positive");
        }
        if self.epoch_metaframes.is_some() && self.max_train_metaframes.is_some() {
            return bad("epoch_metaframes and max_train_metaframes are mutually exclusive");
        }
        self.metaframe_spec().map(|_| ())
    }

    pub fn metaframe_spec(&self) -> Result<MetaFrameSpec> {
        MetaFrameSpec::new(self.input_frames, self.output_frames, self.shift)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub const HEADER: &'static str = "epoch,train_mse,valid_mse,lr,seconds";

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_mse, r.valid_mse, r.lr, r.seconds
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(Error::InvalidConfig("training curve header missing".into()));
        }
        let epochs = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::InvalidConfig(format!("bad curve row: {line}")))
                };
                Ok(EpochRecord {
                    epoch: num(0)? as usize,
                    train_mse: num(1)?,
                    valid_mse: num(2)?,
                    lr: num(3)?,
                    seconds: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + g; p <- p - lr * v`, one slice pair per parameter block.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.len() != g.len() {
                return Err(Error::shape(p.len(), g.len()));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) || !lr.is_finite() {
            return Err(Error::NonFinite("gradient or learning rate".into()));
        }
        if self.velocity.len() != grads.len()
            || self
                .velocity
                .iter()
                .zip(&grads)
                .any(|(v, g)| v.len() != g.len())
        {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    pub fn step_mlp(
        &mut self,
        net: &mut Mlp,
        grads: &crate::model::Gradients,
        lr: f64,
    ) -> Result<()> {
        self.step(net.parameters_mut(), grads.slices(), lr)
    }
}

/// Stateless update `p <- p - lr * g`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    Sgd::new(0.0).step(vec![params], vec![grads], lr)
}

/// Magnitude spectrograms of a sample: mixture `T x F` and references (ascending speaker id)
/// `S x T x F`.
pub fn sample_magnitudes(
    sample: &MixtureSample,
    cfg: &StftConfig,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let mix = stft(&sample.mixture, cfg)?.magnitude().into_values();
    let refs = sample.references_by_speaker();
    let mut out = Array3::zeros((refs.len(), mix.nrows(), mix.ncols()));
    for (mut dst, r) in out.outer_iter_mut().zip(refs) {
        dst.assign(&stft(r, cfg)?.magnitude().into_values());
    }
    Ok((mix, out))
}

/// Spectrograms of every sample, ready to be cut into meta-frames.
pub fn build_pool(
    samples: &[MixtureSample],
    stft_cfg: &StftConfig,
    spec: &MetaFrameSpec,
) -> Result<MetaFramePool> {
    use rayon::prelude::*;
    let spectrograms: Vec<(Array2<f64>, Array3<f64>)> = samples
        .par_iter()
        .map(|s| sample_magnitudes(s, stft_cfg))
        .collect::<Result<_>>()?;
    let mut pool = MetaFramePool::new(*spec);
    for (mix, refs) in spectrograms {
        pool.push(mix, refs)?;
    }
    Ok(pool)
}

/// Seeded subset of `limit` pool indices in ascending order; everything when `None`.
fn subset(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(n) if n < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// All meta-frames of the samples with references attached; a seeded random subset of
/// `limit` frames when given.
pub fn collect_metaframes(
    samples: &[MixtureSample],
    stft_cfg: &StftConfig,
    spec: &MetaFrameSpec,
    limit: Option<usize>,
    seed: u64,
) -> Result<Vec<MetaFrame>> {
    let pool = build_pool(samples, stft_cfg, spec)?;
    Ok(pool.take(&subset(pool.len(), limit, seed)))
}

/// Feature statistics over the mixtures of the given samples.
pub fn fit_feature_norm(samples: &[MixtureSample], stft_cfg: &StftConfig) -> Result<FeatureNorm> {
    let mags = samples
        .iter()
        .map(|s| Ok(stft(&s.mixture, stft_cfg)?.magnitude().into_values()))
        .collect::<Result<Vec<_>>>()?;
    FeatureNorm::fit(mags.iter().map(|m| m.view()))
}

/// Loss of a batch under the fixed speaker-id ordering; no assignment search.
pub fn train_step_conventional(model: &Model, batch: &[&MetaFrame]) -> Result<f64> {
    model.evaluate(batch, Criterion::Conventional)
}

const EVAL_CHUNK: usize = 256;

fn mean_loss(model: &Model, frames: &[MetaFrame], criterion: Criterion) -> Result<f64> {
    if frames.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in frames.chunks(EVAL_CHUNK) {
        let refs: Vec<&MetaFrame> = chunk.iter().collect();
        total += model.evaluate(&refs, criterion)? * chunk.len() as f64;
    }
    Ok(total / frames.len() as f64)
}

/// Where each epoch's training meta-frames come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainSource<'a> {
    /// The same meta-frames every epoch, reshuffled.
    Fixed(&'a [MetaFrame]),
    /// `per_epoch` meta-frames drawn afresh from the pool every epoch.
    Pool {
        pool: &'a MetaFramePool,
        per_epoch: usize,
    },
}

impl TrainSource<'_> {
    fn is_empty(&self) -> bool {
        match self {
            TrainSource::Fixed(f) => f.is_empty(),
            TrainSource::Pool { pool, per_epoch } => pool.is_empty() || *per_epoch == 0,
        }
    }
}

/// Runs `cfg.epochs` epochs over a fixed set of meta-frames; see [`train_source`].
pub fn train_metaframes(
    cfg: &TrainConfig,
    model: Model,
    train: &[MetaFrame],
    valid: &[MetaFrame],
) -> Result<(Model, TrainingCurve)> {
    train_source(cfg, model, TrainSource::Fixed(train), valid)
}

/// Runs `cfg.epochs` epochs from `model`, returning the best-validation model and the curve.
///
/// Epoch numbering continues from `model.epochs_completed`; a positive `model.learning_rate`
/// (from a resumed checkpoint) takes precedence over the configured initial rate.
pub fn train_source(
    cfg: &TrainConfig,
    mut model: Model,
    train: TrainSource,
    valid: &[MetaFrame],
) -> Result<(Model, TrainingCurve)> {
    cfg.validate()?;
    let mut curve = TrainingCurve::default();
    let mut lr = if model.learning_rate > 0.0 {
        model.learning_rate
    } else {
        cfg.learning_rate
    };
    model.learning_rate = lr;
    if cfg.epochs == 0 {
        return Ok((model, curve));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs non-empty training and validation meta-frames".into(),
        ));
    }
    let mut sgd = Sgd::new(cfg.momentum);
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    let first_epoch = model.epochs_completed + 1;
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let drawn;
        let (frames, order): (&[MetaFrame], Vec<usize>) = match train {
            TrainSource::Fixed(frames) => {
                let mut order: Vec<usize> = (0..frames.len()).collect();
                order.shuffle(&mut rng);
                (frames, order)
            }
            TrainSource::Pool { pool, per_epoch } => {
                let n = per_epoch.min(pool.len());
                drawn = pool.take(&rand::seq::index::sample(&mut rng, pool.len(), n).into_vec());
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                (&drawn, order)
            }
        };
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&MetaFrame> = idx.iter().map(|&i| &frames[i]).collect();
            let result = model.loss_and_gradients(&batch, cfg.criterion)?;
            if !result.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            sgd.step_mlp(&mut model.net, &result.gradients, lr)
                .map_err(|e| e.context(format!("parameter update at epoch {epoch}")))?;
            total += result.loss * batch.len() as f64;
        }
        let train_mse = total / order.len() as f64;
        let valid_mse = mean_loss(&model, valid, cfg.criterion)?;
        if !valid_mse.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        curve.epochs.push(EpochRecord {
            epoch,
            train_mse,
            valid_mse,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_mse:.6} valid {valid_mse:.6} lr {lr}");
        model.epochs_completed = epoch;
        if best.as_ref().is_none_or(|(b, _)| valid_mse < *b) {
            stale = 0;
            best = Some((valid_mse, model.clone()));
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
        model.learning_rate = lr;
    }
    let (_, mut best) = best.expect("at least one epoch ran");
    best.epochs_completed = model.epochs_completed;
    best.learning_rate = lr;
    Ok((best, curve))
}

/// Trains from mixture samples: fits feature statistics (fresh models only), cuts meta-frames
/// and runs [`train_metaframes`]. Pass `resume` to continue a checkpoint.
pub fn train(
    cfg: &TrainConfig,
    stft_cfg: &StftConfig,
    train_samples: &[MixtureSample],
    valid_samples: &[MixtureSample],
    resume: Option<Model>,
) -> Result<(Model, TrainingCurve)> {
    cfg.validate()?;
    let spec = cfg.metaframe_spec()?;
    let model = match resume {
        Some(m) => {
            if m.stft != *stft_cfg
                || m.layout.input_frames != spec.input_frames
                || m.layout.output_frames != spec.output_frames
            {
                return Err(Error::InvalidConfig(
                    "checkpoint dimensions disagree with the training configuration".into(),
                ));
            }
            m
        }
        None => {
            let first = train_samples
                .first()
                .ok_or_else(|| Error::InvalidConfig("training needs at least one sample".into()))?;
            let layout = ModelLayout {
                streams: first.references.len(),
                bins: stft_cfg.bins(),
                input_frames: spec.input_frames,
                output_frames: spec.output_frames,
            };
            let mut m = Model::init(
                layout,
                &cfg.hidden,
                *stft_cfg,
                first.mixture.sample_rate(),
                cfg.seed,
            )?;
            m.norm = fit_feature_norm(train_samples, stft_cfg)?;
            m
        }
    };
    if cfg.epochs == 0 {
        return train_metaframes(cfg, model, &[], &[]);
    }
    if let Some(s) = train_samples
        .iter()
        .chain(valid_samples)
        .find(|s| s.references.len() != model.layout.streams)
    {
        return Err(Error::shape(
            format!("{} references", model.layout.streams),
            s.references.len(),
        ));
    }
    let valid_frames = collect_metaframes(
        valid_samples,
        stft_cfg,
        &spec,
        cfg.max_valid_metaframes,
        derive_seed(cfg.seed, 0x7661),
    )?;
    let pool = build_pool(train_samples, stft_cfg, &spec)?;
    match cfg.epoch_metaframes {
        Some(per_epoch) => train_source(
            cfg,
            model,
            TrainSource::Pool {
                pool: &pool,
                per_epoch,
            },
            &valid_frames,
        ),
        None => {
            let idx = subset(
                pool.len(),
                cfg.max_train_metaframes,
                derive_seed(cfg.seed, 0x7261),
            );
            let train_frames = pool.take(&idx);
            drop(pool);
            train_metaframes(cfg, model, &train_frames, &valid_frames)
        }
    }
}

/// Mean per-meta-frame loss over a set, for reporting.
pub fn evaluate_metaframes(
    model: &Model,
    frames: &[MetaFrame],
    criterion: Criterion,
) -> Result<f64> {
    mean_loss(model, frames, criterion)
}
