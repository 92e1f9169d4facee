//! Meta-frame features and the mask-estimating network.

mod checkpoint;
mod metaframe;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use metaframe::{make_metaframes, metaframe_at, MetaFrame, MetaFramePool, MetaFrameSpec};
pub use network::{Dense, ForwardCache, Gradients, Mlp};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::{assigned_grad, pit_loss, Permutation};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::masking::{
    apply_masks, apply_masks_backward, loss_jx, softmax_backward, softmax_masks, MaskSet,
    StreamMagnitudes,
};
use crate::training::Criterion;

/// Shape of the separation problem a network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub streams: usize,
    pub bins: usize,
    pub input_frames: usize,
    pub output_frames: usize,
}

impl ModelLayout {
    pub fn input_dim(&self) -> usize {
        self.input_frames * self.bins
    }

    pub fn output_dim(&self) -> usize {
        self.streams * self.output_frames * self.bins
    }

    /// Meta-frame geometry at the given inference/training shift.
    pub fn metaframe_spec(&self, shift: usize) -> Result<MetaFrameSpec> {
        MetaFrameSpec::new(self.input_frames, self.output_frames, shift)
    }

    /// Network widths from input through `hidden` to the logit head.
    pub fn dims(&self, hidden: &[usize]) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(hidden.iter().copied())
            .chain(std::iter::once(self.output_dim()))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.streams == 0 || self.bins == 0 {
            return Err(Error::InvalidConfig("layout needs streams and bins".into()));
        }
        MetaFrameSpec::new(self.input_frames, self.output_frames, 1).map(|_| ())
    }
}

/// Per-bin mean and standard deviation of `ln(1 + |Y|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl FeatureNorm {
    pub fn identity(bins: usize) -> Self {
        Self {
            mean: Array1::zeros(bins),
            std: Array1::ones(bins),
        }
    }

    /// Statistics over every frame of the given magnitude spectrograms.
    pub fn fit<'a>(spectrograms: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sum_sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for mag in spectrograms {
            let logs = mag.mapv(f64::ln_1p);
            let s = logs.sum_axis(Axis(0));
            let q = logs.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sum_sq) {
                (Some(a), Some(b)) => {
                    if a.len() != s.len() {
                        return Err(Error::shape(a.len(), s.len()));
                    }
                    *a += &s;
                    *b += &q;
                }
                _ => {
                    sum = Some(s);
                    sum_sq = Some(q);
                }
            }
            count += mag.nrows();
        }
        let (Some(sum), Some(sum_sq)) = (sum, sum_sq) else {
            return Err(Error::InvalidConfig(
                "feature statistics need at least one spectrogram".into(),
            ));
        };
        let n = count.max(1) as f64;
        let mean = sum / n;
        let var = sum_sq / n - &mean * &mean;
        let std = var.mapv(|v| v.max(0.0).sqrt().max(1e-3));
        Ok(Self { mean, std })
    }

    pub fn bins(&self) -> usize {
        self.mean.len()
    }
}

/// A trained (or freshly initialized) separator with everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layout: ModelLayout,
    pub norm: FeatureNorm,
    pub net: Mlp,
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub seed: u64,
    pub epochs_completed: usize,
    pub learning_rate: f64,
}

/// Per-batch loss with parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean of the per-meta-frame losses.
    pub loss: f64,
    pub losses: Vec<f64>,
    pub permutations: Vec<Permutation>,
    pub gradients: Gradients,
}

impl Model {
    pub fn init(
        layout: ModelLayout,
        hidden: &[usize],
        stft: StftConfig,
        sample_rate: u32,
        seed: u64,
    ) -> Result<Self> {
        layout.validate()?;
        stft.validate()?;
        if stft.bins() != layout.bins {
            return Err(Error::shape(
                format!("{} bins", stft.bins()),
                format!("{} bins", layout.bins),
            ));
        }
        Ok(Self {
            layout,
            norm: FeatureNorm::identity(layout.bins),
            net: Mlp::init(&layout.dims(hidden), seed)?,
            stft,
            sample_rate,
            seed,
            epochs_completed: 0,
            learning_rate: 0.0,
        })
    }

    pub fn hidden(&self) -> Vec<usize> {
        let dims = self.net.dims();
        dims[1..dims.len() - 1].to_vec()
    }

    /// Log-compressed, normalized features of one meta-frame's stacked magnitudes.
    pub fn features(&self, raw: ArrayView1<f64>) -> Result<Array1<f64>> {
        if raw.len() != self.layout.input_dim() {
            return Err(Error::shape(self.layout.input_dim(), raw.len()));
        }
        let bins = self.layout.bins;
        Ok(Array1::from_iter(raw.iter().enumerate().map(|(i, v)| {
            let f = i % bins;
            (v.ln_1p() - self.norm.mean[f]) / self.norm.std[f]
        })))
    }

    pub fn feature_matrix(&self, batch: &[&MetaFrame]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((batch.len(), self.layout.input_dim()));
        for (mut row, mf) in x.rows_mut().into_iter().zip(batch) {
            row.assign(&self.features(mf.features.view())?);
        }
        Ok(x)
    }

    fn logits_to_tensor(&self, row: ArrayView1<f64>) -> Array3<f64> {
        let l = &self.layout;
        row.to_owned()
            .into_shape_with_order((l.streams, l.output_frames, l.bins))
            .expect("output head sized to layout")
    }

    /// Masks for every meta-frame of the batch.
    pub fn masks(&self, batch: &[&MetaFrame]) -> Result<Vec<MaskSet>> {
        let x = self.feature_matrix(batch)?;
        let (logits, _) = self.net.forward_batch(x.view())?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| softmax_masks(self.logits_to_tensor(row).view()))
            .collect())
    }

    /// Masked magnitude estimates for every meta-frame of the batch.
    pub fn estimate(&self, batch: &[&MetaFrame]) -> Result<Vec<StreamMagnitudes>> {
        self.masks(batch)?
            .iter()
            .zip(batch)
            .map(|(m, mf)| apply_masks(m, mf.mixture.view()))
            .collect()
    }

    /// Loss of one estimate under `criterion`, plus the gradient with respect to the estimate.
    fn criterion_loss(
        est: &StreamMagnitudes,
        refs: &StreamMagnitudes,
        criterion: Criterion,
    ) -> Result<(f64, Permutation, Array3<f64>)> {
        match criterion {
            Criterion::Pit => {
                let (loss, perm) = pit_loss(est, refs)?;
                let grad = assigned_grad(est, refs, &perm);
                Ok((loss, perm, grad))
            }
            Criterion::Conventional => {
                let (loss, grad) = loss_jx(est, refs)?;
                Ok((loss, Permutation::identity(est.streams()), grad))
            }
        }
    }

    fn references(mf: &MetaFrame) -> Result<&StreamMagnitudes> {
        mf.references.as_ref().ok_or(Error::MissingReferences)
    }

    /// Mean loss over the batch without gradients.
    pub fn evaluate(&self, batch: &[&MetaFrame], criterion: Criterion) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let estimates = self.estimate(batch)?;
        let mut total = 0.0;
        for (est, mf) in estimates.iter().zip(batch) {
            total += Self::criterion_loss(est, Self::references(mf)?, criterion)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss over the batch and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[&MetaFrame],
        criterion: Criterion,
    ) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let x = self.feature_matrix(batch)?;
        let (logits, cache) = self.net.forward_batch(x.view())?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad_logits = Array2::zeros(logits.dim());
        let mut losses = Vec::with_capacity(batch.len());
        let mut permutations = Vec::with_capacity(batch.len());
        for ((row, mut g_row), mf) in logits
            .rows()
            .into_iter()
            .zip(grad_logits.rows_mut())
            .zip(batch)
        {
            let masks = softmax_masks(self.logits_to_tensor(row).view());
            let est = apply_masks(&masks, mf.mixture.view())?;
            let (loss, perm, g_est) = Self::criterion_loss(&est, Self::references(mf)?, criterion)?;
            let g_masks = apply_masks_backward(g_est.view(), mf.mixture.view());
            let g_z = softmax_backward(&masks, g_masks.view()) * scale;
            g_row.assign(&Array1::from_iter(g_z));
            losses.push(loss);
            permutations.push(perm);
        }
        let gradients = self.net.backward(&cache, grad_logits.view())?;
        Ok(BatchResult {
            loss: losses.iter().sum::<f64>() * scale,
            losses,
            permutations,
            gradients,
        })
    }
}
