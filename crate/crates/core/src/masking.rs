//! Softmax masks, ideal ratio masks, and the mask/magnitude training criteria.
//!
//! All stream tensors are laid out as `streams x frames x bins`.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// Magnitude floor below which a mixture bin is treated as silent.
pub const SILENCE_FLOOR: f64 = 1e-8;

/// Nonnegative masks that sum to one across streams at every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet(Array3<f64>);

impl MaskSet {
    /// Wraps `values`, checking nonnegativity and the per-bin unit sum.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NonFinite("mask values must be nonnegative".into()));
        }
        let sums = values.sum_axis(Axis(0));
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidConfig(
                "masks must sum to one across streams".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    pub fn streams(&self) -> usize {
        self.0.dim().0
    }

    /// Largest deviation of the per-bin stream sum from one.
    pub fn max_sum_error(&self) -> f64 {
        self.0
            .sum_axis(Axis(0))
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-stream magnitude windows, estimated or reference.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMagnitudes(Array3<f64>);

impl StreamMagnitudes {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite(
                "stream magnitudes must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    pub fn streams(&self) -> usize {
        self.0.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    /// Streams reordered so that output `i` holds stream `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self(self.0.select(Axis(0), order))
    }
}

fn check_dims(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

fn check_window(streams: (usize, usize, usize), mix: ArrayView2<f64>) -> Result<()> {
    if (streams.1, streams.2) != mix.dim() {
        return Err(Error::shape(
            format!("{:?}", (streams.1, streams.2)),
            format!("{:?}", mix.dim()),
        ));
    }
    Ok(())
}

/// Softmax across the stream axis at every (frame, bin).
pub fn softmax_masks(logits: ArrayView3<f64>) -> MaskSet {
    let mut out = logits.to_owned();
    for mut lane in out.lanes_mut(Axis(0)) {
        let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|z| (z - max).exp());
        let sum: f64 = lane.sum();
        lane.mapv_inplace(|e| e / sum);
    }
    MaskSet(out)
}

/// Pulls a gradient with respect to the masks back through the softmax.
pub fn softmax_backward(masks: &MaskSet, grad_masks: ArrayView3<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(masks.0.dim());
    Zip::from(out.lanes_mut(Axis(0)))
        .and(masks.0.lanes(Axis(0)))
        .and(grad_masks.lanes(Axis(0)))
        .for_each(|mut g_out, m, g| {
            let dot: f64 = m.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for ((o, mi), gi) in g_out.iter_mut().zip(m.iter()).zip(g.iter()) {
                *o = mi * (gi - dot);
            }
        });
    out
}

/// Ideal ratio masks `|X_s| / |Y|`, renormalized across streams.
///
/// Bins whose mixture magnitude is at or below [`SILENCE_FLOOR`] get `1/S` per stream.
pub fn irm(refs: &StreamMagnitudes, mix: ArrayView2<f64>) -> Result<MaskSet> {
    let (streams, _, _) = refs.dim();
    check_window(refs.dim(), mix)?;
    let uniform = 1.0 / streams as f64;
    let mut out = refs.0.clone();
    Zip::from(out.lanes_mut(Axis(0)))
        .and(&mix)
        .for_each(|mut lane, &y| {
            if y <= SILENCE_FLOOR {
                lane.fill(uniform);
                return;
            }
            lane.mapv_inplace(|x| x / y);
            let sum: f64 = lane.sum();
            if sum > 0.0 {
                lane.mapv_inplace(|m| m / sum);
            } else {
                lane.fill(uniform);
            }
        });
    Ok(MaskSet(out))
}

/// Raw ratio `|X_s| / |Y|` without renormalization; silent bins get `1/S`.
pub fn raw_ratio_masks(refs: &StreamMagnitudes, mix: ArrayView2<f64>) -> Result<Array3<f64>> {
    check_window(refs.dim(), mix)?;
    let uniform = 1.0 / refs.streams() as f64;
    let mut out = refs.0.clone();
    Zip::from(out.lanes_mut(Axis(0)))
        .and(&mix)
        .for_each(|mut lane, &y| {
            if y <= SILENCE_FLOOR {
                lane.fill(uniform);
            } else {
                lane.mapv_inplace(|x| x / y);
            }
        });
    Ok(out)
}

/// Element-wise product of every mask stream with the mixture magnitude window.
pub fn apply_masks(masks: &MaskSet, mix: ArrayView2<f64>) -> Result<StreamMagnitudes> {
    check_window(masks.0.dim(), mix)?;
    let mut out = masks.0.clone();
    for mut stream in out.outer_iter_mut() {
        stream *= &mix;
    }
    Ok(StreamMagnitudes(out))
}

/// Gradient with respect to the masks given a gradient with respect to the masked magnitudes.
pub fn apply_masks_backward(grad_est: ArrayView3<f64>, mix: ArrayView2<f64>) -> Array3<f64> {
    let mut out = grad_est.to_owned();
    for mut stream in out.outer_iter_mut() {
        stream *= &mix;
    }
    out
}

fn mean_squared_error(a: &Array3<f64>, b: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = a.len().max(1) as f64;
    let diff = a - b;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff * (2.0 / n);
    (loss, grad)
}

/// Mask MSE, normalized by frames * bins * streams; returns the loss and its gradient
/// with respect to `masks`.
pub fn loss_jm(masks: &MaskSet, target: &MaskSet) -> Result<(f64, Array3<f64>)> {
    check_dims(masks.0.dim(), target.0.dim())?;
    Ok(mean_squared_error(&masks.0, &target.0))
}

/// Magnitude MSE, normalized by frames * bins * streams; returns the loss and its
/// gradient with respect to `est`.
pub fn loss_jx(est: &StreamMagnitudes, refs: &StreamMagnitudes) -> Result<(f64, Array3<f64>)> {
    check_dims(est.dim(), refs.dim())?;
    Ok(mean_squared_error(&est.0, &refs.0))
}
