//! Activation-prior scores and the logit-based scores they are combined with.
//!
//! For a post-ReLU feature map `A` of shape C×H×W taken right before global
//! pooling, the activation-prior score is
//!
//! ```text
//! S = (1/C) · Σ_j ( max(A_j) / (mean(A_j) + ε) )²
//! ```
//!
//! In-distribution inputs tend to produce a few strong responses per channel
//! on a weak background, which drives the per-channel max/mean ratio up even
//! when pooled means are indistinguishable.

use crate::tensor_io::Tensor;
use crate::{Error, Result};

/// Storage types accepted for activations and logits. Arithmetic is always
/// done in f64.
pub trait Element: Copy + Into<f64> {}
impl Element for f32 {}
impl Element for f64 {}

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NapConfig {
    pub epsilon: f64,
}

impl Default for NapConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NapConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }
}

/// Borrowed C×H×W view over non-negative activations.
#[derive(Debug, Clone, Copy)]
pub struct ActivationTensor<'a, T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    values: &'a [T],
}

impl<'a, T: Element> ActivationTensor<'a, T> {
    pub fn new(channels: usize, height: usize, width: usize, values: &'a [T]) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "activation dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let numel = channels * height * width;
        if values.len() != numel {
            return Err(Error::DimensionMismatch {
                what: "activation tensor".into(),
                expected: numel,
                actual: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            let v: f64 = v.into();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("activation element {i}")));
            }
            if v < 0.0 {
                return Err(Error::NegativeActivation {
                    context: format!("activation element {i}"),
                    value: v as f32,
                });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, j: usize) -> Result<&'a [T]> {
        if j >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {j} out of range for {} channels",
                self.channels
            )));
        }
        let hw = self.spatial_len();
        Ok(&self.values[j * hw..(j + 1) * hw])
    }
}

impl<'a> ActivationTensor<'a, f32> {
    /// Views a loaded 3-d tensor as C×H×W activations.
    pub fn from_tensor(t: &'a Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => Self::new(c, h, w, t.data()),
            _ => Err(Error::InvalidArgument(format!(
                "expected a C x H x W activation tensor, got dims {:?}",
                t.dims()
            ))),
        }
    }
}

fn slice_max<T: Element>(slice: &[T]) -> f64 {
    slice.iter().map(|&v| v.into()).fold(0.0, f64::max)
}

fn slice_mean<T: Element>(slice: &[T]) -> f64 {
    let sum: f64 = slice.iter().map(|&v| v.into()).sum();
    sum / slice.len() as f64
}

pub fn channel_max<T: Element>(a: &ActivationTensor<'_, T>, j: usize) -> Result<f64> {
    Ok(slice_max(a.channel(j)?))
}

pub fn channel_mean<T: Element>(a: &ActivationTensor<'_, T>, j: usize) -> Result<f64> {
    Ok(slice_mean(a.channel(j)?))
}

/// Mean over channels of the squared max/(mean + ε) ratio.
pub fn nap_score<T: Element>(a: &ActivationTensor<'_, T>, cfg: &NapConfig) -> Result<f64> {
    let hw = a.spatial_len();
    let mut total = 0.0f64;
    for (j, slice) in a.values.chunks_exact(hw).enumerate() {
        let max = slice_max(slice);
        let denom = slice_mean(slice) + cfg.epsilon;
        if denom == 0.0 {
            return Err(Error::DivisionByZero { channel: j });
        }
        let ratio = max / denom;
        total += ratio * ratio;
    }
    Ok(total / a.channels as f64)
}

/// Whether the cls token's attention to itself takes part in the max.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ClsSelfAttention {
    #[default]
    Include,
    Exclude,
}

/// cls-token attention weights from the last transformer block, length l+1
/// with the cls token itself at index 0.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVector<'a, T = f32> {
    weights: &'a [T],
}

impl<'a, T: Element> AttentionVector<'a, T> {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(weights: &'a [T]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("attention vector".into()));
        }
        if weights.len() < 2 {
            return Err(Error::InvalidArgument(
                "attention vector needs at least one token besides cls".into(),
            ));
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let w: f64 = w.into();
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "attention weight {i} = {w} is not a probability"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "attention weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    pub fn sequence_len(&self) -> usize {
        self.weights.len() - 1
    }
}

impl<'a> AttentionVector<'a, f32> {
    pub fn from_tensor(t: &'a Tensor) -> Result<Self> {
        if t.ndim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "attention vector must be 1-d, got dims {:?}",
                t.dims()
            )));
        }
        Self::new(t.data())
    }
}

/// Transformer variant: the attention vector's mean is fixed at 1/(l+1), so
/// the score reduces to its max.
pub fn nap_former_score<T: Element>(att: &AttentionVector<'_, T>, cls: ClsSelfAttention) -> f64 {
    let w = match cls {
        ClsSelfAttention::Include => att.weights,
        ClsSelfAttention::Exclude => &att.weights[1..],
    };
    w.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max)
}

fn check_logits<T: Element>(z: &[T]) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 logits, got {}",
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|&v| !v.into().is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    Ok(())
}

fn max_of<T: Element>(z: &[T]) -> f64 {
    z.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max)
}

/// Negative free energy, `log Σ exp(z_i)`.
pub fn energy_score<T: Element>(logits: &[T]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    let s: f64 = logits.iter().map(|&v| (v.into() - m).exp()).sum();
    Ok(m + s.ln())
}

/// Maximum softmax probability.
pub fn msp_score<T: Element>(logits: &[T]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    let s: f64 = logits.iter().map(|&v| (v.into() - m).exp()).sum();
    Ok(1.0 / s)
}
