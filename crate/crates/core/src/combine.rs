//! Score fusion.
//!
//! A base score `b` (energy, MSP, ReAct, ...) is fused with the activation
//! prior score `s` as the weighted geometric mean `b^w · s^(1-w)`, evaluated
//! in the log domain. Non-positive bases are floored at `floor` so the
//! fractional power stays defined.

use crate::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombineConfig {
    w: f64,
    floor: f64,
}

impl CombineConfig {
    pub fn new(w: f64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidArgument(format!("w must lie in [0, 1], got {w}")));
        }
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(Error::InvalidArgument(format!("floor must be > 0, got {floor}")));
        }
        Ok(Self { w, floor })
    }

    pub fn with_weight(w: f64) -> Result<Self> {
        Self::new(w, DEFAULT_FLOOR)
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

/// `max(base, δ)^w · max(nap, δ)^(1-w)`. The endpoints return the floored
/// input unchanged, so w = 1 and w = 0 reproduce the single scores exactly.
pub fn combine_geometric(base: f64, nap: f64, cfg: &CombineConfig) -> Result<f64> {
    if !base.is_finite() || !nap.is_finite() {
        return Err(Error::NonFinite("combined score input".into()));
    }
    if nap < 0.0 {
        return Err(Error::InvalidArgument(format!("NAP score must be >= 0, got {nap}")));
    }
    let b = base.max(cfg.floor);
    let s = nap.max(cfg.floor);
    if cfg.w == 1.0 {
        return Ok(b);
    }
    if cfg.w == 0.0 {
        return Ok(s);
    }
    Ok((cfg.w * b.ln() + (1.0 - cfg.w) * s.ln()).exp())
}

/// Element-wise fusion of aligned score lists.
pub fn combine_all(base: &[f64], nap: &[f64], cfg: &CombineConfig) -> Result<Vec<f64>> {
    if base.len() != nap.len() {
        return Err(Error::DimensionMismatch {
            what: "base vs NAP score count".into(),
            expected: base.len(),
            actual: nap.len(),
        });
    }
    base.iter()
        .zip(nap)
        .map(|(&b, &s)| combine_geometric(b, s, cfg))
        .collect()
}

/// Product of per-layer scores.
pub fn combine_multilayer(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("multi-layer score list".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "layer scores must be finite and >= 0, got {s}"
        )));
    }
    Ok(scores.iter().product())
}
