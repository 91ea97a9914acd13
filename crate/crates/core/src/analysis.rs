//! Plot data: per-channel (mean, max) activation pairs and score histograms.

use std::path::Path;

use rayon::prelude::*;

use crate::csv_io::{create, finish, format_sig17};
use crate::scoring::{channel_max, channel_mean, ActivationTensor};
use crate::tensor_io::{Dataset, Label};
use crate::{Error, Result};

/// Channels whose mean activation falls below this are dropped by default.
pub const DEFAULT_MIN_MEAN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatRow {
    pub sample_id: String,
    pub label: Label,
    pub layer: String,
    pub channel: usize,
    pub mean: f64,
    pub max: f64,
}

/// One row per (sample, channel) with mean ≥ `min_mean`, sorted by sample id
/// then channel.
pub fn channel_stats(ds: &Dataset, layer: &str, min_mean: f64) -> Result<Vec<ChannelStatRow>> {
    let per_sample: Vec<Result<Vec<ChannelStatRow>>> = ds
        .records
        .par_iter()
        .map(|r| {
            let t = r.activations.get(layer).ok_or_else(|| {
                Error::InvalidArgument(format!("sample {} has no layer {layer:?}", r.sample_id))
            })?;
            let a = ActivationTensor::from_tensor(t)?;
            let mut rows = Vec::new();
            for j in 0..a.channels() {
                let mean = channel_mean(&a, j)?;
                if mean >= min_mean {
                    rows.push(ChannelStatRow {
                        sample_id: r.sample_id.clone(),
                        label: r.label,
                        layer: layer.to_string(),
                        channel: j,
                        mean,
                        max: channel_max(&a, j)?,
                    });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_sample {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.channel.cmp(&b.channel)));
    Ok(rows)
}

pub fn write_channel_stats_csv(path: impl AsRef<Path>, rows: &[ChannelStatRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["sample_id", "label", "layer", "channel", "mean", "max"])?;
    for r in rows {
        w.write_record([
            r.sample_id.as_str(),
            r.label.as_str(),
            r.layer.as_str(),
            &r.channel.to_string(),
            &format_sig17(r.mean),
            &format_sig17(r.max),
        ])?;
    }
    let inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    finish(path, inner)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<HistBin>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn in_range(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Left edge of bin `i` of `bins` equal-width bins over [lo, hi].
fn edge(lo: f64, hi: f64, bins: usize, i: usize) -> f64 {
    if i == bins {
        hi
    } else {
        lo + (hi - lo) * i as f64 / bins as f64
    }
}

/// Equal-width histogram over [lo, hi]. Bins are half-open except the last,
/// which includes `hi`. Scores outside the range are counted separately.
pub fn score_histogram(scores: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid range ({lo}, {hi})")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    let mut counts = vec![0usize; bins];
    let (mut below, mut above) = (0, 0);
    for &s in scores {
        if s < lo {
            below += 1;
            continue;
        }
        if s > hi {
            above += 1;
            continue;
        }
        let guess = ((s - lo) / (hi - lo) * bins as f64).floor();
        let mut i = (guess.max(0.0) as usize).min(bins - 1);
        // settle on the bin whose computed edges contain s
        while i > 0 && s < edge(lo, hi, bins, i) {
            i -= 1;
        }
        while i + 1 < bins && s >= edge(lo, hi, bins, i + 1) {
            i += 1;
        }
        counts[i] += 1;
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            lo: edge(lo, hi, bins, i),
            hi: edge(lo, hi, bins, i + 1),
            count,
        })
        .collect();
    Ok(Histogram { bins, below, above })
}

pub fn write_histogram_csv(path: impl AsRef<Path>, hist: &Histogram) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for b in &hist.bins {
        w.write_record([format_sig17(b.lo), format_sig17(b.hi), b.count.to_string()])?;
    }
    let inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    finish(path, inner)
}
