//! Feature-space baselines that feed a modified pooled feature back through
//! the classifier head and score the result with the energy score: ReAct
//! (clipping), ASH (pruning), DICE (weight sparsification), plus a KNN
//! distance score over a bank of normalized ID features.
//!
//! These are compact re-implementations with explicit, overridable
//! hyperparameters, not bit-level ports of the original reference code.

use crate::scoring::{energy_score, Element};
use crate::tensor_io::{Dataset, Label};
use crate::{Error, Result};

pub const DEFAULT_REACT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_ASH_KEEP_PERCENT: f64 = 10.0;
pub const DEFAULT_DICE_SPARSITY: f64 = 0.7;
pub const DEFAULT_KNN_K: usize = 50;
pub const DEFAULT_BANK_SIZE: usize = 50_000;

// Slack for percent-of-count products such as 10% of 30 landing at 3.0000000000000004.
const COUNT_SLACK: f64 = 1e-9;

/// Final fully connected layer, `logits = W · feature + b` with W stored
/// row-major as K×C.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    k: usize,
    c: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(k: usize, c: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if k < 2 || c < 1 {
            return Err(Error::InvalidArgument(format!(
                "head needs K >= 2 and C >= 1, got K={k} C={c}"
            )));
        }
        if weights.len() != k * c {
            return Err(Error::DimensionMismatch {
                what: "head weights".into(),
                expected: k * c,
                actual: weights.len(),
            });
        }
        if bias.len() != k {
            return Err(Error::DimensionMismatch {
                what: "head bias".into(),
                expected: k,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier head".into()));
        }
        Ok(Self { k, c, weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn num_features(&self) -> usize {
        self.c
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.c..(class + 1) * self.c]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_len(feature.len())?;
        Ok((0..self.k)
            .map(|i| dot(self.row(i), feature) + self.bias[i])
            .collect())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.c {
            return Err(Error::DimensionMismatch {
                what: "feature length vs head".into(),
                expected: self.c,
                actual: len,
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f64<T: Element>(feat: &[T]) -> Result<Vec<f64>> {
    let v: Vec<f64> = feat.iter().map(|&x| x.into()).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(v)
}

/// Energy of the unmodified feature passed through the head.
pub fn head_energy<T: Element>(feat: &[T], head: &ClassifierHead) -> Result<f64> {
    energy_score(&head.logits(&to_f64(feat)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub react_percentile: f64,
    pub bank_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            react_percentile: DEFAULT_REACT_PERCENTILE,
            bank_size: DEFAULT_BANK_SIZE,
        }
    }
}

/// Statistics gathered from ID pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub react_threshold: f64,
    pub mean_feature: Vec<f64>,
    /// Unit-norm rows, `bank_rows × C`.
    feature_bank: Vec<f64>,
    dim: usize,
}

impl CalibrationStats {
    pub fn new(react_threshold: f64, mean_feature: Vec<f64>, bank_rows: Vec<Vec<f64>>) -> Result<Self> {
        if !(react_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "react threshold must be > 0, got {react_threshold}"
            )));
        }
        let dim = mean_feature.len();
        let mut feature_bank = Vec::with_capacity(bank_rows.len() * dim);
        for row in bank_rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "feature bank row".into(),
                    expected: dim,
                    actual: row.len(),
                });
            }
            let n = norm(&row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::InvalidArgument("feature bank row has zero norm".into()));
            }
            feature_bank.extend(row.iter().map(|x| x / n));
        }
        Ok(Self {
            react_threshold,
            mean_feature,
            feature_bank,
            dim,
        })
    }

    pub fn bank_len(&self) -> usize {
        self.feature_bank.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn bank_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.feature_bank.chunks_exact(self.dim.max(1))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Percentile by rank on the sorted multiset: the element at 0-based
/// position `floor(p·N/100)`, clamped to the last element. For {1,1,3,3}
/// at p = 50 this is the third smallest value, 3.
pub fn rank_percentile(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input".into()));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = ((percentile * sorted.len() as f64 / 100.0) + COUNT_SLACK).floor() as usize;
    Ok(sorted[pos.min(sorted.len() - 1)])
}

/// Calibrates from an explicit list of ID features, in order.
pub fn calibrate_features<T: Element>(
    features: &[&[T]],
    head: &ClassifierHead,
    cfg: &CalibrationConfig,
) -> Result<CalibrationStats> {
    if features.is_empty() {
        return Err(Error::Empty("no ID features to calibrate on".into()));
    }
    let c = head.num_features();
    let mut entries = Vec::with_capacity(features.len() * c);
    let mut mean = vec![0.0f64; c];
    let mut bank = Vec::new();
    for f in features {
        head.check_len(f.len())?;
        let f = to_f64(f)?;
        for (m, x) in mean.iter_mut().zip(&f) {
            *m += x;
        }
        entries.extend_from_slice(&f);
        // Zero vectors have no direction and are left out of the bank.
        if bank.len() < cfg.bank_size && norm(&f) > 0.0 {
            bank.push(f);
        }
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let threshold = rank_percentile(&entries, cfg.react_percentile)?;
    CalibrationStats::new(threshold, mean, bank)
}

/// Calibrates on the ID-labelled records of a dataset, in manifest order.
pub fn calibrate(ds: &Dataset, head: &ClassifierHead, cfg: &CalibrationConfig) -> Result<CalibrationStats> {
    let mut feats = Vec::new();
    for r in ds.with_label(Label::Id) {
        match &r.feature {
            Some(f) => feats.push(f.as_slice()),
            None => {
                return Err(Error::Manifest(format!(
                    "ID sample {} has no pooled feature",
                    r.sample_id
                )))
            }
        }
    }
    calibrate_features(&feats, head, cfg)
}

/// Clips every feature entry at the calibrated threshold.
pub fn react_score<T: Element>(feat: &[T], head: &ClassifierHead, stats: &CalibrationStats) -> Result<f64> {
    let clipped: Vec<f64> = to_f64(feat)?
        .into_iter()
        .map(|x| x.min(stats.react_threshold))
        .collect();
    energy_score(&head.logits(&clipped)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AshVariant {
    /// Zero the pruned entries, keep survivors as they are.
    Prune,
    /// Zero the pruned entries and rescale survivors by exp(s1 / s2).
    #[default]
    Scale,
}

/// Indices sorted by value descending, lower index first among equals.
fn ranked_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn keep_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    ((raw - COUNT_SLACK).ceil().max(1.0) as usize).min(n)
}

/// The pruned (and possibly rescaled) feature that ASH feeds to the head.
pub fn ash_feature<T: Element>(feat: &[T], keep_percent: f64, variant: AshVariant) -> Result<Vec<f64>> {
    if !(keep_percent > 0.0 && keep_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "keep percent must lie in (0, 100], got {keep_percent}"
        )));
    }
    let f = to_f64(feat)?;
    if f.is_empty() {
        return Err(Error::Empty("feature vector".into()));
    }
    let n_keep = keep_count(keep_percent / 100.0, f.len());
    let mut out = vec![0.0; f.len()];
    for &i in &ranked_indices(&f)[..n_keep] {
        out[i] = f[i];
    }
    if variant == AshVariant::Scale {
        let before: f64 = f.iter().sum();
        let after: f64 = out.iter().sum();
        if after > 0.0 {
            let factor = (before / after).exp();
            out.iter_mut().for_each(|x| *x *= factor);
        }
    }
    Ok(out)
}

pub fn ash_score<T: Element>(
    feat: &[T],
    head: &ClassifierHead,
    keep_percent: f64,
    variant: AshVariant,
) -> Result<f64> {
    head.check_len(feat.len())?;
    energy_score(&head.logits(&ash_feature(feat, keep_percent, variant)?)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DiceMask {
    /// Top entries of each class row's contribution are kept.
    #[default]
    PerClass,
    /// Top entries of the whole K×C contribution matrix are kept.
    Global,
}

/// Classifier head with DICE's contribution-based weight mask applied.
/// Build once, score many features.
#[derive(Debug, Clone)]
pub struct DiceHead {
    masked: ClassifierHead,
}

impl DiceHead {
    pub fn new(head: &ClassifierHead, stats: &CalibrationStats, sparsity: f64, mask: DiceMask) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must lie in [0, 1), got {sparsity}"
            )));
        }
        if stats.mean_feature.is_empty() {
            return Err(Error::Empty("calibration mean feature".into()));
        }
        head.check_len(stats.mean_feature.len())?;
        let (k, c) = (head.num_classes(), head.num_features());
        let contrib: Vec<f64> = (0..k)
            .flat_map(|i| head.row(i).iter().zip(&stats.mean_feature).map(|(w, m)| w * m))
            .collect();
        let mut weights = vec![0.0; k * c];
        let keep_frac = 1.0 - sparsity;
        match mask {
            DiceMask::PerClass => {
                let n_keep = keep_count(keep_frac, c);
                for i in 0..k {
                    let row = &contrib[i * c..(i + 1) * c];
                    for &j in &ranked_indices(row)[..n_keep] {
                        weights[i * c + j] = head.row(i)[j];
                    }
                }
            }
            DiceMask::Global => {
                let n_keep = keep_count(keep_frac, k * c);
                for &flat in &ranked_indices(&contrib)[..n_keep] {
                    weights[flat] = head.weights[flat];
                }
            }
        }
        Ok(Self {
            masked: ClassifierHead::new(k, c, weights, head.bias.clone())?,
        })
    }

    pub fn masked_head(&self) -> &ClassifierHead {
        &self.masked
    }

    pub fn score<T: Element>(&self, feat: &[T]) -> Result<f64> {
        head_energy(feat, &self.masked)
    }
}

pub fn dice_score<T: Element>(
    feat: &[T],
    head: &ClassifierHead,
    stats: &CalibrationStats,
    sparsity: f64,
    mask: DiceMask,
) -> Result<f64> {
    head.check_len(feat.len())?;
    DiceHead::new(head, stats, sparsity, mask)?.score(feat)
}

/// Negative Euclidean distance from the normalized query to its k-th
/// nearest bank row.
pub fn knn_score<T: Element>(feat: &[T], stats: &CalibrationStats, k: usize) -> Result<f64> {
    let bank_len = stats.bank_len();
    if bank_len == 0 {
        return Err(Error::Empty("feature bank".into()));
    }
    if k == 0 || k > bank_len {
        return Err(Error::InvalidArgument(format!(
            "k must lie in [1, {bank_len}], got {k}"
        )));
    }
    if feat.len() != stats.dim {
        return Err(Error::DimensionMismatch {
            what: "feature length vs bank".into(),
            expected: stats.dim,
            actual: feat.len(),
        });
    }
    let q = to_f64(feat)?;
    let n = norm(&q);
    if n == 0.0 {
        return Err(Error::InvalidArgument("zero feature vector".into()));
    }
    let q: Vec<f64> = q.iter().map(|x| x / n).collect();
    let mut dists: Vec<f64> = stats
        .bank_rows()
        .map(|row| row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(-*kth)
}
