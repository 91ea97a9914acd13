//! OOD evaluation: AUROC, FPR at a target TPR, and the ROC curve.
//!
//! ID is the positive class and a sample counts as ID when its score is at
//! or above the threshold.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

/// Scored ID and OOD samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<(String, f64)>,
    pub ood_scores: Vec<(String, f64)>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<(String, f64)>, ood_scores: Vec<(String, f64)>) -> Self {
        Self { id_scores, ood_scores }
    }

    /// Anonymous samples, named by position.
    pub fn from_values(id: &[f64], ood: &[f64]) -> Self {
        let name = |prefix: &str, v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &s)| (format!("{prefix}{i}"), s))
                .collect()
        };
        Self::new(name("id", id), name("ood", ood))
    }

    fn id_values(&self) -> Vec<f64> {
        self.id_scores.iter().map(|p| p.1).collect()
    }

    fn ood_values(&self) -> Vec<f64> {
        self.ood_scores.iter().map(|p| p.1).collect()
    }

    fn validate(&self) -> Result<()> {
        check_scores(&self.id_values(), &self.ood_values())
    }
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Empty("ID scores".into()));
    }
    if ood.is_empty() {
        return Err(Error::Empty("OOD scores".into()));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score set".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC over raw score slices, ties counting one half.
///
/// The pair count is accumulated in integers (doubled to keep the halves
/// integral) so the result equals a pairwise count divided by n_id·n_ood.
pub fn auroc_values(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut id = id.to_vec();
    let mut ood = ood.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);

    let mut twice_wins: u128 = 0;
    let mut below = 0usize; // OOD scores strictly below the current ID group
    let mut i = 0;
    while i < id.len() {
        let v = id[i];
        let mut j = i;
        while j < id.len() && id[j] == v {
            j += 1;
        }
        while below < ood.len() && ood[below] < v {
            below += 1;
        }
        let mut eq = below;
        while eq < ood.len() && ood[eq] == v {
            eq += 1;
        }
        let group = (j - i) as u128;
        twice_wins += group * (2 * below as u128 + (eq - below) as u128);
        i = j;
    }
    let pairs = 2 * id.len() as u128 * ood.len() as u128;
    Ok(twice_wins as f64 / pairs as f64)
}

pub fn auroc(s: &ScoreSet) -> Result<f64> {
    auroc_values(&s.id_values(), &s.ood_values())
}

/// Number of ID samples that must be retained for a TPR target.
pub fn required_positives(tpr_target: f64, n_id: usize) -> Result<usize> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "TPR target must lie in (0, 1], got {tpr_target}"
        )));
    }
    // 1e-9 slack so 0.95 · 100 is 95 rather than 96 after rounding
    let need = (tpr_target * n_id as f64 - 1e-9).ceil() as usize;
    Ok(need.clamp(1, n_id))
}

/// FPR at the largest threshold that still keeps ⌈tpr·n_id⌉ ID samples.
pub fn fpr_at_tpr_values(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores(id, ood)?;
    let need = required_positives(tpr_target, id.len())?;
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let threshold = desc[need - 1];
    let false_pos = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(false_pos as f64 / ood.len() as f64)
}

pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> Result<f64> {
    fpr_at_tpr_values(&s.id_values(), &s.ood_values(), tpr_target)
}

/// ROC points for descending thresholds, one per distinct score, from
/// (0, 0) to (1, 1). Tied ID and OOD scores move both rates in one step.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    s.validate()?;
    let mut all: Vec<(f64, bool, &str)> = s
        .id_scores
        .iter()
        .map(|(n, v)| (*v, true, n.as_str()))
        .chain(s.ood_scores.iter().map(|(n, v)| (*v, false, n.as_str())))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.2.cmp(b.2)));

    let (n_id, n_ood) = (s.id_scores.len() as f64, s.ood_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(v, is_id, _)) in all.iter().enumerate() {
        if is_id {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = all.get(i + 1).is_none_or(|next| next.0 != v);
        if last_of_group {
            points.push((fp as f64 / n_ood, tp as f64 / n_id));
        }
    }
    Ok(points)
}

/// Trapezoidal area under a list of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub tpr_target: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub roc_points: Vec<(f64, f64)>,
}

pub fn evaluate(s: &ScoreSet, tpr_target: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        fpr95: fpr_at_tpr(s, tpr_target)?,
        auroc: auroc(s)?,
        tpr_target,
        n_id: s.id_scores.len(),
        n_ood: s.ood_scores.len(),
        roc_points: roc_curve(s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &a in id {
            for &b in ood {
                if a > b {
                    twice += 2;
                } else if a == b {
                    twice += 1;
                }
            }
        }
        twice as f64 / (2 * id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_values(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc_values(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc_values(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!(auroc_values(&[], &[1.0]).is_err());
        assert!(auroc_values(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        let fifth_smallest = 5.0;
        let ood: Vec<f64> = (0..50).map(|i| fifth_smallest - 1.0 - i as f64 * 0.1).collect();
        assert_eq!(fpr_at_tpr_values(&id, &ood, 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr_values(&[0.0], &[1.0], 0.95).unwrap(), 1.0);
        assert_eq!(required_positives(0.95, 100).unwrap(), 95);
        assert!(fpr_at_tpr_values(&[1.0], &[], 0.95).is_err());
        assert!(fpr_at_tpr_values(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn roc_examples() {
        let s = ScoreSet::from_values(&[1.0], &[0.0]);
        assert_eq!(roc_curve(&s).unwrap(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let s = ScoreSet::from_values(&[2.0, 2.0], &[2.0]);
        assert_eq!(roc_curve(&s).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn report_for_separated_sets() {
        let s = ScoreSet::from_values(&[5.0, 6.0, 7.0], &[1.0, 2.0]);
        let r = evaluate(&s, DEFAULT_TPR).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.fpr95, 0.0);
        assert_eq!((r.n_id, r.n_ood), (3, 2));
    }

    fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..12).prop_map(|x| x as f64 * 0.5), 1..60)
    }

    proptest! {
        #[test]
        fn auroc_equals_pairwise(id in tied_scores(), ood in tied_scores()) {
            prop_assert_eq!(auroc_values(&id, &ood).unwrap(), pairwise(&id, &ood));
        }

        #[test]
        fn auroc_antisymmetric(id in tied_scores(), ood in tied_scores()) {
            let a = auroc_values(&id, &ood).unwrap();
            let b = auroc_values(&ood, &id).unwrap();
            prop_assert_eq!(a + b, 1.0);
        }

        #[test]
        fn auroc_monotone_transform_invariant(id in tied_scores(), ood in tied_scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.3).exp() + 2.0 * x).collect::<Vec<_>>();
            prop_assert_eq!(auroc_values(&id, &ood).unwrap(), auroc_values(&f(&id), &f(&ood)).unwrap());
        }

        #[test]
        fn order_independent(mut id in tied_scores(), mut ood in tied_scores()) {
            let a = auroc_values(&id, &ood).unwrap();
            let f = fpr_at_tpr_values(&id, &ood, 0.95).unwrap();
            id.reverse();
            let half = ood.len() / 2;
            ood.rotate_left(half);
            prop_assert_eq!(a, auroc_values(&id, &ood).unwrap());
            prop_assert_eq!(f, fpr_at_tpr_values(&id, &ood, 0.95).unwrap());
        }

        #[test]
        fn fpr_non_increasing_when_ood_drops(id in tied_scores(), ood in tied_scores(), d in 0.0f64..3.0) {
            let lower: Vec<f64> = ood.iter().map(|x| x - d).collect();
            prop_assert!(fpr_at_tpr_values(&id, &lower, 0.95).unwrap() <= fpr_at_tpr_values(&id, &ood, 0.95).unwrap());
        }

        #[test]
        fn roc_area_matches_auroc(id in tied_scores(), ood in tied_scores()) {
            let s = ScoreSet::from_values(&id, &ood);
            let pts = roc_curve(&s).unwrap();
            prop_assert_eq!(pts[0], (0.0, 0.0));
            prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
            for w in pts.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert!((trapezoid_area(&pts) - auroc(&s).unwrap()).abs() <= 1e-9);
        }
    }
}
