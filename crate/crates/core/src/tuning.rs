//! Selection of the fusion weight `w` on pseudo-OOD data.
//!
//! The objective is the AUROC of the fused score, ID against corrupted-ID
//! samples. A uniform grid over [0, 1] is scanned first, then golden-section
//! search refines inside the bracket around the best grid point. Among equal
//! objective values the `w` closest to 0.5 wins.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::{combine_all, CombineConfig, DEFAULT_FLOOR};
use crate::metrics::auroc_values;
use crate::{Error, Result};

pub const DEFAULT_ITERS: usize = 30;
pub const DEFAULT_GRID_POINTS: usize = 11;

/// Per-sample base and NAP scores for ID and pseudo-OOD samples, aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneInput {
    id_base: Vec<f64>,
    id_nap: Vec<f64>,
    pseudo_base: Vec<f64>,
    pseudo_nap: Vec<f64>,
}

fn align(
    what: &str,
    base: &[(String, f64)],
    nap: &[(String, f64)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let to_map = |v: &[(String, f64)], which: &str| -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for (k, s) in v {
            if m.insert(k.clone(), *s).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample {k:?} in {what} {which} scores"
                )));
            }
        }
        Ok(m)
    };
    let b = to_map(base, "base")?;
    let n = to_map(nap, "NAP")?;
    if b.len() != n.len() || b.keys().zip(n.keys()).any(|(x, y)| x != y) {
        let missing = b
            .keys()
            .find(|k| !n.contains_key(*k))
            .or_else(|| n.keys().find(|k| !b.contains_key(*k)));
        return Err(Error::InvalidArgument(format!(
            "{what} base and NAP scores are misaligned (first unmatched sample: {missing:?})"
        )));
    }
    Ok((b.into_values().collect(), n.into_values().collect()))
}

impl TuneInput {
    /// Aligns named score lists by sample id.
    pub fn from_named(
        id_base: &[(String, f64)],
        id_nap: &[(String, f64)],
        pseudo_base: &[(String, f64)],
        pseudo_nap: &[(String, f64)],
    ) -> Result<Self> {
        let (ib, inap) = align("ID", id_base, id_nap)?;
        let (pb, pnap) = align("pseudo-OOD", pseudo_base, pseudo_nap)?;
        Self::from_aligned(ib, inap, pb, pnap)
    }

    pub fn from_aligned(
        id_base: Vec<f64>,
        id_nap: Vec<f64>,
        pseudo_base: Vec<f64>,
        pseudo_nap: Vec<f64>,
    ) -> Result<Self> {
        if id_base.len() != id_nap.len() || pseudo_base.len() != pseudo_nap.len() {
            return Err(Error::InvalidArgument("base and NAP score counts differ".into()));
        }
        if id_base.is_empty() || pseudo_base.is_empty() {
            return Err(Error::Empty("tuning needs ID and pseudo-OOD scores".into()));
        }
        let all = id_base.iter().chain(&id_nap).chain(&pseudo_base).chain(&pseudo_nap);
        if all.clone().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("tuning scores".into()));
        }
        if id_nap.iter().chain(&pseudo_nap).any(|&s| s < 0.0) {
            return Err(Error::InvalidArgument("NAP scores must be >= 0".into()));
        }
        Ok(Self {
            id_base,
            id_nap,
            pseudo_base,
            pseudo_nap,
        })
    }

    /// AUROC of the fused score at weight `w`.
    pub fn objective(&self, w: f64, floor: f64) -> Result<f64> {
        let cfg = CombineConfig::new(w, floor)?;
        let id = combine_all(&self.id_base, &self.id_nap, &cfg)?;
        let pseudo = combine_all(&self.pseudo_base, &self.pseudo_nap, &cfg)?;
        auroc_values(&id, &pseudo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    pub iters: usize,
    pub grid_points: usize,
    pub floor: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERS,
            grid_points: DEFAULT_GRID_POINTS,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub w: f64,
    pub auroc: f64,
}

/// True when `a` should replace `b` as the incumbent.
fn improves(a: TuneResult, b: TuneResult) -> bool {
    if a.auroc != b.auroc {
        return a.auroc > b.auroc;
    }
    let (da, db) = ((a.w - 0.5).abs(), (b.w - 0.5).abs());
    if da != db {
        return da < db;
    }
    a.w < b.w
}

pub fn tune_w(inp: &TuneInput, cfg: &TuneConfig) -> Result<TuneResult> {
    if cfg.iters < 1 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    if cfg.grid_points < 3 {
        return Err(Error::InvalidArgument("grid_points must be >= 3".into()));
    }
    let last = (cfg.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..cfg.grid_points).map(|i| i as f64 / last).collect();
    let values = grid
        .par_iter()
        .map(|&w| inp.objective(w, cfg.floor).map(|auroc| TuneResult { w, auroc }))
        .collect::<Result<Vec<_>>>()?;

    let mut best_idx = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if improves(*v, values[best_idx]) {
            best_idx = i;
        }
    }
    let mut best = values[best_idx];

    let mut eval = |w: f64| -> Result<f64> {
        let auroc = inp.objective(w, cfg.floor)?;
        let cand = TuneResult { w, auroc };
        if improves(cand, best) {
            best = cand;
        }
        Ok(auroc)
    };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = grid[best_idx.saturating_sub(1)];
    let mut b = grid[(best_idx + 1).min(grid.len() - 1)];
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    for _ in 0..cfg.iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d)?;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(prefix: &str, v: &[f64]) -> Vec<(String, f64)> {
        v.iter()
            .enumerate()
            .map(|(i, &s)| (format!("{prefix}{i:03}"), s))
            .collect()
    }

    #[test]
    fn base_alone_separates() {
        // base separates perfectly, NAP is reversed
        let inp = TuneInput::from_aligned(
            vec![10.0, 11.0, 12.0],
            vec![0.1, 0.2, 0.3],
            vec![1.0, 2.0, 3.0],
            vec![5.0, 6.0, 7.0],
        )
        .unwrap();
        let r = tune_w(&inp, &TuneConfig::default()).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert!(r.auroc >= inp.objective(1.0, DEFAULT_FLOOR).unwrap() - 1e-12);
        assert_eq!(inp.objective(r.w, DEFAULT_FLOOR).unwrap(), r.auroc);
    }

    #[test]
    fn constant_objective_returns_midpoint() {
        let id = [3.0, 4.0, 9.0];
        let pseudo = [1.0, 5.0];
        let inp = TuneInput::from_aligned(id.to_vec(), id.to_vec(), pseudo.to_vec(), pseudo.to_vec()).unwrap();
        let r = tune_w(&inp, &TuneConfig::default()).unwrap();
        assert_eq!(r.w, 0.5);
        assert_eq!(r.auroc, inp.objective(0.0, DEFAULT_FLOOR).unwrap());
    }

    #[test]
    fn deterministic() {
        let inp = TuneInput::from_aligned(
            vec![2.0, 3.5, 1.2, 4.0],
            vec![9.0, 1.0, 6.0, 3.0],
            vec![1.5, 2.5, 0.5],
            vec![2.0, 4.0, 1.0],
        )
        .unwrap();
        let a = tune_w(&inp, &TuneConfig::default()).unwrap();
        let b = tune_w(&inp, &TuneConfig::default()).unwrap();
        assert_eq!(a, b);
        let grid_max = (0..=10)
            .map(|i| inp.objective(i as f64 / 10.0, DEFAULT_FLOOR).unwrap())
            .fold(0.0, f64::max);
        assert!(a.auroc >= grid_max);
    }

    #[test]
    fn alignment_by_name() {
        let ib = named("s", &[1.0, 2.0]);
        let mut inap = named("s", &[5.0, 6.0]);
        inap.reverse();
        let pb = named("p", &[0.5]);
        let pn = named("p", &[0.1]);
        let inp = TuneInput::from_named(&ib, &inap, &pb, &pn).unwrap();
        assert_eq!(inp.id_nap, vec![5.0, 6.0]);

        let bad = named("x", &[5.0, 6.0]);
        assert!(TuneInput::from_named(&ib, &bad, &pb, &pn).is_err());
        let short = named("s", &[5.0]);
        assert!(TuneInput::from_named(&ib, &short, &pb, &pn).is_err());
    }

    #[test]
    fn argument_checks() {
        assert!(TuneInput::from_aligned(vec![], vec![], vec![1.0], vec![1.0]).is_err());
        assert!(TuneInput::from_aligned(vec![1.0], vec![-1.0], vec![1.0], vec![1.0]).is_err());
        let inp = TuneInput::from_aligned(vec![1.0], vec![1.0], vec![0.5], vec![0.5]).unwrap();
        let mut cfg = TuneConfig {
            grid_points: 2,
            ..TuneConfig::default()
        };
        assert!(tune_w(&inp, &cfg).is_err());
        cfg.grid_points = 11;
        cfg.iters = 0;
        assert!(tune_w(&inp, &cfg).is_err());
    }
}
