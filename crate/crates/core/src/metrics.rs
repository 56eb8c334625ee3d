//! Average precision, average forgetting and epoch timing.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::Params;
use crate::dataset::PeriodData;
use crate::error::{Error, Result};
use crate::graph::{ClassId, Split};

/// Fraction of `(truth, prediction)` pairs that agree. `None` when empty.
pub fn precision(pairs: &[(ClassId, ClassId)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64)
}

/// Argmax class over every class the head knows. Ties go to the earlier row.
pub fn predict(params: &Params, input: &[f64]) -> Result<ClassId> {
    if params.classes.is_empty() {
        return Err(Error::Empty("classifier head has no classes"));
    }
    let logits = params.forward(input)?.logits;
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    Ok(params.classes[best])
}

/// Accuracy on the `split` nodes of class set `set` (1-based).
pub fn precision_per_set(params: &Params, data: &PeriodData, set: usize, split: Split) -> Result<Option<f64>> {
    let ids = data.view.set_members(set, split);
    let pairs: Vec<(ClassId, ClassId)> =
        ids.iter().map(|&id| Ok((data.label(id)?, predict(params, data.input(id)?)?))).collect::<Result<_>>()?;
    let p = precision(&pairs);
    if p.is_none() {
        warn!("period {}: class set {set} has no {split:?} nodes", data.view.period_index);
    }
    Ok(p)
}

/// Per-set precisions for sets `1..=n` of period `n`.
pub fn set_precisions(params: &Params, data: &PeriodData, split: Split) -> Result<Vec<Option<f64>>> {
    (1..=data.view.period_index).map(|i| precision_per_set(params, data, i, split)).collect()
}

/// Mean of the defined per-set precisions at period `n`.
pub fn ap(n: usize, precisions: &[Option<f64>]) -> Result<f64> {
    if precisions.len() != n {
        return Err(Error::config(format!("AP at period {n} needs {n} class sets, got {}", precisions.len())));
    }
    let defined: Vec<f64> = precisions.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Empty("no class set has evaluation nodes"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean forgetting against the joint reference over the old sets `1..n`.
/// Sets undefined in either run are skipped.
pub fn af(n: usize, method: &[Option<f64>], joint: &[Option<f64>]) -> Result<f64> {
    if n < 2 {
        return Err(Error::config("AF is defined from the second period on"));
    }
    if method.len() < n || joint.len() < n {
        return Err(Error::config(format!("AF at period {n} needs {n} class sets per run")));
    }
    let gaps: Vec<f64> = method[..n - 1].iter().zip(&joint[..n - 1]).filter_map(|(m, j)| Some((*j)? - (*m)?)).collect();
    if gaps.is_empty() {
        return Err(Error::Empty("no old class set has evaluation nodes"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Mean of a list of epoch wall times.
pub fn time_per_epoch(epoch_ms: &[f64]) -> Result<f64> {
    if epoch_ms.is_empty() {
        return Err(Error::Empty("epoch log"));
    }
    Ok(epoch_ms.iter().sum::<f64>() / epoch_ms.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    /// Test precision per class set `1..=period`.
    pub precisions: Vec<Option<f64>>,
    pub ap: f64,
    pub af: Option<f64>,
    pub epoch_time_ms: Vec<f64>,
    pub selection_ms: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub ablation: String,
    pub seed: u64,
    pub periods: Vec<PeriodRecord>,
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn final_period(&self) -> Result<&PeriodRecord> {
        self.periods.last().ok_or(Error::Empty("run has no periods"))
    }

    /// Mean epoch time at the last period.
    pub fn time_ms(&self) -> Result<f64> {
        time_per_epoch(&self.final_period()?.epoch_time_ms)
    }

    /// Fills in AF for every period from a joint run on the same data.
    pub fn attach_joint(&mut self, joint: &RunRecord) -> Result<()> {
        for p in &mut self.periods {
            if p.period < 2 {
                continue;
            }
            let j = joint
                .periods
                .iter()
                .find(|q| q.period == p.period)
                .ok_or_else(|| Error::config(format!("joint reference lacks period {}", p.period)))?;
            p.af = Some(af(p.period, &p.precisions, &j.precisions)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_counts() {
        let c = ClassId;
        assert_eq!(precision(&[(c(0), c(0)), (c(1), c(0)), (c(2), c(2)), (c(1), c(1))]), Some(0.75));
        assert_eq!(precision(&[]), None);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap(1, &[Some(0.7)]).unwrap(), 0.7);
        assert!((ap(2, &[Some(0.5), Some(0.3)]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(ap(2, &[None, Some(0.3)]).unwrap(), 0.3);
        assert!(ap(2, &[Some(0.5)]).is_err());
        assert!(ap(1, &[None]).is_err());
    }

    #[test]
    fn af_examples() {
        assert!((af(2, &[Some(0.3), Some(0.9)], &[Some(0.5), Some(0.1)]).unwrap() - 0.2).abs() < 1e-15);
        assert!(af(2, &[Some(0.6), Some(0.0)], &[Some(0.5), Some(0.0)]).unwrap() < 0.0);
        let p = [Some(0.3), Some(0.4), Some(0.5)];
        assert_eq!(af(3, &p, &p).unwrap(), 0.0);
        assert!(af(1, &p, &p).is_err());
    }

    #[test]
    fn epoch_time() {
        assert_eq!(time_per_epoch(&[10.0, 10.0, 10.0]).unwrap(), 10.0);
        assert_eq!(time_per_epoch(&[4.0]).unwrap(), 4.0);
        assert!(time_per_epoch(&[]).is_err());
    }
}
