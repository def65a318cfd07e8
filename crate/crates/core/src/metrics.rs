//! Ranking and time-prediction metrics with bootstrap intervals.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    /// Candidates, best first.
    pub ranked: Vec<String>,
    /// Every answer recorded for the query; several events may share its time.
    pub truths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_time: Option<f64>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(d) = self.ranked.iter().find(|r| !seen.insert(r.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "query {}: {d:?} ranked twice",
                self.query_id
            )));
        }
        Ok(())
    }

    fn unique_truths(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.truths
            .iter()
            .map(String::as_str)
            .filter(|t| seen.insert(*t))
            .collect()
    }

    /// 1-based ranks of covered truths within the first `m` candidates, ascending.
    fn covered_ranks(&self, m: usize) -> Vec<usize> {
        let list = &self.ranked[..m.min(self.ranked.len())];
        let mut ranks: Vec<usize> = self
            .unique_truths()
            .into_iter()
            .filter_map(|t| list.iter().position(|r| r == t).map(|p| p + 1))
            .collect();
        ranks.sort_unstable();
        ranks
    }
}

fn check(records: &[EvalRecord], m: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no evaluation records".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    records.iter().try_for_each(EvalRecord::validate)
}

/// Average rank of covered truths among the first `m` candidates.
pub fn mean_rank_at(records: &[EvalRecord], m: usize) -> Result<f64> {
    check(records, m)?;
    let (mut r, mut n) = (0usize, 0usize);
    for rec in records {
        for rank in rec.covered_ranks(m) {
            r += rank;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoCoverage);
    }
    Ok(r as f64 / n as f64)
}

pub fn mean_rank(records: &[EvalRecord]) -> Result<f64> {
    mean_rank_at(records, usize::MAX)
}

/// Pseudo-count sum `Σ_j j / R_j`, covered truths and total truths.
fn pseudo_counts(records: &[EvalRecord], m: usize) -> (f64, usize, usize) {
    let (mut c, mut covered, mut total) = (0.0, 0usize, 0usize);
    for rec in records {
        let ranks = rec.covered_ranks(m);
        for (j, r) in ranks.iter().enumerate() {
            debug_assert!(*r > j);
            c += (j + 1) as f64 / *r as f64;
        }
        covered += ranks.len();
        total += rec.unique_truths().len();
    }
    (c, covered, total)
}

pub fn map_at_m(records: &[EvalRecord], m: usize) -> Result<f64> {
    check(records, m)?;
    let (c, covered, _) = pseudo_counts(records, m);
    if covered == 0 {
        return Err(Error::NoCoverage);
    }
    Ok(c / covered as f64)
}

pub fn mar_at_m(records: &[EvalRecord], m: usize) -> Result<f64> {
    check(records, m)?;
    let (c, _, total) = pseudo_counts(records, m);
    if total == 0 {
        return Err(Error::InvalidArgument("records carry no ground truth".into()));
    }
    Ok(c / total as f64)
}

pub fn rmse_time(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no evaluation records".into()));
    }
    let mut sse = 0.0;
    for r in records {
        match (r.true_time, r.predicted_time) {
            (Some(t), Some(p)) => sse += (p - t) * (p - t),
            _ => return Err(Error::MissingTime(r.query_id.clone())),
        }
    }
    Ok((sse / records.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MeanRank,
    Map,
    Mar,
    Rmse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanRank => "mean_rank",
            MetricKind::Map => "map",
            MetricKind::Mar => "mar",
            MetricKind::Rmse => "rmse",
        }
    }

    pub fn compute(self, records: &[EvalRecord], m: usize) -> Result<f64> {
        match self {
            MetricKind::MeanRank => mean_rank_at(records, m),
            MetricKind::Map => map_at_m(records, m),
            MetricKind::Mar => mar_at_m(records, m),
            MetricKind::Rmse => rmse_time(records),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub n_records: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Percentile 95% interval from resampling records with replacement.
/// Resamples where the metric is undefined are dropped.
pub fn bootstrap_ci<F>(records: &[EvalRecord], resamples: usize, seed: u64, metric: F) -> Result<(f64, f64)>
where
    F: Fn(&[EvalRecord]) -> Result<f64>,
{
    if records.is_empty() {
        return Err(Error::EmptyDataset("no evaluation records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    // Refilled in place so string buffers are reused across resamples.
    let mut sample = records.to_vec();
    for _ in 0..resamples {
        for slot in sample.iter_mut() {
            slot.clone_from(&records[rng.random_range(0..records.len())]);
        }
        match metric(&sample) {
            Ok(v) => values.push(v),
            Err(Error::NoCoverage) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::NoCoverage);
    }
    values.sort_by(f64::total_cmp);
    Ok((quantile(&values, 0.025), quantile(&values, 0.975)))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn report(kind: MetricKind, records: &[EvalRecord], m: usize, seed: u64) -> Result<MetricReport> {
    let value = kind.compute(records, m)?;
    let (ci_low, ci_high) = bootstrap_ci(records, BOOTSTRAP_RESAMPLES, seed, |r| kind.compute(r, m))?;
    Ok(MetricReport {
        metric: kind.name().into(),
        method: None,
        value,
        ci_low,
        ci_high,
        m,
        n_records: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ranked: &[&str], truths: &[&str]) -> EvalRecord {
        EvalRecord {
            query_id: "q".into(),
            ranked: ranked.iter().map(|s| s.to_string()).collect(),
            truths: truths.iter().map(|s| s.to_string()).collect(),
            true_time: None,
            predicted_time: None,
        }
    }

    #[test]
    fn rank_lookup_and_exclusion() {
        let rs = [rec(&["b", "a", "c"], &["a"]), rec(&["x", "y"], &["z"])];
        assert_eq!(mean_rank(&rs).unwrap(), 2.0);
        assert!(matches!(mean_rank(&rs[1..]), Err(Error::NoCoverage)));
    }

    #[test]
    fn two_truths_pseudo_counts() {
        let rs = [rec(&["a", "x", "b", "y"], &["a", "b"])];
        assert!((map_at_m(&rs, 4).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((mar_at_m(&rs, 4).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((mar_at_m(&rs, 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duplicate_truths_count_once() {
        let rs = [rec(&["a", "b"], &["a", "a"])];
        assert_eq!(map_at_m(&rs, 2).unwrap(), 1.0);
        assert_eq!(mar_at_m(&rs, 2).unwrap(), 1.0);
    }

    #[test]
    fn vacuous_coverage() {
        let rs = [rec(&["a"], &["b"])];
        assert!(matches!(map_at_m(&rs, 1), Err(Error::NoCoverage)));
        assert_eq!(mar_at_m(&rs, 1).unwrap(), 0.0);
    }

    #[test]
    fn rmse_residuals() {
        let mut a = rec(&["a"], &["a"]);
        a.true_time = Some(1.0);
        a.predicted_time = Some(2.0);
        let mut b = a.clone();
        b.predicted_time = Some(0.0);
        assert_eq!(rmse_time(&[a.clone(), b]).unwrap(), 1.0);
        a.predicted_time = None;
        assert!(matches!(rmse_time(&[a]), Err(Error::MissingTime(_))));
    }

    #[test]
    fn duplicate_candidates_rejected() {
        assert!(mean_rank(&[rec(&["a", "a"], &["a"])]).is_err());
    }

    #[test]
    fn bootstrap_brackets_value() {
        let rs: Vec<EvalRecord> = (0..50)
            .map(|i| rec(&["a", "b", "c"], &[["a", "b", "c"][i % 3]]))
            .collect();
        let v = mean_rank(&rs).unwrap();
        let (lo, hi) = bootstrap_ci(&rs, 1000, 1, mean_rank).unwrap();
        assert!(lo <= v && v <= hi && lo < hi);
    }
}
