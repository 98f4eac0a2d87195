//! Leave-one-out ranking metrics over the full item catalog.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::AblationSpec;
use crate::data::{LengthBucket, SplitKind, SplitView};
use crate::error::{Error, Result};
use crate::model::FreqRec;
use crate::tensor::IdTensor;

/// 1-based rank of `target` in `scores`, where `scores[i]` scores item id
/// `i` and index 0 (padding) is ignored. Ties rank the smaller id first.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target == 0 {
        return Err(Error::Usage("cannot rank the padding item".into()));
    }
    if target >= scores.len() {
        return Err(Error::Index(format!(
            "target {target} outside {} scored items",
            scores.len() - 1
        )));
    }
    let s = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count();
    Ok(1 + ahead)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    total / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub user_count: usize,
    /// Keyed by bucket label such as `[5,6]`.
    pub bucket_reports: Option<BTreeMap<String, MetricsReport>>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        Self {
            hr: ks.iter().map(|&k| (k, hr_at_k(ranks, k))).collect(),
            ndcg: ks.iter().map(|&k| (k, ndcg_at_k(ranks, k))).collect(),
            user_count: ranks.len(),
            bucket_reports: None,
        }
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `key = value` lines, e.g. `hr@10 = 0.512300`. Bucket metrics carry a
    /// `bucket[5,6].` prefix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_lines(&mut out, "");
        if let Some(buckets) = &self.bucket_reports {
            for (label, r) in buckets {
                r.write_lines(&mut out, &format!("bucket{label}."));
            }
        }
        out
    }

    fn write_lines(&self, out: &mut String, prefix: &str) {
        writeln!(out, "{prefix}users = {}", self.user_count).unwrap();
        for (k, v) in &self.hr {
            writeln!(out, "{prefix}hr@{k} = {v:.6}").unwrap();
        }
        for (k, v) in &self.ndcg {
            writeln!(out, "{prefix}ndcg@{k} = {v:.6}").unwrap();
        }
    }

    /// Parses the output of [`Self::to_text`] (top level only).
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad metric line `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.starts_with("bucket") {
                continue;
            }
            let bad = || Error::Config(format!("bad metric line `{line}`"));
            if key == "users" {
                r.user_count = value.parse().map_err(|_| bad())?;
            } else if let Some((name, k)) = key.split_once('@') {
                let k: usize = k.parse().map_err(|_| bad())?;
                let v: f64 = value.parse().map_err(|_| bad())?;
                match name {
                    "hr" => r.hr.insert(k, v),
                    "ndcg" => r.ndcg.insert(k, v),
                    _ => return Err(bad()),
                };
            } else {
                return Err(bad());
            }
        }
        Ok(r)
    }
}

/// Anything that scores the full catalog from a batch of histories.
pub trait Scorer {
    fn item_count(&self) -> usize;
    fn max_len(&self) -> usize;
    /// One score vector of length `item_count + 1` per row; index 0 is
    /// ignored.
    fn score(&self, input_ids: &IdTensor) -> Result<Vec<Vec<f64>>>;
}

/// A model evaluated under a fixed ablation.
pub struct ModelScorer<'a> {
    pub model: &'a FreqRec,
    pub ablation: AblationSpec,
}

impl Scorer for ModelScorer<'_> {
    fn item_count(&self) -> usize {
        self.model.item_count()
    }

    fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn score(&self, input_ids: &IdTensor) -> Result<Vec<Vec<f64>>> {
        self.model.score_last(input_ids, &self.ablation)
    }
}

/// Left-padded `B × L` batch holding the most recent `max_len` items of
/// each history.
pub fn history_batch(histories: &[&[usize]], max_len: usize) -> IdTensor {
    let mut ids = vec![0; histories.len() * max_len];
    for (r, h) in histories.iter().enumerate() {
        let recent = &h[h.len().saturating_sub(max_len)..];
        let start = r * max_len + max_len - recent.len();
        ids[start..start + recent.len()].copy_from_slice(recent);
    }
    IdTensor::new(vec![histories.len(), max_len], ids).expect("consistent")
}

/// Per-user ranks of the held-out target, users ascending. Batches are
/// assembled in user order so batch-coupled scorers are deterministic.
pub fn user_ranks(scorer: &dyn Scorer, view: &SplitView<'_>, batch_size: usize) -> Result<Vec<(u64, usize)>> {
    if view.kind == SplitKind::Train {
        return Err(Error::Usage("evaluate on the validation or test view".into()));
    }
    if view.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let users: Vec<(u64, &[usize], usize)> = view
        .dataset
        .user_sequences
        .iter()
        .map(|(&u, s)| {
            let (h, t) = view.history_and_target(s);
            (u, h, t)
        })
        .collect();
    let mut ranks = Vec::with_capacity(users.len());
    for chunk in users.chunks(batch_size) {
        let histories: Vec<&[usize]> = chunk.iter().map(|c| c.1).collect();
        let scores = scorer.score(&history_batch(&histories, scorer.max_len()))?;
        for ((u, _, t), s) in chunk.iter().zip(&scores) {
            ranks.push((*u, rank_of_target(s, *t)?));
        }
    }
    Ok(ranks)
}

/// Full-catalog HR/NDCG for every `k`, optionally broken down by length
/// bucket.
pub fn evaluate(
    scorer: &dyn Scorer,
    view: &SplitView<'_>,
    ks: &[usize],
    batch_size: usize,
    buckets: Option<&[LengthBucket]>,
) -> Result<MetricsReport> {
    let ranks = user_ranks(scorer, view, batch_size)?;
    let all: Vec<usize> = ranks.iter().map(|r| r.1).collect();
    let mut report = MetricsReport::from_ranks(&all, ks);
    if let Some(buckets) = buckets {
        let by_user: BTreeMap<u64, usize> = ranks.into_iter().collect();
        report.bucket_reports = Some(
            buckets
                .iter()
                .map(|b| {
                    let r: Vec<usize> = b.users.iter().filter_map(|u| by_user.get(u).copied()).collect();
                    (b.label(), MetricsReport::from_ranks(&r, ks))
                })
                .collect(),
        );
    }
    Ok(report)
}

/// Convenience wrapper for a model under an ablation.
pub fn evaluate_model(
    model: &FreqRec,
    ablation: &AblationSpec,
    view: &SplitView<'_>,
    ks: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    let scorer = ModelScorer {
        model,
        ablation: *ablation,
    };
    evaluate(&scorer, view, ks, batch_size, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_rules() {
        assert_eq!(rank_of_target(&[0.0, 0.1, 0.9, 0.3], 2).unwrap(), 1);
        assert_eq!(rank_of_target(&[9.0, 1.0, 1.0, 1.0], 1).unwrap(), 1);
        assert_eq!(rank_of_target(&[9.0, 1.0, 1.0, 1.0], 3).unwrap(), 3);
        assert!(matches!(rank_of_target(&[0.0, 1.0], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn metric_arithmetic() {
        assert!((hr_at_k(&[1, 15, 3], 10) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[3], 10), 0.5);
        assert_eq!(ndcg_at_k(&[1, 3], 10), 0.75);
        assert_eq!(hr_at_k(&[11, 12], 10), 0.0);
    }

    #[test]
    fn report_text_roundtrip() {
        let r = MetricsReport::from_ranks(&[1, 2, 30], &[10, 20]);
        let parsed = MetricsReport::parse(&r.to_text()).unwrap();
        assert_eq!(parsed.user_count, 3);
        assert!((parsed.hr_at(10) - r.hr_at(10)).abs() < 1e-6);
        assert!((parsed.ndcg_at(20) - r.ndcg_at(20)).abs() < 1e-6);
    }

    #[test]
    fn history_batch_left_pads() {
        let b = history_batch(&[&[1, 2][..], &[3, 4, 5, 6][..]], 3);
        assert_eq!(b.data(), &[0, 1, 2, 4, 5, 6]);
    }
}
