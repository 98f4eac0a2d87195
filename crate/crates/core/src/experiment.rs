//! Ablations, grid search, and the frequency-loss grafting comparison.

use std::fmt::Write as _;

use crate::config::{AblationSpec, ModelConfig, CONFIG_KEYS};
use crate::data::{InteractionDataset, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, MetricsReport};
use crate::train::{train, MONITOR_K};

/// Validation and test metrics of one trained configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub best_epoch: Option<usize>,
}

/// Trains under `ablation` and evaluates the restored model on the
/// validation and test views.
pub fn run_ablation(config: &ModelConfig, ablation: &AblationSpec, ds: &InteractionDataset) -> Result<RunResult> {
    ablation.validate()?;
    let (model, log) = train(config, ds, ablation)?;
    let mut ks = config.eval_ks.clone();
    if !ks.contains(&MONITOR_K) {
        ks.push(MONITOR_K);
        ks.sort_unstable();
    }
    let valid = evaluate_model(&model, ablation, &ds.split(SplitKind::Valid), &ks, config.batch_size)?;
    let test = evaluate_model(&model, ablation, &ds.split(SplitKind::Test), &ks, config.batch_size)?;
    Ok(RunResult {
        valid,
        test,
        best_epoch: log.best_epoch,
    })
}

/// One parameter and the values it takes in a grid.
pub type GridAxis = (String, Vec<String>);

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub settings: Vec<(String, String)>,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_config: ModelConfig,
}

impl GridResult {
    /// Tab-separated table with a header row; metric columns follow the
    /// grid parameters.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        let ks: Vec<usize> = first.result.test.hr.keys().copied().collect();
        let mut header: Vec<String> = first.settings.iter().map(|(k, _)| k.clone()).collect();
        header.push(format!("valid_ndcg@{MONITOR_K}"));
        for k in &ks {
            header.push(format!("test_hr@{k}"));
            header.push(format!("test_ndcg@{k}"));
        }
        header.push("best".into());
        writeln!(out, "{}", header.join("\t")).unwrap();
        for (i, row) in self.rows.iter().enumerate() {
            let mut cells: Vec<String> = row.settings.iter().map(|(_, v)| v.clone()).collect();
            cells.push(format!("{:.6}", row.result.valid.ndcg_at(MONITOR_K)));
            for &k in &ks {
                cells.push(format!("{:.6}", row.result.test.hr_at(k)));
                cells.push(format!("{:.6}", row.result.test.ndcg_at(k)));
            }
            cells.push(if i == self.best { "*" } else { "" }.into());
            writeln!(out, "{}", cells.join("\t")).unwrap();
        }
        out
    }
}

/// Parses `alpha=0.1,0.5;gamma=0.3,0.7` into grid axes.
pub fn parse_grid(s: &str) -> Result<Vec<GridAxis>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis `{part}` lacks `=`")))?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis `{key}` has no values")));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

fn expand(base: &ModelConfig, grid: &[GridAxis]) -> Result<Vec<(Vec<(String, String)>, ModelConfig)>> {
    let mut points = vec![(Vec::new(), base.clone())];
    for (key, values) in grid {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown grid parameter `{key}`")));
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (settings, config) in &points {
            for v in values {
                let mut c = config.clone();
                c.set(key, v)?;
                c.validate()?;
                let mut s = settings.clone();
                s.push((key.clone(), v.clone()));
                next.push((s, c));
            }
        }
        points = next;
    }
    Ok(points)
}

/// Evaluates the Cartesian product of `grid` over `base`. The best row has
/// the highest validation NDCG@10 (first one wins ties). With more than four
/// runs and `parallel` set, trials run on scoped threads.
pub fn grid_search(
    base: &ModelConfig,
    grid: &[GridAxis],
    ds: &InteractionDataset,
    ablation: &AblationSpec,
    parallel: bool,
) -> Result<GridResult> {
    let points = expand(base, grid)?;
    let results: Vec<Result<RunResult>> = if parallel && points.len() > 4 {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(workers) {
            let chunk_results: Vec<Result<RunResult>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(_, c)| s.spawn(move || run_ablation(c, ablation, ds)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("grid trial panicked"))
                    .collect()
            });
            out.extend(chunk_results);
        }
        out
    } else {
        points.iter().map(|(_, c)| run_ablation(c, ablation, ds)).collect()
    };
    let mut rows = Vec::with_capacity(points.len());
    for ((settings, _), r) in points.iter().zip(results) {
        rows.push(GridRow {
            settings: settings.clone(),
            result: r?,
        });
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.result.valid.ndcg_at(MONITOR_K) > rows[best].result.valid.ndcg_at(MONITOR_K) {
            best = i;
        }
    }
    Ok(GridResult {
        best_config: points[best].1.clone(),
        rows,
        best,
    })
}

/// Self-attention baseline trained without and with the frequency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GraftReport {
    pub beta: f64,
    pub baseline: RunResult,
    pub with_freq_loss: RunResult,
}

impl GraftReport {
    /// Relative change of a test metric, in percent. `None` when the
    /// baseline value is zero.
    pub fn improvement_pct(&self, metric: &str, k: usize) -> Option<f64> {
        let pick = |r: &MetricsReport| if metric == "hr" { r.hr_at(k) } else { r.ndcg_at(k) };
        let base = pick(&self.baseline.test);
        let with = pick(&self.with_freq_loss.test);
        (base != 0.0).then(|| (with - base) / base * 100.0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "beta = {}", self.beta).unwrap();
        for (arm, r) in [("baseline", &self.baseline), ("with_lf", &self.with_freq_loss)] {
            for line in r.test.to_text().lines() {
                writeln!(out, "{arm}.{line}").unwrap();
            }
        }
        for metric in ["hr", "ndcg"] {
            let map = if metric == "hr" {
                &self.baseline.test.hr
            } else {
                &self.baseline.test.ndcg
            };
            for &k in map.keys() {
                match self.improvement_pct(metric, k) {
                    Some(p) => writeln!(out, "improvement.{metric}@{k} = {p:.2}%").unwrap(),
                    None => writeln!(out, "improvement.{metric}@{k} = n/a").unwrap(),
                }
            }
        }
        out
    }
}

/// Trains the self-attention-only ablation twice from the same seed: once
/// with `β = 1` and once with `config.beta`.
pub fn graft_freq_loss(config: &ModelConfig, ds: &InteractionDataset) -> Result<GraftReport> {
    let sa_only = AblationSpec::sa_only();
    let mut ce_only = config.clone();
    ce_only.beta = 1.0;
    let baseline = run_ablation(&ce_only, &sa_only, ds)?;
    let with_freq_loss = run_ablation(config, &sa_only, ds)?;
    Ok(GraftReport {
        beta: config.beta,
        baseline,
        with_freq_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let grid = parse_grid("alpha=0.1,0.5; gamma=0.3,0.7").unwrap();
        let pts = expand(&ModelConfig::default(), &grid).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].1.alpha, 0.5);
        assert_eq!(pts[3].1.gamma, 0.7);
        let bad = parse_grid("wingspan=1").unwrap();
        assert!(matches!(expand(&ModelConfig::default(), &bad), Err(Error::Config(_))));
    }
}
