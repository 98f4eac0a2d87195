//! Adam training with validation-based early stopping.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::config::{AblationSpec, ModelConfig};
use crate::data::{make_batches, Batch, InteractionDataset, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, MetricsReport};
use crate::model::FreqRec;
use crate::optim::{adam_step, AdamState};

/// Cutoff monitored for early stopping.
pub const MONITOR_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training losses, weighted by valid positions. A term that was
    /// not computed (its weight is zero) is `None`.
    pub ce: Option<f64>,
    pub lf: Option<f64>,
    pub total: f64,
    pub valid_hr: f64,
    pub valid_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|l| l.epoch == e))
    }

    /// One `key=value` record per epoch followed by a summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}", e.to_line()).unwrap();
        }
        let best = self.best_epoch.map_or("none".to_string(), |b| b.to_string());
        writeln!(out, "best_epoch={best} stopped_early={}", self.stopped_early).unwrap();
        out
    }
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        format!(
            "epoch={} ce={} lf={} total={:.6} valid_hr@{MONITOR_K}={:.6} valid_ndcg@{MONITOR_K}={:.6}",
            self.epoch,
            opt(self.ce),
            opt(self.lf),
            self.total,
            self.valid_hr,
            self.valid_ndcg
        )
    }
}

/// Trains a fresh model on the train view of `ds`.
pub fn train(config: &ModelConfig, ds: &InteractionDataset, ablation: &AblationSpec) -> Result<(FreqRec, TrainLog)> {
    train_with(config, ds, ablation, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    config: &ModelConfig,
    ds: &InteractionDataset,
    ablation: &AblationSpec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(FreqRec, TrainLog)> {
    config.validate()?;
    ablation.validate()?;
    let mut model = FreqRec::new(config.clone(), ds.item_count)?;
    let mut log = TrainLog::default();
    if config.max_epochs == 0 {
        return Ok((model, log));
    }
    // separate stream from initialisation so both stay reproducible
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::new(model.tensors(), config.learning_rate);
    let train_view = ds.split(SplitKind::Train);
    let valid_view = ds.split(SplitKind::Valid);
    let mut best: Option<(f64, FreqRec)> = None;
    let mut streak = 0;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(&train_view, config.batch_size, config.max_len, true, &mut rng)?;
        let mut sums = LossSums::default();
        for (index, batch) in batches.iter().enumerate() {
            if batch.valid_count() == 0 {
                continue;
            }
            let (ce, lf, total) = train_step(&mut model, &mut adam, batch, ablation, &mut rng)
                .map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::Divergence {
                        epoch,
                        batch: index,
                        detail,
                    },
                    other => other,
                })?;
            sums.add(batch.valid_count() as f64, ce, lf, total);
        }
        let report = evaluate_model(&model, ablation, &valid_view, &[MONITOR_K], config.batch_size)?;
        let entry = sums.finish(epoch, &report);
        on_epoch(&entry);
        log.epochs.push(entry);

        let ndcg = report.ndcg_at(MONITOR_K);
        if best.as_ref().map_or(true, |(b, _)| ndcg > *b) {
            best = Some((ndcg, model.clone()));
            log.best_epoch = Some(epoch);
            streak = 0;
        } else {
            streak += 1;
            if streak >= config.patience {
                log.stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    if let Some((_, best_model)) = best {
        model = best_model;
    }
    Ok((model, log))
}

/// One forward/backward/update on `batch`. Returns the CE, L_F and total
/// loss values.
pub fn train_step(
    model: &mut FreqRec,
    adam: &mut AdamState,
    batch: &Batch,
    ablation: &AblationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<f64>, Option<f64>, f64)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = model.forward(&mut g, &vars, &batch.input_ids, ablation, true, rng)?;
    let parts = model.loss(&mut g, &vars, out.x_out, batch, ablation)?;
    let total = g.value(parts.total).item();
    let ce = parts.ce.map(|v| g.value(v).item());
    let lf = parts.lf.map(|v| g.value(v).item());
    if !total.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            detail: format!("non-finite loss {total} (ce {ce:?}, lf {lf:?})"),
        });
    }
    let grads = g.backward(parts.total)?;
    let grads: Vec<_> = vars.all().into_iter().map(|v| grads.get_or_zeros(v)).collect();
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            detail: format!("non-finite gradient for {}", model.param_names()[bad]),
        });
    }
    adam_step(&mut model.tensors_mut(), &grads, adam)?;
    model.embedding.zero_padding_row();
    Ok((ce, lf, total))
}

#[derive(Default)]
struct LossSums {
    weight: f64,
    ce: Option<f64>,
    lf: Option<f64>,
    total: f64,
}

impl LossSums {
    fn add(&mut self, w: f64, ce: Option<f64>, lf: Option<f64>, total: f64) {
        self.weight += w;
        if let Some(c) = ce {
            *self.ce.get_or_insert(0.0) += w * c;
        }
        if let Some(l) = lf {
            *self.lf.get_or_insert(0.0) += w * l;
        }
        self.total += w * total;
    }

    fn finish(self, epoch: usize, report: &MetricsReport) -> EpochLog {
        let w = self.weight.max(f64::MIN_POSITIVE);
        EpochLog {
            epoch,
            ce: self.ce.map(|c| c / w),
            lf: self.lf.map(|l| l / w),
            total: self.total / w,
            valid_hr: report.hr_at(MONITOR_K),
            valid_ndcg: report.ndcg_at(MONITOR_K),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_from_cycles, SyntheticData};

    fn tiny() -> (ModelConfig, SyntheticData) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let syn = generate_from_cycles(vec![vec![1, 2, 3], vec![4, 5, 6, 7]], 12, 8, 0.0, 8, &mut rng).unwrap();
        let config = ModelConfig {
            dim: 8,
            max_len: 6,
            ff_dim: 16,
            batch_size: 4,
            max_epochs: 2,
            ..ModelConfig::default()
        };
        (config, syn)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (mut config, syn) = tiny();
        config.max_epochs = 0;
        let (model, log) = train(&config, &syn.dataset, &AblationSpec::full()).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model, FreqRec::new(config, syn.dataset.item_count).unwrap());
    }

    #[test]
    fn deterministic_given_seed() {
        let (config, syn) = tiny();
        let a = train(&config, &syn.dataset, &AblationSpec::full()).unwrap();
        let b = train(&config, &syn.dataset, &AblationSpec::full()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.0.embedding.item_table.data()[..config.dim].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn log_text_has_one_line_per_epoch() {
        let (config, syn) = tiny();
        let (_, log) = train(&config, &syn.dataset, &AblationSpec::full()).unwrap();
        assert_eq!(log.to_text().lines().count(), log.epochs.len() + 1);
    }
}
