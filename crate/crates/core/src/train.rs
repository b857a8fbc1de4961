//! The training loop shared by both stages.

use crate::corpus::UserSample;
use crate::error::{LadError, Result};
use crate::expert::QualityScorer;
use crate::glm::ModelState;
use crate::optim::{Adam, GradBuffer, Schedule};
use crate::rng::SeededRng;
use crate::rpo::{train_step, TrainConfig};
use serde::Serialize;
use std::io::Write;
use std::time::Instant;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_glm: f64,
    pub loss_rpo: f64,
    pub avg_reject_index: f64,
    pub avg_rejected: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    pub wall_time: f64,
}

impl TrainReport {
    /// Mean of the last `n` logged generation losses.
    pub fn recent_loss_glm(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|s| s.loss_glm).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Sample indices in epoch order: users shuffled, each user's samples kept
/// together so their shared long-term behaviors are encoded once per batch.
pub fn user_grouped_order(samples: &[UserSample], rng: &mut SeededRng) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last: Option<&str> = None;
    for (i, s) in samples.iter().enumerate() {
        if last != Some(s.user_id.as_str()) {
            groups.push(vec![]);
            last = Some(&s.user_id);
        }
        groups.last_mut().unwrap().push(i);
    }
    rng.shuffle(&mut groups);
    groups.into_iter().flatten().collect()
}

/// Train `model` in place for `cfg.steps` optimizer steps, writing one JSON
/// line per step to `log` when given.
pub fn train(
    model: &mut ModelState,
    samples: &[UserSample],
    expert: Option<&dyn QualityScorer>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(LadError::InvalidInput("no training samples".into()));
    }
    let schedule = Schedule {
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
        peak_lr: cfg.peak_lr,
        min_lr_ratio: cfg.min_lr_ratio,
    };
    let mut rng = SeededRng::new(cfg.seed);
    let mut adam = Adam::new(model);
    let mut grads = GradBuffer::zeros_like(model);
    let mut order: Vec<usize> = vec![];
    let mut cursor = 0;
    let start = Instant::now();
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        grads.clear();
        let mut entry = StepLog {
            step,
            loss_glm: 0.0,
            loss_rpo: 0.0,
            avg_reject_index: 0.0,
            avg_rejected: 0.0,
            lr: schedule.lr(step),
            grad_norm: 0.0,
            wall_time: 0.0,
        };
        for _ in 0..cfg.grad_accum {
            if cursor >= order.len() {
                order = user_grouped_order(samples, &mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(order.len());
            let batch: Vec<UserSample> = order[cursor..end].iter().map(|&i| samples[i].clone()).collect();
            cursor = end;
            let (g, stats) = train_step(&batch, model, expert, cfg)?;
            grads.add(g);
            entry.loss_glm += stats.loss_glm;
            entry.loss_rpo += stats.loss_rpo;
            entry.avg_reject_index += stats.avg_reject_index;
            entry.avg_rejected += stats.avg_rejected;
        }
        let k = cfg.grad_accum as f64;
        grads.scale(1.0 / cfg.grad_accum as f32);
        entry.loss_glm /= k;
        entry.loss_rpo /= k;
        entry.avg_reject_index /= k;
        entry.avg_rejected /= k;
        entry.grad_norm = adam.step(model, &mut grads, entry.lr, cfg.clip_norm);
        entry.wall_time = start.elapsed().as_secs_f64();
        if !model.is_finite() {
            return Err(LadError::InvalidInput(format!(
                "training diverged at step {step}: parameters are no longer finite"
            )));
        }
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(w, "{line}").map_err(|e| LadError::io("<metrics log>", e))?;
        }
        if step % 50 == 0 {
            log::info!(
                "step {step} loss_glm {:.4} loss_rpo {:.4} reject@{:.2} lr {:.2e}",
                entry.loss_glm,
                entry.loss_rpo,
                entry.avg_reject_index,
                entry.lr
            );
        }
        report.history.push(entry);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}
