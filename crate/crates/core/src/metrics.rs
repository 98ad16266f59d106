//! Accuracy bookkeeping: per-epoch evaluations, the smoothed accuracy matrix,
//! and the average / last accuracy summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::model::ModelParams;
use crate::scenario::{Sample, Scenario};

/// Number of trailing epochs averaged into a task's accuracy.
pub const SMOOTHING_WINDOW: usize = 5;

/// One evaluation pass after an epoch: accuracy on each seen task's test set
/// and on their union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub per_task: Vec<f64>,
    pub pooled: f64,
}

fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Number of samples whose highest-scoring head row is their own class.
pub fn count_correct(model: &ModelParams, samples: &[&Sample]) -> Result<usize> {
    let mut correct = 0;
    for s in samples {
        let logits = model.forward_f32(&s.features)?.logits;
        if model.classes[argmax(logits.iter().copied())] == s.label {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Accuracy from precomputed logits; `classes[i]` is the label of column `i`.
pub fn accuracy_from_logits(logits: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(CilError::Data("empty test set".into()));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &label)| classes[argmax(row.iter().copied())] == label)
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

/// Test accuracy on tasks `0..=t`, predicting over every head row (no task
/// identity is given to the model).
pub fn evaluate(model: &ModelParams, scenario: &Scenario, t: usize) -> Result<EpochEval> {
    let seen = scenario.seen_classes(t)?;
    if let Some(c) = seen.iter().find(|&&c| model.row_of(c).is_none()) {
        return Err(CilError::Data(format!("head does not cover seen class {c}")));
    }
    let mut per_task = Vec::with_capacity(t + 1);
    let (mut correct, mut total) = (0, 0);
    for tau in 0..=t {
        let test = scenario.test_samples(tau)?;
        if test.is_empty() {
            return Err(CilError::Data(format!("task {tau} has an empty test set")));
        }
        let c = count_correct(model, &test)?;
        per_task.push(c as f64 / test.len() as f64);
        correct += c;
        total += test.len();
    }
    Ok(EpochEval {
        per_task,
        pooled: correct as f64 / total as f64,
    })
}

/// Compensated (Neumaier) sum: exact up to the final rounding for the short
/// series averaged here, so e.g. the mean of 0.6, 0.7, 0.8, 0.9, 1.0 is 0.8.
fn accurate_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Mean of the last `min(window, len)` entries.
pub fn task_accuracy_smoothed(history: &[f64], window: usize) -> Result<f64> {
    if history.is_empty() || window == 0 {
        return Err(CilError::Data("no epochs recorded".into()));
    }
    let tail = &history[history.len().saturating_sub(window)..];
    Ok(accurate_sum(tail) / tail.len() as f64)
}

/// `(avg_acc, last_acc)` from one summary accuracy per task.
pub fn avg_and_last(summaries: &[f64]) -> Result<(f64, f64)> {
    let last = *summaries
        .last()
        .ok_or_else(|| CilError::Data("no task summaries".into()))?;
    Ok((accurate_sum(summaries) / summaries.len() as f64, last))
}

/// Accuracy matrix for a full run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `history[t][e]`: evaluation after epoch `e` of task `t`.
    pub history: Vec<Vec<EpochEval>>,
}

impl AccuracyMatrix {
    pub fn push_task(&mut self) {
        self.history.push(Vec::new());
    }

    pub fn record(&mut self, eval: EpochEval) {
        self.history
            .last_mut()
            .expect("push_task before record")
            .push(eval);
    }

    pub fn num_tasks(&self) -> usize {
        self.history.len()
    }

    /// Smoothed accuracy on eval task `tau` after training task `t`.
    pub fn entry(&self, t: usize, tau: usize) -> Result<f64> {
        let epochs = self.history.get(t).ok_or(CilError::OutOfRange {
            index: t,
            len: self.history.len(),
        })?;
        let series: Vec<f64> = epochs
            .iter()
            .map(|e| e.per_task.get(tau).copied())
            .collect::<Option<_>>()
            .ok_or(CilError::OutOfRange { index: tau, len: t + 1 })?;
        task_accuracy_smoothed(&series, SMOOTHING_WINDOW)
    }

    /// Smoothed pooled accuracy after each task.
    pub fn summaries(&self) -> Result<Vec<f64>> {
        self.history
            .iter()
            .map(|epochs| {
                let pooled: Vec<f64> = epochs.iter().map(|e| e.pooled).collect();
                task_accuracy_smoothed(&pooled, SMOOTHING_WINDOW)
            })
            .collect()
    }

    pub fn avg_and_last(&self) -> Result<(f64, f64)> {
        avg_and_last(&self.summaries()?)
    }

    /// Per eval task: best earlier accuracy minus final accuracy. The final
    /// task has nothing to forget and reports 0.
    pub fn forgetting(&self) -> Result<Vec<f64>> {
        let last = self.num_tasks().saturating_sub(1);
        (0..self.num_tasks())
            .map(|tau| {
                let final_acc = self.entry(last, tau)?;
                let best = (tau..last)
                    .map(|t| self.entry(t, tau))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(final_acc, f64::max);
                Ok(best - final_acc)
            })
            .collect()
    }

    /// Rows = training task; columns = smoothed per-task accuracies, the
    /// last-epoch pooled accuracy, the smoothed pooled accuracy, and the
    /// forgetting of the row's own task.
    pub fn to_csv(&self) -> Result<String> {
        let n = self.num_tasks();
        let mut out = String::from("train_task");
        for tau in 0..n {
            let _ = write!(out, ",eval_{tau}");
        }
        out.push_str(",pooled,smoothed,forgetting\n");
        let summaries = self.summaries()?;
        let forgetting = self.forgetting()?;
        for t in 0..n {
            let _ = write!(out, "{t}");
            for tau in 0..n {
                if tau <= t {
                    let _ = write!(out, ",{:.6}", self.entry(t, tau)?);
                } else {
                    out.push(',');
                }
            }
            let pooled = self.history[t].last().map_or(0.0, |e| e.pooled);
            let _ = writeln!(out, ",{pooled:.6},{:.6},{:.6}", summaries[t], forgetting[t]);
        }
        Ok(out)
    }
}
