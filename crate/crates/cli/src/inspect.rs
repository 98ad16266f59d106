use std::fmt::Write as _;

use crate::grid::{group_results, CellResult};

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per configuration with mean ± standard deviation over its runs.
pub fn summary_table(results: &[CellResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>7} {:>7} {:>7} {:>5}  {:>15}  {:>15}",
        "strategy", "feat_kd", "pred_kd", "memory", "runs", "last_acc", "avg_acc"
    );
    for ((strategy, feat, pred, memory), members) in group_results(results) {
        let last: Vec<f64> = members.iter().map(|r| r.last_acc).collect();
        let avg: Vec<f64> = members.iter().map(|r| r.avg_acc).collect();
        let (lm, ls) = mean_std(&last);
        let (am, as_) = mean_std(&avg);
        let _ = writeln!(
            out,
            "{:<18} {:>7} {:>7} {:>7} {:>5}  {:>7.3} ± {:<5.3}  {:>7.3} ± {:<5.3}",
            strategy.as_str(),
            feat,
            pred,
            memory,
            members.len(),
            lm,
            ls,
            am,
            as_
        );
    }
    out
}
