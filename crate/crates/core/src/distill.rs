//! Loss terms, distillation weights, and total-loss assembly.
//!
//! The total training objective is
//! `λ_ce · CE + λ_feat · MSE(features) + λ_pred · KL(predictions)`.
//! CE runs over the whole mini-batch; each distillation term runs over the
//! samples its [`KdScope`] selects. The distillation direction is
//! `KL(p_teacher ‖ p_student)` with the student's logits sliced to the
//! teacher's classes and re-normalized.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};

/// Which samples a distillation term is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum KdScope {
    /// Term disabled.
    #[default]
    #[serde(rename = "none")]
    None,
    /// Rehearsal samples only.
    #[serde(rename = "R")]
    Rehearsal,
    /// Current-task plus rehearsal samples.
    #[serde(rename = "DR")]
    All,
}

impl KdScope {
    pub fn is_active(self) -> bool {
        self != KdScope::None
    }

    pub fn label(self) -> &'static str {
        match self {
            KdScope::None => "none",
            KdScope::Rehearsal => "R",
            KdScope::All => "DR",
        }
    }

    fn includes(self, is_rehearsal: bool) -> bool {
        match self {
            KdScope::None => false,
            KdScope::Rehearsal => is_rehearsal,
            KdScope::All => true,
        }
    }
}

/// Distillation weight schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum KdSchedule {
    /// `ln(1 + n/(n+m))` for scope DR, `sqrt(b_rehe / b_all)` for scope R.
    #[default]
    Adaptive,
    /// Plain `n/(n+m)` regardless of scope.
    OldClassFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default)]
    pub feature: KdScope,
    #[serde(default)]
    pub pred: KdScope,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub schedule: KdSchedule,
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig::new(KdScope::None, KdScope::None)
    }
}

impl KdConfig {
    pub fn new(feature: KdScope, pred: KdScope) -> Self {
        KdConfig {
            feature,
            pred,
            temperature: 1.0,
            schedule: KdSchedule::Adaptive,
        }
    }

    pub fn any_active(&self) -> bool {
        self.feature.is_active() || self.pred.is_active()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchComposition {
    pub b_all: usize,
    pub b_rehe: usize,
}

impl BatchComposition {
    pub fn from_flags(is_rehearsal: &[bool]) -> Self {
        BatchComposition {
            b_all: is_rehearsal.len(),
            b_rehe: is_rehearsal.iter().filter(|&&r| r).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_feature: f64,
    pub lambda_pred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kld: f64,
    pub mse: f64,
    pub total: f64,
}

/// Distillation weight for one term at a task with `n` old and `m` new
/// classes, given the current mini-batch composition.
pub fn lambda_kd(
    scope: KdScope,
    schedule: KdSchedule,
    n: usize,
    m: usize,
    batch: BatchComposition,
) -> Result<f64> {
    let old_fraction = || {
        if n + m == 0 {
            Err(CilError::Config("lambda_kd needs n + m > 0".into()))
        } else {
            Ok(n as f64 / (n + m) as f64)
        }
    };
    match (scope, schedule) {
        (KdScope::None, _) => Ok(0.0),
        (_, KdSchedule::OldClassFraction) => old_fraction(),
        (KdScope::All, KdSchedule::Adaptive) => Ok(old_fraction()?.ln_1p()),
        (KdScope::Rehearsal, KdSchedule::Adaptive) => {
            if batch.b_all == 0 {
                return Err(CilError::Config("lambda_kd needs a non-empty batch".into()));
            }
            if batch.b_rehe > batch.b_all {
                return Err(CilError::Config(format!(
                    "batch reports {} rehearsal samples out of {}",
                    batch.b_rehe, batch.b_all
                )));
            }
            Ok((batch.b_rehe as f64 / batch.b_all as f64).sqrt())
        }
    }
}

/// No distillation: `(1, 0)`. One term: its weight `λ` and `λ_ce = 1 − λ`.
/// Both terms: each its own weight and `λ_ce = 1`.
pub fn lambda_weights(kd: &KdConfig, n: usize, m: usize, batch: BatchComposition) -> Result<LossWeights> {
    let lambda_feature = lambda_kd(kd.feature, kd.schedule, n, m, batch)?;
    let lambda_pred = lambda_kd(kd.pred, kd.schedule, n, m, batch)?;
    let lambda_ce = match (kd.feature.is_active(), kd.pred.is_active()) {
        (false, false) => 1.0,
        (true, true) => 1.0,
        (true, false) => 1.0 - lambda_feature,
        (false, true) => 1.0 - lambda_pred,
    };
    assert!(lambda_ce >= 0.0, "single-term distillation weight exceeds 1");
    Ok(LossWeights {
        lambda_ce,
        lambda_feature,
        lambda_pred,
    })
}

fn log_softmax(z: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = z.mapv(|v| (v - max) / temperature);
    let lse = shifted.mapv(f64::exp).sum().ln();
    shifted - lse
}

pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(z, 1.0).mapv(f64::exp)
}

fn ce_single(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let logp = log_softmax(logits, 1.0);
    let mut grad = logp.mapv(f64::exp);
    grad[target] -= 1.0;
    (-logp[target], grad)
}

/// `KL(softmax(t/T) ‖ softmax(s[..n_old]/T))` and its gradient w.r.t. the
/// sliced student logits.
fn kld_single(teacher: ArrayView1<f64>, student: ArrayView1<f64>, temperature: f64) -> (f64, Array1<f64>) {
    let n_old = teacher.len();
    let log_p = log_softmax(teacher, temperature);
    let log_q = log_softmax(student.slice(s![..n_old]), temperature);
    let p = log_p.mapv(f64::exp);
    let value = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .map(|(&pi, (&lp, &lq))| if pi > 0.0 { pi * (lp - lq) } else { 0.0 })
        .sum::<f64>()
        .max(0.0);
    let grad = (log_q.mapv(f64::exp) - p) / temperature;
    (value, grad)
}

fn check_targets(logits: &ArrayView2<f64>, targets: &[usize]) -> Result<()> {
    if logits.nrows() != targets.len() {
        return Err(CilError::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(CilError::OutOfRange {
            index: bad,
            len: logits.ncols(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the target rows.
pub fn ce_loss(logits: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    check_targets(&logits, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| ce_single(row, t).0)
        .sum();
    Ok(sum / targets.len() as f64)
}

fn check_kld(teacher: &ArrayView2<f64>, student: &ArrayView2<f64>) -> Result<()> {
    if teacher.ncols() == 0 {
        return Err(CilError::Config("teacher has no classes".into()));
    }
    if teacher.ncols() > student.ncols() || teacher.nrows() != student.nrows() {
        return Err(CilError::Shape(format!(
            "teacher logits {:?} do not fit student logits {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    Ok(())
}

/// Batch mean of the per-sample prediction-level distillation divergence.
pub fn kld_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    check_kld(&teacher, &student)?;
    if teacher.nrows() == 0 {
        return Ok(0.0);
    }
    let sum: f64 = teacher
        .rows()
        .into_iter()
        .zip(student.rows())
        .map(|(t, s)| kld_single(t, s, temperature).0)
        .sum();
    Ok(sum / teacher.nrows() as f64)
}

fn check_embeddings(teacher: &ArrayView2<f64>, student: &ArrayView2<f64>) -> Result<()> {
    if teacher.dim() != student.dim() {
        return Err(CilError::Shape(format!(
            "teacher embeddings {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    Ok(())
}

/// Batch mean of `‖teacher − student‖²`.
pub fn mse_feature_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<f64> {
    check_embeddings(&teacher, &student)?;
    if teacher.nrows() == 0 {
        return Ok(0.0);
    }
    let diff = &student - &teacher;
    Ok(diff.mapv(|v| v * v).sum() / teacher.nrows() as f64)
}

/// Teacher outputs for every sample of the batch.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// `[batch × old classes]`
    pub logits: Array2<f64>,
    /// `[batch × embedding]`
    pub embeddings: Array2<f64>,
}

/// Student outputs plus targets and rehearsal flags for one mini-batch.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    /// `[batch × seen classes]`
    pub logits: Array2<f64>,
    /// `[batch × embedding]`
    pub embeddings: Array2<f64>,
    /// Head row of each sample's label.
    pub targets: Vec<usize>,
    pub is_rehearsal: Vec<bool>,
}

impl DistillBatch {
    pub fn composition(&self) -> BatchComposition {
        BatchComposition::from_flags(&self.is_rehearsal)
    }
}

/// Loss value and the gradients w.r.t. student logits and embeddings.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub d_logits: Array2<f64>,
    pub d_embeddings: Array2<f64>,
}

fn scoped_rows(scope: KdScope, flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &r)| scope.includes(r))
        .map(|(i, _)| i)
        .collect()
}

/// Assembles the weighted total loss for a mini-batch and its gradients.
///
/// A distillation term whose weight is zero or whose scope selects no sample
/// contributes nothing and does not need a teacher.
pub fn total_loss(
    kd: &KdConfig,
    batch: &DistillBatch,
    teacher: Option<&TeacherOutputs>,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let logits = batch.logits.view();
    check_targets(&logits, &batch.targets)?;
    let b = batch.targets.len();
    if batch.is_rehearsal.len() != b || batch.embeddings.nrows() != b {
        return Err(CilError::Shape("batch fields disagree on batch size".into()));
    }
    let mut d_logits = Array2::zeros(batch.logits.raw_dim());
    let mut d_embeddings = Array2::zeros(batch.embeddings.raw_dim());
    let mut out = LossBreakdown::default();

    if b > 0 {
        let scale = 1.0 / b as f64;
        for ((row, &t), mut grad) in logits
            .rows()
            .into_iter()
            .zip(&batch.targets)
            .zip(d_logits.rows_mut())
        {
            let (v, g) = ce_single(row, t);
            out.ce += v * scale;
            grad.scaled_add(weights.lambda_ce * scale, &g);
        }
    }

    let pred_rows = scoped_rows(kd.pred, &batch.is_rehearsal);
    if weights.lambda_pred != 0.0 && !pred_rows.is_empty() {
        let teacher = teacher.ok_or_else(|| CilError::Config("prediction distillation needs a teacher".into()))?;
        check_kld(&teacher.logits.view(), &logits)?;
        let n_old = teacher.logits.ncols();
        let scale = 1.0 / pred_rows.len() as f64;
        for &i in &pred_rows {
            let (v, g) = kld_single(teacher.logits.row(i), logits.row(i), kd.temperature);
            out.kld += v * scale;
            d_logits
                .slice_mut(s![i, ..n_old])
                .scaled_add(weights.lambda_pred * scale, &g);
        }
    }

    let feat_rows = scoped_rows(kd.feature, &batch.is_rehearsal);
    if weights.lambda_feature != 0.0 && !feat_rows.is_empty() {
        let teacher = teacher.ok_or_else(|| CilError::Config("feature distillation needs a teacher".into()))?;
        check_embeddings(&teacher.embeddings.view(), &batch.embeddings.view())?;
        let scale = 1.0 / feat_rows.len() as f64;
        for &i in &feat_rows {
            let diff = &batch.embeddings.row(i) - &teacher.embeddings.row(i);
            out.mse += diff.mapv(|v| v * v).sum() * scale;
            d_embeddings
                .row_mut(i)
                .scaled_add(2.0 * weights.lambda_feature * scale, &diff);
        }
    }

    out.total = weights.lambda_ce * out.ce + weights.lambda_feature * out.mse + weights.lambda_pred * out.kld;
    if !out.total.is_finite() {
        return Err(CilError::NonFinite("total loss"));
    }
    Ok(LossOutput {
        breakdown: out,
        d_logits,
        d_embeddings,
    })
}
