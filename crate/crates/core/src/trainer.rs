//! Per-task training loop and full experiment runs.
//!
//! For each task: snapshot the teacher (when distillation is on), grow the
//! head, train for a fixed number of epochs over the shuffled union of the
//! task's training set and the rehearsal store, evaluate after every epoch,
//! then fill the memory slots of the task's classes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    lambda_weights, total_loss, BatchComposition, DistillBatch, KdConfig, LossBreakdown, LossWeights,
    TeacherOutputs,
};
use crate::error::{CilError, Result};
use crate::gem::{project, reference_gradients};
use crate::metrics::{evaluate, AccuracyMatrix};
use crate::model::{expand_head, init_model, save_checkpoint, snapshot, ModelParams, TcnConfig, TeacherSnapshot};
use crate::optim::{Adam, AdamConfig};
use crate::rehearsal::{allocate, MemoryDump, RehearsalMemory, SelectionStrategy};
use crate::scenario::{Sample, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    RehearsalRandom,
    RehearsalClosest,
    RehearsalIcarl,
    Gem,
}

impl Strategy {
    pub fn selection(self) -> Option<SelectionStrategy> {
        match self {
            Strategy::Finetune => None,
            Strategy::RehearsalRandom | Strategy::Gem => Some(SelectionStrategy::Random),
            Strategy::RehearsalClosest => Some(SelectionStrategy::ClosestToMean),
            Strategy::RehearsalIcarl => Some(SelectionStrategy::IcarlHerding),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::RehearsalRandom => "rehearsal_random",
            Strategy::RehearsalClosest => "rehearsal_closest",
            Strategy::RehearsalIcarl => "rehearsal_icarl",
            Strategy::Gem => "gem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub kd: KdConfig,
    pub memory_capacity: usize,
    pub gem_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_task: 50,
            optimizer: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
            strategy: Strategy::RehearsalIcarl,
            kd: KdConfig::default(),
            memory_capacity: 930,
            gem_margin: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return Err(CilError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(CilError::Config("learning rate must be positive".into()));
        }
        if !(self.kd.temperature > 0.0) || self.gem_margin < 0.0 {
            return Err(CilError::Config(
                "temperature must be positive and GEM margin non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Aggregated losses and weights of one epoch, one row of `epoch_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRow {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kld: f64,
    pub mse: f64,
    pub total: f64,
    pub lambda_ce: f64,
    pub lambda_feature: f64,
    pub lambda_pred: f64,
    pub gem_violations: usize,
    pub gem_correction: f64,
    pub pooled_acc: f64,
    pub running_avg_acc: f64,
}

const GEM_TOL: f64 = 1e-6;

/// Seed derivation so every random stream (init, head growth, shuffles,
/// exemplar draws) is independent yet fixed by the run seed.
fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for x in [a, b] {
        z = z.wrapping_add(x.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone)]
pub struct RunState {
    /// Index of the next task to train.
    pub t: usize,
    pub model: Option<ModelParams>,
    pub teacher: Option<TeacherSnapshot>,
    pub memory: Option<RehearsalMemory>,
    pub accuracy: AccuracyMatrix,
    pub log: Vec<EpochLogRow>,
    /// Model after each finished task.
    pub checkpoints: Vec<ModelParams>,
    /// Optimizer steps taken so far across all tasks.
    pub steps: usize,
    /// Number of teacher snapshots taken (at most one per task).
    pub snapshots_taken: usize,
}

impl RunState {
    pub fn new(scenario: &Scenario, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let memory = match cfg.strategy.selection() {
            Some(_) => Some(allocate(cfg.memory_capacity, scenario.total_classes)?),
            None => None,
        };
        Ok(RunState {
            t: 0,
            model: None,
            teacher: None,
            memory,
            accuracy: AccuracyMatrix::default(),
            log: Vec::new(),
            checkpoints: Vec::new(),
            steps: 0,
            snapshots_taken: 0,
        })
    }
}

#[derive(Default)]
struct EpochTotals {
    loss: LossBreakdown,
    lambda_ce: f64,
    lambda_feature: f64,
    lambda_pred: f64,
    violations: usize,
    correction: f64,
    batches: usize,
}

/// Total loss of one mini-batch and its gradient w.r.t. every student
/// parameter. `batch` pairs each sample with its rehearsal flag; `old_new` is
/// `(n, m)` for the current task.
pub fn loss_and_gradient(
    model: &ModelParams,
    teacher: Option<&ModelParams>,
    batch: &[(&Sample, bool)],
    old_new: (usize, usize),
    kd: &KdConfig,
) -> Result<(LossBreakdown, LossWeights, ModelParams)> {
    let flags: Vec<bool> = batch.iter().map(|&(_, r)| r).collect();
    let composition = BatchComposition::from_flags(&flags);
    let weights = lambda_weights(kd, old_new.0, old_new.1, composition)?;

    let mut forwards = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (sample, _) in batch {
        forwards.push(model.forward_f32(&sample.features)?);
        targets.push(model.row_of(sample.label).ok_or_else(|| {
            CilError::Data(format!("label {} has no head row", sample.label))
        })?);
    }
    let n_classes = model.num_classes();
    let dim = model.config.embedding_dim();
    let logits = Array2::from_shape_fn((batch.len(), n_classes), |(i, j)| forwards[i].logits[j]);
    let embeddings = Array2::from_shape_fn((batch.len(), dim), |(i, j)| forwards[i].embedding[j]);

    let needs_teacher = weights.lambda_feature != 0.0 || weights.lambda_pred != 0.0;
    let teacher_out = match teacher {
        Some(teacher) if needs_teacher => {
            let outs = batch
                .iter()
                .map(|(s, _)| teacher.forward_f32(&s.features))
                .collect::<Result<Vec<_>>>()?;
            let old = teacher.num_classes();
            Some(TeacherOutputs {
                logits: Array2::from_shape_fn((batch.len(), old), |(i, j)| outs[i].logits[j]),
                embeddings: Array2::from_shape_fn((batch.len(), dim), |(i, j)| outs[i].embedding[j]),
            })
        }
        _ => None,
    };

    let distill_batch = DistillBatch {
        logits,
        embeddings,
        targets,
        is_rehearsal: flags,
    };
    let out = total_loss(kd, &distill_batch, teacher_out.as_ref(), &weights)?;

    let mut grad = model.zeros_like();
    for (i, fwd) in forwards.iter().enumerate() {
        let d_logits: Array1<f64> = out.d_logits.row(i).to_owned();
        let d_emb: Array1<f64> = out.d_embeddings.row(i).to_owned();
        model.backward(fwd, &d_logits, Some(&d_emb), &mut grad);
    }
    Ok((out.breakdown, weights, grad))
}

/// One optimizer step, with GEM projection when that strategy is active.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut ModelParams,
    teacher: Option<&TeacherSnapshot>,
    memory: Option<&RehearsalMemory>,
    batch: &[(&Sample, bool)],
    old_new: (usize, usize),
    cfg: &TrainConfig,
    adam: &mut Adam,
    totals: &mut EpochTotals,
) -> Result<()> {
    let (breakdown, weights, grad) =
        loss_and_gradient(model, teacher.map(|t| &**t), batch, old_new, &cfg.kd)?;
    let mut flat_grad = grad.flatten();

    if cfg.strategy == Strategy::Gem {
        if let Some(memory) = memory.filter(|m| !m.is_empty()) {
            let constraints = reference_gradients(model, &memory.by_source_task())?;
            let g = Array1::from(flat_grad);
            let sol = project(g.view(), constraints.view(), cfg.gem_margin, GEM_TOL)?;
            totals.violations += sol.violations;
            totals.correction += sol.correction_norm(g.view());
            flat_grad = sol.g_proj.to_vec();
        }
    }

    let mut params = model.flatten();
    adam.step(&mut params, &flat_grad);
    model.assign_flat(&params)?;

    totals.loss.ce += breakdown.ce;
    totals.loss.kld += breakdown.kld;
    totals.loss.mse += breakdown.mse;
    totals.loss.total += breakdown.total;
    totals.lambda_ce += weights.lambda_ce;
    totals.lambda_feature += weights.lambda_feature;
    totals.lambda_pred += weights.lambda_pred;
    totals.batches += 1;
    Ok(())
}

/// Trains task `state.t` and advances the state to the next task.
pub fn train_task(state: &mut RunState, scenario: &Scenario, cfg: &TrainConfig, tcn: &TcnConfig) -> Result<()> {
    let t = state.t;
    let task = scenario.task(t)?;
    let old_new = scenario.old_and_new(t)?;

    let mut model = match state.model.take() {
        None => init_model(tcn, &task.classes, derive_seed(cfg.seed, 1, 0, 0))?,
        Some(model) => {
            state.teacher = if cfg.kd.any_active() {
                state.snapshots_taken += 1;
                Some(snapshot(&model))
            } else {
                None
            };
            expand_head(&model, &task.classes, derive_seed(cfg.seed, 2, t as u64, 0))?
        }
    };

    let mut data: Vec<(&Sample, bool)> = scenario
        .train_samples(t)?
        .into_iter()
        .map(|s| (s, false))
        .collect();
    if let Some(memory) = &state.memory {
        data.extend(memory.rehearsal_dataset().into_iter().map(|s| (s, true)));
    }

    let mut adam = Adam::new(cfg.optimizer, model.num_params());
    let previous: Vec<f64> = state.accuracy.summaries()?;
    state.accuracy.push_task();
    for epoch in 0..cfg.epochs_per_task {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, t as u64, epoch as u64));
        data.shuffle(&mut rng);
        let mut totals = EpochTotals::default();
        for batch in data.chunks(cfg.batch_size) {
            train_batch(
                &mut model,
                state.teacher.as_ref(),
                state.memory.as_ref(),
                batch,
                old_new,
                cfg,
                &mut adam,
                &mut totals,
            )?;
            state.steps += 1;
        }
        let eval = evaluate(&model, scenario, t)?;
        let running_avg_acc = (previous.iter().sum::<f64>() + eval.pooled) / (t + 1) as f64;
        let b = totals.batches.max(1) as f64;
        state.log.push(EpochLogRow {
            task: t,
            epoch,
            step: state.steps,
            ce: totals.loss.ce / b,
            kld: totals.loss.kld / b,
            mse: totals.loss.mse / b,
            total: totals.loss.total / b,
            lambda_ce: totals.lambda_ce / b,
            lambda_feature: totals.lambda_feature / b,
            lambda_pred: totals.lambda_pred / b,
            gem_violations: totals.violations,
            gem_correction: totals.correction / b,
            pooled_acc: eval.pooled,
            running_avg_acc,
        });
        state.accuracy.record(eval);
    }

    if let (Some(memory), Some(selection)) = (state.memory.as_mut(), cfg.strategy.selection()) {
        let mut embed = |s: &Sample| model.encode(s.features.mapv(f64::from).view());
        memory.update_after_task(scenario, t, selection, &mut embed, derive_seed(cfg.seed, 4, t as u64, 0))?;
    }
    state.checkpoints.push(model.clone());
    state.model = Some(model);
    state.t += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub train: TrainConfig,
    pub model: TcnConfig,
    pub class_order: Vec<usize>,
    pub class_order_seed: u64,
    pub accuracy: AccuracyMatrix,
    pub log: Vec<EpochLogRow>,
    pub memory: Option<MemoryDump>,
    pub checkpoints: Vec<ModelParams>,
    pub avg_acc: f64,
    pub last_acc: f64,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    train: &'a TrainConfig,
    model: &'a TcnConfig,
    class_order: &'a [usize],
    class_order_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<&'a serde_json::Value>,
}

pub fn run_experiment(scenario: &Scenario, cfg: &TrainConfig, tcn: &TcnConfig) -> Result<ExperimentResult> {
    tcn.validate()?;
    if scenario.n_mels() != tcn.input_channels {
        return Err(CilError::Config(format!(
            "features have {} rows but the encoder expects {}",
            scenario.n_mels(),
            tcn.input_channels
        )));
    }
    let mut state = RunState::new(scenario, cfg)?;
    while state.t < scenario.num_tasks() {
        train_task(&mut state, scenario, cfg, tcn)?;
    }
    let (avg_acc, last_acc) = state.accuracy.avg_and_last()?;
    Ok(ExperimentResult {
        train: cfg.clone(),
        model: tcn.clone(),
        class_order: scenario.class_order.clone(),
        class_order_seed: scenario.class_order_seed,
        accuracy: state.accuracy,
        log: state.log,
        memory: state.memory.map(|m| m.dump()),
        checkpoints: state.checkpoints,
        avg_acc,
        last_acc,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CilError::io(path, e))
}

impl ExperimentResult {
    /// Persists `config.json`, `accuracy_matrix.csv`, `epoch_log.csv`,
    /// `memory_dump.json` and `checkpoints/task_XX.ckpt` under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, extra: Option<&serde_json::Value>) -> Result<()> {
        let dir = dir.as_ref();
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| CilError::io(&ckpt_dir, e))?;
        let echo = ConfigEcho {
            train: &self.train,
            model: &self.model,
            class_order: &self.class_order,
            class_order_seed: self.class_order_seed,
            extra,
        };
        write_file(&dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
        write_file(&dir.join("accuracy_matrix.csv"), self.accuracy.to_csv()?)?;

        let mut log = csv::Writer::from_writer(Vec::new());
        for row in &self.log {
            log.serialize(row)?;
        }
        let bytes = log
            .into_inner()
            .map_err(|e| CilError::io(dir.join("epoch_log.csv"), e.into_error()))?;
        write_file(&dir.join("epoch_log.csv"), bytes)?;

        let empty = MemoryDump {
            capacity: 0,
            slots_per_class: 0,
            classes: Default::default(),
        };
        let dump = self.memory.as_ref().unwrap_or(&empty);
        write_file(&dir.join("memory_dump.json"), serde_json::to_string_pretty(dump)?)?;
        for (t, model) in self.checkpoints.iter().enumerate() {
            save_checkpoint(model, ckpt_dir.join(format!("task_{t:02}.ckpt")))?;
        }
        Ok(())
    }
}

/// Reads an `epoch_log.csv` written by [`ExperimentResult::write_dir`].
pub fn read_epoch_log(path: impl AsRef<Path>) -> Result<Vec<EpochLogRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CilError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(CilError::from))
        .collect()
}
