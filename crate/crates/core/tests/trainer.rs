use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cil_core::distill::{KdConfig, KdScope};
use cil_core::model::TcnConfig;
use cil_core::optim::AdamConfig;
use cil_core::scenario::{build_cil_scenario, synthetic_scenario, Sample, Scenario, SplitSamples, SyntheticParams};
use cil_core::trainer::{read_epoch_log, run_experiment, train_task, RunState, Strategy, TrainConfig};

fn tcn() -> TcnConfig {
    TcnConfig {
        input_channels: 4,
        hidden_channels: 6,
        bottleneck_channels: 4,
        blocks_per_repeat: 1,
        repeats: 1,
        depthwise_kernel: 3,
    }
}

/// Three tasks of two classes, 16 training samples per class.
fn scenario(seed: u64) -> Scenario {
    let params = SyntheticParams {
        n_tasks: 3,
        classes_per_task: 2,
        samples_per_class: 20,
        feat_dim: 4,
        n_frames: 6,
        cluster_std: 0.5,
    };
    synthetic_scenario(&params, seed).unwrap()
}

fn config(strategy: Strategy, kd: KdConfig) -> TrainConfig {
    TrainConfig {
        epochs_per_task: 2,
        optimizer: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        batch_size: 7,
        seed: 3,
        strategy,
        kd,
        memory_capacity: 12,
        gem_margin: 0.0,
    }
}

fn steps_per_task(sc: &Scenario, cfg: &TrainConfig) -> (Vec<usize>, RunState) {
    let mut state = RunState::new(sc, cfg).unwrap();
    let mut steps = Vec::new();
    while state.t < sc.num_tasks() {
        let before = state.steps;
        train_task(&mut state, sc, cfg, &tcn()).unwrap();
        steps.push(state.steps - before);
    }
    (steps, state)
}

#[test]
fn epoch_data_is_task_data_plus_memory() {
    let sc = scenario(0);
    // 12 slots over 6 classes: 2 per class. Epoch sizes 32, 32 + 4, 32 + 8
    // split into batches of 7, twice per task.
    let (steps, state) = steps_per_task(&sc, &config(Strategy::RehearsalRandom, KdConfig::default()));
    assert_eq!(steps, vec![2 * 5, 2 * 6, 2 * 6]);
    let dump = state.memory.unwrap().dump();
    assert_eq!(dump.slots_per_class, 2);
    assert_eq!(dump.classes.len(), 6);
    assert!(dump.classes.values().all(|ids| ids.len() == 2));

    let (steps, state) = steps_per_task(&sc, &config(Strategy::Finetune, KdConfig::default()));
    assert_eq!(steps, vec![10, 10, 10]);
    assert!(state.memory.is_none());
}

#[test]
fn one_teacher_snapshot_per_later_task() {
    let sc = scenario(0);
    let kd = KdConfig::new(KdScope::All, KdScope::Rehearsal);
    let (_, state) = steps_per_task(&sc, &config(Strategy::RehearsalIcarl, kd));
    assert_eq!(state.snapshots_taken, 2);
    let teacher = state.teacher.unwrap();
    assert_eq!(*teacher, state.checkpoints[1]);

    let (_, state) = steps_per_task(&sc, &config(Strategy::RehearsalIcarl, KdConfig::default()));
    assert_eq!(state.snapshots_taken, 0);
    assert!(state.teacher.is_none());
}

#[test]
fn runs_are_reproducible() {
    let sc = scenario(1);
    let kd = KdConfig::new(KdScope::Rehearsal, KdScope::All);
    for strategy in [Strategy::Gem, Strategy::RehearsalClosest] {
        let cfg = config(strategy, kd);
        let a = run_experiment(&sc, &cfg, &tcn()).unwrap();
        let b = run_experiment(&sc, &cfg, &tcn()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.memory, b.memory);
        let c = run_experiment(&sc, &TrainConfig { seed: 4, ..cfg }, &tcn()).unwrap();
        assert_ne!(a.checkpoints, c.checkpoints);
    }
}

#[test]
fn single_task_average_equals_last() {
    let sc = scenario(2).joint().unwrap();
    let r = run_experiment(&sc, &config(Strategy::Finetune, KdConfig::default()), &tcn()).unwrap();
    assert_eq!(r.avg_acc, r.last_acc);
    assert_eq!(r.checkpoints.len(), 1);
    assert_eq!(r.log.len(), 2);
}

fn split(train_seed: u64, held_out_seed: u64) -> SplitSamples {
    let mut train_rng = ChaCha8Rng::seed_from_u64(train_seed);
    let mut held_rng = ChaCha8Rng::seed_from_u64(held_out_seed);
    let mut out = SplitSamples::default();
    for label in 0..4 {
        for i in 0..6 {
            let rng = if i < 4 { &mut train_rng } else { &mut held_rng };
            let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0f32..1.0) + label as f32);
            let s = Sample::new(format!("c{label}_{i}"), x, label);
            match i {
                4 => out.val.push(s),
                5 => out.test.push(s),
                _ => out.train.push(s),
            }
        }
    }
    out
}

#[test]
fn held_out_data_never_touches_the_parameters() {
    let cfg = config(Strategy::RehearsalIcarl, KdConfig::new(KdScope::All, KdScope::All));
    let a = build_cil_scenario(split(0, 10), &[2, 2], 5).unwrap();
    let b = build_cil_scenario(split(0, 11), &[2, 2], 5).unwrap();
    let ra = run_experiment(&a, &cfg, &tcn()).unwrap();
    let rb = run_experiment(&b, &cfg, &tcn()).unwrap();
    assert_eq!(ra.checkpoints, rb.checkpoints);
    assert_eq!(ra.memory, rb.memory);
}

#[test]
fn mismatched_feature_rows_and_bad_settings_are_rejected() {
    let sc = scenario(0);
    let wide = TcnConfig {
        input_channels: 5,
        ..tcn()
    };
    assert!(run_experiment(&sc, &config(Strategy::Finetune, KdConfig::default()), &wide).is_err());
    let zero = TrainConfig {
        batch_size: 0,
        ..config(Strategy::Finetune, KdConfig::default())
    };
    assert!(run_experiment(&sc, &zero, &tcn()).is_err());
    let small = TrainConfig {
        memory_capacity: 5,
        ..config(Strategy::RehearsalRandom, KdConfig::default())
    };
    assert!(run_experiment(&sc, &small, &tcn()).is_err());
}

#[test]
fn results_are_written_and_read_back() {
    let sc = scenario(0);
    let r = run_experiment(&sc, &config(Strategy::RehearsalRandom, KdConfig::default()), &tcn()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_dir(dir.path(), None).unwrap();
    for name in ["config.json", "accuracy_matrix.csv", "epoch_log.csv", "memory_dump.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    for t in 0..3 {
        assert!(dir.path().join(format!("checkpoints/task_{t:02}.ckpt")).is_file());
    }
    let log = read_epoch_log(dir.path().join("epoch_log.csv")).unwrap();
    assert_eq!(log.len(), 6);
    for (a, b) in log.iter().zip(&r.log) {
        assert_eq!((a.task, a.epoch, a.step), (b.task, b.epoch, b.step));
        assert!((a.running_avg_acc - b.running_avg_acc).abs() < 1e-12);
    }
}
