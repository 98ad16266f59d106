//! Class-incremental task streams.
//!
//! A [`Scenario`] owns every sample of a dataset and partitions the label set
//! into an ordered sequence of tasks with pairwise-disjoint class sets. The
//! class order is a seeded uniform shuffle of the sorted label ids, so a
//! scenario is fully determined by its samples, task sizes and seed.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};

/// Task sizes of the Fluent Speech Commands preset: 4 intents, then 9 × 3.
pub const FSC_TASK_SIZES: [usize; 10] = [4, 3, 3, 3, 3, 3, 3, 3, 3, 3];

/// One utterance (or synthetic stand-in): a `[n_mels × n_frames]` feature
/// matrix with its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Array2<f32>,
    pub label: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: Array2<f32>, label: usize) -> Self {
        Sample {
            id: id.into(),
            features,
            label,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Samples grouped by dataset split, the input to [`build_cil_scenario`].
#[derive(Debug, Clone, Default)]
pub struct SplitSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSamples {
    fn iter(&self) -> impl Iterator<Item = (Split, &Sample)> {
        self.train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(self.val.iter().map(|s| (Split::Val, s)))
            .chain(self.test.iter().map(|s| (Split::Test, s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub tasks: Vec<TaskSpec>,
    pub class_order: Vec<usize>,
    pub class_order_seed: u64,
    pub total_classes: usize,
    #[serde(skip)]
    samples: Vec<Sample>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks
            && self.class_order == other.class_order
            && self.class_order_seed == other.class_order_seed
            && self.total_classes == other.total_classes
            && self.samples == other.samples
    }
}

/// Shuffles the sorted distinct labels with `seed` and cuts the result into
/// consecutive tasks of the given sizes.
pub fn build_cil_scenario(
    samples: SplitSamples,
    task_sizes: &[usize],
    seed: u64,
) -> Result<Scenario> {
    if task_sizes.is_empty() || task_sizes.contains(&0) {
        return Err(CilError::Config(format!(
            "task sizes must be non-empty and positive, got {task_sizes:?}"
        )));
    }
    let labels: BTreeSet<usize> = samples.iter().map(|(_, s)| s.label).collect();
    let total: usize = task_sizes.iter().sum();
    if total != labels.len() {
        return Err(CilError::Config(format!(
            "task sizes sum to {total} but the data holds {} distinct labels",
            labels.len()
        )));
    }
    let with_train: BTreeSet<usize> = samples.train.iter().map(|s| s.label).collect();
    if let Some(missing) = labels.iter().find(|l| !with_train.contains(l)) {
        return Err(CilError::Data(format!(
            "class {missing} has no training sample"
        )));
    }

    let mut class_order: Vec<usize> = labels.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    class_order.shuffle(&mut rng);

    let mut task_of_class = HashMap::new();
    let mut tasks = Vec::with_capacity(task_sizes.len());
    let mut start = 0;
    for (index, &size) in task_sizes.iter().enumerate() {
        let classes = class_order[start..start + size].to_vec();
        for &c in &classes {
            task_of_class.insert(c, index);
        }
        tasks.push(TaskSpec {
            index,
            classes,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        });
        start += size;
    }

    let mut index = HashMap::new();
    let mut all = Vec::new();
    for (split, sample) in samples.iter() {
        if index.insert(sample.id.clone(), all.len()).is_some() {
            return Err(CilError::Data(format!("duplicate sample id {}", sample.id)));
        }
        let task = &mut tasks[task_of_class[&sample.label]];
        let list = match split {
            Split::Train => &mut task.train,
            Split::Val => &mut task.val,
            Split::Test => &mut task.test,
        };
        list.push(sample.id.clone());
        all.push(sample.clone());
    }

    Ok(Scenario {
        tasks,
        class_order,
        class_order_seed: seed,
        total_classes: total,
        samples: all,
        index,
    })
}

/// Parameters of the desk-scale Gaussian-cluster stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub feat_dim: usize,
    pub n_frames: usize,
    pub cluster_std: f64,
}

/// Each class is an isotropic Gaussian cluster around its own random mean.
/// A sample draws one point from its cluster and replicates it over
/// `n_frames` frames with per-frame noise of the same scale. Every class is
/// split 80:10:10 into train/val/test.
pub fn synthetic_scenario(params: &SyntheticParams, seed: u64) -> Result<Scenario> {
    let SyntheticParams {
        n_tasks,
        classes_per_task,
        samples_per_class,
        feat_dim,
        n_frames,
        cluster_std,
    } = *params;
    if [n_tasks, classes_per_task, samples_per_class, feat_dim, n_frames].contains(&0) {
        return Err(CilError::Config(
            "synthetic scenario counts must all be >= 1".into(),
        ));
    }
    if !(cluster_std > 0.0 && cluster_std.is_finite()) {
        return Err(CilError::Config(format!(
            "cluster_std must be positive, got {cluster_std}"
        )));
    }

    let n_classes = n_tasks * classes_per_task;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = samples_per_class / 10;
    let n_test = samples_per_class / 10;
    let n_train = samples_per_class - n_val - n_test;

    let mut split = SplitSamples::default();
    for class in 0..n_classes {
        let mean: Vec<f64> = (0..feat_dim).map(|_| std_normal.sample(&mut rng)).collect();
        for i in 0..samples_per_class {
            let point: Vec<f64> = mean
                .iter()
                .map(|m| m + cluster_std * std_normal.sample(&mut rng))
                .collect();
            let features = Array2::from_shape_fn((feat_dim, n_frames), |(d, _)| {
                (point[d] + cluster_std * std_normal.sample(&mut rng)) as f32
            });
            let sample = Sample::new(format!("c{class:04}_s{i:06}"), features, class);
            if i < n_train {
                split.train.push(sample);
            } else if i < n_train + n_val {
                split.val.push(sample);
            } else {
                split.test.push(sample);
            }
        }
    }
    build_cil_scenario(split, &vec![classes_per_task; n_tasks], seed)
}

impl Scenario {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        self.tasks.get(t).ok_or(CilError::OutOfRange {
            index: t,
            len: self.tasks.len(),
        })
    }

    /// Union of the classes of tasks `0..=t`, in task order.
    pub fn seen_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.task(t)?;
        Ok(self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect())
    }

    /// `(n, m)`: the number of classes seen before task `t` and the number
    /// introduced by it.
    pub fn old_and_new(&self, t: usize) -> Result<(usize, usize)> {
        let m = self.task(t)?.classes.len();
        let n = if t == 0 {
            0
        } else {
            self.seen_classes(t - 1)?.len()
        };
        Ok((n, m))
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn resolve<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a Sample> + 'a {
        ids.iter().map(move |id| &self.samples[self.index[id]])
    }

    pub fn train_samples(&self, t: usize) -> Result<Vec<&Sample>> {
        Ok(self.resolve(&self.task(t)?.train).collect())
    }

    pub fn val_samples(&self, t: usize) -> Result<Vec<&Sample>> {
        Ok(self.resolve(&self.task(t)?.val).collect())
    }

    pub fn test_samples(&self, t: usize) -> Result<Vec<&Sample>> {
        Ok(self.resolve(&self.task(t)?.test).collect())
    }

    /// Provenance document: tasks, class order and seed (no feature data).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_mels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.nrows())
    }

    /// Every sample back in its original split, task by task.
    pub fn split_samples(&self) -> Result<SplitSamples> {
        let mut split = SplitSamples::default();
        for t in 0..self.num_tasks() {
            split.train.extend(self.train_samples(t)?.into_iter().cloned());
            split.val.extend(self.val_samples(t)?.into_iter().cloned());
            split.test.extend(self.test_samples(t)?.into_iter().cloned());
        }
        Ok(split)
    }

    /// The same data as a single task holding every class, for offline
    /// (joint) training.
    pub fn joint(&self) -> Result<Scenario> {
        build_cil_scenario(self.split_samples()?, &[self.total_classes], self.class_order_seed)
    }
}
