//! Rehearsal memory with per-class pre-allocated slots.
//!
//! The capacity is divided evenly over every class of the scenario up front,
//! so a class seen late gets exactly as many exemplars as one seen first.
//! Exemplars are chosen once, with the model as it stands at the end of the
//! class's task, and are never re-selected.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::scenario::{Sample, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random,
    ClosestToMean,
    IcarlHerding,
}

fn squared_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks `min(k, n)` candidates; returns indices into `ids` in selection
/// order. Candidates are canonicalized by id first, so the result does not
/// depend on input order, and distance ties go to the smaller id.
pub fn select_indices(
    strategy: SelectionStrategy,
    ids: &[&str],
    embeddings: &[Array1<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(CilError::Data("cannot select exemplars from an empty class".into()));
    }
    if ids.len() != embeddings.len() {
        return Err(CilError::Shape(format!(
            "{} ids for {} embeddings",
            ids.len(),
            embeddings.len()
        )));
    }
    if k == 0 {
        return Err(CilError::Config("exemplar count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
    let k = k.min(ids.len());

    match strategy {
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(rand::seq::index::sample(&mut rng, order.len(), k)
                .into_iter()
                .map(|i| order[i])
                .collect())
        }
        SelectionStrategy::ClosestToMean => {
            let mean = class_mean(&order, embeddings);
            let mut scored: Vec<(f64, usize)> = order
                .iter()
                .map(|&i| (squared_distance(&embeddings[i], &mean), i))
                .collect();
            // `order` is id-sorted and the sort is stable: ties keep id order.
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
        }
        SelectionStrategy::IcarlHerding => {
            let mean = class_mean(&order, embeddings);
            let mut running = Array1::<f64>::zeros(mean.len());
            let mut chosen = Vec::with_capacity(k);
            let mut taken = vec![false; ids.len()];
            for step in 1..=k {
                let mut best: Option<(f64, usize)> = None;
                for &i in order.iter().filter(|&&i| !taken[i]) {
                    let candidate = (&running + &embeddings[i]) / step as f64;
                    let d = squared_distance(&mean, &candidate);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                let (_, pick) = best.expect("k never exceeds the candidate count");
                taken[pick] = true;
                running += &embeddings[pick];
                chosen.push(pick);
            }
            Ok(chosen)
        }
    }
}

fn class_mean(order: &[usize], embeddings: &[Array1<f64>]) -> Array1<f64> {
    let mut sum = Array1::zeros(embeddings[order[0]].len());
    for &i in order {
        sum += &embeddings[i];
    }
    sum / order.len() as f64
}

/// Embeds every candidate and returns the selected samples in selection order.
pub fn select_exemplars<'a>(
    strategy: SelectionStrategy,
    class_samples: &[&'a Sample],
    k: usize,
    embed: &mut dyn FnMut(&Sample) -> Result<Array1<f64>>,
    seed: u64,
) -> Result<Vec<&'a Sample>> {
    let ids: Vec<&str> = class_samples.iter().map(|s| s.id.as_str()).collect();
    let embeddings = match strategy {
        // random selection never looks at embeddings
        SelectionStrategy::Random => vec![Array1::zeros(0); class_samples.len()],
        _ => class_samples
            .iter()
            .map(|s| embed(s))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(select_indices(strategy, &ids, &embeddings, k, seed)?
        .into_iter()
        .map(|i| class_samples[i])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub sample: Sample,
    pub source_task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalMemory {
    capacity: usize,
    total_classes: usize,
    slots_per_class: usize,
    store: BTreeMap<usize, Vec<MemoryEntry>>,
}

/// Memory dump for run provenance: class id → stored sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDump {
    pub capacity: usize,
    pub slots_per_class: usize,
    pub classes: BTreeMap<usize, Vec<String>>,
}

/// Empty memory with `floor(capacity / total_classes)` slots per class;
/// the remainder of the capacity stays unused.
pub fn allocate(capacity: usize, total_classes: usize) -> Result<RehearsalMemory> {
    if total_classes == 0 || capacity < total_classes {
        return Err(CilError::Config(format!(
            "memory of {capacity} cannot hold one exemplar for each of {total_classes} classes"
        )));
    }
    Ok(RehearsalMemory {
        capacity,
        total_classes,
        slots_per_class: capacity / total_classes,
        store: BTreeMap::new(),
    })
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64
}

impl RehearsalMemory {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots_per_class(&self) -> usize {
        self.slots_per_class
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.store.get(&class).map_or(0, Vec::len)
    }

    /// Fills the slots of `classes` from `train` (the finished task's training
    /// samples). Stored classes are left untouched.
    pub fn update_with(
        &mut self,
        task_index: usize,
        classes: &[usize],
        train: &[&Sample],
        strategy: SelectionStrategy,
        embed: &mut dyn FnMut(&Sample) -> Result<Array1<f64>>,
        seed: u64,
    ) -> Result<()> {
        if let Some(c) = classes.iter().find(|c| self.store.contains_key(c)) {
            return Err(CilError::Data(format!("class {c} is already in memory")));
        }
        if self.store.len() + classes.len() > self.total_classes {
            return Err(CilError::Data(format!(
                "memory was allocated for {} classes",
                self.total_classes
            )));
        }
        let mut selected = Vec::with_capacity(classes.len());
        for &class in classes {
            let candidates: Vec<&Sample> = train.iter().copied().filter(|s| s.label == class).collect();
            let picks = select_exemplars(
                strategy,
                &candidates,
                self.slots_per_class,
                embed,
                class_seed(seed, class),
            )?;
            let entries = picks
                .into_iter()
                .map(|s| MemoryEntry {
                    sample: s.clone(),
                    source_task: task_index,
                })
                .collect();
            selected.push((class, entries));
        }
        self.store.extend(selected);
        Ok(())
    }

    pub fn update_after_task(
        &mut self,
        scenario: &Scenario,
        t: usize,
        strategy: SelectionStrategy,
        embed: &mut dyn FnMut(&Sample) -> Result<Array1<f64>>,
        seed: u64,
    ) -> Result<()> {
        let task = scenario.task(t)?;
        let train = scenario.train_samples(t)?;
        self.update_with(t, &task.classes, &train, strategy, embed, seed)
    }

    /// Every stored entry, ordered by class id then insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.store.values().flatten()
    }

    pub fn rehearsal_dataset(&self) -> Vec<&Sample> {
        self.entries().map(|e| &e.sample).collect()
    }

    /// Stored samples grouped by the task that contributed them.
    pub fn by_source_task(&self) -> BTreeMap<usize, Vec<&Sample>> {
        let mut groups: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for e in self.entries() {
            groups.entry(e.source_task).or_default().push(&e.sample);
        }
        groups
    }

    pub fn dump(&self) -> MemoryDump {
        MemoryDump {
            capacity: self.capacity,
            slots_per_class: self.slots_per_class,
            classes: self
                .store
                .iter()
                .map(|(&c, v)| (c, v.iter().map(|e| e.sample.id.clone()).collect()))
                .collect(),
        }
    }
}
