//! Bounded replay memory.
//!
//! Entries are admitted by reservoir sampling, so after `n` insert attempts
//! each streamed example survives with probability `capacity / n`. Entries can
//! be temporarily reserved as validation data; reserved entries are never
//! returned by [`ReplayBuffer::sample_batch`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::neural::MlpModel;
use crate::streamgen::{ceil_count, Example};

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub example: Example,
    pub task_id: usize,
    /// Teacher logits captured at insertion (DER++).
    pub stored_logits: Option<Vec<f64>>,
    /// Number of insert attempts that preceded this one.
    pub insertion_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    n_classes: usize,
    entries: Vec<BufferEntry>,
    seen_count: usize,
    /// Example ids currently reserved for validation.
    held_out: BTreeSet<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_classes: usize) -> Self {
        ReplayBuffer {
            capacity,
            n_classes,
            entries: Vec::with_capacity(capacity),
            seen_count: 0,
            held_out: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn held_out_ids(&self) -> &BTreeSet<usize> {
        &self.held_out
    }

    pub fn is_held_out(&self, entry: &BufferEntry) -> bool {
        self.held_out.contains(&entry.example.id)
    }

    /// Entries available for replay.
    pub fn eligible(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter().filter(|e| !self.is_held_out(e))
    }

    /// Offer one example to the reservoir.
    ///
    /// Below capacity the example is appended. Otherwise a slot `j` is drawn
    /// uniformly from `0..=seen_count` and the example replaces entry `j` when
    /// `j < capacity`. `seen_count` grows by one either way.
    pub fn reservoir_insert<R: Rng>(
        &mut self,
        example: Example,
        task_id: usize,
        stored_logits: Option<Vec<f64>>,
        rng: &mut R,
    ) -> Result<()> {
        if let Some(logits) = &stored_logits {
            ensure!(
                logits.len() == self.n_classes,
                Shape,
                "stored logits have length {}, buffer expects {}",
                logits.len(),
                self.n_classes
            );
        }
        let entry = BufferEntry {
            example,
            task_id,
            stored_logits,
            insertion_index: self.seen_count,
        };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let j = rng.gen_range(0..=self.seen_count);
            if j < self.capacity {
                let evicted = std::mem::replace(&mut self.entries[j], entry);
                self.held_out.remove(&evicted.example.id);
            }
        }
        self.seen_count += 1;
        Ok(())
    }

    /// Replace the contents wholesale (exemplar-set methods). Reservations on
    /// ids that survive are kept.
    pub fn replace_entries(&mut self, entries: Vec<BufferEntry>, attempts: usize) -> Result<()> {
        ensure!(
            entries.len() <= self.capacity,
            Argument,
            "{} entries exceed capacity {}",
            entries.len(),
            self.capacity
        );
        let ids: BTreeSet<usize> = entries.iter().map(|e| e.example.id).collect();
        self.held_out.retain(|id| ids.contains(id));
        self.entries = entries;
        self.seen_count += attempts;
        self.seen_count = self.seen_count.max(self.entries.len());
        Ok(())
    }

    /// Up to `k` distinct non-reserved entries, uniformly without replacement.
    /// When `k` covers the eligible set, every eligible entry is returned once
    /// in buffer order.
    pub fn sample_batch<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<&BufferEntry> {
        let eligible: Vec<&BufferEntry> = self.eligible().collect();
        if k >= eligible.len() {
            return eligible;
        }
        index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    }

    /// Reserve `ceil(fraction * n_t)` entries from every task `t` present.
    /// Returns the reserved example ids; they stay reserved until
    /// [`release_holdout`](Self::release_holdout).
    pub fn holdout_proportional<R: Rng>(
        &mut self,
        fraction: f64,
        rng: &mut R,
    ) -> Result<BTreeSet<usize>> {
        ensure!(
            fraction > 0.0 && fraction < 1.0,
            Argument,
            "holdout fraction must lie in (0, 1), got {fraction}"
        );
        let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for e in self.eligible() {
            by_task.entry(e.task_id).or_default().push(e.example.id);
        }
        let mut chosen = BTreeSet::new();
        for ids in by_task.values() {
            let k = ceil_count(fraction, ids.len());
            chosen.extend(ids.choose_multiple(rng, k).copied());
        }
        self.held_out.extend(chosen.iter().copied());
        Ok(chosen)
    }

    pub fn release_holdout(&mut self) {
        self.held_out.clear();
    }

    /// Write entries as CSV: `id,task_id,label,insertion_index,held_out,f0..,l0..`.
    pub fn dump_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let dim = self.entries.first().map_or(0, |e| e.example.features.len());
        let mut header = vec![
            "id".to_string(),
            "task_id".into(),
            "label".into(),
            "insertion_index".into(),
            "held_out".into(),
        ];
        header.extend((0..dim).map(|i| format!("f{i}")));
        let with_logits = self.entries.iter().any(|e| e.stored_logits.is_some());
        if with_logits {
            header.extend((0..self.n_classes).map(|i| format!("l{i}")));
        }
        let mut text = header.join(",") + "\n";
        for e in &self.entries {
            let mut row = vec![
                e.example.id.to_string(),
                e.task_id.to_string(),
                e.example.label.to_string(),
                e.insertion_index.to_string(),
                self.is_held_out(e).to_string(),
            ];
            row.extend(e.example.features.iter().map(|v| format!("{v:?}")));
            if with_logits {
                match &e.stored_logits {
                    Some(l) => row.extend(l.iter().map(|v| format!("{v:?}"))),
                    None => row.extend(std::iter::repeat_n(String::new(), self.n_classes)),
                }
            }
            text.push_str(&row.join(","));
            text.push('\n');
        }
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// `stable <- decay * stable + (1 - decay) * online`, elementwise.
pub fn ema_update(stable: &mut MlpModel, online: &MlpModel, decay: f64) -> Result<()> {
    ensure!(
        decay > 0.0 && decay < 1.0,
        Argument,
        "EMA decay must lie in (0, 1), got {decay}"
    );
    ensure!(
        stable.congruent(online),
        Shape,
        "EMA models have different shapes"
    );
    for (s, o) in stable.params_mut().zip(online.params()) {
        *s = decay * *s + (1.0 - decay) * o;
    }
    Ok(())
}
