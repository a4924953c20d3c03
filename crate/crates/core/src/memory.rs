//! Confidence-gated, class-balanced sample memory.
//!
//! A sample is admitted only if its confidence is strictly above the
//! threshold. Once the bank is full, admission evicts one stored item chosen
//! to keep the predicted-class histogram flat: if the newcomer's class is not
//! among the most frequent classes, a random item from the most frequent
//! classes goes; otherwise a random item of the newcomer's own class goes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::prediction_from_logits;
use crate::tensor::Tensor;

/// Max softmax probability of a `1 × K` logit row.
pub fn confidence_of(logits: &Tensor) -> f64 {
    prediction_from_logits(logits.row_slice(0)).confidence
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryItem {
    pub features: Tensor,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Rejected,
    Appended,
    Replaced { evicted_class: usize },
}

impl InsertOutcome {
    pub fn inserted(self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

/// Eviction rule once the bank is full.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictionPolicy {
    ClassBalanced,
    /// Ring buffer: the oldest item goes.
    Fifo,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    classes: usize,
    policy: EvictionPolicy,
    items: Vec<MemoryItem>,
    counts: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MemoryBank {
    pub fn new(capacity: usize, classes: usize, policy: EvictionPolicy, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "memory capacity must be positive".into(),
            ));
        }
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "memory needs at least one class".into(),
            ));
        }
        Ok(Self {
            capacity,
            classes,
            policy,
            items: Vec::with_capacity(capacity),
            counts: vec![0; classes],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    /// Gate then balance. `threshold` is compared strictly: `confidence > threshold`.
    pub fn maybe_insert(
        &mut self,
        features: Tensor,
        label: usize,
        confidence: f64,
        threshold: f64,
    ) -> InsertOutcome {
        assert!(
            label < self.classes,
            "label {label} out of range for {} classes",
            self.classes
        );
        if !(confidence > threshold) {
            return InsertOutcome::Rejected;
        }
        let item = MemoryItem {
            features,
            label,
            confidence,
        };
        if self.items.len() < self.capacity {
            self.push(item);
            return InsertOutcome::Appended;
        }
        let victim = match self.policy {
            EvictionPolicy::Fifo => 0,
            EvictionPolicy::ClassBalanced => self.pick_victim(label),
        };
        let evicted = self.items.remove(victim);
        self.counts[evicted.label] -= 1;
        self.push(item);
        InsertOutcome::Replaced {
            evicted_class: evicted.label,
        }
    }

    fn push(&mut self, item: MemoryItem) {
        self.counts[item.label] += 1;
        self.items.push(item);
    }

    fn pick_victim(&mut self, label: usize) -> usize {
        let prevalent = self.prevalent_classes().expect("full bank is non-empty");
        let pool: Vec<usize> = if prevalent.contains(&label) {
            self.positions(|y| y == label)
        } else {
            self.positions(|y| prevalent.contains(&y))
        };
        pool[self.rng.random_range(0..pool.len())]
    }

    fn positions(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| keep(it.label))
            .map(|(i, _)| i)
            .collect()
    }

    /// Every class attaining the maximum stored count, ascending.
    pub fn prevalent_classes(&self) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Contract(
                "prevalent_classes on an empty memory".into(),
            ));
        }
        let max = *self.counts.iter().max().expect("classes > 0");
        Ok((0..self.classes)
            .filter(|&c| self.counts[c] == max)
            .collect())
    }

    /// Row-stacked features, oldest first. The bank is left untouched.
    pub fn as_batch(&self) -> Result<Tensor> {
        let rows: Vec<&Tensor> = self.items.iter().map(|it| &it.features).collect();
        Tensor::vstack(&rows)
    }

    /// Recount of stored labels; always equal to [`class_counts`](Self::class_counts).
    pub fn recount(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for it in &self.items {
            c[it.label] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(v: f64) -> Tensor {
        Tensor::row(vec![v, -v]).unwrap()
    }

    fn bank_with(labels: &[usize], seed: u64) -> MemoryBank {
        let mut b = MemoryBank::new(labels.len(), 3, EvictionPolicy::ClassBalanced, seed).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            assert_eq!(
                b.maybe_insert(x(i as f64), y, 0.999, 0.99),
                InsertOutcome::Appended
            );
        }
        b
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_of(&Tensor::row(vec![0.0, 0.0]).unwrap()), 0.5);
        let c = confidence_of(&Tensor::row(vec![2.0, 0.0, 0.0]).unwrap());
        assert!((c - 0.78699).abs() < 1e-5);
    }

    #[test]
    fn low_confidence_rejected() {
        let mut b = bank_with(&[0, 1], 0);
        let before = b.items().to_vec();
        assert_eq!(
            b.maybe_insert(x(9.0), 1, 0.5, 0.99),
            InsertOutcome::Rejected
        );
        assert_eq!(
            b.maybe_insert(x(9.0), 1, 0.99, 0.99),
            InsertOutcome::Rejected
        );
        assert_eq!(b.items(), &before[..]);
    }

    #[test]
    fn minority_insert_evicts_majority() {
        let mut b = bank_with(&[0, 0, 1, 0], 1);
        assert_eq!(b.class_counts(), &[3, 1, 0]);
        let out = b.maybe_insert(x(9.0), 1, 0.999, 0.99);
        assert_eq!(out, InsertOutcome::Replaced { evicted_class: 0 });
        assert_eq!(b.class_counts(), &[2, 2, 0]);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn prevalent_insert_evicts_own_class() {
        let mut b = bank_with(&[0, 1, 0, 1], 2);
        let out = b.maybe_insert(x(9.0), 0, 0.999, 0.99);
        assert_eq!(out, InsertOutcome::Replaced { evicted_class: 0 });
        assert_eq!(b.class_counts(), &[2, 2, 0]);
    }

    #[test]
    fn tied_prevalent_classes_share_eviction() {
        let mut seen = [false; 2];
        for seed in 0..40 {
            let mut b = bank_with(&[0, 1, 0, 1, 2], seed);
            if let InsertOutcome::Replaced { evicted_class } =
                b.maybe_insert(x(9.0), 2, 0.999, 0.99)
            {
                seen[evicted_class] = true;
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn prevalent_examples() {
        assert_eq!(
            bank_with(&[0, 0, 0, 1], 0).prevalent_classes().unwrap(),
            vec![0]
        );
        assert_eq!(
            bank_with(&[0, 1, 0, 1, 2], 0).prevalent_classes().unwrap(),
            vec![0, 1]
        );
        assert_eq!(bank_with(&[2], 0).prevalent_classes().unwrap(), vec![2]);
        let empty = MemoryBank::new(3, 3, EvictionPolicy::ClassBalanced, 0).unwrap();
        assert!(matches!(empty.prevalent_classes(), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_is_ordered_and_non_destructive() {
        let b = bank_with(&[0, 2, 1], 0);
        let a = b.as_batch().unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(a.row_slice(1), &[1.0, -1.0]);
        assert_eq!(b.as_batch().unwrap(), a);
        assert_eq!(b.len(), 3);
        let empty = MemoryBank::new(3, 3, EvictionPolicy::ClassBalanced, 0).unwrap();
        assert!(matches!(empty.as_batch(), Err(Error::NoSamples)));
    }

    #[test]
    fn fifo_drops_oldest() {
        let mut b = MemoryBank::new(2, 3, EvictionPolicy::Fifo, 0).unwrap();
        b.maybe_insert(x(0.0), 0, 0.4, 0.0);
        b.maybe_insert(x(1.0), 0, 0.4, 0.0);
        assert_eq!(
            b.maybe_insert(x(2.0), 2, 0.4, 0.0),
            InsertOutcome::Replaced { evicted_class: 0 }
        );
        assert_eq!(b.as_batch().unwrap().data(), &[1.0, -1.0, 2.0, -2.0]);
    }
}
