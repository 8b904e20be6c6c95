//! Group-tagged experience storage and minibatch sampling.
//!
//! The buffer never evicts: runs whose step budget exceeds the capacity
//! are rejected at config validation, because eviction would corrupt the
//! group/mask bookkeeping. Group ids are assigned from the insertion
//! index, so an experience's mask can always be regenerated from its id.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::group_id_of;

/// Hard cap on minibatch size.
pub const MAX_MINIBATCH: usize = 8192;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("buffer capacity {0} exceeded")]
    CapacityExceeded(usize),
    #[error("experience carries group_id {got}, insertion index implies {expected}")]
    GroupMismatch { got: u64, expected: u64 },
    #[error("cannot sample {requested} items from buffer of size {available}")]
    NotEnoughItems { requested: usize, available: usize },
    #[error("batch size {0} exceeds the {MAX_MINIBATCH} limit")]
    BatchTooLarge(usize),
    #[error("non-finite field in experience")]
    NonFinite,
}

/// One stored transition tagged with its experience group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub group_id: u64,
    pub poisoned: bool,
}

impl Experience {
    fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
            && self.next_state.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    group_size: usize,
    storage: Vec<Experience>,
    insertion_count: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, group_size: usize) -> Self {
        Self { capacity, group_size, storage: Vec::new(), insertion_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn insertion_count(&self) -> u64 {
        self.insertion_count
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.storage
    }

    /// Append an experience. Its `group_id` must match the id implied by
    /// the insertion index.
    pub fn push(&mut self, exp: Experience) -> Result<(), ReplayError> {
        let expected = group_id_of(self.insertion_count, self.group_size);
        if exp.group_id != expected {
            return Err(ReplayError::GroupMismatch { got: exp.group_id, expected });
        }
        self.push_recorded(exp)
    }

    /// Append an experience keeping its recorded `group_id`. Used when
    /// replaying exported streams, where exclusions shift insertion
    /// indices away from the original ones.
    pub fn push_recorded(&mut self, exp: Experience) -> Result<(), ReplayError> {
        if self.storage.len() >= self.capacity {
            return Err(ReplayError::CapacityExceeded(self.capacity));
        }
        if !exp.is_finite() {
            return Err(ReplayError::NonFinite);
        }
        debug_assert!(self.storage.last().map_or(true, |prev| prev.group_id <= exp.group_id));
        self.storage.push(exp);
        self.insertion_count += 1;
        Ok(())
    }

    /// Convenience for the trainer: assigns the group id from the
    /// insertion index.
    pub fn push_transition(
        &mut self,
        state: Vec<f64>,
        action: Vec<f64>,
        reward: f64,
        next_state: Vec<f64>,
        done: bool,
        poisoned: bool,
    ) -> Result<u64, ReplayError> {
        let group_id = group_id_of(self.insertion_count, self.group_size);
        self.push(Experience { state, action, reward, next_state, done, group_id, poisoned })?;
        Ok(group_id)
    }

    /// Uniform sampling with replacement, deterministic for a given seed.
    pub fn sample_minibatch(
        &self,
        batch_size: usize,
        rng_seed: u64,
    ) -> Result<Vec<Experience>, ReplayError> {
        if batch_size > MAX_MINIBATCH {
            return Err(ReplayError::BatchTooLarge(batch_size));
        }
        if self.storage.len() < batch_size || batch_size == 0 {
            return Err(ReplayError::NotEnoughItems {
                requested: batch_size,
                available: self.storage.len(),
            });
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
        Ok((0..batch_size)
            .map(|_| {
                use rand::Rng;
                self.storage[rng.gen_range(0..self.storage.len())].clone()
            })
            .collect())
    }

    /// Distinct group ids in insertion order with their member counts.
    pub fn groups(&self) -> Vec<(u64, usize)> {
        let mut out: Vec<(u64, usize)> = Vec::new();
        for exp in &self.storage {
            match out.last_mut() {
                Some((id, count)) if *id == exp.group_id => *count += 1,
                _ => out.push((exp.group_id, 1)),
            }
        }
        out
    }

    /// Indices (into `experiences()`) belonging to one group.
    pub fn group_indices(&self, group_id: u64) -> Vec<usize> {
        self.storage
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (e.group_id == group_id).then_some(i))
            .collect()
    }
}
