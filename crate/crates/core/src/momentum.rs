//! EMA parameter tracking and fixed-capacity FIFO negative queues, the
//! machinery that decouples negative-sample count from batch size.

use crate::error::{Error, Result};
use crate::logging;
use std::collections::VecDeque;

/// Shadow copy of a flat parameter vector updated as
/// `shadow <- m * shadow + (1 - m) * live`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTracker {
    shadow: Vec<f64>,
    decay: f64,
}

impl EmaTracker {
    /// Momentum parameters share the live structure and initial values, so
    /// the tracker starts as a copy of the live vector.
    pub fn new(initial: Vec<f64>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        Ok(EmaTracker {
            shadow: initial,
            decay,
        })
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update(&mut self, live_params: &[f64]) -> Result<()> {
        if live_params.len() != self.shadow.len() {
            return Err(Error::Shape(format!(
                "live parameter length {} does not match shadow length {}",
                live_params.len(),
                self.shadow.len()
            )));
        }
        let m = self.decay;
        for (s, &l) in self.shadow.iter_mut().zip(live_params) {
            *s = m * *s + (1.0 - m) * l;
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO queue of detached negative samples. Entries carry no
/// gradient state; they stay in the queue unchanged until evicted.
#[derive(Debug, Clone)]
pub struct NegativeQueue<T> {
    capacity: usize,
    entries: VecDeque<T>,
}

impl<T> NegativeQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be >= 1".into()));
        }
        Ok(NegativeQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
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

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    /// Append a batch in order, evicting the oldest entries so the length
    /// never exceeds capacity. A single push larger than the capacity keeps
    /// the newest `capacity` items and warns.
    pub fn push_batch(&mut self, batch: Vec<T>) {
        if batch.len() > self.capacity {
            logging::warn(format!(
                "queue push of {} items exceeds capacity {}; keeping the newest {}",
                batch.len(),
                self.capacity,
                self.capacity
            ));
        }
        for item in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(item);
        }
    }
}
