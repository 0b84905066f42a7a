use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Observation, Pixel};

/// One stored step. `r` is the unshaped pick reward.
#[derive(Debug, Clone)]
pub struct Transition {
    pub s: Arc<Observation>,
    pub a: Pixel,
    pub r: f64,
    pub s_next: Arc<Observation>,
    pub done: bool,
}

/// FIFO ring with uniform sampling (with replacement) from its own stream.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)), rng }
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample(&mut self, batch: usize) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        let n = self.items.len();
        let picks: Vec<usize> = (0..batch).map(|_| self.rng.random_range(0..n)).collect();
        picks.into_iter().map(|i| &self.items[i]).collect()
    }
}
