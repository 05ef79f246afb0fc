use rand::seq::index;

use crate::diff::Mat;
use crate::losses::BankView;
use crate::seed;

/// Per-view FIFO ring buffers of detached, unit-normalized past features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    views: Vec<Ring>,
}

#[derive(Debug, Clone, PartialEq)]
struct Ring {
    slots: Vec<(usize, Vec<f64>)>,
    cursor: usize,
}

impl MemoryBank {
    pub fn new(views: usize, capacity: usize) -> Self {
        MemoryBank {
            capacity,
            views: vec![
                Ring {
                    slots: Vec::new(),
                    cursor: 0
                };
                views
            ],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self, view: usize) -> usize {
        self.views[view].slots.len()
    }

    /// Stored sample ids of `view` in slot order.
    pub fn ids(&self, view: usize) -> Vec<usize> {
        self.views[view].slots.iter().map(|s| s.0).collect()
    }

    /// Write `features` rows (re-normalized) for `ids`, overwriting the oldest slots.
    pub fn push(&mut self, view: usize, ids: &[usize], features: &Mat) {
        if self.capacity == 0 {
            return;
        }
        let ring = &mut self.views[view];
        for (&id, row) in ids.iter().zip(features.rows()) {
            let norm = row.dot(&row).sqrt().max(crate::diff::EPS);
            let v: Vec<f64> = row.iter().map(|x| x / norm).collect();
            if ring.slots.len() < self.capacity {
                ring.slots.push((id, v));
            } else {
                ring.slots[ring.cursor] = (id, v);
            }
            ring.cursor = (ring.cursor + 1) % self.capacity;
        }
    }

    /// Up to `k` distinct slots of `view`, uniformly drawn with `(seed, stream)`,
    /// skipping every slot whose sample id is in `exclude`. Slots come back in
    /// ascending slot order.
    pub fn retrieve(&self, view: usize, exclude: &[usize], k: usize, seed_base: u64, stream: u64) -> BankView {
        let ring = &self.views[view];
        let candidates: Vec<usize> = (0..ring.slots.len()).filter(|&s| !exclude.contains(&ring.slots[s].0)).collect();
        let take = k.min(candidates.len());
        let mut chosen: Vec<usize> = if take == candidates.len() {
            candidates
        } else {
            let mut rng = seed::stream(seed_base, "bank", stream);
            index::sample(&mut rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        };
        chosen.sort_unstable();
        let dim = ring.slots.first().map_or(0, |s| s.1.len());
        let mut features = Mat::zeros((chosen.len(), dim));
        let mut ids = Vec::with_capacity(chosen.len());
        for (r, &s) in chosen.iter().enumerate() {
            ids.push(ring.slots[s].0);
            for (c, &x) in ring.slots[s].1.iter().enumerate() {
                features[[r, c]] = x;
            }
        }
        BankView { ids, features }
    }
}
