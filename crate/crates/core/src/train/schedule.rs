use serde::{Deserialize, Serialize};

/// Linear warmup to `base_lr`, then cosine annealing to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup: usize, total: usize) -> Self {
        Self { base_lr, warmup, total }
    }

    /// Learning rate at `step`; past `total` it is clamped to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step > self.total {
            log::warn!("step {step} is past the schedule end {}; using lr 0", self.total);
            return 0.0;
        }
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        if self.total == self.warmup {
            return self.base_lr;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
