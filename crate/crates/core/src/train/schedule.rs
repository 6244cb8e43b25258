use serde::{Deserialize, Serialize};

/// Linear warmup from 0 to `base`, then cosine decay to `floor` at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base: f64,
    pub floor: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base: 3e-4, floor: 3e-5, warmup: 1000, total: 10_000 }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.base;
        }
        let progress = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
