use std::f64::consts::PI;

/// Per-step learning rate: linear warmup from 0, then half-cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// Schedule in epochs, resolved against the number of steps per epoch.
    pub fn from_epochs(base_lr: f64, warmup_epochs: u64, epochs: u64, steps_per_epoch: u64) -> Self {
        Self::new(base_lr, warmup_epochs * steps_per_epoch, epochs * steps_per_epoch)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
