//! Linear warm-up followed by cosine decay to zero.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_peak: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self)
    }
}

pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step > s.total_steps {
        log::warn!(
            "lr_at: step {step} beyond total {}; using 0",
            s.total_steps
        );
        return 0.0;
    }
    if step <= s.warmup_steps {
        if s.warmup_steps == 0 {
            return s.lr_peak;
        }
        return s.lr_peak * step as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    0.5 * s.lr_peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
