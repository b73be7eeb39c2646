//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

use crate::train::TrainConfig;

/// Learning rate at a global step. Warmup climbs linearly from
/// `lr_max / warmup_steps` to exactly `lr_max` on the last warmup step; the
/// cosine arc then runs from `lr_max` down to exactly `lr_min` on the final
/// step of the run.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    let total_steps = config.total_epochs * steps_per_epoch;
    if total_steps == 0 || step >= total_steps {
        return config.lr_min;
    }
    if step < warmup_steps {
        return config.lr_max * (step + 1) as f64 / warmup_steps as f64;
    }
    let cosine_steps = total_steps - warmup_steps;
    let t = if cosine_steps <= 1 {
        1.0
    } else {
        (step - warmup_steps) as f64 / (cosine_steps - 1) as f64
    };
    config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (PI * t).cos())
}
