use std::f64::consts::PI;

/// `base·½·(1 + cos(π·step/total))`; `step` is clamped to `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}
