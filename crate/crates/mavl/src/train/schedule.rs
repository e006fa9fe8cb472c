//! Linear warmup followed by cosine decay.

/// Learning rate at `step` (0-based): 0 -> base over `warmup` steps, then a
/// half cosine from base down to min at `total`.
pub fn lr_at(step: usize, base_lr: f64, min_lr: f64, warmup: usize, total: usize) -> f64 {
    if step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}
