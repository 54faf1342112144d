/// Cosine decay from `base` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
