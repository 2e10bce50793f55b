use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr` over the first `warmup_ratio·total_steps`
/// steps, then a half cosine down to 0 at `total_steps`. Steps past the end give 0.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    let warmup = warmup_ratio * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        return base_lr * s / warmup;
    }
    let span = total_steps as f64 - warmup;
    let progress = if span > 0.0 { (s - warmup) / span } else { 1.0 };
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks() {
        assert_eq!(cosine_warmup_lr(0, 1000, 1e-3, 0.05), 0.0);
        assert_eq!(cosine_warmup_lr(50, 1000, 1e-3, 0.05), 1e-3);
        assert!((cosine_warmup_lr(525, 1000, 1e-3, 0.05) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_warmup_lr(1000, 1000, 1e-3, 0.05), 0.0);
        assert_eq!(cosine_warmup_lr(5000, 1000, 1e-3, 0.05), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(cosine_warmup_lr(0, 10, 0.1, 0.0), 0.1);
    }
}
