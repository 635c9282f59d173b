use std::f64::consts::PI;

/// Linear warmup over steps `1..=warmup`, then cosine decay reaching 0 at
/// `total`. Steps are 1-based.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, base_lr: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots() {
        assert_eq!(lr_schedule(10, 10, 200, 1e-3), 1e-3);
        assert_eq!(lr_schedule(1, 10, 200, 1e-3), 1e-4);
        assert!(lr_schedule(200, 10, 200, 1e-3).abs() < 1e-18);
        assert_eq!(lr_schedule(1, 0, 10, 1.0), 0.5 * (1.0 + (PI / 10.0).cos()));
    }

    #[test]
    fn warmup_rises_then_decay_falls() {
        let lrs: Vec<f64> = (1..=100).map(|s| lr_schedule(s, 20, 100, 0.1)).collect();
        assert!(lrs[..20].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[19..].windows(2).all(|w| w[1] <= w[0]));
    }
}
