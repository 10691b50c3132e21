/// `base / factor^k` where `k` counts the milestones at or below `epoch`.
pub fn lr_schedule(epoch: usize, base: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    let mut lr = base;
    for _ in 0..passed {
        lr /= factor;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let m = [170, 200];
        assert_eq!(lr_schedule(0, 1e-3, &m, 10.0), 1e-3);
        assert_eq!(lr_schedule(169, 1e-3, &m, 10.0), 1e-3);
        assert_eq!(lr_schedule(170, 1e-3, &m, 10.0), 1e-4);
        assert_eq!(lr_schedule(200, 1e-3, &m, 10.0), 1e-5);
        assert_eq!(lr_schedule(5000, 1e-3, &[], 10.0), 1e-3);
    }
}
