/// Linear ramp of the training radius: 0 up to `start`, `target` from `end`.
pub fn epsilon_schedule(step: u64, start: u64, end: u64, target: f64) -> f64 {
    if step <= start {
        if start == end && step == end {
            target
        } else {
            0.0
        }
    } else if step >= end {
        target
    } else {
        target * (step - start) as f64 / (end - start) as f64
    }
}
