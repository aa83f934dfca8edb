use super::ServiceSpec;

/// `clamp(ceil(avg / target), min, max)`.
pub fn desired_instances(avg_concurrency: f64, spec: &ServiceSpec) -> u32 {
    let avg = if avg_concurrency.is_finite() && avg_concurrency > 0.0 {
        avg_concurrency
    } else {
        0.0
    };
    let raw = (avg / spec.target_concurrency_per_instance).ceil();
    let raw = if raw >= u32::MAX as f64 { u32::MAX } else { raw as u32 };
    raw.clamp(spec.min_instances, spec.max_instances)
}
