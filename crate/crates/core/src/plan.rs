//! Actor-core capacity planning.

use crate::{Error, Result};

/// Cores needed so that `n·ratio` interactions of `t_env` ms fit inside one
/// vectorized update step of `t_update` ms: `⌈n·ratio·t_env / t_update⌉`.
pub fn plan_actor_cores(n: usize, t_env_ms: f64, t_update_ms: f64, ratio: f64) -> Result<usize> {
    plan_actor_cores_with_overhead(n, t_env_ms, t_update_ms, ratio, 1.0)
}

/// As [`plan_actor_cores`], with interaction time inflated by `overhead`.
pub fn plan_actor_cores_with_overhead(
    n: usize,
    t_env_ms: f64,
    t_update_ms: f64,
    ratio: f64,
    overhead: f64,
) -> Result<usize> {
    let ok = n > 0
        && [t_env_ms, t_update_ms, ratio, overhead]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
    if !ok {
        return Err(Error::Config(alloc::format!(
            "planner inputs must be positive: n {n}, t_env {t_env_ms}, t_update {t_update_ms}, ratio {ratio}, overhead {overhead}"
        )));
    }
    let x = n as f64 * ratio * t_env_ms * overhead / t_update_ms;
    // Absorb rounding noise so exact multiples do not round up.
    Ok(libm::ceil(x * (1.0 - 1e-12)) as usize)
}
