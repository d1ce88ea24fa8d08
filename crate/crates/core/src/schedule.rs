//! Horizon-aware timestep schedules.
//!
//! Every action index `i` of a chunk gets its own flow timestep. Under the
//! horizon-aware schedule (HAS) index `i` is fully denoised once the global
//! sampling progress `rho` drops to its hit time `u_i`; near-term actions hit
//! early, far-horizon actions hit late. Prefix slots (`i < d`) are conditioning
//! inputs and always carry hit time 0 and timestep 0.

use rand::Rng;

use crate::{Error, Result};

/// Slack used when deciding whether `rho` has reached a hit time.
pub const FINALIZE_TOL: f64 = 1e-12;

/// Per-index finalization times of a chunk with an action prefix of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HitTimes {
    values: Vec<f64>,
    prefix_len: usize,
    alpha: f64,
    u_d: f64,
}

impl HitTimes {
    /// All-zero hit times. Feeding these to [`local_timesteps`] reproduces the
    /// constant schedule.
    pub fn zeros(horizon: usize, prefix_len: usize) -> Result<Self> {
        check_prefix(horizon, prefix_len)?;
        Ok(Self {
            values: vec![0.0; horizon],
            prefix_len,
            alpha: 1.0,
            u_d: 0.0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn u_d(&self) -> f64 {
        self.u_d
    }
}

/// Shape parameters of the horizon-aware schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HasParams {
    pub alpha: f64,
    /// Hit time of the first valid action.
    pub u_d: f64,
}

impl HasParams {
    /// `u_d = (N-1)/N`, so the first valid action is ready after one step.
    /// With `N = 1` every row finalizes on the only step anyway; `u_d` is then
    /// set to 0.5 to stay inside its domain.
    pub fn single_step(alpha: f64, steps: usize) -> Self {
        let u_d = if steps <= 1 {
            0.5
        } else {
            (steps as f64 - 1.0) / steps as f64
        };
        Self { alpha, u_d }
    }

    pub fn hit_times(&self, horizon: usize, prefix_len: usize) -> Result<HitTimes> {
        hit_times(horizon, prefix_len, self.alpha, self.u_d)
    }
}

fn check_prefix(horizon: usize, prefix_len: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::domain("chunk length must be at least 1"));
    }
    if prefix_len >= horizon {
        return Err(Error::domain(format!(
            "prefix length {prefix_len} leaves no valid action in a chunk of {horizon}"
        )));
    }
    Ok(())
}

/// Hit times `u_i = (1 - (i-d)/max(H-1-d, 1))^alpha * u_d` for `i >= d`, zero
/// on the prefix.
pub fn hit_times(horizon: usize, prefix_len: usize, alpha: f64, u_d: f64) -> Result<HitTimes> {
    check_prefix(horizon, prefix_len)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("alpha {alpha} not in (0, 1]")));
    }
    if !(u_d > 0.0 && u_d < 1.0) {
        return Err(Error::domain(format!("u_d {u_d} not in (0, 1)")));
    }
    let span = (horizon - 1 - prefix_len).max(1) as f64;
    let values = (0..horizon)
        .map(|i| {
            if i < prefix_len {
                0.0
            } else {
                let base = 1.0 - (i - prefix_len) as f64 / span;
                base.max(0.0).powf(alpha) * u_d
            }
        })
        .collect();
    Ok(HitTimes {
        values,
        prefix_len,
        alpha,
        u_d,
    })
}

/// Per-index flow timesteps for one global step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVector {
    values: Vec<f64>,
    global_rho: f64,
}

impl TimestepVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn global_rho(&self) -> f64 {
        self.global_rho
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `tau_i = max(0, (rho - u_i) / (1 - u_i))` on valid indices, 0 on the prefix.
///
/// Panics if `rho` is outside `[0, 1]`.
pub fn local_timesteps(rho: f64, hit: &HitTimes) -> TimestepVector {
    assert!((0.0..=1.0).contains(&rho), "rho {rho} outside [0, 1]");
    let values = hit
        .values
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            if i < hit.prefix_len || rho <= u + FINALIZE_TOL {
                0.0
            } else {
                ((rho - u) / (1.0 - u)).clamp(0.0, 1.0)
            }
        })
        .collect();
    TimestepVector {
        values,
        global_rho: rho,
    }
}

/// The conventional schedule: every valid index shares the global timestep.
pub fn constant_timesteps(rho: f64, horizon: usize, prefix_len: usize) -> Result<TimestepVector> {
    check_prefix(horizon, prefix_len)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!("rho {rho} outside [0, 1]")));
    }
    let values = (0..horizon)
        .map(|i| if i < prefix_len { 0.0 } else { rho })
        .collect();
    Ok(TimestepVector {
        values,
        global_rho: rho,
    })
}

/// Loss mask selecting the non-prefix rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMask {
    bits: Vec<bool>,
    count_ones: usize,
}

impl PrefixMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.count_ones
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i]
    }
}

pub fn prefix_mask(horizon: usize, prefix_len: usize) -> Result<PrefixMask> {
    check_prefix(horizon, prefix_len)?;
    Ok(PrefixMask {
        bits: (0..horizon).map(|i| i >= prefix_len).collect(),
        count_ones: horizon - prefix_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Has,
    Constant,
}

/// One draw of the mixed training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSample {
    pub rho: f64,
    pub prefix_len: usize,
    pub kind: ScheduleKind,
    pub tau: TimestepVector,
    pub mask: PrefixMask,
}

/// Draw `rho ~ U(0,1)`, `d ~ U{0..=d_max}` and the schedule kind (HAS with
/// probability `p`), then build the matching timesteps and loss mask.
pub fn sample_training_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: usize,
    has: HasParams,
    p: f64,
    d_max: usize,
) -> Result<ScheduleSample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("mixing probability {p} not in [0, 1]")));
    }
    check_prefix(horizon, d_max)?;
    let rho: f64 = rng.random();
    let prefix_len = rng.random_range(0..=d_max);
    let kind = if rng.random::<f64>() < p {
        ScheduleKind::Has
    } else {
        ScheduleKind::Constant
    };
    let tau = match kind {
        ScheduleKind::Has => local_timesteps(rho, &has.hit_times(horizon, prefix_len)?),
        ScheduleKind::Constant => constant_timesteps(rho, horizon, prefix_len)?,
    };
    Ok(ScheduleSample {
        rho,
        prefix_len,
        kind,
        tau,
        mask: prefix_mask(horizon, prefix_len)?,
    })
}

/// Global progress `rho^j = (N - j + 1) / N` for sampler step `j` in
/// `1..=N+1`; `rho^{N+1}` is exactly 0.
pub fn global_rho(step: usize, steps: usize) -> f64 {
    assert!(steps >= 1 && (1..=steps + 1).contains(&step));
    if step == steps + 1 {
        0.0
    } else {
        (steps - step + 1) as f64 / steps as f64
    }
}

/// Sampler step (1-based) after which each valid index is finalized, i.e. the
/// first `j` with `tau_i^{j+1} = 0`. Prefix entries are `None`.
pub fn finalization_steps(hit: &HitTimes, steps: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; hit.horizon()];
    for j in 1..=steps {
        let next = local_timesteps(global_rho(j + 1, steps), hit);
        for (i, slot) in out.iter_mut().enumerate().skip(hit.prefix_len) {
            if slot.is_none() && next.values[i] == 0.0 {
                *slot = Some(j);
            }
        }
    }
    out
}

/// Number of sampler steps until indices `[d, d+s-1]` are all finalized.
pub fn steps_to_finalize(hit: &HitTimes, steps: usize, exec_horizon: usize) -> Result<usize> {
    let d = hit.prefix_len;
    if exec_horizon == 0 || d + exec_horizon > hit.horizon() {
        return Err(Error::domain(format!(
            "execution horizon {exec_horizon} invalid for prefix {d} and chunk {}",
            hit.horizon()
        )));
    }
    let fin = finalization_steps(hit, steps);
    Ok(fin[d..d + exec_horizon]
        .iter()
        .map(|s| s.unwrap_or(steps))
        .max()
        .unwrap_or(steps))
}
