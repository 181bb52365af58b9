//! Noise schedule and the stochastic DDIM (η = 1) update used both for
//! inversion and for generation.
//!
//! Latent index `k` runs from `T` (noisiest) down to `0` (the clean latent).
//! Denoising step `i` (1-based, counted from `t = T`) maps latent `k = T−i+1`
//! to `k−1`.

use std::sync::OnceLock;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::backends::Latent;
use crate::error::{Error, Result};

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// Cumulative `ᾱ` of the scaled-linear training schedule.
pub fn train_alphas_cumprod() -> &'static [f64] {
    static CELL: OnceLock<Vec<f64>> = OnceLock::new();
    CELL.get_or_init(|| {
        let (s, e) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut acc = 1.0;
        (0..TRAIN_TIMESTEPS)
            .map(|i| {
                let b = s + (e - s) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
                acc *= 1.0 - b * b;
                acc
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct SamplerSchedule {
    total_steps: usize,
    skip_steps: usize,
    /// `√(1−ᾱ)` for latent indices `T, T−1, …, 1`.
    noise_levels: Vec<f64>,
    /// Training timestep of latent index `k`, stored at `k−1`.
    timesteps: Vec<usize>,
    /// `ᾱ` of latent index `k`, stored at `k`.
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleSpec {
    total_steps: usize,
    skip_steps: usize,
}

impl TryFrom<ScheduleSpec> for SamplerSchedule {
    type Error = Error;
    fn try_from(s: ScheduleSpec) -> Result<Self> {
        SamplerSchedule::new(s.total_steps, s.skip_steps)
    }
}

impl From<SamplerSchedule> for ScheduleSpec {
    fn from(s: SamplerSchedule) -> Self {
        ScheduleSpec {
            total_steps: s.total_steps,
            skip_steps: s.skip_steps,
        }
    }
}

impl SamplerSchedule {
    pub fn new(total_steps: usize, skip_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if total_steps > TRAIN_TIMESTEPS {
            return Err(Error::Domain(format!(
                "at most {TRAIN_TIMESTEPS} steps are supported, got {total_steps}"
            )));
        }
        if skip_steps >= total_steps {
            return Err(Error::Domain(format!(
                "skip_steps ({skip_steps}) must be smaller than total_steps ({total_steps})"
            )));
        }
        let train = train_alphas_cumprod();
        let ratio = TRAIN_TIMESTEPS / total_steps;
        let timesteps: Vec<usize> = (0..total_steps).map(|i| i * ratio + 1).collect();
        let mut alpha_bars = Vec::with_capacity(total_steps + 1);
        // The clean end of the chain sits at the first training timestep, so
        // every step keeps a strictly positive posterior variance.
        alpha_bars.push(train[0]);
        alpha_bars.extend(timesteps.iter().map(|&t| train[t]));
        let noise_levels = (1..=total_steps)
            .rev()
            .map(|k| (1.0 - alpha_bars[k]).sqrt())
            .collect();
        Ok(SamplerSchedule {
            total_steps,
            skip_steps,
            noise_levels,
            timesteps,
            alpha_bars,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn skip_steps(&self) -> usize {
        self.skip_steps
    }

    pub fn noise_levels(&self) -> &[f64] {
        &self.noise_levels
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Training timestep fed to the denoiser at latent index `k ≥ 1`.
    pub fn timestep(&self, k: usize) -> usize {
        self.timesteps[k - 1]
    }

    /// Latent index consumed by denoising step `i`.
    pub fn latent_index(&self, step: usize) -> usize {
        self.total_steps + 1 - step
    }

    /// First executed denoising step once `skip_steps` are dropped.
    pub fn first_step(&self) -> usize {
        self.skip_steps + 1
    }

    /// Posterior standard deviation of the `k → k−1` update.
    pub fn sigma(&self, k: usize) -> f64 {
        let (a_t, a_prev) = (self.alpha_bars[k], self.alpha_bars[k - 1]);
        ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)).sqrt()
    }

    /// Deterministic part of the `k → k−1` update given a noise prediction.
    pub fn posterior_mean(&self, z: &Latent, eps: &Latent, k: usize) -> Latent {
        let (a_t, a_prev) = (self.alpha_bars[k], self.alpha_bars[k - 1]);
        let sigma = self.sigma(k);
        let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let sa_prev = a_prev.sqrt();
        Zip::from(z).and(eps).map_collect(|&z, &e| {
            let x0 = (z - sb_t * e) / sa_t;
            sa_prev * x0 + dir * e
        })
    }

    /// `z_{k−1} = μ(z_k, ε) + σ_k·u`.
    pub fn step(&self, z: &Latent, eps: &Latent, noise: &Latent, k: usize) -> Latent {
        let sigma = self.sigma(k);
        let mut out = self.posterior_mean(z, eps, k);
        Zip::from(&mut out).and(noise).for_each(|o, &u| *o += sigma * u);
        out
    }

    /// Solves `step` for the noise map that lands exactly on `z_prev`.
    pub fn solve_noise(&self, z: &Latent, eps: &Latent, z_prev: &Latent, k: usize) -> Latent {
        let sigma = self.sigma(k);
        let mean = self.posterior_mean(z, eps, k);
        Zip::from(z_prev).and(&mean).map_collect(|&p, &m| (p - m) / sigma)
    }

    /// Sample of the forward marginal `√ᾱ_k·z_0 + √(1−ᾱ_k)·n`.
    pub fn forward_marginal(&self, z0: &Latent, noise: &Latent, k: usize) -> Latent {
        let a = self.alpha_bars[k];
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        Zip::from(z0).and(noise).map_collect(|&z, &n| sa * z + sb * n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_degenerate_schedules() {
        assert!(SamplerSchedule::new(0, 0).is_err());
        assert!(SamplerSchedule::new(10, 10).is_err());
        assert!(SamplerSchedule::new(1001, 0).is_err());
        assert!(SamplerSchedule::new(1, 0).is_ok());
    }

    #[test]
    fn noise_levels_strictly_decrease_toward_clean_end() {
        for t in [1, 2, 10, 50, 100] {
            let s = SamplerSchedule::new(t, 0).unwrap();
            assert_eq!(s.noise_levels().len(), t);
            for w in s.noise_levels().windows(2) {
                assert!(w[0] > w[1]);
            }
            assert!(s.noise_levels().iter().all(|&n| n > 0.0 && n <= 1.0));
            for k in 1..=t {
                assert!(s.sigma(k) > 0.0);
            }
        }
    }

    #[test]
    fn solved_noise_replays_exactly() {
        let s = SamplerSchedule::new(10, 0).unwrap();
        let z = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * 3 + x) as f64 * 0.1 - 0.5);
        let eps = z.mapv(|v| v.sin());
        let target = z.mapv(|v| v * 0.7 + 0.05);
        let u = s.solve_noise(&z, &eps, &target, 5);
        let back = s.step(&z, &eps, &u, 5);
        for (a, b) in back.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_indexing() {
        let s = SamplerSchedule::new(100, 30).unwrap();
        assert_eq!(s.latent_index(1), 100);
        assert_eq!(s.latent_index(100), 1);
        assert_eq!(s.first_step(), 31);
        assert_eq!(s.timestep(1), 1);
        assert_eq!(s.timestep(100), 991);
    }
}
