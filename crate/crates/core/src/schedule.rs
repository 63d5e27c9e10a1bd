//! Timestep schedules, seeded initial noise and the deterministic DDIM update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Extent3, LatentVolume, TensorError, Volume};

/// Angle at `tau = 1` of the default cosine schedule; keeps `alpha(1) > 0`.
pub const COSINE_MAX_ANGLE: f64 = 0.49 * std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    Empty,
    #[error("timesteps must be strictly decreasing and lie in (0, 1]; bad value {0}")]
    Timestep(f64),
    #[error("alpha must lie in (0, 1] and sigma in [0, 1]; got ({alpha}, {sigma}) at tau {tau}")]
    Coefficients { tau: f64, alpha: f64, sigma: f64 },
    #[error("step index {m} outside 1..={len}")]
    Index { m: usize, len: usize },
    #[error("no schedule entry for timestep {0}")]
    UnknownTimestep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepEntry {
    pub tau: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Timesteps `tau_T > ... > tau_1` with their `(alpha, sigma)` pairs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimestepSchedule {
    entries: Vec<StepEntry>,
}

impl TimestepSchedule {
    /// `entries` ordered from the noisiest step `tau_T` down to `tau_1`.
    pub fn new(entries: Vec<StepEntry>) -> Result<Self, ScheduleError> {
        if entries.is_empty() {
            return Err(ScheduleError::Empty);
        }
        let mut prev = f64::INFINITY;
        for e in &entries {
            if !(e.tau > 0.0 && e.tau <= 1.0 && e.tau < prev) {
                return Err(ScheduleError::Timestep(e.tau));
            }
            if !(e.alpha > 0.0 && e.alpha <= 1.0 && (0.0..=1.0).contains(&e.sigma)) {
                return Err(ScheduleError::Coefficients {
                    tau: e.tau,
                    alpha: e.alpha,
                    sigma: e.sigma,
                });
            }
            prev = e.tau;
        }
        Ok(Self { entries })
    }

    /// `steps` linearly spaced timesteps `tau_m = m / steps` on a
    /// variance-preserving cosine schedule `alpha = cos(theta tau)`,
    /// `sigma = sin(theta tau)`.
    pub fn cosine(steps: usize) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::Empty);
        }
        Self::new(
            (1..=steps)
                .rev()
                .map(|m| {
                    let tau = m as f64 / steps as f64;
                    let angle = COSINE_MAX_ANGLE * tau;
                    StepEntry {
                        tau,
                        alpha: angle.cos(),
                        sigma: angle.sin(),
                    }
                })
                .collect(),
        )
    }

    /// Explicit variance-preserving schedule from `(tau, alpha)` pairs;
    /// `sigma = sqrt(1 - alpha^2)`.
    pub fn from_alphas(pairs: &[(f64, f64)]) -> Result<Self, ScheduleError> {
        Self::new(
            pairs
                .iter()
                .map(|&(tau, alpha)| StepEntry {
                    tau,
                    alpha,
                    sigma: (1.0 - alpha * alpha).max(0.0).sqrt(),
                })
                .collect(),
        )
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StepEntry] {
        &self.entries
    }

    /// Entry for step `m` in `1..=T` (`m = T` is the first, noisiest step).
    pub fn entry(&self, m: usize) -> Result<StepEntry, ScheduleError> {
        let len = self.entries.len();
        if m == 0 || m > len {
            return Err(ScheduleError::Index { m, len });
        }
        Ok(self.entries[len - m])
    }

    /// Looks up the entry whose `tau` matches within `1e-12`.
    pub fn lookup(&self, tau: f64) -> Result<StepEntry, ScheduleError> {
        self.entries
            .iter()
            .find(|e| (e.tau - tau).abs() <= 1e-12)
            .copied()
            .ok_or(ScheduleError::UnknownTimestep(tau))
    }
}

/// I.i.d. standard normal volume from a ChaCha8 stream seeded with `seed`.
pub fn init_noise(extent: Extent3, channels: usize, seed: u64) -> LatentVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..extent.cells() * channels)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    Volume::from_vec(extent, channels, data).expect("normal samples are finite")
}

/// Deterministic DDIM update for an epsilon prediction at step `m`:
/// `x0 = (z - sigma_m e) / alpha_m`, then `z' = alpha_{m-1} x0 + sigma_{m-1} e`.
/// At `m = 1` the clean estimate `x0` is returned.
pub fn step(
    z: &LatentVolume,
    e_hat: &LatentVolume,
    schedule: &TimestepSchedule,
    m: usize,
) -> Result<LatentVolume, ScheduleError> {
    if !z.same_shape(e_hat) {
        return Err(TensorError::Shape(format!(
            "prediction {}x{} vs latent {}x{}",
            e_hat.extent(),
            e_hat.channels(),
            z.extent(),
            z.channels()
        ))
        .into());
    }
    let cur = schedule.entry(m)?;
    let next = if m > 1 {
        Some(schedule.entry(m - 1)?)
    } else {
        None
    };
    let data = z
        .data()
        .iter()
        .zip(e_hat.data())
        .map(|(&zv, &ev)| {
            let (zv, ev) = (zv as f64, ev as f64);
            let x0 = (zv - cur.sigma * ev) / cur.alpha;
            match next {
                Some(n) => (n.alpha * x0 + n.sigma * ev) as f32,
                None => x0 as f32,
            }
        })
        .collect();
    Ok(Volume::from_vec(z.extent(), z.channels(), data)?)
}
