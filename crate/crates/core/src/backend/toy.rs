//! Analytic epsilon-predictor for point-mass conditionals `p(x | c) = delta(x - mu_c)`.
//!
//! With `z = alpha x0 + sigma eps` the exact noise estimate is
//! `(z - alpha mu_c) / sigma`. It is pointwise, so tiled and untiled runs can be
//! compared cell by cell, and a single DDIM step lands exactly on `mu_c`.

use std::collections::BTreeMap;

use super::{BackendError, DenoisePrediction, DenoiseRequest, Denoiser};
use crate::schedule::TimestepSchedule;
use crate::tensor::{LatentVolume, Volume};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyModelSpec {
    /// Prompt text to `mu_c`.
    pub condition_means: BTreeMap<String, f64>,
    /// Mean for unrecognized prompts and the unconditional branch.
    pub default_mean: f64,
    pub schedule: TimestepSchedule,
}

impl ToyModelSpec {
    pub fn new(
        condition_means: BTreeMap<String, f64>,
        default_mean: f64,
        schedule: TimestepSchedule,
    ) -> Result<Self, String> {
        for e in schedule.entries() {
            let ok = e.alpha > 0.0
                && e.alpha <= 1.0
                && e.sigma > 0.0
                && e.sigma <= 1.0
                && (e.alpha * e.alpha + e.sigma * e.sigma - 1.0).abs() <= 1e-9;
            if !ok {
                return Err(format!(
                    "toy schedule needs variance-preserving (alpha, sigma) in (0, 1], got ({}, {}) at tau {}",
                    e.alpha, e.sigma, e.tau
                ));
            }
        }
        if !default_mean.is_finite() || condition_means.values().any(|m| !m.is_finite()) {
            return Err("toy means must be finite".into());
        }
        Ok(Self {
            condition_means,
            default_mean,
            schedule,
        })
    }

    pub fn mean_for(&self, condition: &str) -> f64 {
        self.condition_means
            .get(condition)
            .copied()
            .unwrap_or(self.default_mean)
    }
}

fn point_mass_eps(latent: &LatentVolume, alpha: f64, sigma: f64, mu: f64) -> LatentVolume {
    let shift = alpha * mu;
    let data = latent
        .data()
        .iter()
        .map(|&z| ((z as f64 - shift) / sigma) as f32)
        .collect();
    Volume::from_vec(latent.extent(), latent.channels(), data).expect("finite inputs")
}

pub fn toy_predict(
    req: &DenoiseRequest,
    spec: &ToyModelSpec,
) -> Result<DenoisePrediction, BackendError> {
    let entry = spec.schedule.lookup(req.timestep)?;
    let e_cond = point_mass_eps(
        &req.latent_tile,
        entry.alpha,
        entry.sigma,
        spec.mean_for(&req.condition),
    );
    let e_uncond = req
        .want_uncond
        .then(|| point_mass_eps(&req.latent_tile, entry.alpha, entry.sigma, spec.default_mean));
    Ok(DenoisePrediction { e_cond, e_uncond })
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    spec: ToyModelSpec,
    lr_scale: usize,
}

impl ToyBackend {
    pub fn new(spec: ToyModelSpec) -> Self {
        Self { spec, lr_scale: 1 }
    }

    pub fn with_lr_scale(mut self, r: usize) -> Self {
        self.lr_scale = r.max(1);
        self
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }
}

impl Denoiser for ToyBackend {
    fn id(&self) -> &str {
        "toy"
    }

    fn lr_scale(&self) -> usize {
        self.lr_scale
    }

    fn predict(&self, req: &DenoiseRequest) -> Result<DenoisePrediction, BackendError> {
        toy_predict(req, &self.spec)
    }

    fn decode(&self, latent: &LatentVolume) -> Result<LatentVolume, BackendError> {
        Ok(latent.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::guidance_direction;
    use crate::schedule::init_noise;
    use crate::tensor::{Extent3, Region};
    use crate::tensor::Coord3;

    fn spec(means: &[(&str, f64)]) -> ToyModelSpec {
        ToyModelSpec::new(
            means.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            0.0,
            TimestepSchedule::from_alphas(&[(0.5, 0.8)]).unwrap(),
        )
        .unwrap()
    }

    fn req(latent: LatentVolume, cond: &str, want_uncond: bool) -> DenoiseRequest {
        DenoiseRequest {
            lr_tile: latent.clone(),
            latent_tile: latent,
            condition: cond.into(),
            timestep: 0.5,
            want_uncond,
            seed: 0,
        }
    }

    fn ext(h: usize, w: usize) -> Extent3 {
        Extent3::new(1, h, w).unwrap()
    }

    #[test]
    fn noise_free_input_predicts_zero() {
        let s = spec(&[("a", 0.5)]);
        let latent = LatentVolume::filled(ext(2, 2), 1, (0.8 * 0.5) as f32);
        let p = toy_predict(&req(latent, "a", false), &s).unwrap();
        assert!(p.e_cond.data().iter().all(|&v| v.abs() < 1e-7));
        assert!(p.e_uncond.is_none());
    }

    #[test]
    fn direct_substitution() {
        let s = spec(&[("a", 0.5)]);
        let p = toy_predict(&req(LatentVolume::filled(ext(1, 1), 1, 1.0), "a", true), &s).unwrap();
        assert!((p.e_cond.data()[0] - 1.0).abs() < 1e-6);
        // unconditional uses default mean 0: 1.0 / 0.6
        assert!((p.e_uncond.unwrap().data()[0] as f64 - 1.0 / 0.6).abs() < 1e-6);
    }

    #[test]
    fn direction_between_conditions_is_constant() {
        let (ma, mb) = (0.2, 0.9);
        let s = spec(&[("a", ma), ("b", mb)]);
        let z = init_noise(ext(3, 3), 2, 11);
        let a = toy_predict(&req(z.clone(), "a", false), &s).unwrap().e_cond;
        let b = toy_predict(&req(z, "b", false), &s).unwrap().e_cond;
        // (z - alpha mb)/sigma - (z - alpha ma)/sigma = alpha (ma - mb) / sigma
        let want = 0.8 * (ma - mb) / 0.6;
        let d = guidance_direction(&a, &b).unwrap();
        assert!(d.data().iter().all(|&v| (v as f64 - want).abs() < 1e-6));
    }

    #[test]
    fn unknown_timestep() {
        let s = spec(&[]);
        let mut r = req(LatentVolume::zeros(ext(1, 1), 1), "x", false);
        r.timestep = 0.3;
        assert!(matches!(toy_predict(&r, &s), Err(BackendError::Schedule(_))));
    }

    #[test]
    fn rejects_non_vp_schedule() {
        let sched = TimestepSchedule::new(vec![crate::schedule::StepEntry {
            tau: 1.0,
            alpha: 0.5,
            sigma: 0.5,
        }])
        .unwrap();
        assert!(ToyModelSpec::new(BTreeMap::new(), 0.0, sched).is_err());
    }

    #[test]
    fn crop_equivariance() {
        let s = spec(&[("a", 0.3)]);
        let z = init_noise(ext(6, 6), 2, 5);
        let region = Region::new(Coord3::new(0, 1, 2), ext(3, 4));
        let full = toy_predict(&req(z.clone(), "a", true), &s).unwrap();
        let tile = toy_predict(&req(z.crop(region).unwrap(), "a", true), &s).unwrap();
        assert_eq!(full.e_cond.crop(region).unwrap(), tile.e_cond);
        assert_eq!(full.e_uncond.unwrap().crop(region).unwrap(), tile.e_uncond.unwrap());
    }
}
