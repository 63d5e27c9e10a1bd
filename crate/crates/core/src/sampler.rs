//! Tiled sampling loop.
//!
//! Every timestep crops the shared latent into tiles, denoises each tile under
//! its own condition, applies guidance, and folds the weighted predictions into
//! one accumulator pair `(E, W)`. The normalized field `E / W` then drives a
//! single DDIM update of the whole latent. Tile predictions may run in
//! parallel, but commits always happen in ascending tile order, so the result
//! does not depend on the thread count.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::backend::{BackendError, DenoiseRequest, Denoiser};
use crate::guidance::{
    cfg_combine, guidance_direction, field_norm, misguidance_norm, GuidanceConfig, MisguidanceReport,
    NormKind,
};
use crate::prompts::{PromptError, PromptManifest, PromptMode};
use crate::schedule::{init_noise, step, ScheduleError, TimestepSchedule};
use crate::tensor::{divide_elementwise, Extent3, LatentVolume, TensorError, UncoveredPolicy, Volume};
use crate::tiling::TilePlan;
use crate::window::BlendWindow;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("step {step}: {source}")]
    Coverage {
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("tile {tile_index} at step {step}: {source}")]
    Backend {
        tile_index: usize,
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("decode: {0}")]
    Decode(#[source] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Knobs of one tiled run besides the plan and the conditions.
#[derive(Debug, Clone)]
pub struct SamplerOptions {
    pub guidance: GuidanceConfig,
    pub schedule: TimestepSchedule,
    /// Seed of the initial noise; also forwarded to the backend.
    pub seed: u64,
    pub latent_channels: usize,
    /// Worker threads for tile predictions within a timestep.
    pub parallelism: usize,
}

/// Mutable state of the loop at step `m`.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub z: LatentVolume,
    pub m: usize,
    pub e_acc: Volume<f64>,
    pub w_acc: Volume<f64>,
    pub rng_seed: u64,
}

impl SchedulerState {
    pub fn new(extent: Extent3, channels: usize, steps: usize, seed: u64) -> Self {
        Self {
            z: init_noise(extent, channels, seed),
            m: steps,
            e_acc: Volume::zeros(extent, channels),
            w_acc: Volume::zeros(extent, 1),
            rng_seed: seed,
        }
    }

    fn reset_accumulators(&mut self) {
        self.e_acc.data_mut().fill(0.0);
        self.w_acc.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TileTiming {
    pub tile_index: usize,
    /// Wall time spent in backend calls for this tile, summed over steps.
    pub denoise_secs: f64,
    pub calls: usize,
}

#[derive(Debug, Clone)]
pub struct TiledRun {
    pub latent: LatentVolume,
    pub denoise: Duration,
    pub aggregation: Duration,
    pub per_tile: Vec<TileTiming>,
}

/// Wall-clock split and provenance of a run.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub tile_count: usize,
    pub steps: usize,
    pub mode: String,
    pub backend: String,
    pub prompt_extraction_secs: f64,
    pub denoise_secs: f64,
    pub aggregation_secs: f64,
    pub decode_secs: f64,
    pub total_secs: f64,
    pub per_tile: Vec<TileTiming>,
    pub run_seed: u64,
    /// `(tile_index, seed)` of each prompt record used.
    pub prompt_seeds: Vec<(usize, u64)>,
    pub config_hash: String,
    pub output_checksum: String,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn check_windows(
    plan: &TilePlan,
    windows: &[Arc<BlendWindow>],
    r: usize,
) -> Result<(), SamplerError> {
    if windows.len() != plan.len() {
        return Err(SamplerError::Config(format!(
            "{} windows for {} tiles",
            windows.len(),
            plan.len()
        )));
    }
    for (region, w) in plan.regions.iter().zip(windows) {
        let want = region.scaled(r).size;
        if w.extent() != want {
            return Err(SamplerError::Config(format!(
                "window for tile {} is {}, latent tile is {want}",
                region.index,
                w.extent()
            )));
        }
    }
    Ok(())
}

/// Runs the tiled loop with one condition per tile (`conditions[i - 1]` for
/// tile `i`) and returns the final clean latent. `lr` lives on the plan grid;
/// latent tiles are the plan regions scaled by the backend's `lr_scale`.
pub fn run_tiled_with_conditions(
    lr: &LatentVolume,
    plan: &TilePlan,
    conditions: &[String],
    backend: &dyn Denoiser,
    windows: &[Arc<BlendWindow>],
    opts: &SamplerOptions,
) -> Result<TiledRun, SamplerError> {
    if plan.input_extent != lr.extent() {
        return Err(SamplerError::Config(format!(
            "plan covers {} but LR input is {}",
            plan.input_extent,
            lr.extent()
        )));
    }
    if conditions.len() != plan.len() {
        return Err(SamplerError::Config(format!(
            "{} conditions for {} tiles",
            conditions.len(),
            plan.len()
        )));
    }
    opts.guidance.validate().map_err(SamplerError::Config)?;
    let r = backend.lr_scale().max(1);
    check_windows(plan, windows, r)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| SamplerError::Config(format!("thread pool: {e}")))?;

    let steps = opts.schedule.len();
    let latent_extent = plan.scaled_extent(r);
    let mut state = SchedulerState::new(latent_extent, opts.latent_channels, steps, opts.seed);
    let lr_tiles: Vec<LatentVolume> = plan
        .regions
        .iter()
        .map(|region| lr.crop(region))
        .collect::<Result<_, _>>()?;
    let ones: Vec<Volume<f64>> = plan
        .regions
        .iter()
        .map(|region| Volume::filled(region.scaled(r).size, 1, 1.0))
        .collect();
    let s = opts.guidance.scale;
    let want_uncond = opts.guidance.enabled && s != 1.0;

    let mut per_tile: Vec<TileTiming> = plan
        .regions
        .iter()
        .map(|region| TileTiming {
            tile_index: region.index,
            ..TileTiming::default()
        })
        .collect();
    let mut denoise = Duration::ZERO;
    let mut aggregation = Duration::ZERO;

    for m in (1..=steps).rev() {
        state.m = m;
        let tau = opts.schedule.entry(m)?.tau;
        state.reset_accumulators();

        let t0 = Instant::now();
        let z = &state.z;
        let predictions: Vec<Result<(LatentVolume, Duration), SamplerError>> = pool.install(|| {
            plan.regions
                .par_iter()
                .enumerate()
                .map(|(k, region)| {
                    let fail = |source| SamplerError::Backend {
                        tile_index: region.index,
                        step: m,
                        source,
                    };
                    let started = Instant::now();
                    let req = DenoiseRequest {
                        latent_tile: z.crop(region.scaled(r))?,
                        lr_tile: lr_tiles[k].clone(),
                        condition: conditions[k].clone(),
                        timestep: tau,
                        want_uncond,
                        seed: opts.seed,
                    };
                    let pred = backend.predict(&req).map_err(fail)?;
                    pred.check_against(&req).map_err(fail)?;
                    let e_hat = match (&pred.e_uncond, want_uncond) {
                        (Some(u), true) => cfg_combine(u, &pred.e_cond, s)?,
                        _ => pred.e_cond,
                    };
                    Ok((e_hat, started.elapsed()))
                })
                .collect()
        });
        denoise += t0.elapsed();

        // A failed tile aborts the run before anything is blended.
        let predictions = predictions.into_iter().collect::<Result<Vec<_>, _>>()?;

        let t1 = Instant::now();
        for (k, (e_hat, took)) in predictions.iter().enumerate() {
            let region = plan.regions[k].scaled(r);
            let weights = windows[k].weights();
            state.e_acc.paste_accumulate(e_hat, region, weights)?;
            state.w_acc.paste_accumulate(&ones[k], region, weights)?;
            per_tile[k].denoise_secs += took.as_secs_f64();
            per_tile[k].calls += 1;
        }
        let e_hat = divide_elementwise(&state.e_acc, &state.w_acc, UncoveredPolicy::Error)
            .map_err(|source| SamplerError::Coverage { step: m, source })?;
        state.z = step(&state.z, &e_hat, &opts.schedule, m)?;
        aggregation += t1.elapsed();
    }

    Ok(TiledRun {
        latent: state.z,
        denoise,
        aggregation,
        per_tile,
    })
}

/// Resolves each tile's condition from `manifest` under `mode`.
pub fn conditions_from_manifest(
    manifest: &PromptManifest,
    plan: &TilePlan,
    mode: PromptMode,
) -> Result<Vec<String>, PromptError> {
    manifest.validate(plan, mode)?;
    plan.regions
        .iter()
        .map(|r| manifest.condition_for(r.index, mode))
        .collect()
}

/// [`run_tiled_with_conditions`] with conditions taken from a manifest.
pub fn run_tiled(
    lr: &LatentVolume,
    plan: &TilePlan,
    manifest: &PromptManifest,
    mode: PromptMode,
    backend: &dyn Denoiser,
    windows: &[Arc<BlendWindow>],
    opts: &SamplerOptions,
) -> Result<TiledRun, SamplerError> {
    let conditions = conditions_from_manifest(manifest, plan, mode)?;
    run_tiled_with_conditions(lr, plan, &conditions, backend, windows, opts)
}

/// For every tile and probed step, compares the guidance direction under
/// `compared(i)` against the one under `reference(i)` on the initial-noise
/// latent. Rows come out ordered by step (descending) then tile index.
#[allow(clippy::too_many_arguments)]
pub fn misguidance_probe(
    lr: &LatentVolume,
    plan: &TilePlan,
    backend: &dyn Denoiser,
    schedule: &TimestepSchedule,
    steps: &[usize],
    seed: u64,
    latent_channels: usize,
    compared: &dyn Fn(usize) -> String,
    reference: &dyn Fn(usize) -> String,
    reference_label: &str,
    norm: NormKind,
) -> Result<Vec<MisguidanceReport>, SamplerError> {
    let r = backend.lr_scale().max(1);
    let z = init_noise(plan.scaled_extent(r), latent_channels, seed);
    let mut out = Vec::new();
    for &m in steps {
        let tau = schedule.entry(m)?.tau;
        for region in &plan.regions {
            let direction = |condition: String| -> Result<LatentVolume, SamplerError> {
                let req = DenoiseRequest {
                    latent_tile: z.crop(region.scaled(r))?,
                    lr_tile: lr.crop(region)?,
                    condition,
                    timestep: tau,
                    want_uncond: true,
                    seed,
                };
                let fail = |source| SamplerError::Backend {
                    tile_index: region.index,
                    step: m,
                    source,
                };
                let pred = backend.predict(&req).map_err(fail)?;
                pred.check_against(&req).map_err(fail)?;
                let u = pred.e_uncond.ok_or_else(|| {
                    fail(BackendError::Contract(
                        "misguidance needs unconditional predictions".into(),
                    ))
                })?;
                Ok(guidance_direction(&u, &pred.e_cond)?)
            };
            let d_cmp = direction(compared(region.index))?;
            let d_ref = direction(reference(region.index))?;
            out.push(MisguidanceReport {
                tile_index: region.index,
                timestep: tau,
                delta_norm: misguidance_norm(&d_cmp, &d_ref, norm)?,
                guidance_norm: field_norm(&d_cmp, norm),
                reference_condition: reference_label.to_string(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyModelSpec};
    use crate::tensor::Coord3;
    use crate::tiling::{plan_tiles, BlendMode};
    use crate::window::{windows_for_plan, DEFAULT_SIGMA_FRAC};

    fn ext(t: usize, h: usize, w: usize) -> Extent3 {
        Extent3::new(t, h, w).unwrap()
    }

    fn toy(means: &[(&str, f64)], steps: usize) -> ToyBackend {
        ToyBackend::new(
            ToyModelSpec::new(
                means.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                0.0,
                TimestepSchedule::cosine(steps).unwrap(),
            )
            .unwrap(),
        )
    }

    fn opts(steps: usize, scale: f64, parallelism: usize) -> SamplerOptions {
        SamplerOptions {
            guidance: GuidanceConfig {
                scale,
                enabled: true,
            },
            schedule: TimestepSchedule::cosine(steps).unwrap(),
            seed: 9,
            latent_channels: 2,
            parallelism,
        }
    }

    /// Plain loop with no cropping or blending.
    fn untiled(lr: &LatentVolume, cond: &str, backend: &dyn Denoiser, o: &SamplerOptions) -> LatentVolume {
        let mut z = init_noise(lr.extent(), o.latent_channels, o.seed);
        for m in (1..=o.schedule.len()).rev() {
            let req = DenoiseRequest {
                latent_tile: z.clone(),
                lr_tile: lr.clone(),
                condition: cond.into(),
                timestep: o.schedule.entry(m).unwrap().tau,
                want_uncond: true,
                seed: o.seed,
            };
            let p = backend.predict(&req).unwrap();
            let e = cfg_combine(p.e_uncond.as_ref().unwrap(), &p.e_cond, o.guidance.scale).unwrap();
            z = step(&z, &e, &o.schedule, m).unwrap();
        }
        z
    }

    #[test]
    fn identical_prompts_collapse_to_untiled() {
        let lr = LatentVolume::zeros(ext(1, 20, 20), 3);
        let backend = toy(&[("x", 0.35)], 8);
        let o = opts(8, 3.0, 4);
        for mode in [BlendMode::GaussianBlend, BlendMode::ValidRegion] {
            let plan = plan_tiles(ext(1, 20, 20), ext(1, 8, 8), [0, 3, 3], mode).unwrap();
            let windows = windows_for_plan(&plan, DEFAULT_SIGMA_FRAC, 1).unwrap();
            let conds = vec!["x".to_string(); plan.len()];
            let tiled = run_tiled_with_conditions(&lr, &plan, &conds, &backend, &windows, &o).unwrap();
            let reference = untiled(&lr, "x", &backend, &o);
            assert!(tiled.latent.max_abs_diff(&reference).unwrap() <= 1e-6);
            assert_eq!(tiled.per_tile.len(), plan.len());
            assert!(tiled.per_tile.iter().all(|t| t.calls == 8));
        }
    }

    #[test]
    fn parallelism_does_not_change_bytes() {
        let lr = LatentVolume::zeros(ext(1, 16, 16), 3);
        let backend = toy(&[("a", 0.1), ("b", 0.9)], 6);
        let plan = plan_tiles(ext(1, 16, 16), ext(1, 8, 8), [0, 4, 4], BlendMode::GaussianBlend).unwrap();
        let windows = windows_for_plan(&plan, DEFAULT_SIGMA_FRAC, 1).unwrap();
        let conds: Vec<String> = (0..plan.len()).map(|k| if k % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let one = run_tiled_with_conditions(&lr, &plan, &conds, &backend, &windows, &opts(6, 2.0, 1)).unwrap();
        let many = run_tiled_with_conditions(&lr, &plan, &conds, &backend, &windows, &opts(6, 2.0, 8)).unwrap();
        assert_eq!(one.latent.to_lvol_bytes(), many.latent.to_lvol_bytes());
    }

    #[test]
    fn lr_scale_maps_regions_to_latent() {
        let lr = LatentVolume::zeros(ext(1, 8, 8), 3);
        let backend = toy(&[("a", 0.25)], 4).with_lr_scale(2);
        let plan = plan_tiles(ext(1, 8, 8), ext(1, 4, 4), [0, 0, 0], BlendMode::ValidRegion).unwrap();
        let windows = windows_for_plan(&plan, DEFAULT_SIGMA_FRAC, 2).unwrap();
        let conds = vec!["a".to_string(); 4];
        let run = run_tiled_with_conditions(&lr, &plan, &conds, &backend, &windows, &opts(4, 1.0, 2)).unwrap();
        assert_eq!(run.latent.extent(), ext(1, 16, 16));
        assert!(run.latent.data().iter().all(|&v| (v - 0.25).abs() < 1e-5));
        // Windows at the wrong scale are rejected up front.
        let wrong = windows_for_plan(&plan, DEFAULT_SIGMA_FRAC, 1).unwrap();
        assert!(matches!(
            run_tiled_with_conditions(&lr, &plan, &conds, &backend, &wrong, &opts(4, 1.0, 1)),
            Err(SamplerError::Config(_))
        ));
    }

    #[test]
    fn zero_weight_cells_are_a_coverage_error() {
        let lr = LatentVolume::zeros(ext(1, 4, 4), 3);
        let backend = toy(&[], 2);
        let plan = plan_tiles(ext(1, 4, 4), ext(1, 4, 4), [0, 0, 0], BlendMode::ValidRegion).unwrap();
        let mut w = Volume::<f64>::filled(ext(1, 4, 4), 1, 1.0);
        w.set(Coord3::new(0, 2, 1), 0, 0.0);
        let window = Arc::new(BlendWindow::custom(w).unwrap());
        let err = run_tiled_with_conditions(&lr, &plan, &["q".into()], &backend, &[window], &opts(2, 1.0, 1))
            .unwrap_err();
        assert!(matches!(err, SamplerError::Coverage { step: 2, .. }), "{err}");
    }

    struct Failing;
    impl Denoiser for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn predict(&self, _: &DenoiseRequest) -> Result<crate::backend::DenoisePrediction, BackendError> {
            Err(BackendError::Transport {
                attempts: 3,
                message: "down".into(),
            })
        }
        fn decode(&self, l: &LatentVolume) -> Result<LatentVolume, BackendError> {
            Ok(l.clone())
        }
    }

    #[test]
    fn backend_failure_carries_context() {
        let lr = LatentVolume::zeros(ext(1, 4, 4), 3);
        let plan = plan_tiles(ext(1, 4, 4), ext(1, 4, 4), [0, 0, 0], BlendMode::ValidRegion).unwrap();
        let windows = windows_for_plan(&plan, DEFAULT_SIGMA_FRAC, 1).unwrap();
        let err = run_tiled_with_conditions(&lr, &plan, &["q".into()], &Failing, &windows, &opts(3, 1.0, 1))
            .unwrap_err();
        assert!(matches!(err, SamplerError::Backend { tile_index: 1, step: 3, .. }), "{err}");
    }

    #[test]
    fn probe_matches_closed_form() {
        let lr = LatentVolume::zeros(ext(1, 8, 8), 3);
        let (mg, ml) = (0.2, 0.65);
        let backend = toy(&[("g", mg), ("l", ml)], 5);
        let sched = TimestepSchedule::cosine(5).unwrap();
        let plan = plan_tiles(ext(1, 8, 8), ext(1, 4, 4), [0, 0, 0], BlendMode::ValidRegion).unwrap();
        let rows = misguidance_probe(
            &lr, &plan, &backend, &sched, &[5, 2], 1, 1,
            &|_| "g".into(), &|_| "l".into(), "local", NormKind::Rms,
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        for row in &rows {
            let e = sched.lookup(row.timestep).unwrap();
            let want = e.alpha * (mg - ml).abs() / e.sigma;
            assert!((row.delta_norm - want).abs() <= 1e-6 * want.max(1.0));
        }
        let same = misguidance_probe(
            &lr, &plan, &backend, &sched, &[3], 1, 1,
            &|_| "l".into(), &|_| "l".into(), "local", NormKind::L2,
        )
        .unwrap();
        assert!(same.iter().all(|r| r.delta_norm == 0.0));
    }
}
