//! Subcommand implementations. Each returns the text it prints to stdout.

use std::path::Path;
use std::time::Instant;

use tilesr_core::backend::{Denoiser, RemoteBackend, ToyBackend};
use tilesr_core::guidance::{reports_to_csv, NormKind};
use tilesr_core::media::MediaKind;
use tilesr_core::prompts::{
    extract_for_mode, input_fingerprint, PromptExtractor, PromptManifest, PromptMode,
    ScriptedExtractor, StubExtractor, VlmExtractor,
};
use tilesr_core::sampler::{
    conditions_from_manifest, misguidance_probe, run_tiled_with_conditions, RunReport,
    SamplerError, SamplerOptions,
};
use tilesr_core::tensor::{Coord3, LatentVolume};
use tilesr_core::tiling::TilePlan;
use tilesr_core::window::windows_for_plan;

use crate::config::{BackendKind, ExtractorKind, RunConfig};
use crate::error::CliError;
use crate::io::{load_input, write_atomic, write_output};

pub fn build_extractor(cfg: &RunConfig) -> Box<dyn PromptExtractor> {
    let x = &cfg.extractor;
    match x.kind {
        ExtractorKind::Stub => Box::new(StubExtractor),
        ExtractorKind::Scripted => Box::new(
            ScriptedExtractor::new(
                x.script
                    .iter()
                    .map(|(k, v)| (k.parse().expect("validated tile index"), v.clone())),
                x.script_global.clone(),
            )
            .with_max_inflight(x.vlm.max_inflight),
        ),
        ExtractorKind::Vlm => Box::new(VlmExtractor::new(x.vlm.clone())),
    }
}

pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn Denoiser>, CliError> {
    Ok(match cfg.backend.kind {
        BackendKind::Toy => Box::new(ToyBackend::new(cfg.toy_spec()?).with_lr_scale(cfg.backend.scale)),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.remote_config())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanFormat {
    Text,
    Json,
}

pub fn cmd_plan(cfg: &RunConfig, format: PlanFormat, json_out: Option<&Path>) -> Result<String, CliError> {
    let (lr, _) = load_input(cfg)?;
    let plan = cfg.plan_for(lr.extent())?;
    let json = plan.canonical_json();
    if let Some(p) = json_out {
        write_atomic(p, format!("{json}\n").as_bytes())?;
    }
    Ok(match format {
        PlanFormat::Json => format!("{json}\n"),
        PlanFormat::Text => format!(
            "{} tiles over {} (tile {}, overlap {:?}, {:?})\nfingerprint {}\n{}",
            plan.len(),
            plan.input_extent,
            plan.tile_size,
            plan.overlap,
            plan.mode,
            plan.fingerprint(),
            plan.to_text()
        ),
    })
}

/// Extracts the records `mode` needs and returns the manifest with the time
/// spent.
fn extract(
    cfg: &RunConfig,
    lr: &LatentVolume,
    kind: MediaKind,
    plan: &TilePlan,
    mode: PromptMode,
) -> Result<(PromptManifest, f64), CliError> {
    let extractor = build_extractor(cfg);
    log::info!("extracting {mode} prompts for {} tiles with {}", plan.len(), extractor.id());
    let t0 = Instant::now();
    let manifest = extract_for_mode(lr, kind, plan, extractor.as_ref(), cfg.seed, mode)?;
    Ok((manifest, t0.elapsed().as_secs_f64()))
}

pub fn cmd_extract(cfg: &RunConfig, mode: PromptMode, out: &Path) -> Result<String, CliError> {
    let (lr, kind) = load_input(cfg)?;
    let plan = cfg.plan_for(lr.extent())?;
    let (manifest, secs) = extract(cfg, &lr, kind, &plan, mode)?;
    write_atomic(out, manifest.to_json().as_bytes())?;
    Ok(format!(
        "wrote {} prompt record(s) for {} tiles to {} in {secs:.3}s\n",
        manifest.records.len(),
        plan.len(),
        out.display()
    ))
}

#[derive(Debug, Clone)]
pub struct RunArgs<'a> {
    pub mode: PromptMode,
    pub manifest: Option<&'a Path>,
    pub allow_stale: bool,
}

pub struct RunOutcome {
    pub output: LatentVolume,
    pub report: RunReport,
    pub plan: TilePlan,
}

/// Loads inputs, obtains prompts, runs the sampler and decodes. Nothing is
/// written.
pub fn execute_run(cfg: &RunConfig, args: &RunArgs<'_>) -> Result<RunOutcome, CliError> {
    let started = Instant::now();
    let (lr, kind) = load_input(cfg)?;
    let plan = cfg.plan_for(lr.extent())?;
    let (manifest, prompt_secs) = match args.manifest {
        Some(p) => {
            let m = PromptManifest::read(p)?;
            m.check_fingerprints(&input_fingerprint(&lr), &plan, args.allow_stale)?;
            (m, 0.0)
        }
        None => extract(cfg, &lr, kind, &plan, args.mode)?,
    };
    let conditions = conditions_from_manifest(&manifest, &plan, args.mode)?;
    let backend = build_backend(cfg)?;
    log::info!(
        "sampling {} tiles over {} for {} steps on {}",
        plan.len(),
        lr.extent(),
        cfg.schedule.steps,
        backend.id()
    );
    let r = backend.lr_scale().max(1);
    let windows = windows_for_plan(&plan, cfg.window.sigma_frac, r)
        .map_err(|e| CliError::Config(format!("window: {e}")))?;
    let opts = SamplerOptions {
        guidance: cfg.guidance,
        schedule: cfg.schedule()?,
        seed: cfg.seed,
        latent_channels: cfg.backend.latent_channels,
        parallelism: cfg.backend.parallelism,
    };
    let run = run_tiled_with_conditions(&lr, &plan, &conditions, backend.as_ref(), &windows, &opts)?;
    let t_decode = Instant::now();
    let output = backend
        .decode(&run.latent)
        .map_err(|e| CliError::from(SamplerError::Decode(e)))?;
    let decode_secs = t_decode.elapsed().as_secs_f64();
    log::info!("decoded to {} in {decode_secs:.3}s", output.extent());

    let used: Vec<usize> = match args.mode {
        PromptMode::Global => vec![0],
        PromptMode::Local => plan.regions.iter().map(|r| r.index).collect(),
        PromptMode::GlobalLocal => std::iter::once(0).chain(plan.regions.iter().map(|r| r.index)).collect(),
    };
    let prompt_seeds = used
        .into_iter()
        .filter_map(|i| manifest.local(i).map(|rec| (i, rec.seed)))
        .collect();
    let report = RunReport {
        tile_count: plan.len(),
        steps: opts.schedule.len(),
        mode: args.mode.to_string(),
        backend: backend.id().to_string(),
        prompt_extraction_secs: prompt_secs,
        denoise_secs: run.denoise.as_secs_f64(),
        aggregation_secs: run.aggregation.as_secs_f64(),
        decode_secs,
        total_secs: started.elapsed().as_secs_f64(),
        per_tile: run.per_tile,
        run_seed: cfg.seed,
        prompt_seeds,
        config_hash: cfg.hash(),
        output_checksum: output.checksum(),
    };
    Ok(RunOutcome { output, report, plan })
}

pub fn cmd_run(cfg: &RunConfig, args: &RunArgs<'_>) -> Result<String, CliError> {
    let out_path = cfg
        .output
        .path
        .clone()
        .ok_or_else(|| CliError::Config("no output path (set output.path or pass --output)".into()))?;
    let outcome = execute_run(cfg, args)?;
    write_output(&out_path, &outcome.output)?;
    if let Some(p) = &cfg.output.report {
        write_atomic(p, outcome.report.to_json().as_bytes())?;
    }
    let r = &outcome.report;
    Ok(format!(
        "wrote {}\ntiles {}  steps {}  mode {}\nconfig_hash {}\noutput_checksum {}\n",
        out_path.display(),
        r.tile_count,
        r.steps,
        r.mode,
        r.config_hash,
        r.output_checksum
    ))
}

/// Mean absolute neighbour difference across the blend seams of `plan`
/// versus everywhere else, on the spatial axes of `vol`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SeamMetrics {
    pub seam_mean_jump: f64,
    pub interior_mean_jump: f64,
    pub seam_cells: usize,
}

pub fn seam_metrics(vol: &LatentVolume, plan: &TilePlan, r: usize) -> SeamMetrics {
    let e = vol.extent();
    // Seams sit mid-way through each overlap band, in output cells.
    let seams = |a: usize| -> Vec<usize> {
        let origins = plan.origins_on_axis(a);
        let tile = plan.tile_size.as_array()[a];
        origins
            .windows(2)
            .map(|w| (w[1] + (w[0] + tile).max(w[1])) * r / 2)
            .collect()
    };
    let (seam_h, seam_w) = (seams(1), seams(2));
    let (mut seam, mut ns, mut rest, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..e.t {
        for h in 0..e.h {
            for w in 0..e.w {
                let p = Coord3::new(t, h, w);
                for c in 0..vol.channels() {
                    let v = vol.get(p, c) as f64;
                    if w > 0 {
                        let d = (v - vol.get(Coord3::new(t, h, w - 1), c) as f64).abs();
                        if seam_w.contains(&w) {
                            seam += d;
                            ns += 1;
                        } else {
                            rest += d;
                            nr += 1;
                        }
                    }
                    if h > 0 {
                        let d = (v - vol.get(Coord3::new(t, h - 1, w), c) as f64).abs();
                        if seam_h.contains(&h) {
                            seam += d;
                            ns += 1;
                        } else {
                            rest += d;
                            nr += 1;
                        }
                    }
                }
            }
        }
    }
    SeamMetrics {
        seam_mean_jump: if ns > 0 { seam / ns as f64 } else { 0.0 },
        interior_mean_jump: if nr > 0 { rest / nr as f64 } else { 0.0 },
        seam_cells: ns,
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs<'a> {
    pub manifest: Option<&'a Path>,
    pub allow_stale: bool,
    /// Condition whose guidance direction is compared with the local one.
    pub compare: PromptMode,
    /// Steps to probe; empty means first, middle and last.
    pub steps: Vec<usize>,
    pub norm: NormKind,
    pub csv_out: Option<&'a Path>,
    pub seams: bool,
}

pub fn cmd_diagnose(cfg: &RunConfig, args: &DiagnoseArgs<'_>) -> Result<String, CliError> {
    let (lr, kind) = load_input(cfg)?;
    let plan = cfg.plan_for(lr.extent())?;
    let manifest = match args.manifest {
        Some(p) => {
            let m = PromptManifest::read(p)?;
            m.check_fingerprints(&input_fingerprint(&lr), &plan, args.allow_stale)?;
            m
        }
        None => extract(cfg, &lr, kind, &plan, PromptMode::GlobalLocal)?.0,
    };
    let compared = conditions_from_manifest(&manifest, &plan, args.compare)?;
    let reference = conditions_from_manifest(&manifest, &plan, PromptMode::Local)?;
    let schedule = cfg.schedule()?;
    let steps = if args.steps.is_empty() {
        let t = schedule.len();
        let mut s = vec![t, t.div_ceil(2), 1];
        s.dedup();
        s
    } else {
        args.steps.clone()
    };
    let backend = build_backend(cfg)?;
    let rows = misguidance_probe(
        &lr,
        &plan,
        backend.as_ref(),
        &schedule,
        &steps,
        cfg.seed,
        cfg.backend.latent_channels,
        &|i| compared[i - 1].clone(),
        &|i| reference[i - 1].clone(),
        PromptMode::Local.as_str(),
        args.norm,
    )?;
    let csv = reports_to_csv(&rows);
    let mut out = String::new();
    match args.csv_out {
        Some(p) => {
            write_atomic(p, csv.as_bytes())?;
            out.push_str(&format!("wrote {} misguidance rows to {}\n", rows.len(), p.display()));
        }
        None => out.push_str(&csv),
    }
    if args.seams {
        let run = execute_run(
            cfg,
            &RunArgs {
                mode: PromptMode::Local,
                manifest: args.manifest,
                allow_stale: args.allow_stale,
            },
        )?;
        let m = seam_metrics(&run.output, &run.plan, backend.lr_scale().max(1));
        out.push_str(&serde_json::to_string(&m).expect("metrics serialize"));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub mode: String,
    /// Number of prompts extracted for this row.
    pub prompts: usize,
    pub prompt_extraction_secs: f64,
    pub denoise_secs: f64,
    pub aggregation_secs: f64,
    pub decode_secs: f64,
    pub total_secs: f64,
    pub output_checksum: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub tile_count: usize,
    pub rows: Vec<BenchRow>,
    /// Tiled-prompt total over baseline total.
    pub overhead_ratio: f64,
    pub config_hash: String,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "configuration", "prompts", "prompts (s)", "denoise (s)", "blend (s)", "decode (s)", "total (s)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:>8} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
                r.label,
                r.prompts,
                r.prompt_extraction_secs,
                r.denoise_secs,
                r.aggregation_secs,
                r.decode_secs,
                r.total_secs
            ));
        }
        s.push_str(&format!("overhead ratio (tiled / baseline): {:.4}\n", self.overhead_ratio));
        s
    }
}

/// Times a global-prompt baseline against a tiled-prompt run. Both extract
/// their prompts fresh so extraction cost is part of the comparison.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    let mut rows = Vec::new();
    let mut tile_count = 0;
    for (mode, label) in [
        (PromptMode::Global, "Baseline (global prompt)".to_string()),
        (PromptMode::Local, String::new()),
    ] {
        let out = execute_run(
            cfg,
            &RunArgs {
                mode,
                manifest: None,
                allow_stale: false,
            },
        )?;
        let r = out.report;
        tile_count = r.tile_count;
        let label = if label.is_empty() {
            format!("+ Tiled Prompts ({})", r.tile_count)
        } else {
            label
        };
        rows.push(BenchRow {
            label,
            mode: r.mode,
            prompts: r.prompt_seeds.len(),
            prompt_extraction_secs: r.prompt_extraction_secs,
            denoise_secs: r.denoise_secs,
            aggregation_secs: r.aggregation_secs,
            decode_secs: r.decode_secs,
            total_secs: r.total_secs,
            output_checksum: r.output_checksum,
        });
    }
    let overhead_ratio = rows[1].total_secs / rows[0].total_secs.max(f64::MIN_POSITIVE);
    Ok(BenchReport {
        tile_count,
        rows,
        overhead_ratio,
        config_hash: cfg.hash(),
    })
}

pub fn cmd_bench(cfg: &RunConfig, json_out: Option<&Path>) -> Result<String, CliError> {
    let report = run_bench(cfg)?;
    if let Some(p) = json_out {
        let json = serde_json::to_string_pretty(&report).expect("bench serializes");
        write_atomic(p, format!("{json}\n").as_bytes())?;
    }
    Ok(report.to_table())
}
