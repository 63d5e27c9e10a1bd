//! Global and per-tile text conditions.
//!
//! An extractor turns media into a caption. The drivers here fan requests out
//! over the tiles of a plan and assemble a [`PromptManifest`], which binds the
//! prompts to the input and plan they were extracted for.

pub mod stub;
pub mod templates;
pub mod vlm;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rayon::prelude::*;

use crate::media::MediaKind;
use crate::tensor::LatentVolume;
use crate::tiling::{TilePlan, TileRegion};

pub use stub::{ScriptedExtractor, StubExtractor};
pub use vlm::{VlmConfig, VlmExtractor};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt extraction failed for tile {tile_index} after {attempts} attempt(s): {message}")]
    Extractor {
        tile_index: usize,
        attempts: u32,
        message: String,
    },
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{which} fingerprint mismatch: manifest has {found}, current is {expected} (pass --allow-stale to override)")]
    Fingerprint {
        which: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which conditions a run uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PromptMode {
    /// Every tile gets the global caption.
    #[serde(rename = "global")]
    Global,
    /// Every tile gets its own caption.
    #[default]
    #[serde(rename = "local")]
    Local,
    /// `"<global>. <local>"`.
    #[serde(rename = "global+local")]
    GlobalLocal,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Global, PromptMode::Local, PromptMode::GlobalLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Global => "global",
            PromptMode::Local => "local",
            PromptMode::GlobalLocal => "global+local",
        }
    }

    pub fn needs_global(self) -> bool {
        matches!(self, PromptMode::Global | PromptMode::GlobalLocal)
    }

    pub fn needs_local(self) -> bool {
        matches!(self, PromptMode::Local | PromptMode::GlobalLocal)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown prompt mode {s:?} (expected global, local or global+local)"))
    }
}

pub const GLOBAL_INDEX: usize = 0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptRecord {
    /// `0` for the global caption, plan indices otherwise.
    pub tile_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<TileRegion>,
    pub text: String,
    pub extractor_id: String,
    /// Sampling seed handed to the extractor.
    pub seed: u64,
    pub created_at: DateTime<Utc>,
}

/// Content hash of the LR input that prompts are bound to.
pub fn input_fingerprint(lr: &LatentVolume) -> String {
    lr.checksum()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptManifest {
    pub input_fingerprint: String,
    pub plan_fingerprint: String,
    pub records: Vec<PromptRecord>,
}

impl PromptManifest {
    pub fn global(&self) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.tile_index == GLOBAL_INDEX)
    }

    pub fn local(&self, tile_index: usize) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.tile_index == tile_index)
    }

    /// Sorts records by tile index, global first.
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| r.tile_index);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        serde_json::from_str(text).map_err(|e| PromptError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), PromptError> {
        std::fs::write(path, self.to_json()).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rejects a manifest extracted for a different input or plan unless
    /// `allow_stale` is set.
    pub fn check_fingerprints(
        &self,
        input_fingerprint: &str,
        plan: &TilePlan,
        allow_stale: bool,
    ) -> Result<(), PromptError> {
        if allow_stale {
            return Ok(());
        }
        if self.input_fingerprint != input_fingerprint {
            return Err(PromptError::Fingerprint {
                which: "input",
                expected: input_fingerprint.to_string(),
                found: self.input_fingerprint.clone(),
            });
        }
        let plan_fp = plan.fingerprint();
        if self.plan_fingerprint != plan_fp {
            return Err(PromptError::Fingerprint {
                which: "plan",
                expected: plan_fp,
                found: self.plan_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Structural checks against `plan`: unique indices, nonempty text,
    /// regions matching the plan, and the records `mode` needs. Local modes
    /// need a record for every region and nothing outside the plan.
    pub fn validate(&self, plan: &TilePlan, mode: PromptMode) -> Result<(), PromptError> {
        let mut seen = BTreeMap::new();
        for r in &self.records {
            if seen.insert(r.tile_index, r).is_some() {
                return Err(PromptError::Invalid(format!("duplicate record for tile {}", r.tile_index)));
            }
            if r.text.trim().is_empty() {
                return Err(PromptError::Invalid(format!("empty text for tile {}", r.tile_index)));
            }
            if r.tile_index == GLOBAL_INDEX {
                continue;
            }
            let Some(region) = plan.region(r.tile_index) else {
                return Err(PromptError::Invalid(format!(
                    "record for tile {} but the plan has {} tiles",
                    r.tile_index,
                    plan.len()
                )));
            };
            if r.region.as_ref().is_some_and(|g| g != region) {
                return Err(PromptError::Invalid(format!(
                    "record region for tile {} differs from the plan",
                    r.tile_index
                )));
            }
        }
        if mode.needs_global() && !seen.contains_key(&GLOBAL_INDEX) {
            return Err(PromptError::Invalid(format!("mode {mode} needs a global record")));
        }
        if mode.needs_local() {
            let missing: Vec<usize> = (1..=plan.len()).filter(|i| !seen.contains_key(i)).collect();
            if !missing.is_empty() {
                return Err(PromptError::Invalid(format!(
                    "mode {mode} needs a record for every tile; missing {missing:?}"
                )));
            }
        }
        Ok(())
    }

    /// The condition string tile `tile_index` is denoised under.
    pub fn condition_for(&self, tile_index: usize, mode: PromptMode) -> Result<String, PromptError> {
        let global = || {
            self.global()
                .map(|r| r.text.trim().to_string())
                .ok_or_else(|| PromptError::Invalid("no global record".into()))
        };
        let local = || {
            self.local(tile_index)
                .filter(|_| tile_index != GLOBAL_INDEX)
                .map(|r| r.text.trim().to_string())
                .ok_or_else(|| PromptError::Invalid(format!("no record for tile {tile_index}")))
        };
        match mode {
            PromptMode::Global => global(),
            PromptMode::Local => local(),
            PromptMode::GlobalLocal => Ok(format!("{}. {}", global()?, local()?)),
        }
    }
}

/// One extractor call. `crop` is absent for the global caption.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionRequest<'a> {
    pub tile_index: usize,
    pub kind: MediaKind,
    /// The full LR input (image or frame sequence), values in `[0, 1]`.
    pub full: &'a LatentVolume,
    /// The tile crop or tube in LR pixel space.
    pub crop: Option<&'a LatentVolume>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorFailure {
    pub attempts: u32,
    pub message: String,
}

pub trait PromptExtractor: Send + Sync {
    fn id(&self) -> String;

    /// Upper bound on concurrent calls.
    fn max_inflight(&self) -> usize {
        1
    }

    fn extract(&self, req: &ExtractionRequest<'_>) -> Result<String, ExtractorFailure>;
}

fn run_one(
    extractor: &dyn PromptExtractor,
    req: &ExtractionRequest<'_>,
    region: Option<TileRegion>,
) -> Result<PromptRecord, PromptError> {
    let fail = |attempts, message| PromptError::Extractor {
        tile_index: req.tile_index,
        attempts,
        message,
    };
    let text = extractor
        .extract(req)
        .map_err(|f| fail(f.attempts, f.message))?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(fail(1, "extractor returned empty text".into()));
    }
    Ok(PromptRecord {
        tile_index: req.tile_index,
        region,
        text,
        extractor_id: extractor.id(),
        seed: req.seed,
        created_at: Utc::now(),
    })
}

/// Captions the whole input. The record has index 0 and seed `base_seed`.
pub fn extract_global(
    lr: &LatentVolume,
    kind: MediaKind,
    extractor: &dyn PromptExtractor,
    base_seed: u64,
) -> Result<PromptRecord, PromptError> {
    let req = ExtractionRequest {
        tile_index: GLOBAL_INDEX,
        kind,
        full: lr,
        crop: None,
        seed: base_seed,
    };
    run_one(extractor, &req, None)
}

fn extract_tiled(
    lr: &LatentVolume,
    kind: MediaKind,
    plan: &TilePlan,
    extractor: &dyn PromptExtractor,
    base_seed: u64,
) -> Result<PromptManifest, PromptError> {
    if plan.input_extent != lr.extent() {
        return Err(PromptError::Invalid(format!(
            "plan covers {} but the input is {}",
            plan.input_extent,
            lr.extent()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(extractor.max_inflight().max(1))
        .build()
        .map_err(|e| PromptError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<PromptRecord, PromptError>> = pool.install(|| {
        plan.regions
            .par_iter()
            .map(|region| {
                let crop = lr
                    .crop(region)
                    .map_err(|e| PromptError::Invalid(e.to_string()))?;
                let req = ExtractionRequest {
                    tile_index: region.index,
                    kind,
                    full: lr,
                    crop: Some(&crop),
                    seed: base_seed + region.index as u64,
                };
                run_one(extractor, &req, Some(*region))
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut manifest = PromptManifest {
        input_fingerprint: input_fingerprint(lr),
        plan_fingerprint: plan.fingerprint(),
        records,
    };
    manifest.sort();
    Ok(manifest)
}

/// One record per plan region. Each request carries the full image and the
/// tile crop; seeds are `base_seed + tile_index`. Any tile failing after its
/// retry budget rejects the whole manifest.
pub fn extract_tiled_image(
    lr: &LatentVolume,
    plan: &TilePlan,
    extractor: &dyn PromptExtractor,
    base_seed: u64,
) -> Result<PromptManifest, PromptError> {
    extract_tiled(lr, MediaKind::Image, plan, extractor, base_seed)
}

/// Video variant of [`extract_tiled_image`]: requests carry the full frame
/// sequence alongside each tube.
pub fn extract_tiled_video(
    lr: &LatentVolume,
    plan: &TilePlan,
    extractor: &dyn PromptExtractor,
    base_seed: u64,
) -> Result<PromptManifest, PromptError> {
    extract_tiled(lr, MediaKind::Video, plan, extractor, base_seed)
}

/// Runs the extractions `mode` needs: the global caption, the tile captions,
/// or both.
pub fn extract_for_mode(
    lr: &LatentVolume,
    kind: MediaKind,
    plan: &TilePlan,
    extractor: &dyn PromptExtractor,
    base_seed: u64,
    mode: PromptMode,
) -> Result<PromptManifest, PromptError> {
    let mut manifest = if mode.needs_local() {
        extract_tiled(lr, kind, plan, extractor, base_seed)?
    } else {
        PromptManifest {
            input_fingerprint: input_fingerprint(lr),
            plan_fingerprint: plan.fingerprint(),
            records: Vec::new(),
        }
    };
    if mode.needs_global() {
        manifest
            .records
            .push(extract_global(lr, kind, extractor, base_seed)?);
        manifest.sort();
    }
    Ok(manifest)
}
