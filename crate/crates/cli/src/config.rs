//! Run configuration: a TOML file, then environment overrides, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tilesr_core::backend::{DecodeTiling, RemoteConfig, ToyModelSpec};
use tilesr_core::guidance::GuidanceConfig;
use tilesr_core::prompts::{PromptMode, VlmConfig};
use tilesr_core::retry::RetryPolicy;
use tilesr_core::schedule::TimestepSchedule;
use tilesr_core::tensor::Extent3;
use tilesr_core::tiling::{plan_tiles, BlendMode, TilePlan};
use tilesr_core::window::DEFAULT_SIGMA_FRAC;

pub const ENV_BACKEND_ENDPOINT: &str = "TILESR_BACKEND_ENDPOINT";
pub const ENV_EXTRACTOR_ENDPOINT: &str = "TILESR_EXTRACTOR_ENDPOINT";
pub const ENV_SEED: &str = "TILESR_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Image file, frame directory, or `.lvol` tensor. Relative paths resolve
    /// against the config file's directory.
    pub path: Option<PathBuf>,
    /// Deterministic pattern used when no path is given: `[t, h, w]`.
    pub synthetic: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    /// `[t, h, w]` on the LR grid; `t` is the temporal tube length.
    pub tile: [usize; 3],
    pub overlap: [usize; 3],
    pub mode: BlendMode,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            tile: [1, 64, 64],
            overlap: [0, 16, 16],
            mode: BlendMode::GaussianBlend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub sigma_frac: f64,
    /// Valid-region margin per axis; unset splits each overlap evenly.
    pub margin: Option<[usize; 3]>,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            sigma_frac: DEFAULT_SIGMA_FRAC,
            margin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    /// Latent-to-LR spatial ratio `r`.
    pub scale: usize,
    pub latent_channels: usize,
    /// Threads issuing tile predictions within one step. Never changes output.
    pub parallelism: usize,
    pub timeout_secs: f64,
    pub max_inflight: usize,
    pub retry: RetryPolicy,
    pub decode: DecodeTiling,
    /// Toy backend: prompt text to target mean.
    pub toy_means: BTreeMap<String, f64>,
    pub toy_default_mean: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            endpoint: None,
            scale: 1,
            latent_channels: 3,
            parallelism: 1,
            timeout_secs: 120.0,
            max_inflight: 4,
            retry: RetryPolicy::default(),
            decode: DecodeTiling::default(),
            toy_means: BTreeMap::new(),
            toy_default_mean: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Stub,
    Scripted,
    Vlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    pub kind: ExtractorKind,
    pub mode: PromptMode,
    /// Scripted extractor: tile index (as a string key) to caption.
    pub script: BTreeMap<String, String>,
    pub script_global: Option<String>,
    pub vlm: VlmConfig,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Stub,
            mode: PromptMode::Local,
            script: BTreeMap::new(),
            script_global: None,
            vlm: VlmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// `.png` image, `.lvol` tensor, or a directory of PNG frames.
    pub path: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub input: InputSection,
    pub plan: PlanSection,
    pub window: WindowSection,
    pub guidance: GuidanceConfig,
    pub schedule: ScheduleSection,
    pub backend: BackendSection,
    pub extractor: ExtractorSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.input.path);
        resolve(&mut cfg.output.path);
        resolve(&mut cfg.output.report);
        resolve(&mut cfg.output.manifest);
        Ok(cfg)
    }

    /// Applies `TILESR_BACKEND_ENDPOINT`, `TILESR_EXTRACTOR_ENDPOINT` and
    /// `TILESR_SEED` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_BACKEND_ENDPOINT) {
            self.backend.endpoint = Some(v);
        }
        if let Some(v) = lookup(ENV_EXTRACTOR_ENDPOINT) {
            self.extractor.vlm.endpoint = v;
        }
        if let Some(v) = lookup(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{ENV_SEED}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.input.path.is_none() && self.input.synthetic.is_none() {
            return bad("input needs `path` or `synthetic`".into());
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be at least 1".into());
        }
        if !(self.window.sigma_frac > 0.0 && self.window.sigma_frac <= 1.0) {
            return bad(format!("window.sigma_frac must lie in (0, 1], got {}", self.window.sigma_frac));
        }
        self.guidance.validate().map_err(ConfigError::Invalid)?;
        let b = &self.backend;
        if b.scale == 0 || b.latent_channels == 0 || b.parallelism == 0 {
            return bad("backend.scale, latent_channels and parallelism must be at least 1".into());
        }
        if b.kind == BackendKind::Remote && b.endpoint.as_deref().unwrap_or("").is_empty() {
            return bad(format!("remote backend needs backend.endpoint or {ENV_BACKEND_ENDPOINT}"));
        }
        if self.extractor.kind == ExtractorKind::Vlm && self.extractor.vlm.endpoint.is_empty() {
            return bad(format!("vlm extractor needs extractor.vlm.endpoint or {ENV_EXTRACTOR_ENDPOINT}"));
        }
        for k in self.extractor.script.keys() {
            if k.parse::<usize>().is_err() {
                return bad(format!("extractor.script key {k:?} is not a tile index"));
            }
        }
        Ok(())
    }

    /// Plan over an LR input of extent `lr`.
    pub fn plan_for(&self, lr: Extent3) -> Result<TilePlan, ConfigError> {
        // A tile longer than a short clip collapses to the full clip length.
        let tile = Extent3::from_array([
            self.plan.tile[0].min(lr.t),
            self.plan.tile[1],
            self.plan.tile[2],
        ])
        .map_err(|e| ConfigError::Invalid(format!("plan.tile: {e}")))?;
        let mut plan = plan_tiles(lr, tile, self.plan.overlap, self.plan.mode)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        plan.valid_margin = self.window.margin;
        Ok(plan)
    }

    pub fn schedule(&self) -> Result<TimestepSchedule, ConfigError> {
        TimestepSchedule::cosine(self.schedule.steps).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn toy_spec(&self) -> Result<ToyModelSpec, ConfigError> {
        ToyModelSpec::new(
            self.backend.toy_means.clone(),
            self.backend.toy_default_mean,
            self.schedule()?,
        )
        .map_err(ConfigError::Invalid)
    }

    pub fn remote_config(&self) -> RemoteConfig {
        let b = &self.backend;
        RemoteConfig {
            endpoint: b.endpoint.clone().unwrap_or_default(),
            timeout_secs: b.timeout_secs,
            retry: b.retry,
            max_inflight: b.max_inflight,
            lr_scale: b.scale,
            decode: b.decode.clone(),
        }
    }

    /// sha256 over the canonical JSON of everything that can change the
    /// output. Output paths and thread counts are excluded.
    pub fn hash(&self) -> String {
        let mut view = self.clone();
        view.output = OutputSection::default();
        view.backend.parallelism = 0;
        let json = serde_json::to_string(&view).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3

[input]
synthetic = [1, 256, 256]

[plan]
tile = [1, 64, 64]
overlap = [0, 16, 16]
mode = "gaussian_blend"

[guidance]
scale = 4.5
enabled = true

[backend]
kind = "toy"
toy_means = { "sky" = 0.2 }

[extractor]
kind = "scripted"
mode = "global+local"
script = { "1" = "red door" }
"#;

    #[test]
    fn parses_and_plans() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("x.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.extractor.mode, PromptMode::GlobalLocal);
        assert_eq!(cfg.guidance.scale, 4.5);
        assert_eq!(cfg.schedule.steps, 50);
        let plan = cfg.plan_for(Extent3::new(1, 256, 256).unwrap()).unwrap();
        assert_eq!(plan.len(), 25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[plan]\ntile_size = [1, 2, 3]\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("tile_size"), "{err}");
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::from_toml(SAMPLE, Path::new("x.toml")).unwrap();
        cfg.apply_env(|k| match k {
            ENV_SEED => Some("99".into()),
            ENV_BACKEND_ENDPOINT => Some("http://gpu:9000".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.backend.endpoint.as_deref(), Some("http://gpu:9000"));
        assert!(cfg.apply_env(|k| (k == ENV_SEED).then(|| "x".into())).is_err());
    }

    #[test]
    fn hash_ignores_outputs_and_threads() {
        let a = RunConfig::from_toml(SAMPLE, Path::new("x.toml")).unwrap();
        let mut b = a.clone();
        b.backend.parallelism = 8;
        b.output.path = Some("elsewhere.png".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = RunConfig::from_toml(SAMPLE, Path::new("x.toml")).unwrap();
        cfg.backend.kind = BackendKind::Remote;
        assert!(cfg.validate().is_err());
        cfg.backend.endpoint = Some("http://h".into());
        cfg.validate().unwrap();
        cfg.plan.overlap = [0, 64, 16];
        assert!(cfg.plan_for(Extent3::new(1, 256, 256).unwrap()).is_err());
    }
}
