//! HTTP client for an out-of-process diffusion service. See [`super::wire`] for
//! the protocol.

use std::sync::atomic::{AtomicU64, Ordering};

use super::wire::{self, DECODE_PATH, OCTET_STREAM, PREDICT_PATH};
use super::{BackendError, DenoisePrediction, DenoiseRequest, Denoiser};
use crate::http;
use crate::retry::{InflightLimiter, RetryPolicy};
use crate::tensor::{divide_elementwise, Extent3, LatentVolume, UncoveredPolicy, Volume};
use crate::tiling::{plan_tiles, BlendMode};
use crate::window::gaussian_window;

/// Tiled decode settings; real VAEs cannot decode multi-megapixel latents in
/// one call either.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecodeTiling {
    /// Latent tile `[t, h, w]`; clipped to the latent extent.
    pub tile: [usize; 3],
    pub overlap: [usize; 3],
    /// Spatial upscale from latent to decoded output (e.g. 8 for SD VAEs).
    pub out_scale: usize,
    pub sigma_frac: f64,
}

impl Default for DecodeTiling {
    fn default() -> Self {
        Self {
            tile: [1, 64, 64],
            overlap: [0, 8, 8],
            out_scale: 1,
            sigma_frac: crate::window::DEFAULT_SIGMA_FRAC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RemoteConfig {
    /// Base URL; `/predict` and `/decode` are appended.
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    /// Latent-to-LR spatial ratio the service expects.
    pub lr_scale: usize,
    pub decode: DecodeTiling,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_secs: 120.0,
            retry: RetryPolicy::default(),
            max_inflight: 4,
            lr_scale: 1,
            decode: DecodeTiling::default(),
        }
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    limiter: InflightLimiter,
    attempts: AtomicU64,
    id: String,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("cfg", &self.cfg).finish()
    }
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        Self {
            limiter: InflightLimiter::new(cfg.max_inflight),
            id: format!("remote:{}", cfg.endpoint),
            agent: http::agent(cfg.timeout_secs),
            cfg,
            attempts: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    /// Total HTTP attempts made so far, retries included.
    pub fn attempts_made(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, content_type: &str, body: &[u8]) -> Result<(Vec<u8>, u32), BackendError> {
        let _permit = self.limiter.acquire();
        let out = http::post(
            &self.agent,
            &self.url(path),
            &[("Content-Type", content_type)],
            body,
            &self.cfg.retry,
        );
        let attempts = match &out {
            Ok((_, n)) | Err((_, n)) => *n,
        };
        self.attempts.fetch_add(attempts as u64, Ordering::Relaxed);
        out.map_err(|(message, attempts)| BackendError::Transport { attempts, message })
    }

    /// Like [`Denoiser::predict`] but also reports how many attempts it took.
    pub fn predict_counted(
        &self,
        req: &DenoiseRequest,
    ) -> Result<(DenoisePrediction, u32), BackendError> {
        let (ct, body) = wire::encode_predict_request(req);
        let (bytes, attempts) = self.post(PREDICT_PATH, &ct, &body)?;
        let pred = wire::decode_prediction(&bytes)?;
        pred.check_against(req)?;
        Ok((pred, attempts))
    }

    fn decode_tile(&self, tile: &LatentVolume) -> Result<LatentVolume, BackendError> {
        let (bytes, _) = self.post(DECODE_PATH, OCTET_STREAM, &tile.to_lvol_bytes())?;
        let out = LatentVolume::from_lvol_bytes(&bytes)
            .map_err(|e| BackendError::Protocol(format!("decode response: {e}")))?;
        let s = self.cfg.decode.out_scale;
        let e = tile.extent();
        let want = Extent3 {
            t: e.t,
            h: e.h * s,
            w: e.w * s,
        };
        if out.extent() != want {
            return Err(BackendError::Contract(format!(
                "decoded tile {} expected {want}",
                out.extent()
            )));
        }
        Ok(out)
    }
}

impl Denoiser for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn lr_scale(&self) -> usize {
        self.cfg.lr_scale
    }

    fn predict(&self, req: &DenoiseRequest) -> Result<DenoisePrediction, BackendError> {
        self.predict_counted(req).map(|(p, _)| p)
    }

    /// Decodes tile by tile and blends the results with Gaussian windows.
    fn decode(&self, latent: &LatentVolume) -> Result<LatentVolume, BackendError> {
        let d = &self.cfg.decode;
        let ext = latent.extent();
        let tile = Extent3 {
            t: d.tile[0].clamp(1, ext.t),
            h: d.tile[1].clamp(1, ext.h),
            w: d.tile[2].clamp(1, ext.w),
        };
        let overlap = [0, 1, 2].map(|a| d.overlap[a].min(tile.as_array()[a] - 1));
        let plan = plan_tiles(ext, tile, overlap, BlendMode::GaussianBlend)
            .map_err(|e| BackendError::Contract(format!("decode tiling: {e}")))?;
        if plan.len() == 1 {
            return self.decode_tile(latent);
        }
        let s = d.out_scale;
        let window = gaussian_window(plan.regions[0].scaled(s).size, d.sigma_frac)
            .map_err(|e| BackendError::Contract(e.to_string()))?;
        let out_extent = plan.scaled_extent(s);
        let mut acc: Option<Volume<f64>> = None;
        let mut weight = Volume::<f64>::zeros(out_extent, 1);
        for r in &plan.regions {
            let decoded = self.decode_tile(&latent.crop(r)?)?;
            let acc = acc.get_or_insert_with(|| Volume::zeros(out_extent, decoded.channels()));
            if acc.channels() != decoded.channels() {
                return Err(BackendError::Contract("decoded channel count varies".into()));
            }
            let region = r.scaled(s);
            acc.paste_accumulate(&decoded, region, window.weights())?;
            weight.paste_accumulate(
                &Volume::<f64>::filled(region.size, 1, 1.0),
                region,
                window.weights(),
            )?;
        }
        let acc = acc.expect("plan has tiles");
        Ok(divide_elementwise(&acc, &weight, UncoveredPolicy::Error)?)
    }
}
