//! Vision-chat HTTP extractor.
//!
//! Requests use the chat-completions JSON shape most open vision servers
//! accept: a system text part, then a user message holding the media parts
//! followed by the instruction text. Images travel as base64 PNG data URLs in
//! `image_url` parts. Frame sequences use `{"type": "video", "video": [urls]}`
//! parts, one URL per sampled frame.

use base64::Engine;
use serde_json::{json, Value};

use super::templates::{
    CROP_ONLY_TILE_TEMPLATE, DEFAULT_SYSTEM_PROMPT, GLOBAL_TEMPLATE, IMAGE_TILE_TEMPLATE,
    VIDEO_TILE_TEMPLATE,
};
use super::{ExtractionRequest, ExtractorFailure, PromptExtractor};
use crate::http;
use crate::media::{bicubic_upsample, encode_png, MediaKind};
use crate::retry::{InflightLimiter, RetryPolicy};
use crate::tensor::LatentVolume;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VlmConfig {
    /// Full URL of the chat endpoint, e.g. `http://host:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    /// Bicubic factor applied to tile crops before sending.
    pub crop_upsample: usize,
    /// Frames sampled uniformly from each sequence sent.
    pub frame_budget: usize,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Dot path to the caption in the response; numeric segments index arrays.
    pub response_path: String,
    /// Send only the upsampled crop instead of the full input plus crop.
    pub crop_only: bool,
    pub system_prompt: String,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "Qwen/Qwen2.5-VL-7B-Instruct".into(),
            api_key: None,
            timeout_secs: 120.0,
            retry: RetryPolicy::default(),
            max_inflight: 4,
            crop_upsample: 4,
            frame_budget: 16,
            temperature: 0.0,
            max_tokens: Some(256),
            response_path: "choices.0.message.content".into(),
            crop_only: false,
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
        }
    }
}

/// `budget` frame indices spread evenly over `0..len`, endpoints included.
pub fn sample_frames(len: usize, budget: usize) -> Vec<usize> {
    let budget = budget.max(1);
    if len <= budget {
        return (0..len).collect();
    }
    if budget == 1 {
        return vec![0];
    }
    (0..budget)
        .map(|k| ((k * (len - 1)) as f64 / (budget - 1) as f64).round() as usize)
        .collect()
}

fn data_url(png: &[u8]) -> String {
    format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    )
}

fn frame_urls(vol: &LatentVolume, budget: usize) -> Result<Vec<String>, String> {
    sample_frames(vol.extent().t, budget)
        .into_iter()
        .map(|t| encode_png(vol, t).map(|png| data_url(&png)).map_err(|e| e.to_string()))
        .collect()
}

fn media_part(vol: &LatentVolume, kind: MediaKind, budget: usize) -> Result<Value, String> {
    let urls = frame_urls(vol, budget)?;
    Ok(match kind {
        MediaKind::Image => json!({"type": "image_url", "image_url": {"url": urls[0]}}),
        MediaKind::Video => json!({"type": "video", "video": urls}),
    })
}

/// The JSON body sent for `req`.
pub fn build_request_body(cfg: &VlmConfig, req: &ExtractionRequest<'_>) -> Result<Value, String> {
    let budget = cfg.frame_budget;
    let mut content = Vec::new();
    let text = match req.crop {
        None => {
            content.push(media_part(req.full, req.kind, budget)?);
            GLOBAL_TEMPLATE
        }
        Some(crop) => {
            let up = bicubic_upsample(crop, cfg.crop_upsample.max(1));
            if cfg.crop_only {
                content.push(media_part(&up, req.kind, budget)?);
                CROP_ONLY_TILE_TEMPLATE
            } else {
                content.push(media_part(req.full, req.kind, budget)?);
                content.push(media_part(&up, req.kind, budget)?);
                match req.kind {
                    MediaKind::Image => IMAGE_TILE_TEMPLATE,
                    MediaKind::Video => VIDEO_TILE_TEMPLATE,
                }
            }
        }
    };
    content.push(json!({"type": "text", "text": text}));
    let mut body = json!({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "seed": req.seed,
        "messages": [
            {"role": "system", "content": [{"type": "text", "text": cfg.system_prompt}]},
            {"role": "user", "content": content},
        ],
    });
    if let Some(n) = cfg.max_tokens {
        body["max_tokens"] = json!(n);
    }
    Ok(body)
}

/// Follows a dot path such as `choices.0.message.content`. A string is
/// returned as is; an array of `{"type": "text"}` parts is concatenated.
pub fn caption_at_path(response: &Value, path: &str) -> Result<String, String> {
    let mut cur = response;
    for seg in path.split('.').filter(|s| !s.is_empty()) {
        let next = match seg.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(seg),
        };
        cur = next.ok_or_else(|| format!("response has no {seg:?} along {path:?}"))?;
    }
    match cur {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(format!("caption at {path:?} is not text: {other}")),
    }
}

pub struct VlmExtractor {
    cfg: VlmConfig,
    agent: ureq::Agent,
    limiter: InflightLimiter,
}

impl std::fmt::Debug for VlmExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VlmExtractor").field("endpoint", &self.cfg.endpoint).finish()
    }
}

impl VlmExtractor {
    pub fn new(cfg: VlmConfig) -> Self {
        Self {
            agent: http::agent(cfg.timeout_secs),
            limiter: InflightLimiter::new(cfg.max_inflight),
            cfg,
        }
    }

    pub fn config(&self) -> &VlmConfig {
        &self.cfg
    }
}

impl PromptExtractor for VlmExtractor {
    fn id(&self) -> String {
        format!("vlm:{}", self.cfg.model)
    }

    fn max_inflight(&self) -> usize {
        self.cfg.max_inflight.max(1)
    }

    fn extract(&self, req: &ExtractionRequest<'_>) -> Result<String, ExtractorFailure> {
        let fail = |attempts, message| ExtractorFailure { attempts, message };
        let body = build_request_body(&self.cfg, req).map_err(|m| fail(0, m))?;
        let bytes = serde_json::to_vec(&body).expect("json serializes");
        let auth = self.cfg.api_key.as_ref().map(|k| format!("Bearer {k}"));
        let mut headers = vec![("Content-Type", "application/json")];
        if let Some(a) = &auth {
            headers.push(("Authorization", a.as_str()));
        }
        let _permit = self.limiter.acquire();
        let (resp, attempts) = http::post(&self.agent, &self.cfg.endpoint, &headers, &bytes, &self.cfg.retry)
            .map_err(|(m, n)| fail(n, m))?;
        let value: Value = serde_json::from_slice(&resp)
            .map_err(|e| fail(attempts, format!("response is not JSON: {e}")))?;
        caption_at_path(&value, &self.cfg.response_path).map_err(|m| fail(attempts, m))
    }
}
