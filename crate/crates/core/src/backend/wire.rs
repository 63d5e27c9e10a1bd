//! Remote denoiser wire format.
//!
//! `POST {endpoint}/predict` carries `multipart/form-data` with three parts:
//!
//! * `header`: JSON `{extents: {latent, lr}, timestep, condition, want_uncond, seed}`
//!   where extents are `[T, H, W, C]`;
//! * `latent`: the latent tile as an `LVOL` record;
//! * `lr`: the LR tile as an `LVOL` record.
//!
//! The response body (`application/octet-stream`) is the `LVOL` record of
//! `e_cond`, optionally followed by a second record holding `e_uncond`.
//!
//! `POST {endpoint}/decode` sends one `LVOL` latent tile and receives one
//! `LVOL` record back.
//!
//! Both halves are implemented here so test servers and out-of-process
//! backends can share the parsing code.

use sha2::{Digest, Sha256};

use super::{BackendError, DenoisePrediction, DenoiseRequest};
use crate::tensor::LatentVolume;

pub const PREDICT_PATH: &str = "/predict";
pub const DECODE_PATH: &str = "/decode";
pub const OCTET_STREAM: &str = "application/octet-stream";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WireExtents {
    pub latent: [usize; 4],
    pub lr: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictHeader {
    pub extents: WireExtents,
    pub timestep: f64,
    pub condition: String,
    pub want_uncond: bool,
    pub seed: u64,
}

fn dims(v: &LatentVolume) -> [usize; 4] {
    let e = v.extent();
    [e.t, e.h, e.w, v.channels()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub name: String,
    pub content_type: Option<String>,
    pub data: Vec<u8>,
}

/// Encodes `parts` as `multipart/form-data`, returning the content type and body.
/// The boundary is derived from the payload hash, so identical requests are
/// byte-identical.
pub fn encode_multipart(parts: &[Part]) -> (String, Vec<u8>) {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.name.as_bytes());
        h.update(&p.data);
    }
    let boundary = format!("tilesr-{}", &hex::encode(h.finalize())[..32]);
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{}\"\r\n", p.name).as_bytes(),
        );
        if let Some(ct) = &p.content_type {
            body.extend_from_slice(format!("Content-Type: {ct}\r\n").as_bytes());
        }
        body.extend_from_slice(b"\r\n");
        body.extend_from_slice(&p.data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from > hay.len() {
        return None;
    }
    hay[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|i| i + from)
}

/// Parses a `multipart/form-data` body.
pub fn decode_multipart(content_type: &str, body: &[u8]) -> Result<Vec<Part>, BackendError> {
    let boundary = content_type
        .split(';')
        .map(str::trim)
        .find_map(|kv| kv.strip_prefix("boundary="))
        .map(|b| b.trim_matches('"'))
        .ok_or_else(|| BackendError::Protocol("multipart boundary missing".into()))?;
    let delim = format!("--{boundary}");
    let mut parts = Vec::new();
    let mut pos = find(body, delim.as_bytes(), 0)
        .ok_or_else(|| BackendError::Protocol("no multipart delimiter".into()))?;
    loop {
        pos += delim.len();
        if body[pos..].starts_with(b"--") {
            break;
        }
        pos += 2; // CRLF after delimiter
        let head_end = find(body, b"\r\n\r\n", pos)
            .ok_or_else(|| BackendError::Protocol("unterminated part headers".into()))?;
        let headers = std::str::from_utf8(&body[pos..head_end])
            .map_err(|_| BackendError::Protocol("part headers are not utf-8".into()))?;
        let mut name = None;
        let mut ctype = None;
        for line in headers.split("\r\n") {
            let (k, v) = line.split_once(':').unwrap_or((line, ""));
            match k.trim().to_ascii_lowercase().as_str() {
                "content-disposition" => {
                    name = v
                        .split(';')
                        .map(str::trim)
                        .find_map(|kv| kv.strip_prefix("name="))
                        .map(|n| n.trim_matches('"').to_string());
                }
                "content-type" => ctype = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let data_start = head_end + 4;
        let end_marker = format!("\r\n{delim}");
        let data_end = find(body, end_marker.as_bytes(), data_start)
            .ok_or_else(|| BackendError::Protocol("unterminated part".into()))?;
        parts.push(Part {
            name: name.ok_or_else(|| BackendError::Protocol("part without name".into()))?,
            content_type: ctype,
            data: body[data_start..data_end].to_vec(),
        });
        pos = data_end + 2;
    }
    Ok(parts)
}

pub fn encode_predict_request(req: &DenoiseRequest) -> (String, Vec<u8>) {
    let header = PredictHeader {
        extents: WireExtents {
            latent: dims(&req.latent_tile),
            lr: dims(&req.lr_tile),
        },
        timestep: req.timestep,
        condition: req.condition.clone(),
        want_uncond: req.want_uncond,
        seed: req.seed,
    };
    encode_multipart(&[
        Part {
            name: "header".into(),
            content_type: Some("application/json".into()),
            data: serde_json::to_vec(&header).expect("header serializes"),
        },
        Part {
            name: "latent".into(),
            content_type: Some(OCTET_STREAM.into()),
            data: req.latent_tile.to_lvol_bytes(),
        },
        Part {
            name: "lr".into(),
            content_type: Some(OCTET_STREAM.into()),
            data: req.lr_tile.to_lvol_bytes(),
        },
    ])
}

/// Server side of [`encode_predict_request`].
pub fn decode_predict_request(
    content_type: &str,
    body: &[u8],
) -> Result<DenoiseRequest, BackendError> {
    let parts = decode_multipart(content_type, body)?;
    let get = |n: &str| {
        parts
            .iter()
            .find(|p| p.name == n)
            .ok_or_else(|| BackendError::Protocol(format!("missing part {n:?}")))
    };
    let header: PredictHeader = serde_json::from_slice(&get("header")?.data)
        .map_err(|e| BackendError::Protocol(format!("bad header: {e}")))?;
    let latent = LatentVolume::from_lvol_bytes(&get("latent")?.data)
        .map_err(|e| BackendError::Protocol(format!("latent part: {e}")))?;
    let lr = LatentVolume::from_lvol_bytes(&get("lr")?.data)
        .map_err(|e| BackendError::Protocol(format!("lr part: {e}")))?;
    if dims(&latent) != header.extents.latent || dims(&lr) != header.extents.lr {
        return Err(BackendError::Protocol(
            "header extents disagree with payloads".into(),
        ));
    }
    Ok(DenoiseRequest {
        latent_tile: latent,
        lr_tile: lr,
        condition: header.condition,
        timestep: header.timestep,
        want_uncond: header.want_uncond,
        seed: header.seed,
    })
}

pub fn encode_prediction(pred: &DenoisePrediction) -> Vec<u8> {
    let mut out = pred.e_cond.to_lvol_bytes();
    if let Some(u) = &pred.e_uncond {
        out.extend_from_slice(&u.to_lvol_bytes());
    }
    out
}

pub fn decode_prediction(body: &[u8]) -> Result<DenoisePrediction, BackendError> {
    let (e_cond, used) = LatentVolume::read_lvol_prefix(body)
        .map_err(|e| BackendError::Protocol(format!("e_cond: {e}")))?;
    let rest = &body[used..];
    let e_uncond = if rest.is_empty() {
        None
    } else {
        Some(
            LatentVolume::from_lvol_bytes(rest)
                .map_err(|e| BackendError::Protocol(format!("e_uncond: {e}")))?,
        )
    };
    Ok(DenoisePrediction { e_cond, e_uncond })
}
