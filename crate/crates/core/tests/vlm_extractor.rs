mod common;

use common::FakeServer;
use serde_json::{json, Value};
use tilesr_core::media::MediaKind;
use tilesr_core::prompts::templates::{IMAGE_TILE_TEMPLATE, VIDEO_TILE_TEMPLATE};
use tilesr_core::prompts::{
    extract_global, extract_tiled_image, extract_tiled_video, PromptError, PromptManifest,
    VlmConfig, VlmExtractor,
};
use tilesr_core::retry::RetryPolicy;
use tilesr_core::tensor::{Extent3, LatentVolume};
use tilesr_core::tiling::{plan_tiles, plan_video_tubes, BlendMode};

fn reply(text: &str) -> Vec<u8> {
    serde_json::to_vec(&json!({"choices": [{"message": {"role": "assistant", "content": text}}]})).unwrap()
}

fn cfg(url: &str) -> VlmConfig {
    VlmConfig {
        endpoint: format!("{url}/v1/chat/completions"),
        retry: RetryPolicy::no_backoff(3),
        timeout_secs: 10.0,
        frame_budget: 4,
        ..VlmConfig::default()
    }
}

fn image(h: usize, w: usize) -> LatentVolume {
    LatentVolume::from_fn(Extent3::new(1, h, w).unwrap(), 3, |p, c| ((p.h * w + p.w + c) % 7) as f32 / 6.0)
}

fn user_parts(body: &[u8]) -> Vec<Value> {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["messages"][1]["content"].as_array().unwrap().clone()
}

#[test]
fn global_caption_from_fake_endpoint() {
    let server = FakeServer::start(|_, _| (200, reply("a city street")));
    let vlm = VlmExtractor::new(cfg(&server.url));
    let rec = extract_global(&image(8, 8), MediaKind::Image, &vlm, 5).unwrap();
    assert_eq!(rec.text, "a city street");
    assert_eq!(rec.tile_index, 0);
    assert_eq!(rec.seed, 5);
    let seen = server.requests();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].content_type, "application/json");
}

#[test]
fn tiled_image_requests_carry_template_and_both_images() {
    // The reply names the tile through the seed the request carries.
    let server = FakeServer::start(|c, _| {
        let v: Value = serde_json::from_slice(&c.body).unwrap();
        let tile = v["seed"].as_u64().unwrap() - 1000;
        (200, reply(&format!("  tile {tile} keywords \n")))
    });
    let mut config = cfg(&server.url);
    config.max_inflight = 3;
    let vlm = VlmExtractor::new(config);
    let lr = image(12, 12);
    let plan = plan_tiles(lr.extent(), Extent3::new(1, 6, 6).unwrap(), [0, 2, 2], BlendMode::GaussianBlend).unwrap();
    let manifest = extract_tiled_image(&lr, &plan, &vlm, 1000).unwrap();
    assert_eq!(manifest.records.len(), plan.len());
    for r in &manifest.records {
        assert_eq!(r.text, format!("tile {} keywords", r.tile_index));
        assert_eq!(r.seed, 1000 + r.tile_index as u64);
    }
    let seen = server.requests();
    assert_eq!(seen.len(), plan.len());
    for c in &seen {
        let raw = String::from_utf8(c.body.clone()).unwrap();
        // Byte-exact, JSON-escaped newlines included.
        let escaped = serde_json::to_string(IMAGE_TILE_TEMPLATE).unwrap();
        assert!(raw.contains(&escaped));
        assert!(raw.contains("Output ONLY the inferred high-quality keywords"));
        let parts = user_parts(&c.body);
        assert_eq!(parts.len(), 3);
        assert!(parts[..2].iter().all(|p| p["type"] == "image_url"));
        assert_eq!(parts[2]["text"].as_str().unwrap(), IMAGE_TILE_TEMPLATE);
    }
    let back = PromptManifest::from_json(&manifest.to_json()).unwrap();
    assert_eq!(back, manifest);
}

#[test]
fn tiled_video_requests_carry_sequence_and_tube() {
    let server = FakeServer::start(|c, _| {
        let parts = user_parts(&c.body);
        let ok = parts.len() == 3
            && parts[0]["type"] == "video"
            && parts[1]["type"] == "video"
            && parts[2]["text"] == VIDEO_TILE_TEMPLATE;
        if ok {
            (200, reply("rippling water, wooden dock"))
        } else {
            (422, b"bad request shape".to_vec())
        }
    });
    let vlm = VlmExtractor::new(cfg(&server.url));
    let e = Extent3::new(10, 6, 6).unwrap();
    let lr = LatentVolume::from_fn(e, 3, |p, _| p.t as f32 / 10.0);
    let plan = plan_video_tubes(e, (6, 6), 10, [0, 0, 0], None).unwrap();
    assert_eq!(plan.len(), 1);
    let manifest = extract_tiled_video(&lr, &plan, &vlm, 0).unwrap();
    assert_eq!(manifest.records.len(), 1);
    assert_eq!(manifest.records[0].text, "rippling water, wooden dock");
    let parts = user_parts(&server.requests()[0].body);
    assert_eq!(parts[0]["video"].as_array().unwrap().len(), 4);
}

#[test]
fn persistent_failure_rejects_the_manifest() {
    let server = FakeServer::start(|c, _| {
        let v: Value = serde_json::from_slice(&c.body).unwrap();
        if v["seed"] == 2 {
            (503, Vec::new())
        } else {
            (200, reply("ok"))
        }
    });
    let vlm = VlmExtractor::new(cfg(&server.url));
    let lr = image(8, 8);
    let plan = plan_tiles(lr.extent(), Extent3::new(1, 4, 4).unwrap(), [0, 0, 0], BlendMode::ValidRegion).unwrap();
    match extract_tiled_image(&lr, &plan, &vlm, 0) {
        Err(PromptError::Extractor { tile_index, attempts, .. }) => {
            assert_eq!(tile_index, 2);
            assert_eq!(attempts, 3);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_an_extraction_error() {
    let vlm = VlmExtractor::new(VlmConfig {
        retry: RetryPolicy::no_backoff(1),
        ..cfg("http://127.0.0.1:9")
    });
    assert!(matches!(
        extract_global(&image(4, 4), MediaKind::Image, &vlm, 0),
        Err(PromptError::Extractor { .. })
    ));
}
