//! Offline extractors for tests and demos.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{ExtractionRequest, ExtractorFailure, PromptExtractor, GLOBAL_INDEX};

/// Hash-derived captions: `stub-global-<hash8>` and `stub-tile-<i>-<hash8>`,
/// where the hash covers the input bytes, the tile index and the seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubExtractor;

impl PromptExtractor for StubExtractor {
    fn id(&self) -> String {
        "stub".into()
    }

    fn max_inflight(&self) -> usize {
        4
    }

    fn extract(&self, req: &ExtractionRequest<'_>) -> Result<String, ExtractorFailure> {
        let mut h = Sha256::new();
        h.update(req.full.to_lvol_bytes());
        if let Some(c) = req.crop {
            h.update(c.to_lvol_bytes());
        }
        h.update((req.tile_index as u64).to_le_bytes());
        h.update(req.seed.to_le_bytes());
        let hash8 = &hex::encode(h.finalize())[..8];
        Ok(if req.tile_index == GLOBAL_INDEX {
            format!("stub-global-{hash8}")
        } else {
            format!("stub-tile-{}-{hash8}", req.tile_index)
        })
    }
}

/// Fixed captions by tile index, ignoring the media.
#[derive(Debug, Clone, Default)]
pub struct ScriptedExtractor {
    tiles: BTreeMap<usize, String>,
    global: Option<String>,
    max_inflight: usize,
}

impl ScriptedExtractor {
    pub fn new(tiles: impl IntoIterator<Item = (usize, String)>, global: Option<String>) -> Self {
        Self {
            tiles: tiles.into_iter().collect(),
            global,
            max_inflight: 1,
        }
    }

    pub fn with_max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }
}

impl PromptExtractor for ScriptedExtractor {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    fn extract(&self, req: &ExtractionRequest<'_>) -> Result<String, ExtractorFailure> {
        let text = if req.tile_index == GLOBAL_INDEX {
            self.global.as_ref()
        } else {
            self.tiles.get(&req.tile_index)
        };
        text.cloned().ok_or_else(|| ExtractorFailure {
            attempts: 1,
            message: format!("no scripted caption for tile {}", req.tile_index),
        })
    }
}
