//! Tiling plans: the grid of (possibly overlapping) tile regions covering an
//! input extent, for 2D images (`t = 1`) and spatio-temporal video tubes.
//!
//! Per axis the origins are `0, s, 2s, ...` with stride `s = tile - overlap`;
//! the last origin is clamped flush to `extent - tile`, so every tile keeps the
//! same size and the final pair may overlap by more than `overlap`.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::tensor::{Axis, Coord3, Extent3, Region};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error(
        "tile {tile} exceeds input {extent} on axis {axis}; use a single tile of size {extent} instead"
    )]
    TileTooLarge {
        axis: Axis,
        tile: usize,
        extent: usize,
    },
    #[error("overlap {overlap} must be smaller than tile {tile} on axis {axis}")]
    Overlap {
        axis: Axis,
        overlap: usize,
        tile: usize,
    },
    #[error("coordinate {coord:?} lies outside tile {index}")]
    OutsideTile { index: usize, coord: Coord3 },
    #[error("upscale factor must be >= 1")]
    Scale,
}

/// How overlapping tile predictions are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Gaussian windows, normalized by the summed weights.
    GaussianBlend,
    /// Keep only each tile's central region; margins get weight zero.
    ValidRegion,
}

/// One tile `R_i`: 1-based `index`, `origin` and `size` in input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TileRegion {
    pub index: usize,
    pub origin: Coord3,
    pub size: Extent3,
}

impl TileRegion {
    pub fn region(&self) -> Region {
        Region::new(self.origin, self.size)
    }

    pub fn contains(&self, p: Coord3) -> bool {
        self.region().contains(p)
    }

    /// Global to tile-local coordinates.
    pub fn phi(&self, global: Coord3) -> Result<Coord3, PlanError> {
        if !self.contains(global) {
            return Err(PlanError::OutsideTile {
                index: self.index,
                coord: global,
            });
        }
        Ok(Coord3::new(
            global.t - self.origin.t,
            global.h - self.origin.h,
            global.w - self.origin.w,
        ))
    }

    /// Tile-local to global coordinates.
    pub fn phi_inverse(&self, local: Coord3) -> Result<Coord3, PlanError> {
        if !self.size.contains(local) {
            return Err(PlanError::OutsideTile {
                index: self.index,
                coord: local,
            });
        }
        Ok(Coord3::new(
            local.t + self.origin.t,
            local.h + self.origin.h,
            local.w + self.origin.w,
        ))
    }

    /// The corresponding region at upscale `r`: spatial axes scaled by `r`,
    /// time kept 1:1.
    pub fn scaled(&self, r: usize) -> Region {
        Region::new(
            Coord3::new(self.origin.t, self.origin.h * r, self.origin.w * r),
            Extent3 {
                t: self.size.t,
                h: self.size.h * r,
                w: self.size.w * r,
            },
        )
    }
}

impl From<TileRegion> for Region {
    fn from(r: TileRegion) -> Self {
        r.region()
    }
}

impl From<&TileRegion> for Region {
    fn from(r: &TileRegion) -> Self {
        r.region()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TilePlan {
    pub input_extent: Extent3,
    pub tile_size: Extent3,
    pub overlap: [usize; 3],
    pub mode: BlendMode,
    /// Explicit per-axis valid-region margin; `None` splits each actual
    /// neighbour overlap evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_margin: Option<[usize; 3]>,
    pub regions: Vec<TileRegion>,
}

const AXES: [Axis; 3] = [Axis::T, Axis::H, Axis::W];

/// Origins along one axis, flush-clamped and deduplicated.
pub fn axis_origins(extent: usize, tile: usize, overlap: usize) -> Result<Vec<usize>, PlanError> {
    axis_origins_on(Axis::H, extent, tile, overlap)
}

fn axis_origins_on(
    axis: Axis,
    extent: usize,
    tile: usize,
    overlap: usize,
) -> Result<Vec<usize>, PlanError> {
    if tile > extent {
        return Err(PlanError::TileTooLarge { axis, tile, extent });
    }
    if overlap >= tile {
        return Err(PlanError::Overlap {
            axis,
            overlap,
            tile,
        });
    }
    let stride = tile - overlap;
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        origins.push(o);
        if o + tile >= extent {
            break;
        }
        o = (o + stride).min(extent - tile);
    }
    origins.dedup();
    Ok(origins)
}

/// Cartesian grid of tiles over `input_extent`, ordered lexicographically by
/// `(t0, h0, w0)` and indexed from 1.
pub fn plan_tiles(
    input_extent: Extent3,
    tile_size: Extent3,
    overlap: [usize; 3],
    mode: BlendMode,
) -> Result<TilePlan, PlanError> {
    let e = input_extent.as_array();
    let k = tile_size.as_array();
    let mut per_axis = Vec::with_capacity(3);
    for a in 0..3 {
        per_axis.push(axis_origins_on(AXES[a], e[a], k[a], overlap[a])?);
    }
    let mut regions = Vec::new();
    for &t in &per_axis[0] {
        for &h in &per_axis[1] {
            for &w in &per_axis[2] {
                regions.push(TileRegion {
                    index: regions.len() + 1,
                    origin: Coord3::new(t, h, w),
                    size: tile_size,
                });
            }
        }
    }
    Ok(TilePlan {
        input_extent,
        tile_size,
        overlap,
        mode,
        valid_margin: None,
        regions,
    })
}

/// Spatio-temporal tubes for video, always in valid-region mode.
///
/// `temporal_tile` may equal the clip length (full-duration tubes) or be
/// shorter. `valid_margin` of `None` splits each neighbour overlap evenly.
pub fn plan_video_tubes(
    input_extent: Extent3,
    spatial_tile: (usize, usize),
    temporal_tile: usize,
    overlaps: [usize; 3],
    valid_margin: Option<[usize; 3]>,
) -> Result<TilePlan, PlanError> {
    let tile = Extent3 {
        t: temporal_tile,
        h: spatial_tile.0,
        w: spatial_tile.1,
    };
    let mut plan = plan_tiles(input_extent, tile, overlaps, BlendMode::ValidRegion)?;
    plan.valid_margin = valid_margin;
    Ok(plan)
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, index: usize) -> Option<&TileRegion> {
        index
            .checked_sub(1)
            .and_then(|i| self.regions.get(i))
            .filter(|r| r.index == index)
    }

    /// Distinct origins along axis `a` (0 = t, 1 = h, 2 = w), ascending.
    pub fn origins_on_axis(&self, a: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .regions
            .iter()
            .map(|r| r.origin.as_array()[a])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Extent of the output when the plan lives on an LR grid upscaled by `r`.
    pub fn scaled_extent(&self, r: usize) -> Extent3 {
        Extent3 {
            t: self.input_extent.t,
            h: self.input_extent.h * r,
            w: self.input_extent.w * r,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// One line per region: `index origin size`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.regions {
            let _ = writeln!(
                s,
                "{:>4}  origin=({},{},{})  size=({},{},{})",
                r.index, r.origin.t, r.origin.h, r.origin.w, r.size.t, r.size.h, r.size.w
            );
        }
        s
    }
}
