//! Per-tile weight fields: separable Gaussian windows for overlap blending and
//! binary valid-region masks.
//!
//! Windows are not normalized per tile. The sampler divides by the summed
//! weights of all tiles covering a cell.

use std::sync::Arc;

use crate::tensor::{Coord3, Extent3, Volume};
use crate::tiling::{BlendMode, TilePlan};

pub const DEFAULT_SIGMA_FRAC: f64 = 0.33;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WindowError {
    #[error("sigma_frac must lie in (0, 1], got {0}")]
    Sigma(f64),
    #[error("custom weights must be single-channel, finite and nonnegative")]
    Weights,
    #[error("margins {margins:?} leave no interior in extent {extent}")]
    EmptyInterior {
        extent: Extent3,
        margins: [[usize; 2]; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Gaussian,
    ValidMask,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowParams {
    /// Standard deviation per axis, in cells; 0 for unit-length axes.
    Gaussian { sigma: [f64; 3] },
    /// `[before, after]` margin per axis, after boundary adjustment.
    ValidMask { margins: [[usize; 2]; 3] },
    Custom,
}

/// Nonnegative single-channel weight field over one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWindow {
    kind: WindowKind,
    params: WindowParams,
    weights: Volume<f64>,
}

impl BlendWindow {
    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn params(&self) -> &WindowParams {
        &self.params
    }

    pub fn extent(&self) -> Extent3 {
        self.weights.extent()
    }

    pub fn weights(&self) -> &Volume<f64> {
        &self.weights
    }

    pub fn weight(&self, p: Coord3) -> f64 {
        self.weights.get(p, 0)
    }

    /// All-ones window, i.e. plain indicator aggregation.
    pub fn uniform(extent: Extent3) -> Self {
        Self {
            kind: WindowKind::ValidMask,
            params: WindowParams::ValidMask {
                margins: [[0; 2]; 3],
            },
            weights: Volume::filled(extent, 1, 1.0),
        }
    }

    /// Wraps caller-supplied weights.
    pub fn custom(weights: Volume<f64>) -> Result<Self, WindowError> {
        let ok = weights.channels() == 1 && weights.data().iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok {
            return Err(WindowError::Weights);
        }
        Ok(Self {
            kind: WindowKind::Custom,
            params: WindowParams::Custom,
            weights,
        })
    }
}

/// `w(p) = prod_a exp(-(p_a - c_a)^2 / (2 sigma_a^2))` with `c_a = (len_a - 1) / 2`
/// and `sigma_a = sigma_frac * len_a`. Unit-length axes contribute 1.
pub fn gaussian_window(extent: Extent3, sigma_frac: f64) -> Result<BlendWindow, WindowError> {
    if !(sigma_frac > 0.0 && sigma_frac <= 1.0) {
        return Err(WindowError::Sigma(sigma_frac));
    }
    let lens = extent.as_array();
    let profiles: Vec<Vec<f64>> = lens
        .iter()
        .map(|&len| {
            if len == 1 {
                return vec![1.0];
            }
            let c = (len as f64 - 1.0) / 2.0;
            let s = sigma_frac * len as f64;
            (0..len)
                .map(|i| {
                    let d = i as f64 - c;
                    (-(d * d) / (2.0 * s * s)).exp()
                })
                .collect()
        })
        .collect();
    let sigma = [0, 1, 2].map(|a| {
        if lens[a] == 1 {
            0.0
        } else {
            sigma_frac * lens[a] as f64
        }
    });
    let weights = Volume::from_fn(extent, 1, |p, _| {
        profiles[0][p.t] * profiles[1][p.h] * profiles[2][p.w]
    });
    Ok(BlendWindow {
        kind: WindowKind::Gaussian,
        params: WindowParams::Gaussian { sigma },
        weights,
    })
}

/// Binary mask that keeps the central region. Sides flagged in `is_boundary`
/// touch the global input edge and get no margin.
pub fn valid_mask(
    extent: Extent3,
    margins: [[usize; 2]; 3],
    is_boundary: [[bool; 2]; 3],
) -> Result<BlendWindow, WindowError> {
    let mut eff = margins;
    for a in 0..3 {
        for side in 0..2 {
            if is_boundary[a][side] {
                eff[a][side] = 0;
            }
        }
    }
    let lens = extent.as_array();
    if (0..3).any(|a| eff[a][0] + eff[a][1] >= lens[a]) {
        return Err(WindowError::EmptyInterior {
            extent,
            margins: eff,
        });
    }
    let keep = |a: usize, i: usize| i >= eff[a][0] && i < lens[a] - eff[a][1];
    let weights = Volume::from_fn(extent, 1, |p, _| {
        if keep(0, p.t) && keep(1, p.h) && keep(2, p.w) {
            1.0
        } else {
            0.0
        }
    });
    Ok(BlendWindow {
        kind: WindowKind::ValidMask,
        params: WindowParams::ValidMask { margins: eff },
        weights,
    })
}

/// Windows for every region of `plan`, sized for the latent at upscale `scale`.
///
/// Gaussian plans share one window. Valid-region plans split each neighbour
/// overlap between the two tiles (`floor(ov/2)` to the earlier tile's trailing
/// side, `ceil(ov/2)` to the later tile's leading side), so retained regions
/// partition the domain; an explicit `plan.valid_margin` overrides this on
/// interior sides.
pub fn windows_for_plan(
    plan: &TilePlan,
    sigma_frac: f64,
    scale: usize,
) -> Result<Vec<Arc<BlendWindow>>, WindowError> {
    let axis_scale = [1, scale, scale];
    let tile = plan.regions.first().map(|r| r.scaled(scale).size);
    let Some(tile) = tile else {
        return Ok(Vec::new());
    };
    match plan.mode {
        BlendMode::GaussianBlend => {
            let w = Arc::new(gaussian_window(tile, sigma_frac)?);
            Ok(plan.regions.iter().map(|_| Arc::clone(&w)).collect())
        }
        BlendMode::ValidRegion => {
            let origins: Vec<Vec<usize>> = (0..3).map(|a| plan.origins_on_axis(a)).collect();
            let lens = plan.tile_size.as_array();
            plan.regions
                .iter()
                .map(|r| {
                    let o = r.origin.as_array();
                    let mut margins = [[0usize; 2]; 3];
                    let mut boundary = [[false; 2]; 3];
                    for a in 0..3 {
                        let axis = &origins[a];
                        let k = axis.binary_search(&o[a]).expect("origin from plan");
                        if k == 0 {
                            boundary[a][0] = true;
                        } else {
                            let ov = (axis[k - 1] + lens[a]).saturating_sub(o[a]);
                            margins[a][0] = plan.valid_margin.map_or(ov.div_ceil(2), |m| m[a]);
                        }
                        if k + 1 == axis.len() {
                            boundary[a][1] = true;
                        } else {
                            let ov = (o[a] + lens[a]).saturating_sub(axis[k + 1]);
                            margins[a][1] = plan.valid_margin.map_or(ov / 2, |m| m[a]);
                        }
                        margins[a][0] *= axis_scale[a];
                        margins[a][1] *= axis_scale[a];
                    }
                    valid_mask(tile, margins, boundary).map(Arc::new)
                })
                .collect()
        }
    }
}
