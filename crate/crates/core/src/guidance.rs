//! Classifier-free guidance and the prompt-misguidance diagnostic.
//!
//! The misguidance of a condition `c` on tile `i` is the deviation of its
//! guidance direction `e_cond(c) - e_uncond` from a reference direction. The
//! ideal direction is not observable, so the tile's own local prompt stands in
//! as the reference.

use crate::tensor::{LatentVolume, TensorError, Volume};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(format!("guidance scale must be finite and >= 0, got {}", self.scale));
        }
        Ok(())
    }
}

fn check(a: &LatentVolume, b: &LatentVolume) -> Result<(), TensorError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(TensorError::Shape(format!(
            "{}x{} vs {}x{}",
            a.extent(),
            a.channels(),
            b.extent(),
            b.channels()
        )))
    }
}

/// `e_uncond + s * (e_cond - e_uncond)`, evaluated in `f64`.
/// `s = 1` returns `e_cond` and `s = 0` returns `e_uncond` unchanged.
pub fn cfg_combine(
    e_uncond: &LatentVolume,
    e_cond: &LatentVolume,
    s: f64,
) -> Result<LatentVolume, TensorError> {
    check(e_uncond, e_cond)?;
    if s == 1.0 {
        return Ok(e_cond.clone());
    }
    if s == 0.0 {
        return Ok(e_uncond.clone());
    }
    let data = e_uncond
        .data()
        .iter()
        .zip(e_cond.data())
        .map(|(&u, &c)| {
            let u = u as f64;
            (u + s * (c as f64 - u)) as f32
        })
        .collect();
    Volume::from_vec(e_uncond.extent(), e_uncond.channels(), data)
}

/// `e_cond - e_uncond`.
pub fn guidance_direction(
    e_uncond: &LatentVolume,
    e_cond: &LatentVolume,
) -> Result<LatentVolume, TensorError> {
    check(e_uncond, e_cond)?;
    let data = e_uncond
        .data()
        .iter()
        .zip(e_cond.data())
        .map(|(&u, &c)| (c as f64 - u as f64) as f32)
        .collect();
    Volume::from_vec(e_uncond.extent(), e_uncond.channels(), data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Plain L2 over all cells and channels.
    #[default]
    L2,
    /// L2 divided by `sqrt(cells * channels)`, comparable across tile sizes.
    Rms,
}

pub fn field_norm(v: &LatentVolume, kind: NormKind) -> f64 {
    let ss: f64 = v.data().iter().map(|&x| (x as f64) * (x as f64)).sum();
    match kind {
        NormKind::L2 => ss.sqrt(),
        NormKind::Rms => (ss / v.data().len() as f64).sqrt(),
    }
}

/// `||delta_with_c - delta_reference||`.
pub fn misguidance_norm(
    delta_with_c: &LatentVolume,
    delta_reference: &LatentVolume,
    kind: NormKind,
) -> Result<f64, TensorError> {
    check(delta_with_c, delta_reference)?;
    let ss: f64 = delta_with_c
        .data()
        .iter()
        .zip(delta_reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(match kind {
        NormKind::L2 => ss.sqrt(),
        NormKind::Rms => (ss / delta_with_c.data().len() as f64).sqrt(),
    })
}

/// One row of the misguidance diagnostic.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MisguidanceReport {
    pub tile_index: usize,
    pub timestep: f64,
    /// `||delta_i||`: deviation of the compared direction from the reference.
    pub delta_norm: f64,
    /// `||Delta e_i||` under the compared condition.
    pub guidance_norm: f64,
    /// Which prompt served as the reference direction.
    pub reference_condition: String,
}

pub const MISGUIDANCE_CSV_HEADER: &str =
    "tile_index,timestep,delta_norm,guidance_norm,reference_condition";

impl MisguidanceReport {
    pub fn csv_row(&self) -> String {
        let cond = if self.reference_condition.contains([',', '"', '\n']) {
            format!("\"{}\"", self.reference_condition.replace('"', "\"\""))
        } else {
            self.reference_condition.clone()
        };
        format!(
            "{},{},{:.9e},{:.9e},{}",
            self.tile_index, self.timestep, self.delta_norm, self.guidance_norm, cond
        )
    }
}

pub fn reports_to_csv(reports: &[MisguidanceReport]) -> String {
    let mut out = String::from(MISGUIDANCE_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
