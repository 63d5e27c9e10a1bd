//! Image and frame-directory I/O plus bicubic resampling.
//!
//! Pixels are loaded as reals in `[0, 1]` (`byte / 255`). A video is a
//! directory of PNG frames ordered by filename; zero-padded numeric names are
//! the convention (`frame_00000.png`, ...).

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use rayon::prelude::*;

use crate::tensor::{Extent3, LatentVolume, TensorError, Volume};

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("frame {path} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    FrameSize {
        path: PathBuf,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("no PNG frames in {0}")]
    EmptyDirectory(PathBuf),
    #[error("cannot save {channels}-channel volume as an image (need 1 or 3)")]
    Channels { channels: usize },
    #[error("an image has one frame, volume has {0}")]
    NotAnImage(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MediaDescriptor {
    pub kind: MediaKind,
    /// The image file, or the frames of a video in order.
    pub paths: Vec<PathBuf>,
    pub extent: Extent3,
    pub channels: usize,
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage, MediaError> {
    let bytes = std::fs::read(path).map_err(|source| MediaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| MediaError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn frames_to_volume(frames: &[image::RgbImage]) -> Result<LatentVolume, MediaError> {
    let (w, h) = frames[0].dimensions();
    let extent = Extent3::new(frames.len(), h as usize, w as usize)?;
    let data = frames
        .iter()
        .flat_map(|f| f.as_raw().iter().map(|&b| b as f32 / 255.0))
        .collect();
    Ok(Volume::from_vec(extent, 3, data)?)
}

/// Loads a PNG or PPM image as a one-frame, three-channel volume.
pub fn load_image(path: &Path) -> Result<(LatentVolume, MediaDescriptor), MediaError> {
    let img = decode_rgb(path)?;
    let vol = frames_to_volume(std::slice::from_ref(&img))?;
    let desc = MediaDescriptor {
        kind: MediaKind::Image,
        paths: vec![path.to_path_buf()],
        extent: vol.extent(),
        channels: 3,
    };
    Ok((vol, desc))
}

/// PNG files directly inside `dir`, sorted by filename.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, MediaError> {
    let io = |source| MediaError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            frames.push(p);
        }
    }
    frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(frames)
}

pub fn load_frame_dir(dir: &Path) -> Result<(LatentVolume, MediaDescriptor), MediaError> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(MediaError::EmptyDirectory(dir.to_path_buf()));
    }
    let frames: Vec<_> = paths
        .par_iter()
        .map(|p| decode_rgb(p))
        .collect::<Result<_, _>>()?;
    let (want_w, want_h) = frames[0].dimensions();
    for (p, f) in paths.iter().zip(&frames) {
        let (got_w, got_h) = f.dimensions();
        if (got_w, got_h) != (want_w, want_h) {
            return Err(MediaError::FrameSize {
                path: p.clone(),
                got_w,
                got_h,
                want_w,
                want_h,
            });
        }
    }
    let vol = frames_to_volume(&frames)?;
    let desc = MediaDescriptor {
        kind: MediaKind::Video,
        paths,
        extent: vol.extent(),
        channels: 3,
    };
    Ok((vol, desc))
}

/// Directories load as videos, files as images.
pub fn load_media(path: &Path) -> Result<(LatentVolume, MediaDescriptor), MediaError> {
    if path.is_dir() {
        load_frame_dir(path)
    } else {
        load_image(path)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes frame `t` as PNG. Values are clamped to `[0, 1]` and rounded to
/// 8 bits; one channel gives grayscale, three give RGB.
pub fn encode_png(vol: &LatentVolume, t: usize) -> Result<Vec<u8>, MediaError> {
    let e = vol.extent();
    let frame_len = e.h * e.w * vol.channels();
    let bytes: Vec<u8> = vol.data()[t * frame_len..(t + 1) * frame_len]
        .iter()
        .map(|&v| quantize(v))
        .collect();
    let (w, h) = (e.w as u32, e.h as u32);
    let img = match vol.channels() {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized")),
        c => return Err(MediaError::Channels { channels: c }),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| MediaError::Decode {
            path: PathBuf::from("<png encoder>"),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

/// Writes an image file (`kind = Image`) or a frame directory (`kind = Video`).
/// Returns the files written.
pub fn save_media(
    vol: &LatentVolume,
    kind: MediaKind,
    path: &Path,
) -> Result<Vec<PathBuf>, MediaError> {
    let write = |p: &Path, bytes: &[u8]| {
        std::fs::write(p, bytes).map_err(|source| MediaError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    match kind {
        MediaKind::Image => {
            if vol.extent().t != 1 {
                return Err(MediaError::NotAnImage(vol.extent().t));
            }
            write(path, &encode_png(vol, 0)?)?;
            Ok(vec![path.to_path_buf()])
        }
        MediaKind::Video => {
            std::fs::create_dir_all(path).map_err(|source| MediaError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let encoded: Vec<Vec<u8>> = (0..vol.extent().t)
                .into_par_iter()
                .map(|t| encode_png(vol, t))
                .collect::<Result<_, _>>()?;
            let mut written = Vec::with_capacity(encoded.len());
            for (t, bytes) in encoded.iter().enumerate() {
                let p = path.join(frame_file_name(t));
                write(&p, bytes)?;
                written.push(p);
            }
            Ok(written)
        }
    }
}

pub const CATMULL_ROM_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for each of the `n * r` outputs along one axis.
/// Output `j` samples source position `(j + 0.5) / r - 0.5`; indices are clamped.
fn axis_taps(n: usize, r: usize) -> Vec<[(usize, f64); 4]> {
    (0..n * r)
        .map(|j| {
            let x = (j as f64 + 0.5) / r as f64 - 0.5;
            let base = x.floor();
            let frac = x - base;
            std::array::from_fn(|k| {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, (n - 1) as f64) as usize;
                (idx, cubic_kernel(offset - frac, CATMULL_ROM_A))
            })
        })
        .collect()
}

fn resample_axis(src: &Volume<f64>, r: usize, along_h: bool) -> Volume<f64> {
    let e = src.extent();
    let c = src.channels();
    let n = if along_h { e.h } else { e.w };
    let taps = axis_taps(n, r);
    let out_extent = if along_h {
        Extent3 { h: e.h * r, ..e }
    } else {
        Extent3 { w: e.w * r, ..e }
    };
    Volume::from_fn(out_extent, c, |p, ch| {
        let j = if along_h { p.h } else { p.w };
        taps[j]
            .iter()
            .map(|&(i, wt)| {
                let q = if along_h {
                    crate::tensor::Coord3 { h: i, ..p }
                } else {
                    crate::tensor::Coord3 { w: i, ..p }
                };
                wt * src.get(q, ch)
            })
            .sum()
    })
}

/// Separable Catmull-Rom upsampling of the spatial axes by `r`, edge-clamped.
/// The temporal axis is untouched; `r = 1` is the identity.
pub fn bicubic_upsample(vol: &LatentVolume, r: usize) -> LatentVolume {
    if r <= 1 {
        return vol.clone();
    }
    let wide: Volume<f64> = Volume::from_fn(vol.extent(), vol.channels(), |p, c| {
        vol.get(p, c) as f64
    });
    let rows = resample_axis(&wide, r, false);
    resample_axis(&rows, r, true).to_f32()
}
