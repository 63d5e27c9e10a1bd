//! Dense `(t, h, w, c)` volumes with crop, weighted paste-accumulate and
//! normalization, plus the `LVOL` raw tensor file format.
//!
//! Layout is row-major with the channel axis innermost, so a crop copies
//! contiguous `w * c` runs per row.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

/// Magic prefix of the raw tensor format.
pub const LVOL_MAGIC: &[u8; 4] = b"LVOL";
const LVOL_HEADER_LEN: usize = 4 + 4 * 4;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("region out of bounds on axis {axis}: {start}+{len} exceeds {limit}")]
    OutOfBounds {
        axis: Axis,
        start: usize,
        len: usize,
        limit: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cell ({t}, {h}, {w}) has zero total weight")]
    Uncovered { t: usize, h: usize, w: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid extent: {0}")]
    InvalidExtent(String),
    #[error("malformed LVOL data: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    T,
    H,
    W,
    C,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::T => "t",
            Axis::H => "h",
            Axis::W => "w",
            Axis::C => "c",
        };
        f.write_str(name)
    }
}

/// Spatio-temporal size `t x h x w`; the channel axis is carried separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Extent3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent3 {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidExtent(format!(
                "all axes must be >= 1, got ({t}, {h}, {w})"
            )));
        }
        Ok(Self { t, h, w })
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn contains(&self, c: Coord3) -> bool {
        c.t < self.t && c.h < self.h && c.w < self.w
    }
}

impl fmt::Display for Extent3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Coord3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Coord3 {
    pub const ORIGIN: Coord3 = Coord3 { t: 0, h: 0, w: 0 };

    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Axis-aligned box `origin .. origin + size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub origin: Coord3,
    pub size: Extent3,
}

impl Region {
    pub fn new(origin: Coord3, size: Extent3) -> Self {
        Self { origin, size }
    }

    pub fn full(extent: Extent3) -> Self {
        Self::new(Coord3::ORIGIN, extent)
    }

    pub fn contains(&self, c: Coord3) -> bool {
        (0..3).all(|a| {
            let (o, s, p) = (self.origin.as_array()[a], self.size.as_array()[a], c.as_array()[a]);
            p >= o && p < o + s
        })
    }

    /// Checks that the region lies inside `extent`, naming the first offending axis.
    pub fn check_within(&self, extent: Extent3) -> Result<()> {
        let axes = [Axis::T, Axis::H, Axis::W];
        let (o, s, e) = (self.origin.as_array(), self.size.as_array(), extent.as_array());
        for a in 0..3 {
            if o[a] + s[a] > e[a] {
                return Err(TensorError::OutOfBounds {
                    axis: axes[a],
                    start: o[a],
                    len: s[a],
                    limit: e[a],
                });
            }
        }
        Ok(())
    }
}

/// Scalar types a [`Volume`] may hold. Accumulators use `f64`, latents `f32`.
pub trait Element: Copy + Default + PartialEq + Send + Sync + fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// How normalization treats cells whose accumulated weight is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncoveredPolicy {
    #[default]
    Error,
    /// Diagnostics only: write 0 where the weight is zero.
    ZeroFill,
}

/// Dense `T x H x W x C` tensor.
#[derive(Clone, PartialEq)]
pub struct Volume<T> {
    extent: Extent3,
    channels: usize,
    data: Vec<T>,
}

/// The latent, the LR conditioning signal and every prediction.
pub type LatentVolume = Volume<f32>;

impl<T: Element> fmt::Debug for Volume<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Volume")
            .field("extent", &self.extent)
            .field("channels", &self.channels)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Volume<T> {
    pub fn filled(extent: Extent3, channels: usize, value: T) -> Self {
        assert!(channels >= 1, "volume needs at least one channel");
        Self {
            extent,
            channels,
            data: vec![value; extent.cells() * channels],
        }
    }

    pub fn zeros(extent: Extent3, channels: usize) -> Self {
        Self::filled(extent, channels, T::default())
    }

    /// Wraps `data` laid out in `(t, h, w, c)` order. Rejects wrong lengths and
    /// non-finite values.
    pub fn from_vec(extent: Extent3, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(TensorError::InvalidExtent("channels must be >= 1".into()));
        }
        let expected = extent.cells() * channels;
        if data.len() != expected {
            return Err(TensorError::Shape(format!(
                "data length {} does not match {extent}x{channels} = {expected}",
                data.len()
            )));
        }
        let v = Self {
            extent,
            channels,
            data,
        };
        v.ensure_finite()?;
        Ok(v)
    }

    pub fn from_fn(
        extent: Extent3,
        channels: usize,
        mut f: impl FnMut(Coord3, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(extent.cells() * channels);
        for t in 0..extent.t {
            for h in 0..extent.h {
                for w in 0..extent.w {
                    for c in 0..channels {
                        data.push(f(Coord3::new(t, h, w), c));
                    }
                }
            }
        }
        Self {
            extent,
            channels,
            data,
        }
    }

    pub fn extent(&self) -> Extent3 {
        self.extent
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, p: Coord3, c: usize) -> usize {
        ((p.t * self.extent.h + p.h) * self.extent.w + p.w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, p: Coord3, c: usize) -> T {
        self.data[self.offset(p, c)]
    }

    #[inline]
    pub fn set(&mut self, p: Coord3, c: usize, v: T) {
        let i = self.offset(p, c);
        self.data[i] = v;
    }

    pub fn same_shape<U: Element>(&self, other: &Volume<U>) -> bool {
        self.extent == other.extent && self.channels == other.channels
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.to_f64().is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Copies out the sub-volume covered by `region`.
    pub fn crop(&self, region: impl Into<Region>) -> Result<Self> {
        let region = region.into();
        region.check_within(self.extent)?;
        let size = region.size;
        let row = size.w * self.channels;
        let mut data = Vec::with_capacity(size.cells() * self.channels);
        for t in 0..size.t {
            for h in 0..size.h {
                let start = self.offset(
                    Coord3::new(region.origin.t + t, region.origin.h + h, region.origin.w),
                    0,
                );
                data.extend_from_slice(&self.data[start..start + row]);
            }
        }
        Ok(Self {
            extent: size,
            channels: self.channels,
            data,
        })
    }

    /// `self[p] += weight[phi(p)] * tile[phi(p)]` for every `p` in `region`.
    ///
    /// `weight` is single-channel and broadcast over the tile's channels.
    pub fn paste_accumulate<S: Element, W: Element>(
        &mut self,
        tile: &Volume<S>,
        region: impl Into<Region>,
        weight: &Volume<W>,
    ) -> Result<()> {
        let region = region.into();
        region.check_within(self.extent)?;
        if tile.extent != region.size || tile.channels != self.channels {
            return Err(TensorError::Shape(format!(
                "tile {}x{} does not fit region {}x{}",
                tile.extent, tile.channels, region.size, self.channels
            )));
        }
        if weight.extent != tile.extent || weight.channels != 1 {
            return Err(TensorError::Shape(format!(
                "weight {}x{} must be single-channel {}",
                weight.extent, weight.channels, tile.extent
            )));
        }
        let c = self.channels;
        for t in 0..region.size.t {
            for h in 0..region.size.h {
                for w in 0..region.size.w {
                    let local = Coord3::new(t, h, w);
                    let wt = weight.get(local, 0).to_f64();
                    let src = tile.offset(local, 0);
                    let dst = self.offset(
                        Coord3::new(region.origin.t + t, region.origin.h + h, region.origin.w + w),
                        0,
                    );
                    for k in 0..c {
                        let acc = self.data[dst + k].to_f64() + wt * tile.data[src + k].to_f64();
                        self.data[dst + k] = T::from_f64(acc);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_abs_diff<U: Element>(&self, other: &Volume<U>) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(TensorError::Shape(format!(
                "{}x{} vs {}x{}",
                self.extent, self.channels, other.extent, other.channels
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64();
            (lo.min(v), hi.max(v))
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            extent: self.extent,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32(&self) -> LatentVolume {
        Volume {
            extent: self.extent,
            channels: self.channels,
            data: self.data.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }
}

/// `num / den` cellwise, with `den` optionally single-channel (broadcast).
/// Computed in `f64` and truncated to `f32`.
pub fn divide_elementwise<N: Element, D: Element>(
    num: &Volume<N>,
    den: &Volume<D>,
    policy: UncoveredPolicy,
) -> Result<LatentVolume> {
    if num.extent != den.extent || (den.channels != 1 && den.channels != num.channels) {
        return Err(TensorError::Shape(format!(
            "cannot divide {}x{} by {}x{}",
            num.extent, num.channels, den.extent, den.channels
        )));
    }
    let c = num.channels;
    let broadcast = den.channels == 1;
    let mut out = Vec::with_capacity(num.data.len());
    for (i, v) in num.data.iter().enumerate() {
        let cell = i / c;
        let d = if broadcast {
            den.data[cell]
        } else {
            den.data[i]
        }
        .to_f64();
        if d > 0.0 {
            out.push((v.to_f64() / d) as f32);
        } else {
            match policy {
                UncoveredPolicy::ZeroFill => out.push(0.0),
                UncoveredPolicy::Error => {
                    let e = num.extent;
                    return Err(TensorError::Uncovered {
                        t: cell / (e.h * e.w),
                        h: (cell / e.w) % e.h,
                        w: cell % e.w,
                    });
                }
            }
        }
    }
    Volume::from_vec(num.extent, c, out)
}

impl LatentVolume {
    /// Serializes to `LVOL`: magic, four little-endian `u32` extents
    /// `(T, H, W, C)`, then `f32` data in layout order.
    pub fn to_lvol_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LVOL_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(LVOL_MAGIC);
        for dim in [self.extent.t, self.extent.h, self.extent.w, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one `LVOL` record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn read_lvol_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < LVOL_HEADER_LEN {
            return Err(TensorError::Format(format!(
                "need {LVOL_HEADER_LEN} header bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != LVOL_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let dim = |i: usize| {
            let s = 4 + 4 * i;
            u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as usize
        };
        let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
        let extent = Extent3::new(t, h, w).map_err(|e| TensorError::Format(e.to_string()))?;
        if c == 0 {
            return Err(TensorError::Format("zero channels".into()));
        }
        let n = extent
            .cells()
            .checked_mul(c)
            .ok_or_else(|| TensorError::Format("extent overflow".into()))?;
        let end = LVOL_HEADER_LEN + n * 4;
        if bytes.len() < end {
            return Err(TensorError::Format(format!(
                "payload truncated: need {end} bytes, got {}",
                bytes.len()
            )));
        }
        let data = bytes[LVOL_HEADER_LEN..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((Self::from_vec(extent, c, data)?, end))
    }

    /// Parses exactly one `LVOL` record; trailing bytes are an error.
    pub fn from_lvol_bytes(bytes: &[u8]) -> Result<Self> {
        let (v, used) = Self::read_lvol_prefix(bytes)?;
        if used != bytes.len() {
            return Err(TensorError::Format(format!(
                "{} trailing bytes after record",
                bytes.len() - used
            )));
        }
        Ok(v)
    }

    pub fn read_lvol(path: &Path) -> Result<Self> {
        let io_err = |source| TensorError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err)?;
        Self::from_lvol_bytes(&buf)
    }

    pub fn write_lvol(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_lvol_bytes()))
            .map_err(|source| TensorError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    /// Hex SHA-256 of the `LVOL` encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_lvol_bytes()))
    }
}
