//! Normal-map value types, the RGB codec, unit normalization and angular error.
//!
//! Normals live in camera space as `[x, y, z]` with `+y` pointing up in the
//! image. On disk a component `v` is stored as the byte `round((v + 1) * 127.5)`.

use crate::error::{Error, Result};

/// A 3-vector of direction components.
pub type Vec3 = [f32; 3];

/// Default stabilizer for [`unit_normalize`].
pub const DEFAULT_EPSILON: f32 = 1e-8;

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;

/// The canonical background vector `(-1, -1, -1) / sqrt(3)`: the decoding of RGB `(0, 0, 0)`.
pub const BACKGROUND: Vec3 = [-INV_SQRT3 as f32; 3];

/// Returns `v / (|v| + epsilon)`. The zero vector maps to itself.
pub fn unit_normalize(v: Vec3, epsilon: f32) -> Vec3 {
    let [x, y, z] = v.map(f64::from);
    let denom = (x * x + y * y + z * z).sqrt() + f64::from(epsilon);
    [(x / denom) as f32, (y / denom) as f32, (z / denom) as f32]
}

/// Decodes one RGB sample into a unit normal.
pub fn rgb_to_normal(rgb: [u8; 3]) -> Vec3 {
    let raw = rgb.map(|c| (f64::from(c) / 127.5 - 1.0) as f32);
    unit_normalize(raw, DEFAULT_EPSILON)
}

/// Encodes a (near-)unit normal into RGB. The zero vector encodes to `(128, 128, 128)`.
pub fn normal_to_rgb(v: Vec3) -> [u8; 3] {
    v.map(|c| ((f64::from(c) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
}

/// Angle between two unit vectors in degrees.
///
/// Evaluated as `atan2(|a x b|, a . b)`, which equals `acos(a . b)` for unit
/// inputs but stays exact at 0 and 180 degrees.
pub fn angular_error(a: Vec3, b: Vec3) -> f64 {
    let [ax, ay, az] = a.map(f64::from);
    let [bx, by, bz] = b.map(f64::from);
    let cross = [ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = ax * bx + ay * by + az * bz;
    sin.atan2(cos).to_degrees()
}

pub(crate) fn norm(v: Vec3) -> f64 {
    v.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>().sqrt()
}

/// A grid of unit normals with an optional foreground mask.
///
/// Foreground vectors are unit length; background vectors are exactly
/// [`BACKGROUND`]. Without a foreground mask every pixel counts as foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    vectors: Vec<Vec3>,
    foreground: Option<Vec<bool>>,
}

impl NormalMap {
    /// Builds a map, re-normalizing foreground vectors and overwriting the
    /// background with [`BACKGROUND`].
    pub fn new(
        width: usize,
        height: usize,
        mut vectors: Vec<Vec3>,
        foreground: Option<Vec<bool>>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("normal map size {width}x{height} is empty")));
        }
        let n = width * height;
        if vectors.len() != n {
            return Err(Error::shape(n, vectors.len()));
        }
        if let Some(fg) = &foreground {
            if fg.len() != n {
                return Err(Error::shape(n, fg.len()));
            }
        }
        for (i, v) in vectors.iter_mut().enumerate() {
            let is_fg = foreground.as_ref().is_none_or(|fg| fg[i]);
            if is_fg {
                if !v.iter().all(|c| c.is_finite()) || norm(*v) < 1e-6 {
                    return Err(Error::invalid(format!(
                        "foreground pixel ({}, {}) has no direction: {v:?}",
                        i % width,
                        i / width
                    )));
                }
                *v = unit_normalize(*v, DEFAULT_EPSILON);
            } else {
                *v = BACKGROUND;
            }
        }
        Ok(Self {
            width,
            height,
            vectors,
            foreground,
        })
    }

    /// Assembles a map whose vectors already satisfy the invariants.
    pub(crate) fn from_parts(
        width: usize,
        height: usize,
        vectors: Vec<Vec3>,
        foreground: Option<Vec<bool>>,
    ) -> Self {
        debug_assert_eq!(vectors.len(), width * height);
        Self {
            width,
            height,
            vectors,
            foreground,
        }
    }

    /// A map whose every pixel is background.
    pub fn background(width: usize, height: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![BACKGROUND; width * height],
            Some(vec![false; width * height]),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn foreground(&self) -> Option<&[bool]> {
        self.foreground.as_deref()
    }

    pub fn get(&self, x: usize, y: usize) -> Vec3 {
        self.vectors[y * self.width + x]
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.foreground
            .as_ref()
            .is_none_or(|fg| fg[y * self.width + x])
    }

    /// Foreground mask with `true` everywhere when none is stored.
    pub fn foreground_or_all(&self) -> Vec<bool> {
        self.foreground
            .clone()
            .unwrap_or_else(|| vec![true; self.width * self.height])
    }

    /// Encodes the map, writing background pixels as literal `(0, 0, 0)`.
    pub fn to_rgb(&self) -> Rgb8Image {
        let mut data = Vec::with_capacity(self.vectors.len() * 3);
        for (i, v) in self.vectors.iter().enumerate() {
            let is_fg = self.foreground.as_ref().is_none_or(|fg| fg[i]);
            let rgb = if is_fg { normal_to_rgb(*v) } else { [0, 0, 0] };
            data.extend_from_slice(&rgb);
        }
        Rgb8Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Flattens into an HxWx3 tensor.
    pub fn to_tensor(&self) -> ImageTensor {
        ImageTensor {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.vectors.iter().flatten().copied().collect(),
        }
    }
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes to a normal map. Without an explicit foreground, any pixel that
    /// is not exactly `(0, 0, 0)` is foreground.
    pub fn to_normal_map(&self, foreground: Option<Vec<bool>>) -> Result<NormalMap> {
        let pixels: Vec<[u8; 3]> = self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let fg = foreground.unwrap_or_else(|| pixels.iter().map(|p| *p != [0, 0, 0]).collect());
        let vectors = pixels.iter().map(|&p| rgb_to_normal(p)).collect();
        NormalMap::new(self.width, self.height, vectors, Some(fg))
    }
}

/// Binary occlusion mask: 1 = known pixel, 0 = occluded pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(width * height, values.len()));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Everything known.
    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub(crate) fn occlude(&mut self, x: usize, y: usize) {
        self.values[y * self.width + x] = 0;
    }

    pub fn occluded_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    pub fn occluded_fraction(&self) -> f64 {
        self.occluded_count() as f64 / self.values.len() as f64
    }
}

/// Interleaved HxWxC float tensor (channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}
