//! Occlusion masks and masked generator inputs.
//!
//! Mask polarity is 1 = known, 0 = occluded, so multiplying an image by its
//! mask zeroes the occluded pixels.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::normal::{ImageTensor, NormalMap, OcclusionMask};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskStyle {
    /// Random straight strokes of a per-mask random thickness.
    IrregularLines,
    /// One large filled circle placed fully inside the image.
    SingleBigBlob,
    /// Many small filled circles.
    ScatteredSmallBlobs,
}

impl MaskStyle {
    pub const ALL: [MaskStyle; 3] = [
        MaskStyle::IrregularLines,
        MaskStyle::SingleBigBlob,
        MaskStyle::ScatteredSmallBlobs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStyle::IrregularLines => "lines",
            MaskStyle::SingleBigBlob => "blob",
            MaskStyle::ScatteredSmallBlobs => "scatter",
        }
    }
}

impl fmt::Display for MaskStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lines" => Ok(MaskStyle::IrregularLines),
            "blob" => Ok(MaskStyle::SingleBigBlob),
            "scatter" => Ok(MaskStyle::ScatteredSmallBlobs),
            other => Err(Error::invalid(format!(
                "unknown mask style `{other}` (expected lines, blob or scatter)"
            ))),
        }
    }
}

/// Image side at which the default pixel sizes apply; other sizes scale linearly.
pub const REFERENCE_SIZE: usize = 64;

/// Redraws allowed before a spec is declared unable to meet its fraction bounds.
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub style: MaskStyle,
    /// Inclusive range for the number of strokes or circles (ignored by `SingleBigBlob`).
    pub count: (u32, u32),
    /// Upper bound of the per-mask stroke thickness; the lower bound is 2 px (or this value if smaller).
    pub max_thickness: f64,
    /// Inclusive circle radius range in pixels.
    pub radius_range: (f64, f64),
    /// Accepted occluded-pixel fraction; draws outside are rejected and redrawn.
    pub fraction_bounds: (f64, f64),
    /// When set, pixel sizes above are given for this image side and scale with `min(width, height)`.
    pub reference_size: Option<usize>,
    pub rng_seed: u64,
}

impl MaskSpec {
    /// Default parameters for a style.
    pub fn new(style: MaskStyle, rng_seed: u64) -> Self {
        let r = REFERENCE_SIZE as f64;
        let (count, radius_range) = match style {
            MaskStyle::IrregularLines => ((3, 8), (2.0, 6.0)),
            MaskStyle::ScatteredSmallBlobs => ((5, 15), (2.0, 6.0)),
            MaskStyle::SingleBigBlob => ((1, 1), (r / 8.0, r / 4.0)),
        };
        Self {
            style,
            count,
            max_thickness: 12.0,
            radius_range,
            fraction_bounds: (0.02, 0.40),
            reference_size: Some(REFERENCE_SIZE),
            rng_seed,
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count;
        if lo < 1 || hi < lo {
            return Err(Error::invalid(format!("mask count range {lo}..={hi} is invalid")));
        }
        if !(self.max_thickness >= 1.0) {
            return Err(Error::invalid(format!("max thickness {} must be >= 1", self.max_thickness)));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(Error::invalid(format!("radius range [{rlo}, {rhi}] is invalid")));
        }
        let (flo, fhi) = self.fraction_bounds;
        if !(0.0..=1.0).contains(&flo) || !(0.0..=1.0).contains(&fhi) || fhi < flo {
            return Err(Error::invalid(format!("fraction bounds [{flo}, {fhi}] are invalid")));
        }
        Ok(())
    }
}

fn fill_disc(mask: &mut OcclusionMask, cx: f64, cy: f64, r: f64) {
    let (w, h) = (mask.width(), mask.height());
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                mask.occlude(x, y);
            }
        }
    }
}

/// Occludes every pixel whose centre lies within `thickness / 2` of the segment.
fn fill_stroke(mask: &mut OcclusionMask, a: (f64, f64), b: (f64, f64), thickness: f64) {
    let half = thickness / 2.0;
    let (w, h) = (mask.width(), mask.height());
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let x0 = (a.0.min(b.0) - half).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + half).ceil().max(0.0) as usize).min(w - 1);
    let y0 = (a.1.min(b.1) - half).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + half).ceil().max(0.0) as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 {
                ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= half * half {
                mask.occlude(x, y);
            }
        }
    }
}

fn draw_once(spec: &MaskSpec, width: usize, height: usize, rng: &mut impl Rng) -> OcclusionMask {
    let side = width.min(height) as f64;
    let k = spec.reference_size.map_or(1.0, |r| side / r as f64);
    let (rlo, rhi) = (spec.radius_range.0 * k, spec.radius_range.1 * k);
    let radius = |rng: &mut dyn rand::RngCore| {
        if rhi > rlo {
            rng.random_range(rlo..=rhi)
        } else {
            rlo
        }
    };
    let count = rng.random_range(spec.count.0..=spec.count.1);
    let mut mask = OcclusionMask::ones(width, height);
    let (w, h) = (width as f64, height as f64);
    match spec.style {
        MaskStyle::IrregularLines => {
            let max_t = spec.max_thickness * k;
            let min_t = (2.0 * k).min(max_t);
            let thickness = if max_t > min_t {
                rng.random_range(min_t..=max_t)
            } else {
                max_t
            };
            for _ in 0..count {
                let a = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                let angle = rng.random_range(0.0..2.0 * PI);
                let len = rng.random_range(side / 8.0..=side / 3.0);
                let b = (a.0 + len * angle.cos(), a.1 + len * angle.sin());
                fill_stroke(&mut mask, a, b, thickness);
            }
        }
        MaskStyle::ScatteredSmallBlobs => {
            for _ in 0..count {
                let r = radius(rng);
                let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                fill_disc(&mut mask, cx, cy, r);
            }
        }
        MaskStyle::SingleBigBlob => {
            let r = radius(rng);
            let span = |extent: f64, rng: &mut dyn rand::RngCore| {
                let (lo, hi) = (r, extent - 1.0 - r);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    (extent - 1.0) / 2.0
                }
            };
            let cx = span(w, rng);
            let cy = span(h, rng);
            fill_disc(&mut mask, cx, cy, r);
        }
    }
    mask
}

/// Draws a mask for `spec`. Deterministic in `spec.rng_seed`.
pub fn generate_mask(spec: &MaskSpec, width: usize, height: usize) -> Result<OcclusionMask> {
    if width < 8 || height < 8 {
        return Err(Error::invalid(format!("mask size {width}x{height} is below the 8x8 minimum")));
    }
    spec.validate()?;
    let mut rng = substream(spec.rng_seed, &[0x3A5C]);
    let (lo, hi) = spec.fraction_bounds;
    let mut last = 0.0;
    for _ in 0..MAX_ATTEMPTS {
        let mask = draw_once(spec, width, height, &mut rng);
        last = mask.occluded_fraction();
        if (lo..=hi).contains(&last) {
            return Ok(mask);
        }
    }
    Err(Error::invalid(format!(
        "mask spec {spec:?} could not meet fraction bounds [{lo}, {hi}] at {width}x{height} (last draw {last:.3})"
    )))
}

/// Multiplies every component by the mask: occluded pixels become the zero vector.
pub fn apply_mask(m: &NormalMap, mask: &OcclusionMask) -> Result<ImageTensor> {
    if (m.width(), m.height()) != (mask.width(), mask.height()) {
        return Err(Error::shape(
            format!("{}x{}", m.width(), m.height()),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let data = m
        .vectors()
        .iter()
        .zip(mask.values())
        .flat_map(|(v, &k)| {
            let k = f32::from(k);
            [v[0] * k, v[1] * k, v[2] * k]
        })
        .collect();
    Ok(ImageTensor {
        width: m.width(),
        height: m.height(),
        channels: 3,
        data,
    })
}

/// Appends the mask as one more channel with values in {0, 1}.
pub fn concat_mask_channel(masked: &ImageTensor, mask: &OcclusionMask) -> Result<ImageTensor> {
    if (masked.width, masked.height) != (mask.width(), mask.height()) {
        return Err(Error::shape(
            format!("{}x{}", masked.width, masked.height),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let c = masked.channels;
    let mut data = Vec::with_capacity(masked.data.len() + mask.values().len());
    for (px, &k) in masked.data.chunks_exact(c).zip(mask.values()) {
        data.extend_from_slice(px);
        data.push(f32::from(k));
    }
    Ok(ImageTensor {
        width: masked.width,
        height: masked.height,
        channels: c + 1,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render_sphere_normals;

    #[test]
    fn style_names_round_trip() {
        for s in MaskStyle::ALL {
            assert_eq!(s.as_str().parse::<MaskStyle>().unwrap(), s);
        }
        assert!("stripes".parse::<MaskStyle>().is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        for style in MaskStyle::ALL {
            let spec = MaskSpec::new(style, 17);
            assert_eq!(generate_mask(&spec, 64, 64).unwrap(), generate_mask(&spec, 64, 64).unwrap());
            assert_ne!(
                generate_mask(&spec, 64, 64).unwrap(),
                generate_mask(&spec.with_seed(18), 64, 64).unwrap()
            );
        }
    }

    #[test]
    fn big_blob_area_matches_disc() {
        let r = 12.0;
        // Brute-force count of integer pixel centres inside a disc of radius r.
        let lattice = (-12i32..=12)
            .flat_map(|y| (-12i32..=12).map(move |x| (x, y)))
            .filter(|&(x, y)| f64::from(x * x + y * y) <= r * r)
            .count() as f64;
        for seed in 0..10 {
            let spec = MaskSpec {
                radius_range: (r, r),
                fraction_bounds: (0.0, 1.0),
                reference_size: None,
                ..MaskSpec::new(MaskStyle::SingleBigBlob, seed)
            };
            let m = generate_mask(&spec, 64, 64).unwrap();
            let occluded = m.occluded_count() as f64;
            assert!((occluded - PI * r * r).abs() / (PI * r * r) < 0.05, "{occluded}");
            assert!((occluded - lattice).abs() / lattice < 0.05);
        }
    }

    #[test]
    fn rejects_tiny_images_and_bad_specs() {
        let spec = MaskSpec::new(MaskStyle::IrregularLines, 1);
        assert!(generate_mask(&spec, 7, 64).is_err());
        let bad = MaskSpec { count: (0, 2), ..spec.clone() };
        assert!(generate_mask(&bad, 64, 64).is_err());
        let bad = MaskSpec {
            radius_range: (3.0, 1.0),
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn apply_and_concat() {
        let m = render_sphere_normals(8, 8, (3.5, 3.5), 3.0).unwrap();
        let ones = OcclusionMask::ones(8, 8);
        let t = apply_mask(&m, &ones).unwrap();
        assert_eq!(t, m.to_tensor());
        let zeros = OcclusionMask::new(8, 8, vec![0; 64]).unwrap();
        assert!(apply_mask(&m, &zeros).unwrap().data.iter().all(|&v| v == 0.0));

        let mut one_hole = OcclusionMask::ones(8, 8);
        one_hole.occlude(3, 4);
        let t = apply_mask(&m, &one_hole).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if (x, y) == (3, 4) {
                    assert_eq!(t.pixel(x, y), &[0.0, 0.0, 0.0]);
                } else {
                    assert_eq!(t.pixel(x, y), &m.get(x, y));
                }
            }
        }
        let c = concat_mask_channel(&t, &one_hole).unwrap();
        assert_eq!(c.channels, 4);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(&c.pixel(x, y)[..3], t.pixel(x, y));
                assert_eq!(c.pixel(x, y)[3], f32::from(one_hole.values()[y * 8 + x]));
            }
        }
        assert!(apply_mask(&m, &OcclusionMask::ones(4, 4)).is_err());
        assert!(concat_mask_channel(&t, &OcclusionMask::ones(4, 4)).is_err());
    }
}
