//! Geometric augmentation that keeps normal vectors consistent with the
//! image transform.
//!
//! Warps use inverse mapping: every output pixel samples the input with
//! bilinear interpolation of the raw components, followed by
//! re-normalization. The foreground mask is sampled nearest-neighbour,
//! eroded, and every non-foreground pixel is reset to the canonical
//! background vector.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::normal::{norm, unit_normalize, NormalMap, Vec3, BACKGROUND, DEFAULT_EPSILON};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotations are drawn from `[-rotation_limit, rotation_limit]` degrees.
    pub rotation_limit: f64,
    /// Zoom factors are drawn from `[1 - zoom_limit, 1 + zoom_limit]`.
    pub zoom_limit: f64,
    pub erosion_radius: usize,
    pub rng_seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_limit: 20.0,
            zoom_limit: 0.10,
            erosion_radius: 1,
            rng_seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_limit >= 0.0) {
            return Err(Error::invalid(format!("rotation limit {} must be >= 0", self.rotation_limit)));
        }
        if !(0.0..1.0).contains(&self.zoom_limit) {
            return Err(Error::invalid(format!("zoom limit {} must lie in [0, 1)", self.zoom_limit)));
        }
        Ok(())
    }
}

/// Mirrors the map left-right and negates the x component of every normal.
pub fn flip_normal_map(m: &NormalMap) -> NormalMap {
    let (w, h) = (m.width(), m.height());
    let mut vectors = vec![BACKGROUND; w * h];
    let mut fg = m.foreground().map(|_| vec![false; w * h]);
    for y in 0..h {
        for x in 0..w {
            let dst = y * w + (w - 1 - x);
            if m.is_foreground(x, y) {
                let [vx, vy, vz] = m.get(x, y);
                vectors[dst] = [-vx, vy, vz];
                if let Some(f) = fg.as_mut() {
                    f[dst] = true;
                }
            }
        }
    }
    NormalMap::from_parts(w, h, vectors, fg)
}

/// Morphological erosion with a `(2 * radius + 1)` square; outside the grid counts as `false`.
pub fn erode_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    assert_eq!(mask.len(), width * height);
    if radius == 0 {
        return mask.to_vec();
    }
    let window_all = |line: &[bool], i: usize| -> bool {
        i >= radius && i + radius < line.len() && line[i - radius..=i + radius].iter().all(|&b| b)
    };
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        let line = &mask[y * width..(y + 1) * width];
        for x in 0..width {
            rows[y * width + x] = window_all(line, x);
        }
    }
    let mut out = vec![false; mask.len()];
    let mut column = vec![false; height];
    for x in 0..width {
        for y in 0..height {
            column[y] = rows[y * width + x];
        }
        for y in 0..height {
            out[y * width + x] = window_all(&column, y);
        }
    }
    out
}

fn bilinear(m: &NormalMap, sx: f64, sy: f64) -> Vec3 {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |x: isize, y: isize| -> Vec3 {
        if x < 0 || y < 0 || x >= w || y >= h {
            BACKGROUND
        } else {
            m.get(x as usize, y as usize)
        }
    };
    let taps = [
        (tap(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (tap(x0 + 1, y0), fx * (1.0 - fy)),
        (tap(x0, y0 + 1), (1.0 - fx) * fy),
        (tap(x0 + 1, y0 + 1), fx * fy),
    ];
    let mut out = [0.0f32; 3];
    for (v, wgt) in taps {
        if wgt != 0.0 {
            for k in 0..3 {
                out[k] += wgt * v[k];
            }
        }
    }
    out
}

/// Generic inverse warp. `source` maps an output pixel to input coordinates;
/// `rotate` is `(cos, sin)` of the in-plane rotation applied to the vectors.
fn warp(
    m: &NormalMap,
    out_w: usize,
    out_h: usize,
    source: impl Fn(f64, f64) -> (f64, f64),
    rotate: Option<(f32, f32)>,
    erosion_radius: usize,
) -> NormalMap {
    let (w, h) = (m.width() as f64, m.height() as f64);
    let mut fg = vec![false; out_w * out_h];
    let mut vectors = vec![BACKGROUND; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = source(x as f64, y as f64);
            let (nx, ny) = (sx.round(), sy.round());
            if nx < 0.0 || ny < 0.0 || nx >= w || ny >= h {
                continue;
            }
            if !m.is_foreground(nx as usize, ny as usize) {
                continue;
            }
            let mut v = bilinear(m, sx, sy);
            if let Some((c, s)) = rotate {
                v = [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]];
            }
            if norm(v) < 1e-6 {
                continue;
            }
            let i = y * out_w + x;
            fg[i] = true;
            vectors[i] = unit_normalize(v, DEFAULT_EPSILON);
        }
    }
    let fg = erode_mask(&fg, out_w, out_h, erosion_radius);
    for (v, &f) in vectors.iter_mut().zip(&fg) {
        if !f {
            *v = BACKGROUND;
        }
    }
    NormalMap::from_parts(out_w, out_h, vectors, Some(fg))
}

/// Rotates the image content by `theta` degrees (counter-clockwise on
/// screen) and zooms by `scale` about the image centre, rotating the normals
/// by the same angle about the view axis.
pub fn rotate_zoom_normal_map(m: &NormalMap, theta: f64, scale: f64, erosion_radius: usize) -> Result<NormalMap> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("zoom scale {scale} must be positive")));
    }
    if !theta.is_finite() {
        return Err(Error::invalid("rotation angle must be finite"));
    }
    let (cx, cy) = ((m.width() as f64 - 1.0) / 2.0, (m.height() as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.to_radians().sin_cos();
    // Work in a y-up frame: p_up = (x - cx, cy - y); source = R(-theta) p_up / scale.
    let source = |x: f64, y: f64| {
        let (u, v) = (x - cx, cy - y);
        let su = (u * cos + v * sin) / scale;
        let sv = (-u * sin + v * cos) / scale;
        (cx + su, cy - sv)
    };
    Ok(warp(
        m,
        m.width(),
        m.height(),
        source,
        Some((cos as f32, sin as f32)),
        erosion_radius,
    ))
}

/// Bilinear resize with re-normalization; the foreground is resampled nearest-neighbour.
pub fn resize_normal_map(m: &NormalMap, width: usize, height: usize) -> Result<NormalMap> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (width, height) == (m.width(), m.height()) {
        return Ok(m.clone());
    }
    let (kx, ky) = (m.width() as f64 / width as f64, m.height() as f64 / height as f64);
    let source = |x: f64, y: f64| ((x + 0.5) * kx - 0.5, (y + 0.5) * ky - 0.5);
    Ok(warp(m, width, height, source, None, 0))
}

/// Draws one `(theta, scale)` pair.
pub fn draw_transform(rng: &mut impl Rng, params: &AugmentParams) -> (f64, f64) {
    let theta = if params.rotation_limit > 0.0 {
        rng.random_range(-params.rotation_limit..=params.rotation_limit)
    } else {
        0.0
    };
    let scale = if params.zoom_limit > 0.0 {
        rng.random_range(1.0 - params.zoom_limit..=1.0 + params.zoom_limit)
    } else {
        1.0
    };
    (theta, scale)
}

/// Expands `N` maps to `4N`: the originals, their flips, randomly rotated
/// and zoomed originals, and randomly rotated and zoomed flips (with
/// independent draws). The output is laid out in those four blocks.
pub fn expand_dataset(images: &[NormalMap], params: &AugmentParams) -> Result<Vec<NormalMap>> {
    if images.is_empty() {
        return Err(Error::invalid("cannot augment an empty dataset"));
    }
    params.validate()?;
    let groups: Vec<[NormalMap; 4]> = images
        .par_iter()
        .enumerate()
        .map(|(i, m)| -> Result<[NormalMap; 4]> {
            let mut rng = substream(params.rng_seed, &[i as u64]);
            let (t1, s1) = draw_transform(&mut rng, params);
            let (t2, s2) = draw_transform(&mut rng, params);
            let flipped = flip_normal_map(m);
            let rotated = rotate_zoom_normal_map(m, t1, s1, params.erosion_radius)?;
            let flipped_rotated = rotate_zoom_normal_map(&flipped, t2, s2, params.erosion_radius)?;
            Ok([m.clone(), flipped, rotated, flipped_rotated])
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len() * 4);
    for column in 0..4 {
        out.extend(groups.iter().map(|g| g[column].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal::angular_error;
    use crate::synth::render_sphere_normals;

    fn sphere(size: usize, radius: f64) -> NormalMap {
        let c = (size as f64 - 1.0) / 2.0;
        render_sphere_normals(size, size, (c, c), radius).unwrap()
    }

    #[test]
    fn flip_moves_and_mirrors_vectors() {
        let m = NormalMap::new(
            3,
            1,
            vec![[0.6, 0.0, 0.8], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            Some(vec![true, true, false]),
        )
        .unwrap();
        let f = flip_normal_map(&m);
        assert_eq!(f.get(2, 0), [-0.6, 0.0, 0.8]);
        assert_eq!(f.get(0, 0), BACKGROUND);
        assert!(!f.is_foreground(0, 0));
        assert_eq!(flip_normal_map(&f), m);
    }

    #[test]
    fn centered_sphere_is_flip_symmetric() {
        let m = sphere(64, 25.0);
        let f = flip_normal_map(&m);
        for (a, b) in m.vectors().iter().zip(f.vectors()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn erosion_examples() {
        let mut single = vec![false; 25];
        single[12] = true;
        assert!(erode_mask(&single, 5, 5, 1).iter().all(|&b| !b));
        let full = erode_mask(&[true; 20], 5, 4, 1);
        for y in 0..4 {
            for x in 0..5 {
                let interior = x > 0 && x < 4 && y > 0 && y < 3;
                assert_eq!(full[y * 5 + x], interior);
            }
        }
        assert_eq!(erode_mask(&single, 5, 5, 0), single);
    }

    #[test]
    fn identity_warp_preserves_interior() {
        let m = sphere(48, 18.0);
        let r = rotate_zoom_normal_map(&m, 0.0, 1.0, 1).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                if r.is_foreground(x, y) {
                    let (a, b) = (m.get(x, y), r.get(x, y));
                    for k in 0..3 {
                        assert!((a[k] - b[k]).abs() <= 1e-6);
                    }
                } else {
                    assert_eq!(r.get(x, y), BACKGROUND);
                }
            }
        }
    }

    #[test]
    fn rotation_keeps_centered_sphere() {
        let size = 96;
        let radius = 36.0;
        let c = (size as f64 - 1.0) / 2.0;
        for &(theta, scale) in &[(20.0, 1.0), (-13.0, 0.92), (7.5, 1.08)] {
            let out = rotate_zoom_normal_map(&sphere(size, radius), theta, scale, 1).unwrap();
            let oracle = sphere(size, radius * scale);
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    if d <= radius * scale - 2.0 && out.is_foreground(x, y) {
                        sum += angular_error(out.get(x, y), oracle.get(x, y));
                        count += 1;
                    }
                }
            }
            assert!(count > 1000);
            assert!(sum / (count as f64) < 2.0, "theta {theta}: {}", sum / count as f64);
        }
    }

    #[test]
    fn rotation_direction_matches_vector_rotation() {
        // An off-centre bump moves counter-clockwise and its normal turns with it.
        let m = render_sphere_normals(64, 64, (50.0, 31.5), 6.0).unwrap();
        let r = rotate_zoom_normal_map(&m, 90.0, 1.0, 0).unwrap();
        // (50, 31.5) is right of centre; after +90 deg it sits above the centre.
        assert!(r.is_foreground(32, 13));
        let apex = r.get(32, 13);
        assert!(apex[2] > 0.95, "{apex:?}");
        let upper = r.get(32, 9);
        assert!(upper[1] > 0.3, "{upper:?}");
    }

    #[test]
    fn background_is_exact_after_warp() {
        let m = sphere(40, 14.0);
        let r = rotate_zoom_normal_map(&m, 17.0, 1.1, 1).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                if !r.is_foreground(x, y) {
                    assert_eq!(r.get(x, y), BACKGROUND);
                }
            }
        }
        assert!(rotate_zoom_normal_map(&m, 0.0, 0.0, 1).is_err());
        assert!(rotate_zoom_normal_map(&m, 0.0, -1.0, 1).is_err());
    }

    #[test]
    fn expansion_count_and_determinism() {
        let maps: Vec<NormalMap> = (0..5).map(|i| sphere(32, 8.0 + i as f64)).collect();
        let p = AugmentParams {
            rng_seed: 3,
            ..Default::default()
        };
        let a = expand_dataset(&maps, &p).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, expand_dataset(&maps, &p).unwrap());
        assert_eq!(a[0], maps[0]);
        assert_eq!(a[5], flip_normal_map(&maps[0]));
        assert!(expand_dataset(&[], &p).is_err());
    }

    #[test]
    fn resize_halves_sphere() {
        let big = sphere(64, 24.0);
        let small = resize_normal_map(&big, 32, 32).unwrap();
        let oracle = sphere(32, 12.0);
        assert!(small.is_foreground(16, 16));
        let err = angular_error(small.get(16, 16), oracle.get(16, 16));
        assert!(err < 3.0);
    }
}
