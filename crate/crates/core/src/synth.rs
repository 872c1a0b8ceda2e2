//! Analytic normal maps built from spheres and spherical caps.
//!
//! A sphere of radius `r` centred at pixel `(cx, cy)` has, at offset
//! `d = ((px - cx) / r, (py - cy) / r)` inside the disc, the normal
//! `(d_x, -d_y, sqrt(1 - |d|^2))`. The y component is negated because image
//! rows grow downwards while the normal frame points up.

use rand::Rng;

use crate::error::{Error, Result};
use crate::normal::{NormalMap, Vec3, BACKGROUND};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    /// Drawn everywhere inside its disc, over whatever was there.
    Sphere,
    /// Drawn only where an earlier primitive already put foreground.
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub center: (f64, f64),
    pub radius: f64,
    pub kind: PrimitiveKind,
}

/// Per-map random perturbation applied by [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jitter {
    /// Maximum centre offset as a fraction of the smaller image side.
    pub center: f64,
    /// Maximum relative radius change.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Painted in order.
    pub primitives: Vec<Primitive>,
    pub rng_seed: u64,
    pub jitter: Jitter,
}

impl SceneSpec {
    /// A single sphere centred in the image, no jitter.
    pub fn centered_sphere(size: usize, radius: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            width: size,
            height: size,
            primitives: vec![Primitive {
                center: (c, c),
                radius,
                kind: PrimitiveKind::Sphere,
            }],
            rng_seed: 0,
            jitter: Jitter::default(),
        }
    }

    /// A head-like composite: a large sphere with cheek and nose caps.
    pub fn face_like(size: usize, seed: u64) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let cap = |dx: f64, dy: f64, r: f64| Primitive {
            center: (c + dx * s, c + dy * s),
            radius: r * s,
            kind: PrimitiveKind::Cap,
        };
        Self {
            width: size,
            height: size,
            primitives: vec![
                Primitive {
                    center: (c, c),
                    radius: 0.36 * s,
                    kind: PrimitiveKind::Sphere,
                },
                cap(-0.15, 0.08, 0.12),
                cap(0.15, 0.08, 0.12),
                cap(0.0, 0.04, 0.08),
            ],
            rng_seed: seed,
            jitter: Jitter {
                center: 0.06,
                radius: 0.12,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene size must be positive"));
        }
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        if let Some(p) = self.primitives.iter().find(|p| !(p.radius > 0.0)) {
            return Err(Error::invalid(format!("primitive radius {} must be positive", p.radius)));
        }
        Ok(())
    }
}

fn sphere_normal(px: usize, py: usize, center: (f64, f64), radius: f64) -> Option<Vec3> {
    let dx = (px as f64 - center.0) / radius;
    let dy = (py as f64 - center.1) / radius;
    let r2 = dx * dx + dy * dy;
    (r2 <= 1.0).then(|| [dx as f32, (-dy) as f32, (1.0 - r2).sqrt() as f32])
}

/// Paints the primitives in order onto a background canvas.
pub fn render_scene(width: usize, height: usize, primitives: &[Primitive]) -> Result<NormalMap> {
    let mut vectors = vec![BACKGROUND; width * height];
    let mut fg = vec![false; width * height];
    for p in primitives {
        if !(p.radius > 0.0) {
            return Err(Error::invalid(format!("primitive radius {} must be positive", p.radius)));
        }
        for py in 0..height {
            for px in 0..width {
                let i = py * width + px;
                if p.kind == PrimitiveKind::Cap && !fg[i] {
                    continue;
                }
                if let Some(n) = sphere_normal(px, py, p.center, p.radius) {
                    vectors[i] = n;
                    fg[i] = true;
                }
            }
        }
    }
    NormalMap::new(width, height, vectors, Some(fg))
}

/// Normal map of one sphere over the background.
pub fn render_sphere_normals(width: usize, height: usize, center: (f64, f64), radius: f64) -> Result<NormalMap> {
    render_scene(
        width,
        height,
        &[Primitive {
            center,
            radius,
            kind: PrimitiveKind::Sphere,
        }],
    )
}

/// `n` maps, each the template with its primitives jittered by the
/// substream `(rng_seed, index)`.
pub fn generate_dataset(n: usize, template: &SceneSpec) -> Result<Vec<NormalMap>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    template.validate()?;
    let side = template.width.min(template.height) as f64;
    (0..n)
        .map(|i| {
            let mut rng = substream(template.rng_seed, &[i as u64]);
            let j = template.jitter;
            let prims: Vec<Primitive> = template
                .primitives
                .iter()
                .map(|p| {
                    if j.center == 0.0 && j.radius == 0.0 {
                        return *p;
                    }
                    let ox = rng.random_range(-1.0..=1.0) * j.center * side;
                    let oy = rng.random_range(-1.0..=1.0) * j.center * side;
                    let scale = 1.0 + rng.random_range(-1.0..=1.0) * j.radius;
                    Primitive {
                        center: (p.center.0 + ox, p.center.1 + oy),
                        radius: p.radius * scale,
                        kind: p.kind,
                    }
                })
                .collect();
            render_scene(template.width, template.height, &prims)
        })
        .collect()
}
