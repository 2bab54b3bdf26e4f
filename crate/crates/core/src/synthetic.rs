//! Synthetic ring patterns for tests, demos and benchmarks.
//!
//! An individual is a set of open, slightly elliptical rings on a square
//! canvas. Views are rendered through an affine map (rotation, scale,
//! translation about the canvas centre) with optional salt-and-pepper noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::PatternImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub thickness: f32,
    /// Radius modulation `1 + e·cos(2(φ − φ0))`.
    pub eccentricity: f32,
    pub axis: f32,
    /// Angular interval `[gap_start, gap_start + gap)` left open.
    pub gap_start: f32,
    pub gap: f32,
}

impl Ring {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let phi = dy.atan2(dx);
        let r = self.radius * (1.0 + self.eccentricity * (2.0 * (phi - self.axis)).cos());
        let d = (dx * dx + dy * dy).sqrt();
        if (d - r).abs() > 0.5 * self.thickness {
            return false;
        }
        let rel = (phi - self.gap_start).rem_euclid(std::f32::consts::TAU);
        rel >= self.gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingPattern {
    pub size: usize,
    pub rings: Vec<Ring>,
}

/// 2×3 affine map `[a, b, tx; c, d, ty]` from pattern to view coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [f32; 6],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] }
    }

    /// Rotation by `angle` and isotropic `scale` about `(cx, cy)`, which is
    /// moved to `(ox, oy)`.
    pub fn similarity(angle: f32, scale: f32, cx: f32, cy: f32, ox: f32, oy: f32) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        Self { m: [a, b, ox - a * cx - b * cy, cc, d, oy - cc * cx - d * cy] }
    }

    pub fn apply(&self, x: f32, y: f32) -> (f32, f32) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Self { m: [a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])] }
    }

    /// Linear part, row-major.
    pub fn linear(&self) -> [f32; 4] {
        [self.m[0], self.m[1], self.m[3], self.m[4]]
    }
}

impl RingPattern {
    /// Random individual: `count` rings on a `size`² canvas.
    pub fn random(seed: u64, size: usize, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = 0.12 * size as f32;
        let mut rings: Vec<Ring> = Vec::with_capacity(count);
        let mut attempts = 0;
        while rings.len() < count && attempts < count * 200 {
            attempts += 1;
            let radius = rng.random_range(5.0..13.0);
            let cx = rng.random_range(margin..size as f32 - margin);
            let cy = rng.random_range(margin..size as f32 - margin);
            let clear = rings.iter().all(|r| {
                let d = ((r.cx - cx).powi(2) + (r.cy - cy).powi(2)).sqrt();
                d > 1.15 * (r.radius + radius) + 4.0
            });
            if !clear {
                continue;
            }
            let gap = if rng.random_bool(0.7) { rng.random_range(0.4..1.8) } else { 0.0 };
            rings.push(Ring {
                cx,
                cy,
                radius,
                thickness: rng.random_range(3.0..4.5),
                eccentricity: rng.random_range(0.0..0.25),
                axis: rng.random_range(0.0..std::f32::consts::PI),
                gap_start: rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
                gap,
            });
        }
        Self { size, rings }
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        self.rings.iter().any(|r| r.contains(x, y))
    }

    /// Renders the pattern seen through `view` (pattern → view coordinates)
    /// on a `width`×`height` canvas, flipping each pixel with probability `noise`.
    pub fn render(&self, view: &Affine2, width: usize, height: usize, noise: f32, seed: u64) -> PatternImage {
        let inv = view.inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatternImage::from_fn(width, height, |x, y| {
            let (px, py) = inv.apply(x as f32, y as f32);
            let v = self.contains(px, py);
            if noise > 0.0 && rng.random::<f32>() < noise {
                !v
            } else {
                v
            }
        })
    }
}

/// Parameters of a synthetic identification dataset: one clean frontal
/// database view per individual plus randomly warped, noisy query views.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub individuals: usize,
    pub queries_per_individual: usize,
    /// Side of the pattern square.
    pub pattern_size: usize,
    pub rings: usize,
    /// Query rotation is uniform in ±this many degrees.
    pub max_rotation_deg: f32,
    /// Query scale is log-uniform in [1/max_scale, max_scale].
    pub max_scale: f32,
    /// Query translation is uniform in ±this many pixels per axis.
    pub max_shift: f32,
    /// Per-pixel flip probability on query views.
    pub noise: f32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            individuals: 20,
            queries_per_individual: 5,
            pattern_size: 160,
            rings: 10,
            max_rotation_deg: 20.0,
            max_scale: 1.3,
            max_shift: 6.0,
            noise: 0.05,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub individual_id: String,
    pub image_id: String,
    pub is_query: bool,
    pub view: Affine2,
    pub image: PatternImage,
}

/// Renders the dataset; ids are `ind-NN` and `ind-NN-db` / `ind-NN-qM`.
pub fn synthetic_dataset(spec: &DatasetSpec) -> Vec<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.pattern_size;
    let canvas = (size as f32 * spec.max_scale.max(1.0) * 1.1).ceil() as usize;
    let (pc, cc) = (size as f32 / 2.0, canvas as f32 / 2.0);
    let mut out = Vec::with_capacity(spec.individuals * (1 + spec.queries_per_individual));
    for i in 0..spec.individuals {
        let individual_id = format!("ind-{i:02}");
        let pattern = RingPattern::random(rng.random(), size, spec.rings);
        let view = Affine2::similarity(0.0, 1.0, pc, pc, cc, cc);
        out.push(SyntheticImage {
            image_id: format!("{individual_id}-db"),
            individual_id: individual_id.clone(),
            is_query: false,
            view,
            image: pattern.render(&view, canvas, canvas, 0.0, 0).with_source_id(format!("{individual_id}-db")),
        });
        for q in 0..spec.queries_per_individual {
            let angle = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg).to_radians();
            let ls = spec.max_scale.ln();
            let scale = if ls > 0.0 { rng.random_range(-ls..=ls).exp() } else { 1.0 };
            let (dx, dy) = if spec.max_shift > 0.0 {
                (rng.random_range(-spec.max_shift..=spec.max_shift), rng.random_range(-spec.max_shift..=spec.max_shift))
            } else {
                (0.0, 0.0)
            };
            let view = Affine2::similarity(angle, scale, pc, pc, cc + dx, cc + dy);
            let image_id = format!("{individual_id}-q{q}");
            let image =
                pattern.render(&view, canvas, canvas, spec.noise, rng.random()).with_source_id(image_id.clone());
            out.push(SyntheticImage { individual_id: individual_id.clone(), image_id, is_query: true, view, image });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trips() {
        let a = Affine2::similarity(0.3, 1.2, 50.0, 40.0, 60.0, 70.0);
        let (x, y) = a.apply(12.0, -3.0);
        let (bx, by) = a.inverse().apply(x, y);
        assert!((bx - 12.0).abs() < 1e-4 && (by + 3.0).abs() < 1e-4);
    }

    #[test]
    fn seeded_patterns_reproducible() {
        assert_eq!(RingPattern::random(7, 160, 10), RingPattern::random(7, 160, 10));
        assert_ne!(RingPattern::random(7, 160, 10), RingPattern::random(8, 160, 10));
    }

    #[test]
    fn render_has_foreground() {
        let p = RingPattern::random(1, 160, 10);
        let img = p.render(&Affine2::identity(), 160, 160, 0.0, 0);
        assert!(img.foreground_count() > 200);
    }
}
