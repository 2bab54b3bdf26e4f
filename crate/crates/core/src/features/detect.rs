//! Hessian-affine region detection: determinant-of-Hessian extrema over a
//! Gaussian scale pyramid, followed by second-moment shape adaptation.

use serde::{Deserialize, Serialize};

use super::AffineRegion;
use crate::filter::{gaussian_blur, Plane};
use crate::linalg::eigen_sym2;
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Blur of the first pyramid level, in pixels.
    pub base_sigma: f32,
    /// Regions weaker than this fraction of the strongest response are dropped.
    pub response_threshold: f32,
    pub max_regions: usize,
    pub affine_iterations: usize,
    /// Shape iteration stops once the second-moment eigenvalue ratio is within this of 1.
    pub affine_convergence: f32,
    /// Regions whose shape axis ratio exceeds this are discarded as divergent.
    pub max_anisotropy: f32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            octaves: 5,
            scales_per_octave: 3,
            base_sigma: 1.6,
            response_threshold: 1e-4,
            max_regions: 2000,
            affine_iterations: 10,
            affine_convergence: 0.05,
            max_anisotropy: 6.0,
        }
    }
}

pub(crate) struct Octave {
    /// Pixel size of this octave in input pixels (`2^o`).
    pub step: f32,
    /// Gaussian levels; level `s` has blur `base_sigma · 2^(s/S)` in octave pixels.
    pub levels: Vec<Plane>,
}

/// Gaussian pyramid of one image.
pub struct ScaleSpace {
    pub(crate) octaves: Vec<Octave>,
    pub(crate) base_sigma: f32,
    pub(crate) scales_per_octave: usize,
    flat: bool,
}

impl ScaleSpace {
    pub fn build(image: &Raster, params: &DetectorParams) -> Self {
        let s = params.scales_per_octave.max(1);
        let sigma0 = params.base_sigma;
        let k = 2f32.powf(1.0 / s as f32);
        let input = Plane::from_raster(image);
        let first = input.data[0];
        let flat = input.data.iter().all(|&v| v == first);
        // The input is assumed to carry a nominal blur of 0.5 px.
        let mut base = gaussian_blur(&input, (sigma0 * sigma0 - 0.25).max(0.0).sqrt());
        let mut octaves = Vec::new();
        for o in 0..params.octaves.max(1) {
            if o > 0 && base.width.min(base.height) < 16 {
                break;
            }
            let mut levels = Vec::with_capacity(s + 2);
            levels.push(base.clone());
            for lvl in 1..(s + 2) {
                let prev = sigma0 * k.powi(lvl as i32 - 1);
                let cur = sigma0 * k.powi(lvl as i32);
                let inc = (cur * cur - prev * prev).sqrt();
                let next = gaussian_blur(&levels[lvl - 1], inc);
                levels.push(next);
            }
            base = levels[s].downsample2();
            octaves.push(Octave { step: 2f32.powi(o as i32), levels });
        }
        Self { octaves, base_sigma: sigma0, scales_per_octave: s, flat }
    }

    /// Blur (octave pixels) of level `s`.
    pub(crate) fn level_sigma(&self, s: f32) -> f32 {
        self.base_sigma * 2f32.powf(s / self.scales_per_octave as f32)
    }

    /// Finest octave whose pixel size does not exceed `step` input pixels.
    pub(crate) fn octave_for_step(&self, step: f32) -> usize {
        let o = step.max(1.0).log2().floor() as usize;
        o.min(self.octaves.len() - 1)
    }

    /// Bilinear sample at input-pixel coordinates from the first level of octave `o`.
    pub(crate) fn sample(&self, o: usize, x: f32, y: f32) -> f32 {
        let oct = &self.octaves[o];
        oct.levels[0].sample(x / oct.step, y / oct.step)
    }
}

fn hessian_response(level: &Plane, sigma: f32) -> Plane {
    let (w, h) = (level.width, level.height);
    let mut r = Plane::new(w, h);
    let norm = sigma.powi(4);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let c = level.at(x, y);
            let lxx = level.at(x + 1, y) - 2.0 * c + level.at(x - 1, y);
            let lyy = level.at(x, y + 1) - 2.0 * c + level.at(x, y - 1);
            let lxy = (level.at(x + 1, y + 1) - level.at(x + 1, y - 1) - level.at(x - 1, y + 1)
                + level.at(x - 1, y - 1))
                * 0.25;
            r.data[y * w + x] = norm * (lxx * lyy - lxy * lxy);
        }
    }
    r
}

fn parabolic_offset(lo: f32, mid: f32, hi: f32) -> f32 {
    let denom = lo - 2.0 * mid + hi;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
}

struct Candidate {
    x: f32,
    y: f32,
    sigma: f32,
    response: f32,
}

/// Detects Hessian-affine regions, strongest first.
pub fn detect_regions(image: &Raster, params: &DetectorParams) -> Vec<AffineRegion> {
    let space = ScaleSpace::build(image, params);
    detect_in(&space, params)
}

pub(crate) fn detect_in(space: &ScaleSpace, params: &DetectorParams) -> Vec<AffineRegion> {
    if space.flat {
        return Vec::new();
    }
    let s_count = space.scales_per_octave;
    let mut candidates = Vec::new();
    for oct in &space.octaves {
        let responses: Vec<Plane> =
            oct.levels.iter().enumerate().map(|(s, l)| hessian_response(l, space.level_sigma(s as f32))).collect();
        let (w, h) = (oct.levels[0].width, oct.levels[0].height);
        if w < 3 || h < 3 {
            continue;
        }
        for s in 1..=s_count {
            let cur = &responses[s];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = cur.at(x, y);
                    if v <= 0.0 {
                        continue;
                    }
                    if !is_local_max(&responses, s, x, y, v) {
                        continue;
                    }
                    let dx = parabolic_offset(cur.at(x - 1, y), v, cur.at(x + 1, y));
                    let dy = parabolic_offset(cur.at(x, y - 1), v, cur.at(x, y + 1));
                    let ds = parabolic_offset(responses[s - 1].at(x, y), v, responses[s + 1].at(x, y));
                    candidates.push(Candidate {
                        x: (x as f32 + dx) * oct.step,
                        y: (y as f32 + dy) * oct.step,
                        sigma: space.level_sigma(s as f32 + ds) * oct.step,
                        response: v,
                    });
                }
            }
        }
    }
    let max_resp = candidates.iter().map(|c| c.response).fold(0.0f32, f32::max);
    if max_resp <= 0.0 {
        return Vec::new();
    }
    let floor = params.response_threshold * max_resp;
    candidates.retain(|c| c.response >= floor && c.response > 1e-9);
    candidates.sort_by(|a, b| b.response.total_cmp(&a.response).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));
    candidates.truncate(params.max_regions.saturating_mul(3));

    let mut regions: Vec<AffineRegion> = candidates
        .iter()
        .filter_map(|c| {
            let u = adapt_shape(space, c.x, c.y, c.sigma, params)?;
            let radius = std::f32::consts::SQRT_2 * c.sigma;
            let mut r =
                AffineRegion::with_shape(c.x, c.y, [radius * u[0], radius * u[1], radius * u[2], radius * u[3]]);
            r.response = c.response;
            Some(r)
        })
        .collect();
    regions.truncate(params.max_regions);
    regions
}

fn is_local_max(responses: &[Plane], s: usize, x: usize, y: usize, v: f32) -> bool {
    // Ties are broken by scan order so a plateau yields a single maximum.
    for (ds, plane) in responses[s - 1..=s + 1].iter().enumerate() {
        for dy in 0..3 {
            for dx in 0..3 {
                if ds == 1 && dy == 1 && dx == 1 {
                    continue;
                }
                let n = plane.at(x + dx - 1, y + dy - 1);
                let earlier = (ds, dy, dx) < (1, 1, 1);
                if n > v || (earlier && n == v) {
                    return false;
                }
            }
        }
    }
    true
}

const ADAPT_PATCH: usize = 25;

/// Iterative second-moment shape adaptation. Returns the unit-determinant
/// shape matrix (row-major), or `None` when the iteration diverges or does
/// not settle within the iteration budget.
pub(crate) fn adapt_shape(
    space: &ScaleSpace,
    cx: f32,
    cy: f32,
    sigma: f32,
    params: &DetectorParams,
) -> Option<[f32; 4]> {
    let p = ADAPT_PATCH;
    let integration = 1.5 * sigma;
    let half_width = 3.0 * integration;
    let h = 2.0 * half_width / (p - 1) as f32;
    let deriv_sigma = sigma / h;
    let weight_sigma = integration / h;
    let c = (p - 1) as f32 * 0.5;
    let weights: Vec<f32> = (0..p * p)
        .map(|i| {
            let (u, v) = ((i % p) as f32 - c, (i / p) as f32 - c);
            (-(u * u + v * v) / (2.0 * weight_sigma * weight_sigma)).exp()
        })
        .collect();

    let mut u = [1.0f32, 0.0, 0.0, 1.0];
    for _ in 0..params.affine_iterations.max(1) {
        let (s_min, _) = singular_values(u);
        let o = space.octave_for_step(h * s_min);
        let mut patch = Plane::new(p, p);
        for j in 0..p {
            for i in 0..p {
                let (qx, qy) = ((i as f32 - c) * h, (j as f32 - c) * h);
                let x = cx + u[0] * qx + u[1] * qy;
                let y = cy + u[2] * qx + u[3] * qy;
                patch.data[j * p + i] = space.sample(o, x, y);
            }
        }
        let patch = gaussian_blur(&patch, deriv_sigma);
        let (mut a, mut b, mut d) = (0.0f64, 0.0f64, 0.0f64);
        for j in 1..p - 1 {
            for i in 1..p - 1 {
                let gx = 0.5 * (patch.at(i + 1, j) - patch.at(i - 1, j));
                let gy = 0.5 * (patch.at(i, j + 1) - patch.at(i, j - 1));
                let w = weights[j * p + i];
                a += (w * gx * gx) as f64;
                b += (w * gx * gy) as f64;
                d += (w * gy * gy) as f64;
            }
        }
        let (l, v) = eigen_sym2(a, b, d);
        if !(l[0] > 1e-18) || !(l[1] > 0.0) {
            return None;
        }
        if 1.0 - l[1] / l[0] < params.affine_convergence as f64 {
            return Some(u);
        }
        // μ^{-1/2}, then renormalize to unit determinant.
        let (i0, i1) = (1.0 / l[0].sqrt(), 1.0 / l[1].sqrt());
        let m = [
            i0 * v[0][0] * v[0][0] + i1 * v[1][0] * v[1][0],
            i0 * v[0][0] * v[0][1] + i1 * v[1][0] * v[1][1],
            i0 * v[0][1] * v[0][0] + i1 * v[1][1] * v[1][0],
            i0 * v[0][1] * v[0][1] + i1 * v[1][1] * v[1][1],
        ];
        let nu = [
            u[0] as f64 * m[0] + u[1] as f64 * m[2],
            u[0] as f64 * m[1] + u[1] as f64 * m[3],
            u[2] as f64 * m[0] + u[3] as f64 * m[2],
            u[2] as f64 * m[1] + u[3] as f64 * m[3],
        ];
        let det = nu[0] * nu[3] - nu[1] * nu[2];
        if !(det > 0.0) {
            return None;
        }
        let sc = 1.0 / det.sqrt();
        u = [(nu[0] * sc) as f32, (nu[1] * sc) as f32, (nu[2] * sc) as f32, (nu[3] * sc) as f32];
        let (lo, hi) = singular_values(u);
        if hi / lo > params.max_anisotropy {
            return None;
        }
    }
    None
}

/// Singular values (ascending) of a row-major 2×2 matrix.
pub(crate) fn singular_values(m: [f32; 4]) -> (f32, f32) {
    let [a, b, c, d] = m;
    let (l, _) = eigen_sym2(a * a + c * c, a * b + c * d, b * b + d * d);
    (l[1].max(0.0).sqrt(), l[0].max(0.0).sqrt())
}
