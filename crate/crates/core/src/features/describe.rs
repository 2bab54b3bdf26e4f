//! Affine-normalized patch sampling, dominant-orientation assignment and the
//! square-rooted gradient-histogram descriptor.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use super::detect::{singular_values, ScaleSpace};
use super::{l2_normalize_f32, AffineRegion, Descriptor, FeatureError};
use crate::raster::Raster;

pub const DESCRIPTOR_DIM: usize = 128;
const GRID: usize = 4;
const ORI_BINS: usize = 8;
const ORIENTATION_HIST: usize = 36;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DescriptorParams {
    pub patch_size: usize,
    /// Patch half-width in units of the region radius.
    pub magnification: f32,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self { patch_size: 32, magnification: 3.0 }
    }
}

/// Square, mean-subtracted intensity patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.size + x]
    }

    fn mean_subtracted(size: usize, mut data: Vec<f32>) -> Self {
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        data.iter_mut().for_each(|v| *v -= mean as f32);
        Self { size, data }
    }

    fn gradient(&self, x: usize, y: usize) -> (f32, f32) {
        let n = self.size;
        let gx = self.at((x + 1).min(n - 1), y) - self.at(x.saturating_sub(1), y);
        let gy = self.at(x, (y + 1).min(n - 1)) - self.at(x, y.saturating_sub(1));
        (0.5 * gx, 0.5 * gy)
    }

    /// Normalized cross-correlation with another patch of the same size.
    pub fn correlation(&self, other: &Patch) -> f32 {
        let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            ab += (a * b) as f64;
            aa += (a * a) as f64;
            bb += (b * b) as f64;
        }
        if aa == 0.0 || bb == 0.0 {
            return 0.0;
        }
        (ab / (aa * bb).sqrt()) as f32
    }
}

fn patch_transform(region: &AffineRegion, unit: f32) -> [f32; 4] {
    let (s, c) = region.orientation.sin_cos();
    let [a, b, cc, d] = region.shape;
    // A · R(θ) · unit
    [(a * c + b * s) * unit, (-a * s + b * c) * unit, (cc * c + d * s) * unit, (-cc * s + d * c) * unit]
}

fn sample_patch(size: usize, region: &AffineRegion, unit: f32, mut sample: impl FnMut(f32, f32) -> f32) -> Patch {
    let m = patch_transform(region, unit);
    let c = (size as f32 - 1.0) * 0.5;
    let mut data = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let (u, v) = (i as f32 - c, j as f32 - c);
            data.push(sample(region.cx + m[0] * u + m[1] * v, region.cy + m[2] * u + m[3] * v));
        }
    }
    Patch::mean_subtracted(size, data)
}

/// Samples `patch_size`² pixels through `shape · R(orientation)`: patch pixel
/// offsets from the patch centre are mapped by that matrix into the image.
/// With the identity shape this is a plain crop.
pub fn extract_patch(image: &Raster, region: &AffineRegion, patch_size: usize) -> Result<Patch, FeatureError> {
    let (ex, ey) = region.half_extent();
    let (w, h) = (image.width() as f32, image.height() as f32);
    if region.cx + ex < 0.0 || region.cx - ex > w - 1.0 || region.cy + ey < 0.0 || region.cy - ey > h - 1.0 {
        return Err(FeatureError::RegionOutOfBounds);
    }
    Ok(sample_patch(patch_size, region, 1.0, |x, y| image.sample(x, y)))
}

/// Dominant gradient orientation of a patch: 36-bin magnitude-weighted
/// histogram, circularly smoothed, with parabolic peak refinement.
pub fn assign_orientation(patch: &Patch) -> f32 {
    let n = patch.size;
    let c = (n as f32 - 1.0) * 0.5;
    let sigma = n as f32 / 6.0;
    let mut hist = [0.0f32; ORIENTATION_HIST];
    for y in 0..n {
        for x in 0..n {
            let (gx, gy) = patch.gradient(x, y);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (dx, dy) = (x as f32 - c, y as f32 - c);
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
            let b = ((angle / (2.0 * PI) * ORIENTATION_HIST as f32) as usize) % ORIENTATION_HIST;
            hist[b] += w * mag;
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for b in 0..ORIENTATION_HIST {
            let l = prev[(b + ORIENTATION_HIST - 1) % ORIENTATION_HIST];
            let r = prev[(b + 1) % ORIENTATION_HIST];
            hist[b] = (l + prev[b] + r) / 3.0;
        }
    }
    let (peak, &pv) =
        hist.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("non-empty histogram");
    if pv == 0.0 {
        return 0.0;
    }
    let l = hist[(peak + ORIENTATION_HIST - 1) % ORIENTATION_HIST];
    let r = hist[(peak + 1) % ORIENTATION_HIST];
    let denom = l - 2.0 * pv + r;
    let off = if denom.abs() > 1e-12 { 0.5 * (l - r) / denom } else { 0.0 };
    ((peak as f32 + 0.5 + off) / ORIENTATION_HIST as f32 * 2.0 * PI).rem_euclid(2.0 * PI)
}

/// 4×4 spatial cells × 8 orientations, trilinearly interpolated and
/// Gaussian weighted; L2-normalized, clipped at 0.2, then square-rooted after
/// L1 normalization. A patch without gradient yields the uniform descriptor
/// and is flagged low-contrast.
pub fn describe(patch: &Patch) -> Result<(Vec<f32>, bool), FeatureError> {
    let n = patch.size;
    if n < 16 || patch.data.len() != n * n {
        return Err(FeatureError::InvalidPatch(n));
    }
    let mut hist = vec![0.0f32; DESCRIPTOR_DIM];
    let c = (n as f32 - 1.0) * 0.5;
    let sigma = n as f32 * 0.5;
    let cell = n as f32 / GRID as f32;
    let mut total = 0.0f32;
    for y in 0..n {
        for x in 0..n {
            let (gx, gy) = patch.gradient(x, y);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (dx, dy) = (x as f32 - c, y as f32 - c);
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() * mag;
            total += w;
            let fx = (x as f32 + 0.5) / cell - 0.5;
            let fy = (y as f32 + 0.5) / cell - 0.5;
            let fo = gy.atan2(gx).rem_euclid(2.0 * PI) / (2.0 * PI) * ORI_BINS as f32;
            let (x0, y0, o0) = (fx.floor(), fy.floor(), fo.floor());
            let (wx, wy, wo) = (fx - x0, fy - y0, fo - o0);
            for (cy, wyy) in [(y0 as isize, 1.0 - wy), (y0 as isize + 1, wy)] {
                if cy < 0 || cy >= GRID as isize {
                    continue;
                }
                for (cx, wxx) in [(x0 as isize, 1.0 - wx), (x0 as isize + 1, wx)] {
                    if cx < 0 || cx >= GRID as isize {
                        continue;
                    }
                    for (ob, woo) in [(o0 as usize, 1.0 - wo), (o0 as usize + 1, wo)] {
                        let ob = ob % ORI_BINS;
                        let idx = (cy as usize * GRID + cx as usize) * ORI_BINS + ob;
                        hist[idx] += w * wyy * wxx * woo;
                    }
                }
            }
        }
    }
    let uniform = || vec![1.0 / (DESCRIPTOR_DIM as f32).sqrt(); DESCRIPTOR_DIM];
    if !(total > 1e-7) {
        return Ok((uniform(), true));
    }
    l2_normalize_f32(&mut hist);
    hist.iter_mut().for_each(|v| *v = v.min(0.2));
    let l1: f32 = hist.iter().sum();
    if !(l1 > 0.0) {
        return Ok((uniform(), true));
    }
    hist.iter_mut().for_each(|v| *v = (*v / l1).sqrt());
    l2_normalize_f32(&mut hist);
    Ok((hist, false))
}

/// Orients and describes every region, sampling from the pyramid octave that
/// matches each region's patch resolution.
pub fn describe_regions(space: &ScaleSpace, regions: &[AffineRegion], params: &DescriptorParams) -> Vec<Descriptor> {
    let size = params.patch_size.max(16);
    let unit = 2.0 * params.magnification / size as f32;
    regions
        .iter()
        .filter(|r| r.is_valid())
        .map(|region| {
            let (s_min, _) = singular_values(region.shape);
            let o = space.octave_for_step(s_min * unit);
            let mut r = *region;
            r.orientation = 0.0;
            let upright = sample_patch(size, &r, unit, |x, y| space.sample(o, x, y));
            r.orientation = assign_orientation(&upright);
            let patch = sample_patch(size, &r, unit, |x, y| space.sample(o, x, y));
            let (values, low_contrast) = describe(&patch).expect("patch size checked");
            Descriptor { values, region: r, low_contrast }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(size: usize) -> Raster {
        Raster::from_fn(size, size, |x, y| {
            let (xf, yf) = (x as f32, y as f32);
            0.5 + 0.25 * (xf * 0.31).sin() * (yf * 0.17).cos() + 0.2 * ((xf + 2.0 * yf) * 0.11).sin()
        })
    }

    fn norm(v: &[f32]) -> f32 {
        v.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    #[test]
    fn identity_shape_is_plain_crop() {
        let img = textured(64);
        // Patch centre is 7.5, so pixel i samples image coordinate 23 + i.
        let region = AffineRegion::with_shape(30.5, 30.5, [1.0, 0.0, 0.0, 1.0]);
        let p = extract_patch(&img, &region, 16).unwrap();
        let crop: Vec<f32> =
            (0..16).flat_map(|j| (0..16).map(move |i| (i, j))).map(|(i, j)| img.gray(23 + i, 23 + j)).collect();
        let crop = Patch::mean_subtracted(16, crop);
        for (a, b) in p.data.iter().zip(&crop.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn doubled_shape_downscales() {
        let img = textured(80);
        let region = AffineRegion::with_shape(40.0, 40.0, [2.0, 0.0, 0.0, 2.0]);
        let p = extract_patch(&img, &region, 16).unwrap();
        // Patch pixel i samples image coordinate 40 + 2(i - 7.5) = 25 + 2i.
        let raw: Vec<f32> =
            (0..16).flat_map(|j| (0..16).map(move |i| (i, j))).map(|(i, j)| img.gray(25 + 2 * i, 25 + 2 * j)).collect();
        let want = Patch::mean_subtracted(16, raw);
        for (a, b) in p.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn out_of_bounds_region_rejected() {
        let img = textured(32);
        let region = AffineRegion::circle(-50.0, 10.0, 3.0);
        assert!(matches!(extract_patch(&img, &region, 16), Err(FeatureError::RegionOutOfBounds)));
    }

    #[test]
    fn descriptor_unit_norm_and_deterministic() {
        let img = textured(64);
        let p = extract_patch(&img, &AffineRegion::circle(32.0, 32.0, 1.0), 32).unwrap();
        let (a, flag) = describe(&p).unwrap();
        let (b, _) = describe(&p).unwrap();
        assert_eq!(a.len(), 128);
        assert!(!flag);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn intensity_scaling_invariance() {
        let img = textured(64);
        let half = Raster::from_fn(64, 64, |x, y| 0.5 * img.gray(x, y));
        let r = AffineRegion::circle(32.0, 32.0, 1.0);
        let (a, _) = describe(&extract_patch(&img, &r, 32).unwrap()).unwrap();
        let (b, _) = describe(&extract_patch(&half, &r, 32).unwrap()).unwrap();
        let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(1.0 - cos < 1e-3, "distance {}", 1.0 - cos);
    }

    #[test]
    fn constant_patch_is_uniform_and_flagged() {
        let p = Patch { size: 16, data: vec![0.0; 256] };
        let (v, flag) = describe(&p).unwrap();
        assert!(flag);
        assert!(v.iter().all(|&x| (x - 1.0 / 128f32.sqrt()).abs() < 1e-7));
    }

    #[test]
    fn small_patch_rejected() {
        let p = Patch { size: 8, data: vec![0.0; 64] };
        assert!(describe(&p).is_err());
    }

    #[test]
    fn orientation_follows_gradient() {
        // Intensity ramp increasing along +y: gradient angle π/2.
        let p = Patch::mean_subtracted(32, (0..32 * 32).map(|i| (i / 32) as f32 / 32.0).collect());
        let theta = assign_orientation(&p);
        assert!((theta - PI / 2.0).abs() < 0.1, "{theta}");
    }
}
