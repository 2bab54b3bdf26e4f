//! Pattern image preparation: contrast equalization, morphological cleanup,
//! stroke-width estimation and scale normalization.

use thiserror::Error;

use crate::filter::{gaussian_blur, Plane};
use crate::raster::{PatternImage, Raster};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty pattern")]
    EmptyPattern,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const BINS: usize = 256;

/// Clip-limited, tile-based histogram equalization.
///
/// Each `tile`×`tile` block gets a 256-bin histogram whose bins are clipped at
/// `clip · n / 256` counts; the clipped excess is spread uniformly over all
/// bins. A value maps to its mid-rank in the clipped distribution,
/// `(Σ_{b'<b} h(b') + h(b)/2) / n`, and the four surrounding tile mappings
/// are blended bilinearly. Channels are processed independently.
pub fn equalize_contrast(image: &Raster, tile: usize, clip: f32) -> Result<Raster, PreprocessError> {
    if tile < 8 {
        return Err(PreprocessError::InvalidParameter(format!("tile {tile} < 8")));
    }
    if !(clip > 0.0) {
        return Err(PreprocessError::InvalidParameter(format!("clip {clip} must be > 0")));
    }
    let first = image.data()[0];
    if image.data().iter().all(|&v| v == first) {
        return Ok(image.clone());
    }
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let mut out = vec![0.0f32; w * h * ch];

    for c in 0..ch {
        let bin_of = |x: usize, y: usize| (image.get(x, y, c) * 255.0).round() as usize;
        let mut luts = Vec::with_capacity(tiles_x * tiles_y);
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let (x0, y0) = (tx * tile, ty * tile);
                let (x1, y1) = ((x0 + tile).min(w), (y0 + tile).min(h));
                let mut hist = [0.0f64; BINS];
                for y in y0..y1 {
                    for x in x0..x1 {
                        hist[bin_of(x, y)] += 1.0;
                    }
                }
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                let limit = (clip as f64 * n / BINS as f64).max(1.0);
                let mut excess = 0.0;
                for v in hist.iter_mut() {
                    if *v > limit {
                        excess += *v - limit;
                        *v = limit;
                    }
                }
                let share = excess / BINS as f64;
                let mut lut = [0.0f32; BINS];
                let mut below = 0.0;
                for (b, v) in hist.iter().enumerate() {
                    let hb = v + share;
                    lut[b] = ((below + 0.5 * hb) / n) as f32;
                    below += hb;
                }
                luts.push(lut);
            }
        }

        for y in 0..h {
            // Position relative to tile centers.
            let gy = ((y as f32 + 0.5) / tile as f32 - 0.5).clamp(0.0, (tiles_y - 1) as f32);
            let ty0 = gy.floor() as usize;
            let ty1 = (ty0 + 1).min(tiles_y - 1);
            let fy = gy - ty0 as f32;
            for x in 0..w {
                let gx = ((x as f32 + 0.5) / tile as f32 - 0.5).clamp(0.0, (tiles_x - 1) as f32);
                let tx0 = gx.floor() as usize;
                let tx1 = (tx0 + 1).min(tiles_x - 1);
                let fx = gx - tx0 as f32;
                let b = bin_of(x, y);
                let m = |tx: usize, ty: usize| luts[ty * tiles_x + tx][b];
                let top = m(tx0, ty0) * (1.0 - fx) + m(tx1, ty0) * fx;
                let bottom = m(tx0, ty1) * (1.0 - fx) + m(tx1, ty1) * fx;
                out[(y * w + x) * ch + c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    let mut r = Raster::new(w, h, ch, out)?;
    r.source_id = image.source_id.clone();
    Ok(r)
}

/// Offsets of the discrete disk of the given radius: pixel centers within
/// `radius + 0.5` of the origin (radius 1 is the full 3×3 block).
fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if 4 * (dx * dx + dy * dy) <= (2 * r + 1) * (2 * r + 1) {
                offs.push((dx, dy));
            }
        }
    }
    offs
}

/// Erosion (`dilate == false`) or dilation by a disk. Pixels outside the
/// image take no part in either operation, so the pair stays adjoint and
/// opening/closing are idempotent.
fn morph(p: &PatternImage, radius: usize, dilate: bool) -> PatternImage {
    if radius == 0 {
        return p.clone();
    }
    let se = disk(radius);
    let (w, h) = (p.width() as isize, p.height() as isize);
    let mut mask = Vec::with_capacity(p.mask().len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for &(dx, dy) in &se {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let v = p.get(nx as usize, ny as usize);
                if dilate && v {
                    acc = true;
                    break;
                }
                if !dilate && !v {
                    acc = false;
                    break;
                }
            }
            mask.push(acc);
        }
    }
    let mut out = p.with_mask(p.width(), p.height(), mask);
    out.mean_stroke_width = None;
    out
}

pub fn erode(p: &PatternImage, radius: usize) -> PatternImage {
    morph(p, radius, false)
}

pub fn dilate(p: &PatternImage, radius: usize) -> PatternImage {
    morph(p, radius, true)
}

pub fn open(p: &PatternImage, radius: usize) -> PatternImage {
    dilate(&erode(p, radius), radius)
}

pub fn close(p: &PatternImage, radius: usize) -> PatternImage {
    erode(&dilate(p, radius), radius)
}

/// Binarizes a soft pattern map (e.g. a segmentation network's probability
/// output): unsharp masking with a σ=1 Gaussian, then a 0.5 threshold.
pub fn binarize(raster: &Raster, sharpen_amount: f32) -> PatternImage {
    let plane = Plane::from_raster(raster);
    let blurred = gaussian_blur(&plane, 1.0);
    let mask = plane.data.iter().zip(&blurred.data).map(|(&v, &b)| v + sharpen_amount * (v - b) >= 0.5).collect();
    PatternImage::new(raster.width(), raster.height(), mask).with_source_id(raster.source_id.clone())
}

/// Removes speckle from a binary pattern: unsharp masking of the mask followed
/// by a disk opening. On an exactly binary mask the sharpening step leaves
/// pixels unchanged; it matters for masks produced by [`binarize`] at a
/// different threshold.
pub fn clean_pattern(pattern: &PatternImage, open_radius: usize, sharpen_amount: f32) -> PatternImage {
    let sharpened = if sharpen_amount > 0.0 {
        let mut p = binarize(&pattern.to_raster(), sharpen_amount);
        p.scale_factor = pattern.scale_factor;
        p
    } else {
        pattern.clone()
    };
    let mut out = open(&sharpened, open_radius);
    out.source_id = pattern.source_id.clone();
    out
}

/// Segmentation-mask smoothing: closing fills small holes, opening smooths the border.
pub fn postprocess_mask(mask: &PatternImage, close_radius: usize, open_radius: usize) -> PatternImage {
    open(&close(mask, close_radius), open_radius)
}

/// Squared Euclidean distance from every pixel to the nearest background
/// pixel (0 on background). Exact two-pass lower-envelope transform.
pub fn squared_distance_transform(p: &PatternImage) -> Vec<f64> {
    let (w, h) = (p.width(), p.height());
    let inf = 1e20;
    let mut grid: Vec<f64> = p.mask().iter().map(|&m| if m { inf } else { 0.0 }).collect();
    let mut f = vec![0.0; w.max(h)];
    let mut d = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let vk = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[vk] + (vk * vk) as f64)) / (2.0 * (q - vk) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Mean stroke width: twice the distance-transform value averaged over ridge
/// pixels (foreground pixels whose distance is ≥ all 8 neighbours').
pub fn estimate_stroke_width(pattern: &PatternImage) -> Result<f32, PreprocessError> {
    if pattern.is_empty() {
        return Err(PreprocessError::EmptyPattern);
    }
    let (w, h) = (pattern.width(), pattern.height());
    if pattern.foreground_count() == w * h {
        // No background to measure against; the whole frame is one stroke.
        return Ok(w.min(h) as f32);
    }
    let dt: Vec<f64> = squared_distance_transform(pattern).into_iter().map(f64::sqrt).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let v = dt[y * w + x];
            if v <= 0.0 {
                continue;
            }
            let mut ridge = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    if dt[ny as usize * w + nx as usize] > v {
                        ridge = false;
                        break 'nb;
                    }
                }
            }
            if ridge {
                sum += 2.0 * v;
                count += 1;
            }
        }
    }
    Ok((sum / count as f64) as f32)
}

/// Rescales the pattern so its mean stroke width becomes `target_width`.
/// The mask is resampled nearest-neighbour; the stroke width is re-measured
/// on the output.
pub fn normalize_scale(pattern: &PatternImage, target_width: f32) -> Result<PatternImage, PreprocessError> {
    if !(target_width > 0.0) {
        return Err(PreprocessError::InvalidParameter("target width must be > 0".into()));
    }
    let measured = estimate_stroke_width(pattern)?;
    let s = target_width / measured;
    let mut out = if (s - 1.0).abs() < 1e-6 { pattern.clone() } else { resize_nearest(pattern, s) };
    out.scale_factor = pattern.scale_factor * s;
    out.mean_stroke_width = Some(estimate_stroke_width(&out)?);
    Ok(out)
}

pub fn resize_nearest(pattern: &PatternImage, s: f32) -> PatternImage {
    let nw = ((pattern.width() as f32 * s).round() as usize).max(1);
    let nh = ((pattern.height() as f32 * s).round() as usize).max(1);
    let mut mask = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = (((y as f32 + 0.5) / s) as usize).min(pattern.height() - 1);
        for x in 0..nw {
            let sx = (((x as f32 + 0.5) / s) as usize).min(pattern.width() - 1);
            mask.push(pattern.get(sx, sy));
        }
    }
    pattern.with_mask(nw, nh, mask)
}
