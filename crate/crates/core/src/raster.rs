//! Raster and binary pattern image types, plus PGM/PPM/PNG file access.

use std::path::Path;

use crate::preprocess::PreprocessError;

/// Intensity image with 1 or 3 interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub source_id: String,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::InvalidImage("zero-sized raster".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(PreprocessError::InvalidImage(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(PreprocessError::InvalidImage("pixel buffer length mismatch".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PreprocessError::InvalidImage("intensity outside [0, 1]".into()));
        }
        Ok(Self { width, height, channels, data, source_id: String::new() })
    }

    /// Single-channel raster; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "zero-sized raster");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, channels: 1, data, source_id: String::new() }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma of pixel `(x, y)`; identity for single-channel rasters.
    #[inline]
    pub fn gray(&self, x: usize, y: usize) -> f32 {
        if self.channels == 1 {
            self.data[y * self.width + x]
        } else {
            let i = (y * self.width + x) * 3;
            0.299 * self.data[i] + 0.587 * self.data[i + 1] + 0.114 * self.data[i + 2]
        }
    }

    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        Raster::from_fn(self.width, self.height, |x, y| self.gray(x, y)).with_source_id(self.source_id.clone())
    }

    /// Bilinear sample of the luma channel; coordinates are clamped to the image.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xf - x0 as f32;
        let fy = yf - y0 as f32;
        let top = self.gray(x0, y0) * (1.0 - fx) + self.gray(x1, y0) * fx;
        let bottom = self.gray(x0, y1) * (1.0 - fx) + self.gray(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize of the luma channel.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Raster {
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Raster::from_fn(width, height, |x, y| self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5))
            .with_source_id(self.source_id.clone())
    }

    /// Reads an 8-bit PGM/PPM (P5/P6) or PNG file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreprocessError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| PreprocessError::Decode(e.to_string()))?;
        let raster = Self::from_dynamic(img)?;
        Ok(raster.with_source_id(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()))
    }

    /// Decodes an in-memory PGM/PPM/PNG file.
    pub fn decode(bytes: &[u8]) -> Result<Self, PreprocessError> {
        let img = image::load_from_memory(bytes).map_err(|e| PreprocessError::Decode(e.to_string()))?;
        Self::from_dynamic(img)
    }

    fn from_dynamic(img: image::DynamicImage) -> Result<Self, PreprocessError> {
        let has_color = img.color().has_color();
        if has_color {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(w as usize, h as usize, 3, data)
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Self::new(w as usize, h as usize, 1, data)
        }
    }

    /// Writes the luma channel as a binary 8-bit PGM (P5).
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
        let bytes: Vec<u8> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .map(|(y, x)| (self.gray(x, y) * 255.0).round() as u8)
            .collect();
        write_pgm(path.as_ref(), self.width, self.height, &bytes)
    }
}

/// Binary pelage-pattern mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternImage {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    /// Mean stroke width in pixels, once estimated.
    pub mean_stroke_width: Option<f32>,
    /// Accumulated rescaling factor applied by scale normalization.
    pub scale_factor: f32,
    pub source_id: String,
}

impl PatternImage {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Self {
        assert!(width > 0 && height > 0, "zero-sized pattern");
        assert_eq!(mask.len(), width * height, "mask length");
        Self { width, height, mask, mean_stroke_width: None, scale_factor: 1.0, source_id: String::new() }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                mask.push(f(x, y));
            }
        }
        Self::new(width, height, mask)
    }

    /// Thresholds the luma channel at 0.5.
    pub fn from_raster(raster: &Raster) -> Self {
        let mut p = Self::from_fn(raster.width(), raster.height(), |x, y| raster.gray(x, y) >= 0.5);
        p.source_id = raster.source_id.clone();
        p
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y| if self.get(x, y) { 1.0 } else { 0.0 })
            .with_source_id(self.source_id.clone())
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.mask[y * self.width + x] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True when no foreground pixel remains; such patterns are skipped downstream.
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Same metadata, new pixels.
    pub(crate) fn with_mask(&self, width: usize, height: usize, mask: Vec<bool>) -> Self {
        let mut p = Self::new(width, height, mask);
        p.mean_stroke_width = None;
        p.scale_factor = self.scale_factor;
        p.source_id = self.source_id.clone();
        p
    }

    /// Loads a mask image; pixels ≥ 128 are foreground.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreprocessError> {
        Ok(Self::from_raster(&Raster::load(path)?))
    }

    /// Writes a PGM with 0 = background, 255 = foreground.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
        let bytes: Vec<u8> = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        write_pgm(path.as_ref(), self.width, self.height, &bytes)
    }
}

fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<(), PreprocessError> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out).map_err(PreprocessError::Io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(Raster::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Raster::new(0, 1, 1, vec![]).is_err());
        assert!(Raster::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let p = PatternImage::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        p.save_pgm(&path).unwrap();
        let q = PatternImage::load(&path).unwrap();
        assert_eq!(p.mask(), q.mask());
        assert_eq!(q.width(), 7);
    }

    #[test]
    fn png_decodes_rgb() {
        let mut buf = Vec::new();
        let img = image::RgbImage::from_fn(3, 2, |x, _| image::Rgb([x as u8 * 100, 0, 255]));
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png).unwrap();
        let r = Raster::decode(&buf).unwrap();
        assert_eq!(r.channels(), 3);
        assert!((r.get(2, 1, 0) - 200.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let r = Raster::from_fn(2, 1, |x, _| x as f32);
        assert!((r.sample(0.25, 0.0) - 0.25).abs() < 1e-6);
        assert_eq!(r.sample(-3.0, 0.0), 0.0);
    }
}
