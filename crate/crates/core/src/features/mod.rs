//! Affine-covariant local features: Hessian-affine regions described by a
//! 128-dimensional square-rooted gradient histogram, plus the binary
//! descriptor file format used to exchange externally computed descriptors.

mod describe;
mod detect;
mod io;

pub use describe::{assign_orientation, describe, describe_regions, extract_patch, DescriptorParams, Patch};
pub use detect::{detect_regions, DetectorParams, ScaleSpace};
pub use io::{decode_descriptors, encode_descriptors, load_descriptors, save_descriptors};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::PatternImage;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("region out of bounds")]
    RegionOutOfBounds,
    #[error("patch must be square with side >= 16, got {0}")]
    InvalidPatch(usize),
    #[error("unsupported format")]
    UnsupportedFormat,
    #[error("corrupt descriptor file")]
    CorruptFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elliptical image region. `shape` (row-major `[a11, a12, a21, a22]`) maps
/// the unit circle onto the region ellipse centred at `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRegion {
    pub cx: f32,
    pub cy: f32,
    pub shape: [f32; 4],
    /// Characteristic radius, `sqrt(det(shape))`.
    pub scale: f32,
    pub response: f32,
    pub orientation: f32,
}

impl AffineRegion {
    pub fn circle(cx: f32, cy: f32, radius: f32) -> Self {
        Self::with_shape(cx, cy, [radius, 0.0, 0.0, radius])
    }

    pub fn with_shape(cx: f32, cy: f32, shape: [f32; 4]) -> Self {
        let det = shape[0] * shape[3] - shape[1] * shape[2];
        Self { cx, cy, shape, scale: det.abs().sqrt(), response: 0.0, orientation: 0.0 }
    }

    pub fn det(&self) -> f32 {
        self.shape[0] * self.shape[3] - self.shape[1] * self.shape[2]
    }

    pub fn is_valid(&self) -> bool {
        self.det() > 0.0 && self.scale > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Maps canonical (unit-circle) coordinates into the image.
    #[inline]
    pub fn to_image(&self, u: f32, v: f32) -> (f32, f32) {
        let [a, b, c, d] = self.shape;
        (self.cx + a * u + b * v, self.cy + c * u + d * v)
    }

    /// Axis-aligned half extents of the ellipse.
    pub fn half_extent(&self) -> (f32, f32) {
        let [a, b, c, d] = self.shape;
        ((a * a + b * b).sqrt(), (c * c + d * d).sqrt())
    }
}

/// Unit-norm local descriptor attached to its region.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub region: AffineRegion,
    /// Set when the patch had no usable gradient.
    pub low_contrast: bool,
}

impl Descriptor {
    /// Builds a descriptor, L2-normalizing `values`.
    pub fn new(mut values: Vec<f32>, region: AffineRegion) -> Self {
        l2_normalize_f32(&mut values);
        Self { values, region, low_contrast: false }
    }
}

pub(crate) fn l2_normalize_f32(v: &mut [f32]) {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// All descriptors of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorSet {
    pub image_id: String,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn new(image_id: impl Into<String>, descriptors: Vec<Descriptor>) -> Self {
        Self { image_id: image_id.into(), descriptors }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    /// A set with no descriptors marks a failed extraction.
    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, |d| d.values.len())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.descriptors.iter().map(|d| d.values.as_slice())
    }
}

/// Detects, orients and describes the regions of a pattern image.
pub fn extract_features(pattern: &PatternImage, detector: &DetectorParams, params: &DescriptorParams) -> DescriptorSet {
    if pattern.is_empty() {
        return DescriptorSet::new(pattern.source_id.clone(), Vec::new());
    }
    let space = ScaleSpace::build(&pattern.to_raster(), detector);
    let regions = detect::detect_in(&space, detector);
    DescriptorSet::new(pattern.source_id.clone(), describe_regions(&space, &regions, params))
}
