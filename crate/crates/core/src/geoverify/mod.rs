//! Geometric verification of a candidate match: nearest-descriptor pairing,
//! percentile filtering, RANSAC homography and hotspot overlays.

mod homography;
mod hotspot;

pub use homography::{
    estimate_homography_dlt, ransac_homography, ransac_points, reprojection_error, Homography, RansacParams,
    RansacResult,
};
pub use hotspot::{render_hotspots, render_svg, HotspotOverlay, HotspotPair, SvgLayout};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{AffineRegion, DescriptorSet};

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("no features")]
    NoFeatures,
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least 4 correspondences, got {0}")]
    TooFewMatches(usize),
    #[error("degenerate correspondences")]
    Degenerate,
    #[error("no consistent geometry")]
    NoConsistentGeometry,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A query feature paired with its nearest database feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub query_index: usize,
    pub db_index: usize,
    pub query_region: AffineRegion,
    pub db_region: AffineRegion,
    /// Cosine distance between the descriptors, in `[0, 2]`.
    pub distance: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (1.0 - d).clamp(0.0, 2.0)
}

/// For every query descriptor, the nearest database descriptor by cosine
/// distance; ties go to the lower database index.
pub fn match_features(query: &DescriptorSet, db: &DescriptorSet) -> Result<Vec<FeatureMatch>, GeoError> {
    if query.is_empty() || db.is_empty() {
        return Err(GeoError::NoFeatures);
    }
    if query.dim() != db.dim() {
        return Err(GeoError::DimensionMismatch(query.dim(), db.dim()));
    }
    Ok(query
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let (di, dist) = db
                .descriptors
                .iter()
                .enumerate()
                .map(|(di, d)| (di, cosine(&q.values, &d.values)))
                .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
            FeatureMatch {
                query_index: qi,
                db_index: di,
                query_region: q.region,
                db_region: db.descriptors[di].region,
                distance: dist,
            }
        })
        .collect())
}

/// Percentile with linear interpolation between order statistics: the value
/// at fractional rank `p/100 · (n − 1)` of the sorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// Keeps matches whose distance is at most the `p`-th percentile; the
/// nearest match always survives.
pub fn percentile_filter(matches: &[FeatureMatch], p: f64) -> Result<Vec<FeatureMatch>, GeoError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(GeoError::InvalidParameter(format!("percentile {p} outside (0, 100]")));
    }
    if matches.is_empty() {
        return Ok(Vec::new());
    }
    let d: Vec<f64> = matches.iter().map(|m| m.distance).collect();
    let threshold = percentile(&d, p);
    Ok(matches.iter().filter(|m| m.distance <= threshold).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Descriptor;

    fn m(distance: f64) -> FeatureMatch {
        let r = AffineRegion::circle(0.0, 0.0, 1.0);
        FeatureMatch { query_index: 0, db_index: 0, query_region: r, db_region: r, distance }
    }

    #[test]
    fn percentile_examples() {
        let d: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((percentile(&d, 10.0) - 1.9).abs() < 1e-12);
        assert_eq!(percentile(&d, 100.0), 10.0);
        let ms: Vec<_> = d.iter().map(|&x| m(x)).collect();
        let kept = percentile_filter(&ms, 10.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].distance, 1.0);
        assert_eq!(percentile_filter(&ms, 100.0).unwrap().len(), 10);
        let same: Vec<_> = (0..5).map(|_| m(0.3)).collect();
        assert_eq!(percentile_filter(&same, 10.0).unwrap().len(), 5);
        assert!(percentile_filter(&ms, 0.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let r = AffineRegion::circle(1.0, 2.0, 3.0);
        let q = DescriptorSet::new("q", vec![Descriptor::new(vec![1.0, 0.0], r)]);
        let near = (1.0f64 - 0.2).acos();
        let far = (1.0f64 - 0.4).acos();
        let db = DescriptorSet::new(
            "d",
            vec![
                Descriptor::new(vec![far.cos() as f32, far.sin() as f32], r),
                Descriptor::new(vec![near.cos() as f32, near.sin() as f32], r),
            ],
        );
        let ms = match_features(&q, &db).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].db_index, 1);
        assert!((ms[0].distance - 0.2).abs() < 1e-6);
        assert!(matches!(match_features(&q, &DescriptorSet::default()), Err(GeoError::NoFeatures)));
    }

    #[test]
    fn self_matching() {
        let ds: Vec<Descriptor> = (0..6)
            .map(|i| {
                let v: Vec<f32> = (0..8).map(|j| ((i * 5 + j * 3) % 7) as f32 + 0.1).collect();
                Descriptor::new(v, AffineRegion::circle(i as f32, 0.0, 1.0))
            })
            .collect();
        let set = DescriptorSet::new("s", ds);
        let ms = match_features(&set, &set).unwrap();
        assert_eq!(ms.len(), 6);
        for (i, m) in ms.iter().enumerate() {
            assert_eq!(m.db_index, i);
            assert!(m.distance < 1e-6);
        }
    }
}
