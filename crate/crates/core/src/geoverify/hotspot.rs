use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::FeatureMatch;

/// One verified pair drawn as an ellipse in each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotPair {
    pub qx: f64,
    pub qy: f64,
    pub qshape: [f64; 4],
    pub dx: f64,
    pub dy: f64,
    pub dshape: [f64; 4],
    pub distance: f64,
    pub intensity: f64,
}

/// Overlay data for a query/database image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotOverlay {
    #[serde(rename = "query-image-id", default, skip_serializing_if = "String::is_empty")]
    pub query_image_id: String,
    #[serde(rename = "db-image-id", default, skip_serializing_if = "String::is_empty")]
    pub db_image_id: String,
    pub pairs: Vec<HotspotPair>,
    pub homography: Option<[f64; 9]>,
}

const FLOOR: f64 = 0.1;

/// Builds ellipse overlays for the inliers of a verified match.
///
/// Intensity is `0.1 + 0.9·(1 − (d − d_min)/d_max)` over the inlier
/// distances: the closest pair gets 1.0, intensity decreases strictly with
/// distance, and never drops below 0.1. Pairs are listed closest first.
pub fn render_hotspots(inliers: &[FeatureMatch], homography: Option<[f64; 9]>) -> HotspotOverlay {
    let dmin = inliers.iter().map(|m| m.distance).fold(f64::INFINITY, f64::min);
    let dmax = inliers.iter().map(|m| m.distance).fold(0.0, f64::max);
    let mut pairs: Vec<HotspotPair> = inliers
        .iter()
        .map(|m| {
            let intensity = if dmax > 0.0 { FLOOR + (1.0 - FLOOR) * (1.0 - (m.distance - dmin) / dmax) } else { 1.0 };
            let (q, d) = (&m.query_region, &m.db_region);
            HotspotPair {
                qx: q.cx as f64,
                qy: q.cy as f64,
                qshape: q.shape.map(f64::from),
                dx: d.cx as f64,
                dy: d.cy as f64,
                dshape: d.shape.map(f64::from),
                distance: m.distance,
                intensity,
            }
        })
        .collect();
    pairs.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    HotspotOverlay { query_image_id: String::new(), db_image_id: String::new(), pairs, homography }
}

/// Placement of the two images in the SVG: query on the left, database
/// image to its right.
#[derive(Debug, Clone, Default)]
pub struct SvgLayout {
    pub query_href: Option<String>,
    pub db_href: Option<String>,
    /// Image sizes in pixels; derived from the ellipse extents when absent.
    pub query_size: Option<(u32, u32)>,
    pub db_size: Option<(u32, u32)>,
}

fn extent(points: impl Iterator<Item = (f64, f64, [f64; 4])>) -> (u32, u32) {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for (x, y, s) in points {
        let rx = (s[0] * s[0] + s[1] * s[1]).sqrt();
        let ry = (s[2] * s[2] + s[3] * s[3]).sqrt();
        w = w.max(x + rx);
        h = h.max(y + ry);
    }
    (w.ceil() as u32, h.ceil() as u32)
}

fn ellipse(out: &mut String, x: f64, y: f64, s: [f64; 4], intensity: f64, color: &str) {
    // SVG matrix(a b c d e f) maps (u, v) to (a·u + c·v + e, b·u + d·v + f).
    let _ = writeln!(
        out,
        r#"    <ellipse cx="0" cy="0" rx="1" ry="1" transform="matrix({:.4} {:.4} {:.4} {:.4} {:.3} {:.3})" fill="{color}" fill-opacity="{:.3}" stroke="{color}" stroke-opacity="{:.3}" vector-effect="non-scaling-stroke"/>"#,
        s[0],
        s[2],
        s[1],
        s[3],
        x,
        y,
        0.35 * intensity,
        intensity
    );
}

/// Side-by-side SVG of the overlay with matching ellipses in both images.
pub fn render_svg(overlay: &HotspotOverlay, layout: &SvgLayout) -> String {
    let q = layout.query_size.unwrap_or_else(|| extent(overlay.pairs.iter().map(|p| (p.qx, p.qy, p.qshape))));
    let d = layout.db_size.unwrap_or_else(|| extent(overlay.pairs.iter().map(|p| (p.dx, p.dy, p.dshape))));
    let gap = 10;
    let width = q.0 + gap + d.0;
    let height = q.1.max(d.1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let image = |s: &mut String, href: &Option<String>, x: u32, size: (u32, u32)| {
        if let Some(h) = href {
            let _ = writeln!(
                s,
                r#"  <image x="{x}" y="0" width="{}" height="{}" xlink:href="{}"/>"#,
                size.0,
                size.1,
                escape(h)
            );
        }
    };
    image(&mut s, &layout.query_href, 0, q);
    image(&mut s, &layout.db_href, q.0 + gap, d);
    s.push_str("  <g class=\"query\">\n");
    for p in &overlay.pairs {
        ellipse(&mut s, p.qx, p.qy, p.qshape, p.intensity, "#ff3b30");
    }
    s.push_str("  </g>\n");
    let _ = writeln!(s, "  <g class=\"database\" transform=\"translate({} 0)\">", q.0 + gap);
    for p in &overlay.pairs {
        ellipse(&mut s, p.dx, p.dy, p.dshape, p.intensity, "#ff3b30");
    }
    s.push_str("  </g>\n</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('"', "&quot;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::AffineRegion;

    fn m(d: f64) -> FeatureMatch {
        let r = AffineRegion::with_shape(10.0, 20.0, [3.0, 1.0, 0.0, 2.0]);
        FeatureMatch { query_index: 0, db_index: 0, query_region: r, db_region: r, distance: d }
    }

    #[test]
    fn intensity_examples() {
        let o = render_hotspots(&[m(0.3)], None);
        assert_eq!(o.pairs[0].intensity, 1.0);
        let o = render_hotspots(&[m(0.2), m(0.1)], None);
        assert!((o.pairs[0].intensity - 1.0).abs() < 1e-12);
        assert!((o.pairs[1].intensity - 0.55).abs() < 1e-12);
        let o = render_hotspots(&[m(0.0), m(0.0)], None);
        assert!(o.pairs.iter().all(|p| p.intensity == 1.0));
    }

    #[test]
    fn intensity_strictly_decreasing() {
        let ms: Vec<_> = [0.5, 0.01, 0.3, 0.9, 0.2].iter().map(|&d| m(d)).collect();
        let o = render_hotspots(&ms, None);
        for w in o.pairs.windows(2) {
            assert!(w[0].distance < w[1].distance && w[0].intensity > w[1].intensity);
        }
        assert!(o.pairs.iter().all(|p| p.intensity >= 0.1 && p.intensity <= 1.0));
    }

    #[test]
    fn json_schema_keys() {
        let o = render_hotspots(&[m(0.1)], Some([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let v = serde_json::to_value(&o).unwrap();
        let p = &v["pairs"][0];
        for k in ["qx", "qy", "qshape", "dx", "dy", "dshape", "distance", "intensity"] {
            assert!(p.get(k).is_some(), "{k}");
        }
        assert_eq!(v["homography"].as_array().unwrap().len(), 9);
        assert_eq!(p["qshape"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn svg_contains_one_ellipse_per_pair_per_image() {
        let o = render_hotspots(&[m(0.1), m(0.2)], None);
        let svg = render_svg(&o, &SvgLayout { query_href: Some("q&1.png".into()), ..Default::default() });
        assert_eq!(svg.matches("<ellipse").count(), 4);
        assert!(svg.contains("matrix(3.0000 0.0000 1.0000 2.0000 10.000 20.000)"));
        assert!(svg.contains("q&amp;1.png"));
        assert!(svg.starts_with("<svg"));
    }
}
