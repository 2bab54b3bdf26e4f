use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::load_ref;
use super::{HarnessError, Pipeline, PipelineConfig, PipelineInput, PipelineOutput, Stage, StageExt};
use crate::features::DescriptorSet;
use crate::geoverify::{
    match_features, percentile_filter, ransac_homography, render_hotspots, GeoError, Homography, HotspotOverlay,
};
use crate::index::{IdentityIndex, Provenance};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchStatus {
    /// A homography was found; the overlay shows its inliers.
    Verified,
    /// The entry has no stored descriptors, or they could not be read.
    Unverified,
    /// Verification ran but found no consistent geometry.
    GeometryFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct VerifiedMatch {
    pub rank: usize,
    pub individual_id: String,
    pub image_id: String,
    pub distance: f64,
    pub provenance: Provenance,
    pub status: MatchStatus,
    #[serde(default)]
    pub inlier_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<HotspotOverlay>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Ranked, individual-deduplicated candidates for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct QueryResult {
    pub query_image_id: String,
    pub config_hash: String,
    pub k: usize,
    pub matches: Vec<VerifiedMatch>,
    /// Handle under which a caller stored the query embedding for a later confirm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
}

/// Nearest-feature matching, percentile filtering and RANSAC for one image pair.
pub fn verify_pair(
    config: &PipelineConfig,
    query: &DescriptorSet,
    db: &DescriptorSet,
) -> Result<(Homography<f64>, HotspotOverlay), GeoError> {
    let matches = match_features(query, db)?;
    let kept = percentile_filter(&matches, config.verify.percentile)?;
    let fit = ransac_homography::<f64>(&kept, &config.ransac_params())?;
    let inliers: Vec<_> = fit.inliers.iter().map(|&i| kept[i]).collect();
    let mut hom = fit.homography;
    hom.inlier_count = inliers.len();
    let mut overlay = render_hotspots(&inliers, Some(hom.to_f64_array()));
    overlay.query_image_id = query.image_id.clone();
    overlay.db_image_id = db.image_id.clone();
    Ok((hom, overlay))
}

/// Runs the pipeline on `input`, retrieves the top `config.query.k`
/// individuals and verifies each against its stored descriptors.
pub fn query_and_verify<T: Real>(
    index: &IdentityIndex<T>,
    config: &PipelineConfig,
    input: &PipelineInput,
    descriptor_base: Option<&Path>,
) -> Result<QueryResult, HarnessError> {
    if index.is_empty() {
        return Err(HarnessError::Stage {
            stage: Stage::Index,
            source: Box::new(crate::index::IndexError::EmptyDatabase),
        });
    }
    let pipeline = Pipeline::from_index(index, config)?;
    let out = pipeline.run(input)?;
    verify_matches(&pipeline, index, &out, config.query.k, descriptor_base)
}

/// Retrieval and verification for an already computed pipeline output.
/// Without query descriptors every match is left unverified.
pub fn verify_matches<T: Real>(
    pipeline: &Pipeline<T>,
    index: &IdentityIndex<T>,
    output: &PipelineOutput<T>,
    k: usize,
    descriptor_base: Option<&Path>,
) -> Result<QueryResult, HarnessError> {
    let ranked = index.query_individuals(output.embedding.values(), k).stage(Stage::Index)?;
    let matches = ranked
        .par_iter()
        .map(|m| {
            let mut v = VerifiedMatch {
                rank: m.rank,
                individual_id: m.entry.individual_id.clone(),
                image_id: m.entry.image_id.clone(),
                distance: m.distance,
                provenance: m.entry.provenance,
                status: MatchStatus::Unverified,
                inlier_count: 0,
                homography: None,
                overlay: None,
                message: None,
            };
            if output.descriptors.is_empty() {
                v.message = Some("no query descriptors".into());
                return v;
            }
            let Some(reference) = &m.entry.descriptor_ref else {
                return v;
            };
            let db = match load_ref(descriptor_base, reference) {
                Ok(mut db) => {
                    db.image_id = m.entry.image_id.clone();
                    db
                }
                Err(e) => {
                    v.message = Some(e.to_string());
                    return v;
                }
            };
            match verify_pair(&pipeline.config, &output.descriptors, &db) {
                Ok((h, overlay)) => {
                    v.status = MatchStatus::Verified;
                    v.inlier_count = h.inlier_count;
                    v.homography = Some(h.to_f64_array());
                    v.overlay = Some(overlay);
                }
                Err(e) => {
                    v.status = MatchStatus::GeometryFailed;
                    v.message = Some(format!("{}: {e}", Stage::Geoverify));
                }
            }
            v
        })
        .collect();
    Ok(QueryResult {
        query_image_id: output.descriptors.image_id.clone(),
        config_hash: pipeline.config.hash(),
        k,
        matches,
        embedding_ref: None,
    })
}
