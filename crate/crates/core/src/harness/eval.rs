use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_index, prepare_descriptors, train_vocabulary, HarnessError, IndexItem, Pipeline, PipelineConfig,
    PipelineInput, Stage, StageExt,
};
use crate::binio::write_atomic;
use crate::features::{save_descriptors, DescriptorSet};
use crate::index::{EvalQuery, EvalReport, IdentityIndex};
use crate::scalar::Real;
use crate::vocab::load_vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Database,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ManifestEntry {
    pub image_id: String,
    pub individual_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_path: Option<String>,
    /// Used instead of the pattern when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_path: Option<String>,
}

/// Evaluation dataset. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Pretrained vocabulary; otherwise one is trained on the database split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self { entries, vocabulary: None, base_dir: base_dir.into() }
    }

    /// Reads `{"entries": [...]}` or a bare entry array.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Form {
            Full(Manifest),
            Bare(Vec<ManifestEntry>),
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let form: Form =
            serde_json::from_str(&text).map_err(|e| HarnessError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m = match form {
            Form::Full(m) => m,
            Form::Bare(entries) => Manifest::new(entries, PathBuf::new()),
        };
        let abs = std::path::absolute(path)?;
        m.base_dir = abs.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Manifest(m));
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if e.pattern_path.is_none() && e.descriptor_path.is_none() {
                return bad(format!("{}: needs pattern-path or descriptor-path", e.image_id));
            }
            if let Some(prev) = seen.insert(&e.image_id, e.split) {
                return if prev != e.split {
                    bad(format!("image-id {} appears in both splits", e.image_id))
                } else {
                    bad(format!("duplicate image-id {}", e.image_id))
                };
            }
        }
        if self.split(Split::Database).next().is_none() {
            return bad("empty database split".into());
        }
        if self.split(Split::Query).next().is_none() {
            return bad("empty query split".into());
        }
        Ok(())
    }

    fn input(&self, e: &ManifestEntry) -> Result<PipelineInput, HarnessError> {
        let path = match (&e.descriptor_path, &e.pattern_path) {
            (Some(d), _) => self.resolve(d),
            (None, Some(p)) => self.resolve(p),
            (None, None) => unreachable!("validated"),
        };
        Ok(PipelineInput::from_path(path)?.with_image_id(e.image_id.clone()))
    }
}

/// An image excluded from the evaluation, with the stage-labeled reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SkippedImage {
    pub image_id: String,
    pub split: Split,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct IndividualStats {
    pub queries: usize,
    /// Hits at k = 1..=k_max.
    pub hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalOutput {
    pub config_hash: String,
    pub database_images: usize,
    pub database_individuals: usize,
    pub report: EvalReport,
    pub per_individual: BTreeMap<String, IndividualStats>,
    pub skipped: Vec<SkippedImage>,
}

impl EvalOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per query: id, individual, true rank, top-ranked individuals.
    pub fn queries_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query-id", "individual-id", "true-rank", "ranking"]).expect("in-memory write");
        for q in &self.report.queries {
            let rank = q.true_rank.map(|r| r.to_string()).unwrap_or_default();
            w.write_record([q.query_id.as_str(), q.individual_id.as_str(), &rank, &q.ranking.join(" ")])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }

    /// `k,accuracy` rows of the top-k curve.
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "accuracy"]).expect("in-memory write");
        for (i, a) in self.report.accuracy.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{a:.6}")]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }

    /// Writes `report.json`, `queries.csv` and `curve.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.json"), self.to_json().as_bytes())?;
        write_atomic(&dir.join("queries.csv"), self.queries_csv().as_bytes())?;
        write_atomic(&dir.join("curve.csv"), self.curve_csv().as_bytes())?;
        Ok(())
    }
}

fn skippable(e: &HarnessError) -> bool {
    matches!(e.stage(), Some(Stage::Preprocess | Stage::Features))
}

type Extracted<'a> = (Vec<IndexItem>, Vec<(&'a ManifestEntry, DescriptorSet)>, Vec<SkippedImage>);

/// Descriptors for `entries`, split by role, with skippable failures set aside.
fn extract<'a>(
    config: &PipelineConfig,
    manifest: &Manifest,
    entries: &'a [ManifestEntry],
) -> Result<Extracted<'a>, HarnessError> {
    let extracted: Vec<(&ManifestEntry, Result<DescriptorSet, HarnessError>)> = entries
        .par_iter()
        .map(|e| {
            let r = manifest.input(e).and_then(|input| prepare_descriptors(config, &input)).map(|(d, _)| d);
            (e, r)
        })
        .collect();
    let mut skipped = Vec::new();
    let mut db_items = Vec::new();
    let mut query_sets = Vec::new();
    for (e, r) in extracted {
        match r {
            Ok(set) => match e.split {
                Split::Database => db_items.push(IndexItem {
                    individual_id: e.individual_id.clone(),
                    image_id: e.image_id.clone(),
                    descriptor_ref: e
                        .descriptor_path
                        .as_ref()
                        .map(|p| manifest.resolve(p).to_string_lossy().into_owned()),
                    descriptors: set,
                }),
                Split::Query => query_sets.push((e, set)),
            },
            Err(err) if skippable(&err) => {
                skipped.push(SkippedImage { image_id: e.image_id.clone(), split: e.split, reason: err.to_string() })
            }
            Err(err) => return Err(err),
        }
    }
    Ok((db_items, query_sets, skipped))
}

fn index_items<T: Real>(
    config: &PipelineConfig,
    manifest: &Manifest,
    items: &[IndexItem],
) -> Result<IdentityIndex<T>, HarnessError> {
    let vocabulary = match &manifest.vocabulary {
        Some(p) => load_vocabulary::<T>(manifest.resolve(p)).stage(Stage::Vocab)?,
        None => {
            let sets: Vec<DescriptorSet> = items.iter().map(|i| i.descriptors.clone()).collect();
            train_vocabulary(config, &sets)?
        }
    };
    build_index(config, vocabulary, items)
}

/// Index over the database split of a manifest. Query entries are ignored.
///
/// Entries without a descriptor file get their extracted descriptors saved
/// as `<descriptor_dir>/<image-id>.nrpd` (when given) so matches against
/// them can be verified.
pub fn build_index_from_manifest<T: Real>(
    config: &PipelineConfig,
    manifest: &Manifest,
    descriptor_dir: Option<&Path>,
) -> Result<(IdentityIndex<T>, Vec<SkippedImage>), HarnessError> {
    config.validate()?;
    let entries: Vec<ManifestEntry> = manifest.split(Split::Database).cloned().collect();
    if entries.is_empty() {
        return Err(HarnessError::Manifest("empty database split".into()));
    }
    let (mut items, _, skipped) = extract(config, manifest, &entries)?;
    if let Some(dir) = descriptor_dir {
        std::fs::create_dir_all(dir)?;
        for it in items.iter_mut().filter(|it| it.descriptor_ref.is_none()) {
            let path = dir.join(format!("{}.nrpd", sanitize_file_name(&it.image_id)));
            save_descriptors(&it.descriptors, &path).stage(Stage::Features)?;
            it.descriptor_ref = Some(path.to_string_lossy().into_owned());
        }
    }
    Ok((index_items(config, manifest, &items)?, skipped))
}

fn sanitize_file_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

/// Builds an index from the database split, encodes the query split and
/// reports top-k accuracy for k = 1..=`config.query.k_max`.
///
/// Images whose pattern is empty after cleaning or that yield no features
/// are excluded and listed in `skipped`; any other failure aborts.
pub fn run_eval<T: Real>(config: &PipelineConfig, manifest: &Manifest) -> Result<EvalOutput, HarnessError> {
    config.validate()?;
    manifest.validate()?;
    let (db_items, query_sets, skipped) = extract(config, manifest, &manifest.entries)?;
    let index: IdentityIndex<T> = index_items(config, manifest, &db_items)?;
    let pipeline = Pipeline::from_index(&index, config)?;
    report_queries(&index, &pipeline, &query_sets, skipped, config.query.k_max)
}

/// Evaluates the query split of `manifest` against an existing index; the
/// database split is ignored.
pub fn eval_index<T: Real>(
    index: &IdentityIndex<T>,
    config: &PipelineConfig,
    manifest: &Manifest,
    k_max: usize,
) -> Result<EvalOutput, HarnessError> {
    config.validate()?;
    let pipeline = Pipeline::from_index(index, config)?;
    let entries: Vec<ManifestEntry> = manifest.split(Split::Query).cloned().collect();
    if entries.is_empty() {
        return Err(HarnessError::Manifest("empty query split".into()));
    }
    let (_, query_sets, skipped) = extract(config, manifest, &entries)?;
    report_queries(index, &pipeline, &query_sets, skipped, k_max)
}

fn report_queries<T: Real>(
    index: &IdentityIndex<T>,
    pipeline: &Pipeline<T>,
    query_sets: &[(&ManifestEntry, DescriptorSet)],
    skipped: Vec<SkippedImage>,
    k_max: usize,
) -> Result<EvalOutput, HarnessError> {
    let queries: Vec<EvalQuery<T>> = query_sets
        .par_iter()
        .map(|(e, set)| {
            Ok(EvalQuery {
                query_id: e.image_id.clone(),
                individual_id: e.individual_id.clone(),
                embedding: pipeline.embed(set)?.into_values(),
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let report = index.evaluate_topk(&queries, k_max).stage(Stage::Index)?;

    let mut per_individual: BTreeMap<String, IndividualStats> = BTreeMap::new();
    for q in &report.queries {
        let s = per_individual
            .entry(q.individual_id.clone())
            .or_insert_with(|| IndividualStats { queries: 0, hits: vec![0; k_max] });
        s.queries += 1;
        if let Some(r) = q.true_rank.filter(|&r| r <= k_max) {
            s.hits.iter_mut().skip(r - 1).for_each(|h| *h += 1);
        }
    }
    let individuals: HashSet<&str> = index.entries().iter().map(|e| e.individual_id.as_str()).collect();
    Ok(EvalOutput {
        config_hash: pipeline.config.hash(),
        database_images: index.len(),
        database_individuals: individuals.len(),
        report,
        per_individual,
        skipped,
    })
}
