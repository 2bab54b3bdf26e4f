use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_config_hash, stage_error, HarnessError, PipelineConfig, Stage, StageExt};
use crate::encoder::{embed_descriptors, fit_kpca, project_kpca, FisherVector, FvState, KpcaModel};
use crate::features::{decode_descriptors, extract_features, load_descriptors, DescriptorSet};
use crate::index::{DatabaseEntry, IdentityIndex};
use crate::preprocess::{
    binarize, clean_pattern, close, equalize_contrast, normalize_scale, postprocess_mask, PreprocessError,
};
use crate::raster::{PatternImage, Raster};
use crate::scalar::Real;
use crate::vocab::Vocabulary;

/// What the pipeline can start from.
#[derive(Debug, Clone)]
pub enum PipelineInput {
    /// Binary pattern mask.
    Pattern(PatternImage),
    /// Grayscale pattern map, binarized before cleaning.
    Raster(Raster),
    /// Precomputed descriptors; preprocessing and detection are skipped.
    Descriptors(DescriptorSet),
}

const DESCRIPTOR_MAGIC: &[u8; 4] = b"NRPD";

impl PipelineInput {
    /// Loads a descriptor file (by content) or an image. Images whose pixels
    /// are all exactly 0 or 1 are taken as masks.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &id)
    }

    pub fn from_bytes(bytes: &[u8], image_id: &str) -> Result<Self, HarnessError> {
        if bytes.starts_with(DESCRIPTOR_MAGIC) {
            return Ok(Self::Descriptors(decode_descriptors(bytes, image_id).stage(Stage::Features)?));
        }
        let raster = Raster::decode(bytes).stage(Stage::Preprocess)?.with_source_id(image_id);
        if raster.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            Ok(Self::Pattern(PatternImage::from_raster(&raster).with_source_id(image_id)))
        } else {
            Ok(Self::Raster(raster))
        }
    }

    pub fn image_id(&self) -> &str {
        match self {
            Self::Pattern(p) => &p.source_id,
            Self::Raster(r) => &r.source_id,
            Self::Descriptors(d) => &d.image_id,
        }
    }

    pub fn with_image_id(self, id: impl Into<String>) -> Self {
        match self {
            Self::Pattern(p) => Self::Pattern(p.with_source_id(id)),
            Self::Raster(r) => Self::Raster(r.with_source_id(id)),
            Self::Descriptors(mut d) => {
                d.image_id = id.into();
                Self::Descriptors(d)
            }
        }
    }
}

/// Binarize (grayscale input only), clean, and normalize stroke width.
pub fn prepare_pattern(config: &PipelineConfig, input: &PipelineInput) -> Result<PatternImage, HarnessError> {
    prepare_pattern_masked(config, input, None)
}

/// [`prepare_pattern`] restricted to a segmentation mask of the same size.
/// The mask is closed and opened with the configured radii first.
pub fn prepare_pattern_masked(
    config: &PipelineConfig,
    input: &PipelineInput,
    seal: Option<&PatternImage>,
) -> Result<PatternImage, HarnessError> {
    let p = &config.preprocess;
    let mut mask = match input {
        PipelineInput::Pattern(m) => m.clone(),
        PipelineInput::Raster(r) => {
            let gray = r.to_gray();
            let gray =
                if p.equalize { equalize_contrast(&gray, p.tile, p.clip).stage(Stage::Preprocess)? } else { gray };
            binarize(&gray, p.sharpen)
        }
        PipelineInput::Descriptors(_) => {
            return Err(stage_error(Stage::Preprocess, "descriptor input has no pattern image"));
        }
    };
    if let Some(seal) = seal {
        if (seal.width(), seal.height()) != (mask.width(), mask.height()) {
            return Err(stage_error(
                Stage::Preprocess,
                format!(
                    "mask is {}x{} but the image is {}x{}",
                    seal.width(),
                    seal.height(),
                    mask.width(),
                    mask.height()
                ),
            ));
        }
        let seal = postprocess_mask(seal, p.close_radius, p.open_radius);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if !seal.get(x, y) {
                    mask.set(x, y, false);
                }
            }
        }
    }
    // Opening first: closing before it would weld salt noise into blobs.
    let cleaned = close(&clean_pattern(&mask, p.open_radius, 0.0), p.close_radius);
    if cleaned.is_empty() {
        return Err(HarnessError::Stage { stage: Stage::Preprocess, source: Box::new(PreprocessError::EmptyPattern) });
    }
    normalize_scale(&cleaned, p.target_stroke).stage(Stage::Preprocess)
}

/// Descriptors of an input, extracting them from the prepared pattern when needed.
pub fn prepare_descriptors(
    config: &PipelineConfig,
    input: &PipelineInput,
) -> Result<(DescriptorSet, Option<PatternImage>), HarnessError> {
    let (set, pattern) = match input {
        PipelineInput::Descriptors(d) => (d.clone(), None),
        _ => {
            let pattern = prepare_pattern(config, input)?;
            let mut set = extract_features(&pattern, &config.detector, &config.descriptor);
            set.image_id = input.image_id().to_string();
            (set, Some(pattern))
        }
    };
    if set.is_empty() {
        return Err(stage_error(Stage::Features, "no features"));
    }
    Ok((set, pattern))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub embedding: FisherVector<T>,
    pub descriptors: DescriptorSet,
    /// The normalized pattern, absent for descriptor inputs.
    pub pattern: Option<PatternImage>,
}

/// Trained models plus the config they were trained under.
#[derive(Debug, Clone)]
pub struct Pipeline<T> {
    pub config: PipelineConfig,
    pub vocabulary: Vocabulary<T>,
    pub kpca: Option<KpcaModel<T>>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(config: PipelineConfig, vocabulary: Vocabulary<T>, kpca: Option<KpcaModel<T>>) -> Self {
        Self { config, vocabulary, kpca }
    }

    /// Models stored in an index; the index must carry the same config hash.
    pub fn from_index(index: &IdentityIndex<T>, config: &PipelineConfig) -> Result<Self, HarnessError> {
        check_config_hash(&index.config, config)?;
        let vocabulary =
            index.vocabulary.clone().ok_or_else(|| stage_error(Stage::Index, "index has no vocabulary"))?;
        Ok(Self::new(config.clone(), vocabulary, index.kpca.clone()))
    }

    /// Final (or KPCA-compressed) embedding of a descriptor set.
    pub fn embed(&self, set: &DescriptorSet) -> Result<FisherVector<T>, HarnessError> {
        let fv = self.embed_final(set)?;
        match &self.kpca {
            Some(m) => project_kpca(m, &fv).stage(Stage::Encode),
            None => Ok(fv),
        }
    }

    /// A stored embedding in the space the index compares: final embeddings
    /// are projected when the pipeline has a KPCA model.
    pub fn to_index_space(&self, fv: FisherVector<T>) -> Result<FisherVector<T>, HarnessError> {
        if fv.vocab_id() != self.vocabulary.id() {
            return Err(stage_error(Stage::Encode, "embedding is from another vocabulary"));
        }
        match (&self.kpca, fv.state()) {
            (Some(m), FvState::Final) => project_kpca(m, &fv).stage(Stage::Encode),
            (Some(_), FvState::Compressed) | (None, FvState::Final) => Ok(fv),
            (_, s) => Err(stage_error(Stage::Encode, format!("embedding state {s:?} does not match the index"))),
        }
    }

    fn embed_final(&self, set: &DescriptorSet) -> Result<FisherVector<T>, HarnessError> {
        let vectors: Vec<&[f32]> = set.vectors().collect();
        embed_descriptors(&self.vocabulary, &vectors, &set.image_id, self.config.encoder.alpha).stage(Stage::Encode)
    }

    /// clean → normalize_scale → detect/describe (or load) → PCA → encode →
    /// power+L2 → optional KPCA.
    pub fn run(&self, input: &PipelineInput) -> Result<PipelineOutput<T>, HarnessError> {
        let (descriptors, pattern) = prepare_descriptors(&self.config, input)?;
        let embedding = self.embed(&descriptors)?;
        Ok(PipelineOutput { embedding, descriptors, pattern })
    }
}

/// Fits PCA + GMM on the pooled descriptors, subsampled (seeded) to the
/// configured maximum.
pub fn train_vocabulary<T: Real>(
    config: &PipelineConfig,
    sets: &[DescriptorSet],
) -> Result<Vocabulary<T>, HarnessError> {
    let mut pool: Vec<&[f32]> = sets.iter().flat_map(|s| s.vectors()).collect();
    if pool.is_empty() {
        return Err(stage_error(Stage::Vocab, "no training descriptors"));
    }
    let cap = config.vocab.max_training_descriptors;
    if cap > 0 && pool.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut keep = rand::seq::index::sample(&mut rng, pool.len(), cap).into_vec();
        keep.sort_unstable();
        pool = keep.into_iter().map(|i| pool[i]).collect();
    }
    Vocabulary::train(&pool, config.vocab.pca_dim, config.vocab.whiten, &config.gmm_params()).stage(Stage::Vocab)
}

/// One database image for [`build_index`].
#[derive(Debug, Clone)]
pub struct IndexItem {
    pub individual_id: String,
    pub image_id: String,
    pub descriptors: DescriptorSet,
    pub descriptor_ref: Option<String>,
}

/// Encodes every item, fits KPCA when enabled, and returns an index stamped
/// with the config and carrying the models.
pub fn build_index<T: Real>(
    config: &PipelineConfig,
    vocabulary: Vocabulary<T>,
    items: &[IndexItem],
) -> Result<IdentityIndex<T>, HarnessError> {
    let pipeline = Pipeline::new(config.clone(), vocabulary, None);
    let embedded: Vec<EmbeddedItem<T>> = items
        .par_iter()
        .map(|it| {
            Ok(EmbeddedItem {
                individual_id: it.individual_id.clone(),
                image_id: it.image_id.clone(),
                embedding: pipeline.embed_final(&it.descriptors)?,
                descriptor_ref: it.descriptor_ref.clone(),
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    index_embeddings(config, pipeline.vocabulary, embedded)
}

/// One precomputed database embedding for [`index_embeddings`].
#[derive(Debug, Clone)]
pub struct EmbeddedItem<T> {
    pub individual_id: String,
    pub image_id: String,
    /// Power- and L2-normalized, from `vocabulary`.
    pub embedding: FisherVector<T>,
    pub descriptor_ref: Option<String>,
}

/// Index over final embeddings; fits and applies KPCA when enabled.
pub fn index_embeddings<T: Real>(
    config: &PipelineConfig,
    vocabulary: Vocabulary<T>,
    items: Vec<EmbeddedItem<T>>,
) -> Result<IdentityIndex<T>, HarnessError> {
    if items.is_empty() {
        return Err(stage_error(Stage::Index, "empty database"));
    }
    let vocab_id = vocabulary.id();
    for it in &items {
        if it.embedding.state() != FvState::Final {
            return Err(stage_error(Stage::Index, format!("{}: embedding is not final", it.image_id)));
        }
        if it.embedding.vocab_id() != vocab_id {
            return Err(stage_error(Stage::Index, format!("{}: embedding is from another vocabulary", it.image_id)));
        }
    }
    let kp = &config.encoder.kpca;
    let (kpca, state) = if kp.enabled {
        let dim = kp.dim.min(items.len() - 1);
        if dim == 0 {
            return Err(stage_error(Stage::Encode, "kernel PCA needs at least 2 database images"));
        }
        let finals: Vec<FisherVector<T>> = items.iter().map(|it| it.embedding.clone()).collect();
        (Some(fit_kpca(&finals, dim, kp.kernel).stage(Stage::Encode)?), FvState::Compressed)
    } else {
        (None, FvState::Final)
    };
    let mut index = IdentityIndex::new(state, Some(vocab_id));
    index.config = config.to_value();
    for it in items {
        let fv = match &kpca {
            Some(m) => project_kpca(m, &it.embedding).stage(Stage::Encode)?,
            None => it.embedding,
        };
        let mut entry = DatabaseEntry::new(it.individual_id, it.image_id, fv.into_values());
        entry.descriptor_ref = it.descriptor_ref;
        index.add_entry(entry).stage(Stage::Index)?;
    }
    index.vocabulary = Some(vocabulary);
    index.kpca = kpca;
    Ok(index)
}

/// Loads the descriptors a database entry refers to. Relative references
/// resolve against `base`.
pub(crate) fn load_ref(base: Option<&Path>, reference: &str) -> Result<DescriptorSet, HarnessError> {
    let p = Path::new(reference);
    let full = match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    };
    load_descriptors(full).stage(Stage::Geoverify)
}
