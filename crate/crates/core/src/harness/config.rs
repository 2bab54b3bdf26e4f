use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::encoder::Kernel;
use crate::features::{DescriptorParams, DetectorParams};
use crate::geoverify::RansacParams;
use crate::vocab::GmmParams;

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PreprocessConfig {
    /// Equalize contrast before binarizing grayscale inputs.
    pub equalize: bool,
    pub tile: usize,
    pub clip: f32,
    /// Unsharp-mask amount used when binarizing grayscale inputs.
    pub sharpen: f32,
    pub close_radius: usize,
    pub open_radius: usize,
    pub target_stroke: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { equalize: false, tile: 64, clip: 2.0, sharpen: 1.0, close_radius: 2, open_radius: 1, target_stroke: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct VocabConfig {
    pub pca_dim: usize,
    pub whiten: bool,
    pub components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
    /// Training descriptors are subsampled (seeded) down to this many.
    pub max_training_descriptors: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            pca_dim: 64,
            whiten: false,
            components: 256,
            max_iters: 200,
            tol: 1e-5,
            variance_floor: 1e-4,
            max_training_descriptors: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct KpcaConfig {
    pub enabled: bool,
    /// Capped at the number of database images minus one.
    pub dim: usize,
    pub kernel: Kernel,
}

impl Default for KpcaConfig {
    fn default() -> Self {
        Self { enabled: false, dim: 256, kernel: Kernel::Linear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct EncoderConfig {
    pub alpha: f64,
    pub kpca: KpcaConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { alpha: 0.5, kpca: KpcaConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct VerifyConfig {
    pub percentile: f64,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_confidence: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let r = RansacParams::default();
        Self {
            percentile: 10.0,
            ransac_iterations: r.iterations,
            ransac_threshold: r.threshold,
            ransac_confidence: r.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct QueryConfig {
    pub k: usize,
    /// Length of the accuracy curve in evaluation reports.
    pub k_max: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { k: 5, k_max: 10 }
    }
}

/// Every tunable of the pipeline. The canonical JSON form (sorted keys, no
/// whitespace) is hashed to stamp indexes and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub version: String,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub detector: DetectorParams,
    pub descriptor: DescriptorParams,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub verify: VerifyConfig,
    pub query: QueryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION.to_string(),
            seed: 42,
            preprocess: PreprocessConfig::default(),
            detector: DetectorParams::default(),
            descriptor: DescriptorParams::default(),
            vocab: VocabConfig::default(),
            encoder: EncoderConfig::default(),
            verify: VerifyConfig::default(),
            query: QueryConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: &serde_json::Value) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return bad(&format!("unsupported config version {:?}", self.version));
        }
        if !(self.preprocess.target_stroke > 0.0) {
            return bad("target-stroke must be > 0");
        }
        if self.vocab.pca_dim == 0 || self.vocab.components == 0 {
            return bad("pca-dim and components must be >= 1");
        }
        if !(self.encoder.alpha > 0.0 && self.encoder.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.verify.percentile > 0.0 && self.verify.percentile <= 100.0) {
            return bad("percentile must be in (0, 100]");
        }
        if self.query.k == 0 || self.query.k_max == 0 {
            return bad("k and k-max must be >= 1");
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Compact JSON with object keys in sorted order.
    pub fn canonical_json(&self) -> String {
        canonical_json(&self.to_value())
    }

    pub fn hash(&self) -> String {
        hash_value(&self.to_value())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("config serializes")
    }

    pub fn gmm_params(&self) -> GmmParams {
        GmmParams {
            components: self.vocab.components,
            seed: self.seed,
            max_iters: self.vocab.max_iters,
            tol: self.vocab.tol,
            variance_floor: self.vocab.variance_floor,
        }
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            iterations: self.verify.ransac_iterations,
            threshold: self.verify.ransac_threshold,
            seed: self.seed,
            confidence: self.verify.ransac_confidence,
        }
    }
}

/// Compact serialization with every object's keys sorted.
pub fn canonical_json(v: &serde_json::Value) -> String {
    let mut v = v.clone();
    sort_keys(&mut v);
    serde_json::to_string(&v).expect("json value serializes")
}

fn sort_keys(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.sort_keys();
            m.values_mut().for_each(sort_keys);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(sort_keys),
        _ => {}
    }
}

/// Hex SHA-256 of the canonical JSON form.
pub fn hash_value(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(canonical_json(v).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_json(&c.to_pretty_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let partial = PipelineConfig::from_json(r#"{"seed": 42}"#).unwrap();
        assert_eq!(partial.hash(), c.hash());
    }

    #[test]
    fn any_change_changes_hash() {
        let c = PipelineConfig::default();
        let mut d = c.clone();
        d.verify.percentile = 20.0;
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.encoder.kpca.kernel = Kernel::Rbf { gamma: 0.5 };
        assert_ne!(c.hash(), e.hash());
    }

    #[test]
    fn canonical_form_sorts_keys() {
        let s = PipelineConfig::default().canonical_json();
        let a = s.find("\"descriptor\"").unwrap();
        let b = s.find("\"detector\"").unwrap();
        let c = s.find("\"version\"").unwrap();
        assert!(a < b && b < c);
        assert!(!s.contains('\n'));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_json(r#"{"encoder": {"alpha": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"version": "9"}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"query": {"k": 0}}"#).is_err());
        assert!(PipelineConfig::from_json("not json").is_err());
    }
}
