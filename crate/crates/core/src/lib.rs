// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod encoder;
pub mod features;
pub mod filter;
pub mod geoverify;
pub mod harness;
pub mod index;
pub mod linalg;
pub mod preprocess;
pub mod raster;
pub mod scalar;
pub mod synthetic;
pub mod vocab;

mod binio;

pub type FisherVectorF32 = encoder::FisherVector<f32>;
pub type FisherVectorF64 = encoder::FisherVector<f64>;
pub type GmmVocabularyF32 = vocab::GmmVocabulary<f32>;
pub type GmmVocabularyF64 = vocab::GmmVocabulary<f64>;
pub type VocabularyF32 = vocab::Vocabulary<f32>;
pub type VocabularyF64 = vocab::Vocabulary<f64>;
pub type IdentityIndexF32 = index::IdentityIndex<f32>;
pub type IdentityIndexF64 = index::IdentityIndex<f64>;
pub type PipelineF64 = harness::Pipeline<f64>;
