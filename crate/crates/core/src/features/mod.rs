//! Patch feature extraction behind a pluggable boundary.

mod external;
mod reference;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mosaic::PatchRef;

pub use external::{format_external_features, import_external_features, parse_external_features, ExternalFeatures, PatchKey};
pub use reference::{raw_reference_descriptor, ReferenceExtractor, REFERENCE_DIM, REFERENCE_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub extractor_id: String,
    /// The descriptor had zero norm and was left as the zero vector.
    pub degenerate: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            values,
            extractor_id: extractor_id.into(),
            degenerate: false,
        })
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    BuiltIn,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub extractor_id: String,
    pub d: usize,
    pub kind: ExtractorKind,
}

/// Turns an indexing-magnification patch into a feature vector. Pixels are
/// supplied lazily so extractors backed by precomputed features never read
/// the slide.
pub trait FeatureExtractor: Send + Sync {
    fn descriptor(&self) -> ExtractorDescriptor;

    fn extract(&self, patch: &PatchRef, pixels: &dyn Fn() -> Result<RgbImage>) -> Result<FeatureVector>;
}
