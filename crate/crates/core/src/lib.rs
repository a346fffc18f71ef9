//! Whole-slide image search with binary barcodes.
//!
//! A slide is reduced to a mosaic of representative patches, each patch to a
//! feature vector, and each vector to a MinMax barcode. Slides are compared by
//! the median of per-patch minimum Hamming distances.

pub mod barcode;
pub mod error;
pub mod eval;
pub mod features;
pub mod index_store;
pub mod kmeans;
pub mod mosaic;
pub mod search;
pub mod slide_io;
pub mod tissue;

pub use barcode::{hamming, minmax_barcode, Barcode, BunchOfBarcodes};
pub use error::{Error, Result};
pub use eval::{
    confusion_matrix, correct_retrieval_counts, loo_accuracy, random_baseline, run_plan, Attribute, ConfusionReport,
    EvalPlan, EvalReport, EvalSummary, ExperimentSpec,
};
pub use features::{
    import_external_features, ExternalFeatures, ExtractorDescriptor, ExtractorKind, FeatureExtractor, FeatureVector,
    ReferenceExtractor,
};
pub use index_store::{build_index, index_slide, load_index, save_index, ArchiveIndex, IndexedSlide, Placement};
pub use mosaic::{build_mosaic, IndexingConfig, Mosaic, PatchRef};
pub use search::{classify_by_vote, patch_knn, scan_distance, scan_knn, ScanHit, ScanQuery, SearchMode, SearchResult, Vote};
pub use slide_io::{generate_synthetic_corpus, open_slide, CorpusSpec, SlideLabels, SlidePyramid};
pub use tissue::{segment_tissue, SegParams, TissueMask};
