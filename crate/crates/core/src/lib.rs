//! Lesion annotation toolkit.
//!
//! Mines multi-label lesion annotations from radiology-report sentences with a
//! hierarchical lexicon, and trains/evaluates a noise-robust multi-label
//! classifier with class-balanced, bootstrapped loss and multi-scale
//! ROI-pooled features.

pub mod dataset;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ontology;
pub mod preprocess;
pub mod textmine;

/// Sizes the global worker pool used for record mining and per-label
/// evaluation. One thread gives bit-identical output to any other count
/// because all parallel maps preserve input order.
pub fn configure_threads(n: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()
}
