//! FID, diversity, beat alignment, text retrieval and reconstruction accuracy.

pub mod beats;
pub mod features;
pub mod recon;
pub mod retrieval;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use beats::{beat_align, detect_motion_beats, DEFAULT_SIGMA_FRAMES};
pub use features::{diversity, fid, geometric_features, kinetic_features, FeatureKind, FeatureSet};
pub use recon::{recon_accuracy, ReconAccuracy};
pub use retrieval::{retrieval_accuracy, train_retrieval_encoder, RetrievalConfig, RetrievalEncoder, RetrievalScore};

/// One evaluation run: metric values, the resolved config and the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
