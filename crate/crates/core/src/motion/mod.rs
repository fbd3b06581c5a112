//! Motion, audio and text data, preprocessing, the synthetic corpus and file formats.

pub mod audio;
pub mod io;
pub mod preprocess;
pub mod sequence;
pub mod skeleton;
pub mod synth;
pub mod text;

pub use audio::{extract_audio_features, AudioConfig};
pub use io::{Condition, DatasetManifest, ManifestEntry, Modality, Sample, Split};
pub use preprocess::{normalize_heading, unify_joints, JointMapping, JointRule};
pub use sequence::{AudioFeatureSequence, MotionSequence};
pub use skeleton::Skeleton;
pub use synth::{synth_dataset, synth_samples, SynthConfig};
pub use text::{TextPrompt, Vocabulary};
