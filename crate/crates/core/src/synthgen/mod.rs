//! Parametric word/object corpus with a familiar/novel class split.
//!
//! Familiar classes are seen in training as spoken words paired with
//! cluttered scenes; novel classes only appear at test time, as isolated
//! objects. Every render records which classes it placed so leakage can be
//! audited.

mod audio;
mod dataset;
mod image;
mod vocab;

pub use audio::{synth_word_audio, SAMPLE_RATE};
pub use dataset::{
    build_dataset, AudioItem, AudioSample, ImageSample, Dataset, DatasetConfig, DatasetManifest, ImageItem, PairRecord,
    SplitKind, MANIFEST_SCHEMA_VERSION,
};
pub use image::{
    count_components, read_image_file, synth_image, write_image_file, RawImage, RenderMode,
};
pub use vocab::{generate_vocabulary, ClassSpec, PhonemeUnit, ShapeFamily, Split, VisualRecipe};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {min} {what} classes, got {got}")]
    TooFewClasses {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{pairs} onset-overlap pairs requested but only {available} class pairs available")]
    TooManyOverlaps { pairs: usize, available: usize },
    #[error("distractor pool contains novel class {0}")]
    NovelDistractor(String),
    #[error("insufficient instances: {0}")]
    Insufficient(String),
    #[error("manifest invariant violated: {0}")]
    Invariant(String),
    #[error("could not place {0} shapes without overlap")]
    Placement(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Feature(#[from] crate::featurize::FeatureError),
}

/// SplitMix64 step, used to derive independent per-item seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
