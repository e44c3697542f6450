//! Dataset manifests, image decoding, splits and the synthetic generator.

mod dataset;
mod image;
mod manifest;
mod split;
mod synth;

pub use dataset::ImageSet;
pub use image::{
    crop_resize, decode, decode_and_preprocess, decode_png, decode_ppm, encode_ppm, preprocess, preprocess_bytes,
    to_tensor, Codec, RgbImage, INPUT_SIZE, NORM_MEAN, NORM_STD,
};
pub use manifest::{DataSource, DatasetManifest, Sample, MANIFEST_FILE, MANIFEST_VERSION};
pub use split::{kfold, split_dataset, Fold, SplitSpec};
pub use synth::{generate_synthetic_dataset, render_sample, synthetic_class_names, SynthRecipe};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}
