//! Hyperspectral cube data model and data preparation.

mod bicubic;
mod cube;
mod dataset;
mod manifest;
mod similarity;
mod synth;

pub use bicubic::{bicubic_resize, cubic_weight, resize_plane, resize_tensor, resize_with, RESAMPLER_TAG};
pub use cube::{decode_cube, encode_cube, load_cube, save_cube, HsiCube, HSC1_MAGIC};
pub use dataset::{
    prepare_dataset, split_permutation, DatasetBundle, DegradationSpec, PatchPair, PatchProtocol, Rect, TestEdge,
};
pub use manifest::{read_bundle, write_bundle, MANIFEST_HEADER, MANIFEST_NAME};
pub use similarity::{cosine_similarity, similarity_curves, SimilarityCurves};
pub use synth::synth_cube;
