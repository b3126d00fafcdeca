//! Dataset ingestion, preprocessing and synthetic identities.

mod dataset;
mod image;
mod synth;

pub use dataset::{
    identity_key, load_dataset, DatasetIndex, LayoutConfig, LoadedDataset, Record, Side,
};
pub use image::{
    decode, encode_pgm16, preprocess, resize_bilinear, to_tensor, RawImage, NORM_MEAN, NORM_STD,
};
pub use synth::{
    subject_and_side, synth_dataset, templates, write_synth_dataset, SynthDataset, SynthSpec,
};
