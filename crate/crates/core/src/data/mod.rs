//! Sample pairs, datasets, augmentation and the synthetic generator.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod synth;

pub use augment::{augment, AugmentParams};
pub use dataset::{load_index, loso_folds, write_index, Dataset, Fold, Rect, SamplePair};
pub use synth::{synth_dataset, SynthSpec};
