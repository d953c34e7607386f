//! Synthetic phantoms, PGM files, manifests and grouped splits.

mod manifest;
pub mod pgm;
mod phantom;
mod split;
mod threshold;

pub use manifest::{parse_manifest, render_manifest, Dataset, ManifestEntry};
pub use phantom::{
    generate, lesion_profile, render, Lesion, PhantomSpec, Sample, BACKGROUND, LESION_EDGE,
    TEXTURE_AMPLITUDE, TISSUE,
};
pub use split::{make_split, split_with_sizes, Split, SplitConfig};
pub use threshold::{best_threshold_f1, ThresholdResult};
