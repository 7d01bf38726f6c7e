//! Manifests, splitting, images, augmentation, synthetic data and batching.

mod augment;
mod batch;
mod manifest;
mod raster;
mod synth;

pub use augment::{augment, blur3, erase, erase_side, jitter, rotate, AugmentSpec};
pub use batch::{batches, epoch_order, Batch, BatchIter, BatchOptions, Dataset, Sample};
pub use manifest::{check_ratios, largest_remainder, split_dataset, Manifest, Record, Split, SplitMode, MANIFEST_HEADER};
pub use raster::{Image, Normalize};
pub use synth::{gen_synthetic, generate, render, sample_age, SynthSpec, MAX_AGE};

/// Folds `parts` into one 64-bit seed (splitmix64 finaliser per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
