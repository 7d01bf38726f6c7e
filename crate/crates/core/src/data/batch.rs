use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentSpec};
use super::manifest::{Manifest, Split};
use super::raster::{Image, Normalize};
use super::derive_seed;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: PathBuf,
    pub age: f64,
    /// Already resized to the dataset's size.
    pub image: Image,
}

/// One split held in memory after the eval-mode resize.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Split, size: usize) -> Result<Self> {
        let recs = manifest.split(split);
        let samples = par::map_range(recs.len(), |i| {
            let path = manifest.resolve(recs[i]);
            let image = Image::load(&path)?.resize(size, size)?;
            Ok(Sample { path, age: recs[i].age, image })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(Dataset { size, samples })
    }

    pub fn from_samples(size: usize, samples: Vec<Sample>) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| Ok(Sample { image: s.image.resize(size, size)?, ..s }))
            .collect::<Result<_>>()?;
        Ok(Dataset { size, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.age).collect()
    }

    /// Per-channel mean colour over all images, the erase fill value.
    pub fn mean_color(&self) -> [u8; 3] {
        if self.samples.is_empty() {
            return [128; 3];
        }
        let mut acc = [0.0f64; 3];
        for s in &self.samples {
            let m = s.image.channel_means();
            for c in 0..3 {
                acc[c] += m[c];
            }
        }
        acc.map(|v| (v / self.samples.len() as f64).round() as u8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Training augmentation; `None` is the eval-mode pipeline.
    pub augment: Option<AugmentSpec>,
    pub normalize: Normalize,
}

impl BatchOptions {
    pub fn eval(batch_size: usize) -> Self {
        BatchOptions { batch_size, shuffle: false, seed: 0, augment: None, normalize: Normalize::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×3×S×S`.
    pub images: Tensor<f32>,
    pub ages: Vec<f32>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

/// Visit order for `epoch`: identity, or a permutation seeded by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch])));
    }
    order
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    opts: &'a BatchOptions,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

pub fn batches<'a>(ds: &'a Dataset, opts: &'a BatchOptions, epoch: u64) -> Result<BatchIter<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if let Some(a) = &opts.augment {
        a.validate()?;
        if a.size != ds.size {
            return Err(Error::config(format!(
                "augmentation size {} differs from dataset size {}",
                a.size, ds.size
            )));
        }
    }
    Ok(BatchIter { ds, opts, epoch, order: epoch_order(ds.len(), opts.shuffle, opts.seed, epoch), pos: 0 })
}

impl BatchIter<'_> {
    fn build(&self, indices: Vec<usize>) -> Result<Batch> {
        let s = self.ds.size;
        let per = 3 * s * s;
        let planes = par::map_range(indices.len(), |j| -> Result<Vec<f32>> {
            let i = indices[j];
            let base = &self.ds.samples[i].image;
            let im = match &self.opts.augment {
                Some(spec) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.opts.seed, self.epoch, i as u64]));
                    augment(base, spec, &mut rng)?
                }
                None => base.clone(),
            };
            Ok(im.to_chw(&self.opts.normalize))
        });
        let mut data = Vec::with_capacity(indices.len() * per);
        for p in planes {
            data.extend(p?);
        }
        let ages = indices.iter().map(|&i| self.ds.samples[i].age as f32).collect();
        Ok(Batch { images: Tensor::new(vec![indices.len(), 3, s, s], data)?, ages, indices })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                path: PathBuf::from(format!("{i}.png")),
                age: i as f64,
                image: Image::filled(4, 4, [i as u8 * 10, 50, 200]).unwrap(),
            })
            .collect();
        Dataset::from_samples(4, samples).unwrap()
    }

    #[test]
    fn partial_last_batch() {
        let d = ds(10);
        let opts = BatchOptions::eval(4);
        let sizes: Vec<usize> = batches(&d, &opts, 0).unwrap().map(|b| b.unwrap().ages.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_is_seeded_per_epoch() {
        let a = epoch_order(50, true, 3, 1);
        assert_eq!(a, epoch_order(50, true, 3, 1));
        assert_ne!(a, epoch_order(50, true, 3, 2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn disabled_augmentation_matches_eval() {
        let d = ds(5);
        let eval = BatchOptions::eval(5);
        let train = BatchOptions {
            augment: Some(AugmentSpec { brightness: 0.0, contrast: 0.0, rotate_deg: 0.0, ..AugmentSpec::none(4) }),
            seed: 9,
            ..eval.clone()
        };
        let a = batches(&d, &eval, 0).unwrap().next().unwrap().unwrap();
        let b = batches(&d, &train, 3).unwrap().next().unwrap().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(batches(&ds(2), &BatchOptions::eval(0), 0).is_err());
    }
}
