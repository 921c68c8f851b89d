//! Manifests, splitting, image loading, augmentation and synthetic data.

pub mod augment;
pub mod imaging;
pub mod manifest;
pub mod split;
pub mod synth;

use image::{DynamicImage, GrayImage};
use rand::Rng;
use rayon::prelude::*;

pub use augment::{augment, AugmentationPolicy};
pub use imaging::{load_image, prepare_image, VARIANCE_FLOOR};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, GradeRecord, Laterality, Split};
pub use split::{stratified_split, SplitOptions, SplitRatios};
pub use synth::{planted_samples, synth_dataset, synth_samples, PhantomParams, SynthSample};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Decoded, normalized single-channel images with their grades, in a fixed
/// order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub grades: Vec<usize>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn from_gray(items: &[(GrayImage, usize)], size: usize) -> Result<Self> {
        let mut ds = Dataset::default();
        for (i, (img, grade)) in items.iter().enumerate() {
            ds.images.push(prepare_image(&DynamicImage::ImageLuma8(img.clone()), size)?);
            ds.grades.push(*grade);
            ds.names.push(format!("sample_{i:05}"));
        }
        Ok(ds)
    }

    pub fn from_synth(samples: &[SynthSample], size: usize) -> Result<Self> {
        let items: Vec<_> = samples.iter().map(|s| (s.image.clone(), s.params.grade)).collect();
        Self::from_gray(&items, size)
    }

    /// Loads one split in manifest order, decoding in parallel. Records that
    /// fail to decode are skipped and returned alongside.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, size: usize) -> (Self, Vec<Error>) {
        let records = manifest.split(split);
        let loaded: Vec<_> = records
            .par_iter()
            .map(|r| load_image(&manifest.resolve(r), size))
            .collect();
        let mut ds = Dataset::default();
        let mut errors = Vec::new();
        for (r, res) in records.iter().zip(loaded) {
            match res {
                Ok(t) => {
                    ds.images.push(t);
                    ds.grades.push(r.grade);
                    ds.names.push(r.path.display().to_string());
                }
                Err(e) => errors.push(e),
            }
        }
        (ds, errors)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            grades: indices.iter().map(|&i| self.grades[i]).collect(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// Stacks `indices` into an N×`channels`×S×S batch, augmenting each image
    /// in order when a policy and generator are given.
    pub fn batch<T: Real, R: Rng>(
        &self,
        indices: &[usize],
        channels: usize,
        augmentation: Option<(&AugmentationPolicy, &mut R)>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut aug = augmentation;
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::input(format!("sample index {i} out of range")))?;
            let img = match aug.as_mut() {
                Some((policy, rng)) => augment(img, policy, *rng)?,
                None => img.clone(),
            };
            let [_, h, w] = img.shape().try_into().map_err(|_| Error::dim("image must be 1×H×W"))?;
            let planes = imaging::replicate_channels(&img, channels)?;
            items.push(planes.cast::<T>().reshape(&[1, channels, h, w])?);
        }
        let grades = indices.iter().map(|&i| self.grades[i]).collect();
        Ok((Tensor::concat_batch(&items)?, grades))
    }
}
