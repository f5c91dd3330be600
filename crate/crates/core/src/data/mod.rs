//! Labeled image datasets: synthetic generators, loaders, long-tailed
//! subsampling and out-of-distribution pairing.

mod imbalance;
mod source;
pub mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::train::StandardAugment;

pub use imbalance::{build_imbalanced, imbalance_counts, ImbalanceProfile, ImbalanceSpec};
pub use source::{
    load_dataset, pair_ood, read_packed, write_packed, DatasetSource, OodEvalPair, Registry, ResizeRule, PACKED_MAGIC,
};
pub use synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Images with class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub class_names: Vec<String>,
    samples: Vec<(ImageTensor, usize)>,
}

impl LabeledDataset {
    /// Validates label range and that all images share one shape.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        class_names: Vec<String>,
        samples: Vec<(ImageTensor, usize)>,
    ) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 {
            return Err(Error::Empty { what: "class list" });
        }
        if let Some((_, y)) = samples.iter().find(|(_, y)| *y >= classes) {
            return Err(Error::LabelOutOfRange { label: *y, classes });
        }
        if let Some((first, _)) = samples.first() {
            let shape = first.shape();
            if let Some((img, _)) = samples.iter().find(|(i, _)| i.shape() != shape) {
                return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", shape, img.shape())));
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            class_names,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[(ImageTensor, usize)] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<(ImageTensor, usize)> {
        self.samples
    }

    pub fn images(&self) -> Vec<&ImageTensor> {
        self.samples.iter().map(|(i, _)| i).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, y)| *y).collect()
    }

    /// `(H, W, C)` of the images, `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|(i, _)| i.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (_, y) in &self.samples {
            counts[*y] += 1;
        }
        counts
    }

    /// A copy keeping the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("index {i} out of {} samples", self.len())))
            })
            .collect::<Result<_>>()?;
        Self::new(self.name.clone(), self.split, self.class_names.clone(), samples)
    }

    /// The first `n` samples (all when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.samples.truncate(n);
        out
    }

    /// SHA-256 over shapes, labels and the exact pixel bits, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for (img, y) in &self.samples {
            let (ht, w, c) = img.shape();
            for d in [ht, w, c, *y] {
                h.update((d as u64).to_le_bytes());
            }
            for v in img.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Random crop from a zero-padded copy, then an optional horizontal flip.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, aug: &StandardAugment, rng: &mut R) -> ImageTensor {
    let (h, w, c) = image.shape();
    let p = aug.crop_padding as isize;
    let (dy, dx) = if p > 0 {
        (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
    } else {
        (0, 0)
    };
    let flip = aug.horizontal_flip && rng.gen_bool(0.5);
    if dy == 0 && dx == 0 && !flip {
        return image.clone();
    }
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let xs = if flip { w - 1 - x } else { x } as isize + dx;
        let ys = y as isize + dy;
        if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
            0.0
        } else {
            image.get(ys as usize, xs as usize, ch)
        }
    })
    .expect("same shape as a valid image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> LabeledDataset {
        let samples = (0..6)
            .map(|i| (ImageTensor::filled(4, 4, 1, i as f32 / 10.0).unwrap(), i % 3))
            .collect();
        LabeledDataset::new("tiny", Split::Train, vec!["a".into(), "b".into(), "c".into()], samples).unwrap()
    }

    #[test]
    fn counts_subset_and_checksum() {
        let d = tiny();
        assert_eq!(d.class_counts(), vec![2, 2, 2]);
        let s = d.subset(&[0, 3]).unwrap();
        assert_eq!(s.labels(), vec![0, 0]);
        assert_ne!(s.checksum(), d.checksum());
        assert_eq!(d.clone().checksum(), d.checksum());
        assert!(d.subset(&[9]).is_err());
    }

    #[test]
    fn rejects_bad_labels_and_mixed_shapes() {
        let img = ImageTensor::filled(4, 4, 1, 0.0).unwrap();
        assert!(matches!(
            LabeledDataset::new("x", Split::Train, vec!["a".into()], vec![(img.clone(), 1)]),
            Err(Error::LabelOutOfRange { .. })
        ));
        let other = ImageTensor::filled(5, 4, 1, 0.0).unwrap();
        assert!(LabeledDataset::new("x", Split::Train, vec!["a".into()], vec![(img, 0), (other, 0)]).is_err());
    }

    #[test]
    fn augment_preserves_shape_and_identity_when_disabled() {
        let img = ImageTensor::from_fn(6, 6, 2, |y, x, c| (y * 12 + x * 2 + c) as f32 / 100.0).unwrap();
        let mut r = rng::stream(0, &[]);
        assert_eq!(augment(&img, &StandardAugment::default(), &mut r), img);
        let aug = StandardAugment {
            crop_padding: 2,
            horizontal_flip: true,
        };
        for _ in 0..20 {
            assert_eq!(augment(&img, &aug, &mut r).shape(), img.shape());
        }
    }
}
