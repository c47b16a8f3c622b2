//! Labeled face images, the synthetic face generator, augmentation and
//! subject-disjoint folds.

pub mod augment;
pub mod folds;
pub mod io;
pub mod synthetic;

use ndarray::{Array3, Array4, Axis};

use crate::error::{invalid, Result};
use crate::nn::Real;

pub use augment::{augment, augment_with_provenance, center_crop, AugmentedImage, CropOrigin, ROTATION_ANGLES};
pub use folds::{make_folds, FoldSpec};
pub use synthetic::{
    generate_synthetic, generate_synthetic_dataset, render_face, FactorOracle, SyntheticDataset, SyntheticDesign,
    SyntheticFaceSpec,
};

/// One face image with its expression and identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `H x W x C`, values in `[-1, 1]`.
    pub pixels: Array3<f32>,
    pub expr_label: usize,
    pub identity_label: usize,
    /// Groups the images of one person; folds are built over it.
    pub subject_id: String,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn validate(&self, n_expressions: usize, n_identities: usize) -> Result<()> {
        if self.expr_label >= n_expressions {
            return Err(invalid(format!("expression label {} >= {n_expressions}", self.expr_label)));
        }
        if self.identity_label >= n_identities {
            return Err(invalid(format!("identity label {} >= {n_identities}", self.identity_label)));
        }
        if self.pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(invalid("pixel outside [-1, 1]"));
        }
        Ok(())
    }
}

/// A collection of images sharing one label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub n_expressions: usize,
    pub n_identities: usize,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>, n_expressions: usize, n_identities: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid("empty dataset"))?;
        let dims = first.pixels.dim();
        for img in &images {
            img.validate(n_expressions, n_identities)?;
            if img.pixels.dim() != dims {
                return Err(invalid(format!("mixed image shapes {:?} and {:?}", dims, img.pixels.dim())));
            }
        }
        Ok(Self { images, n_expressions, n_identities })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` of every image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        self.images[0].pixels.dim()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<LabeledImage> {
        idx.iter().map(|&i| self.images[i].clone()).collect()
    }

    /// Relabels identities densely in order of first appearance over sorted
    /// subject ids, so a training split has identity labels `0..n`.
    pub fn with_dense_identities(images: Vec<LabeledImage>, n_expressions: usize) -> Result<Self> {
        let mut ids: Vec<usize> = images.iter().map(|i| i.identity_label).collect();
        ids.sort_unstable();
        ids.dedup();
        let images = images
            .into_iter()
            .map(|mut im| {
                im.identity_label = ids.binary_search(&im.identity_label).expect("present");
                im
            })
            .collect();
        Self::new(images, n_expressions, ids.len())
    }
}

/// Stacks images into the channel-major `(C, N, H, W)` network layout.
pub fn to_batch<T: Real>(images: &[&LabeledImage]) -> Array4<T> {
    let (h, w, c) = images[0].pixels.dim();
    let mut out = Array4::<T>::zeros((c, images.len(), h, w));
    for (n, img) in images.iter().enumerate() {
        for ((y, x, ch), &v) in img.pixels.indexed_iter() {
            out[[ch, n, y, x]] = T::c(v as f64);
        }
    }
    out
}

/// Extracts sample `n` of a `(C, N, H, W)` batch as an `H x W x C` image.
pub fn from_batch<T: Real>(batch: &Array4<T>, n: usize) -> Array3<f32> {
    let sample = batch.index_axis(Axis(1), n);
    let (c, h, w) = sample.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| sample[[ch, y, x]].as_f64() as f32)
}
