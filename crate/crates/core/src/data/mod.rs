//! Labeled datasets, their binary on-disk form, class splits, and the
//! hierarchical Gaussian generator used by every desk-scale experiment.

mod format;
mod split;
mod synthetic;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use split::{
    split_by_supercategory, split_shuffled, PoolKind, SampleRange, SplitFractions, SplitSpec,
    DEFAULT_HOLDOUT_FRACTION,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

/// All samples of one class, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: u32,
    pub super_category: Option<u32>,
    samples: Vec<f32>,
    num_samples: usize,
}

impl ClassRecord {
    pub fn new(
        class_id: u32,
        super_category: Option<u32>,
        samples: Vec<f32>,
        sample_dim: usize,
    ) -> Result<Self> {
        if sample_dim == 0 || samples.is_empty() || !samples.len().is_multiple_of(sample_dim) {
            return Err(Error::config(format!(
                "class {class_id}: {} values do not form a non-empty set of {sample_dim}-dim samples",
                samples.len()
            )));
        }
        Ok(Self {
            class_id,
            super_category,
            num_samples: samples.len() / sample_dim,
            samples,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let dim = self.samples.len() / self.num_samples;
        &self.samples[i * dim..(i + 1) * dim]
    }

    /// Contiguous samples `range` as one row-major slice.
    pub fn rows(&self, range: std::ops::Range<usize>) -> &[f32] {
        let dim = self.samples.len() / self.num_samples;
        &self.samples[range.start * dim..range.end * dim]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub name: String,
    sample_dim: usize,
    classes: Vec<ClassRecord>,
}

impl FewShotDataset {
    /// Checks that class ids are dense `0..n` in order and every class shares
    /// `sample_dim`.
    pub fn new(name: impl Into<String>, sample_dim: usize, classes: Vec<ClassRecord>) -> Result<Self> {
        if sample_dim == 0 {
            return Err(Error::config("sample_dim must be at least 1"));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.class_id as usize != i {
                return Err(Error::config(format!(
                    "class ids must be dense: position {i} holds id {}",
                    c.class_id
                )));
            }
            if c.samples.len() != c.num_samples * sample_dim {
                return Err(Error::config(format!(
                    "class {i}: samples are not {sample_dim}-dimensional"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            sample_dim,
            classes,
        })
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&ClassRecord> {
        self.classes.get(id as usize)
    }

    pub fn has_super_categories(&self) -> bool {
        !self.classes.is_empty() && self.classes.iter().all(|c| c.super_category.is_some())
    }
}
