use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FewShotDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

fn default_holdout() -> f64 {
    DEFAULT_HOLDOUT_FRACTION
}

/// Relative weights of the base/val/novel partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub base: f64,
    pub val: f64,
    pub novel: f64,
}

impl SplitFractions {
    pub fn new(base: f64, val: f64, novel: f64) -> Self {
        Self { base, val, novel }
    }

    /// Partition sizes for `total` items: val and novel are rounded shares,
    /// base takes the remainder. Every partition must be non-empty.
    pub fn counts(&self, total: usize) -> Result<[usize; 3]> {
        let parts = [self.base, self.val, self.novel];
        if parts.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        let share = |w: f64| ((total as f64) * w / sum).round() as usize;
        let (val, novel) = (share(self.val), share(self.novel));
        let base = total.saturating_sub(val + novel);
        if base == 0 || val == 0 || novel == 0 {
            return Err(Error::config(format!(
                "fractions {parts:?} over {total} items leave an empty partition ({base}/{val}/{novel})"
            )));
        }
        Ok([base, val, novel])
    }
}

/// Which samples of which classes an operation may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Base classes minus their held-out tail; the only pool training sees.
    BaseTrain,
    /// The held-out tail of each base class ("unseen images").
    BaseHoldout,
    Val,
    Novel,
}

/// A class together with the contiguous sample range an operation may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRange {
    pub class_id: u32,
    pub start: usize,
    pub end: usize,
}

impl SampleRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Disjoint base/val/novel class sets. The last `holdout_fraction` of every
/// base class's samples is reserved for base-class generalization and never
/// used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Cap on the training samples used per base class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_sample_limit: Option<usize>,
}

impl SplitSpec {
    pub fn validate(&self, ds: &FewShotDataset) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(format!(
                "holdout fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.base_sample_limit == Some(0) {
            return Err(Error::config("base_sample_limit must be at least 1"));
        }
        let mut seen = BTreeSet::new();
        for (name, ids) in [("base", &self.base), ("val", &self.val), ("novel", &self.novel)] {
            for &id in ids {
                if ds.class(id).is_none() {
                    return Err(Error::config(format!(
                        "{name} class {id} not in dataset of {} classes",
                        ds.num_classes()
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::config(format!("class {id} assigned twice")));
                }
            }
        }
        for &id in &self.base {
            let n = ds.classes()[id as usize].num_samples();
            if n < 2 {
                return Err(Error::config(format!(
                    "base class {id} has {n} sample(s); holdout needs at least 2"
                )));
            }
        }
        Ok(())
    }

    /// Held-out samples for a base class of `n` samples: the rounded
    /// fraction, at least one, leaving at least one for training.
    pub fn holdout_count(&self, n: usize) -> usize {
        let h = ((n as f64) * self.holdout_fraction).round() as usize;
        h.clamp(1, n.saturating_sub(1).max(1))
    }

    pub fn classes(&self, kind: PoolKind) -> &[u32] {
        match kind {
            PoolKind::BaseTrain | PoolKind::BaseHoldout => &self.base,
            PoolKind::Val => &self.val,
            PoolKind::Novel => &self.novel,
        }
    }

    /// Sample ranges of every class in the pool, in split order.
    pub fn pool(&self, ds: &FewShotDataset, kind: PoolKind) -> Result<Vec<SampleRange>> {
        self.validate(ds)?;
        Ok(self
            .classes(kind)
            .iter()
            .map(|&class_id| {
                let n = ds.classes()[class_id as usize].num_samples();
                let (start, end) = match kind {
                    PoolKind::BaseTrain => {
                        let train = n - self.holdout_count(n);
                        (0, self.base_sample_limit.map_or(train, |l| l.min(train)))
                    }
                    PoolKind::BaseHoldout => (n - self.holdout_count(n), n),
                    PoolKind::Val | PoolKind::Novel => (0, n),
                };
                SampleRange {
                    class_id,
                    start,
                    end,
                }
            })
            .collect())
    }

    /// Smaller training set: a seeded subset of the base classes, each capped
    /// at `samples_per_class` training samples. Val and novel are untouched.
    pub fn subsample_base(&self, num_classes: usize, samples_per_class: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || num_classes > self.base.len() || samples_per_class == 0 {
            return Err(Error::config(format!(
                "cannot keep {num_classes} of {} base classes with {samples_per_class} samples each",
                self.base.len()
            )));
        }
        let mut base = self.base.clone();
        base.shuffle(&mut rng::stream(seed, Purpose::Subsample, 0));
        base.truncate(num_classes);
        base.sort_unstable();
        Ok(Self {
            base,
            base_sample_limit: Some(samples_per_class),
            ..self.clone()
        })
    }
}

fn assign(mut items: Vec<u32>, counts: [usize; 3]) -> [Vec<u32>; 3] {
    let novel = items.split_off(counts[0] + counts[1]);
    let val = items.split_off(counts[0]);
    let mut out = [items, val, novel];
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

/// Assigns whole super-categories to base/val/novel.
pub fn split_by_supercategory(
    ds: &FewShotDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitSpec> {
    if !ds.has_super_categories() {
        return Err(Error::config("super-category split needs every class tagged"));
    }
    let supers: Vec<u32> = ds
        .classes()
        .iter()
        .filter_map(|c| c.super_category)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if supers.len() < 3 {
        return Err(Error::config(format!(
            "super-category split needs at least 3 super-categories, found {}",
            supers.len()
        )));
    }
    let counts = fractions.counts(supers.len())?;
    let mut order = supers;
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let [base_s, val_s, novel_s] = assign(order, counts);
    let members = |set: &[u32]| -> Vec<u32> {
        ds.classes()
            .iter()
            .filter(|c| c.super_category.is_some_and(|s| set.contains(&s)))
            .map(|c| c.class_id)
            .collect()
    };
    Ok(SplitSpec {
        base: members(&base_s),
        val: members(&val_s),
        novel: members(&novel_s),
        holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
        base_sample_limit: None,
    })
}

/// Shuffles all classes uniformly, ignoring super-categories, then
/// partitions them.
pub fn split_shuffled(ds: &FewShotDataset, fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    if ds.num_classes() < 3 {
        return Err(Error::config(format!(
            "shuffled split needs at least 3 classes, found {}",
            ds.num_classes()
        )));
    }
    let counts = fractions.counts(ds.num_classes())?;
    let mut order: Vec<u32> = (0..ds.num_classes() as u32).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let [base, val, novel] = assign(order, counts);
    Ok(SplitSpec {
        base,
        val,
        novel,
        holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
        base_sample_limit: None,
    })
}
