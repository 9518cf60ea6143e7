//! N-way K-shot task sampling.
//!
//! A task is first drawn as indices ([`TaskIndices`]) and then materialized
//! into tensors ([`Episode`]). Evaluation streams key task `i` on
//! `(seed, i)` alone, so any prefix of a stream is the same regardless of how
//! many tasks were requested.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FewShotDataset, SampleRange};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub const fn new(n_way: usize, k_shot: usize, q_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_query,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_query < 1 {
            return Err(Error::config(format!(
                "episode needs n_way >= 2, k_shot >= 1, q_query >= 1; got {}-way {}-shot {}-query",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.q_query
    }

    /// Checks that `pool` can supply this task shape.
    pub fn check_pool(&self, pool: &[SampleRange]) -> Result<()> {
        self.validate()?;
        if pool.len() < self.n_way {
            return Err(Error::Sampling(format!(
                "{}-way tasks need {} classes, pool has {}",
                self.n_way,
                self.n_way,
                pool.len()
            )));
        }
        if let Some(short) = pool.iter().find(|r| r.len() < self.per_class()) {
            return Err(Error::Sampling(format!(
                "class {} has {} usable samples, {}-shot {}-query needs {}",
                short.class_id,
                short.len(),
                self.k_shot,
                self.q_query,
                self.per_class()
            )));
        }
        Ok(())
    }
}

/// Sample indices of one task, way by way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIndices {
    pub classes: Vec<u32>,
    pub support: Vec<Vec<u32>>,
    pub query: Vec<Vec<u32>>,
}

impl TaskIndices {
    /// Within-task labels of the support rows (way-major order).
    pub fn support_labels(&self) -> Vec<usize> {
        way_labels(&self.support)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        way_labels(&self.query)
    }
}

fn way_labels(per_way: &[Vec<u32>]) -> Vec<usize> {
    per_way
        .iter()
        .enumerate()
        .flat_map(|(way, rows)| std::iter::repeat_n(way, rows.len()))
        .collect()
}

/// A materialized task. Rows are ordered way-major: all samples of way 0,
/// then way 1, and so on.
#[derive(Debug, Clone)]
pub struct Episode<T: Scalar> {
    pub indices: TaskIndices,
    pub support: Tensor<T>,
    pub support_labels: Vec<usize>,
    pub query: Tensor<T>,
    pub query_labels: Vec<usize>,
}

impl<T: Scalar> Episode<T> {
    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(
            self.indices.classes.len(),
            self.indices.support.first().map_or(0, Vec::len),
            self.indices.query.first().map_or(0, Vec::len),
        )
    }
}

/// Draws `n_way` classes, then `k_shot + q_query` distinct samples of each;
/// the first `k_shot` go to support.
pub fn sample_task<R: Rng>(pool: &[SampleRange], spec: &EpisodeSpec, rng: &mut R) -> Result<TaskIndices> {
    spec.check_pool(pool)?;
    let ways = index::sample(rng, pool.len(), spec.n_way);
    let mut task = TaskIndices {
        classes: Vec::with_capacity(spec.n_way),
        support: Vec::with_capacity(spec.n_way),
        query: Vec::with_capacity(spec.n_way),
    };
    for w in ways.iter() {
        let range = pool[w];
        let picks: Vec<u32> = index::sample(rng, range.len(), spec.per_class())
            .iter()
            .map(|i| (range.start + i) as u32)
            .collect();
        task.classes.push(range.class_id);
        task.support.push(picks[..spec.k_shot].to_vec());
        task.query.push(picks[spec.k_shot..].to_vec());
    }
    Ok(task)
}

/// Task `i` of the consistent stream keyed by `seed`.
pub fn consistent_task(pool: &[SampleRange], spec: &EpisodeSpec, seed: u64, i: u64) -> Result<TaskIndices> {
    sample_task(pool, spec, &mut rng::stream(seed, Purpose::EvalTasks, i))
}

fn gather<T: Scalar>(ds: &FewShotDataset, classes: &[u32], per_way: &[Vec<u32>]) -> Result<Tensor<T>> {
    let dim = ds.sample_dim();
    let rows: usize = per_way.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(rows * dim);
    for (class_id, idx) in classes.iter().zip(per_way) {
        let class = ds
            .class(*class_id)
            .ok_or_else(|| Error::Sampling(format!("class {class_id} not in dataset")))?;
        for &i in idx {
            data.extend(class.sample(i as usize).iter().map(|&v| T::of(v as f64)));
        }
    }
    Ok(Tensor::from_vec(data, &[rows, dim])?)
}

pub fn materialize<T: Scalar>(ds: &FewShotDataset, indices: TaskIndices) -> Result<Episode<T>> {
    let support = gather(ds, &indices.classes, &indices.support)?;
    let query = gather(ds, &indices.classes, &indices.query)?;
    Ok(Episode {
        support_labels: indices.support_labels(),
        query_labels: indices.query_labels(),
        indices,
        support,
        query,
    })
}

pub fn sample_episode<T: Scalar, R: Rng>(
    ds: &FewShotDataset,
    pool: &[SampleRange],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode<T>> {
    materialize(ds, sample_task(pool, spec, rng)?)
}

/// The first `count` tasks of the consistent stream keyed by `seed`.
pub fn consistent_task_stream<T: Scalar>(
    ds: &FewShotDataset,
    pool: &[SampleRange],
    spec: &EpisodeSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<Episode<T>>> {
    (0..count as u64)
        .map(|i| materialize(ds, consistent_task(pool, spec, seed, i)?))
        .collect()
}

/// One JSON line per task for audit dumps.
pub fn audit_line(episode: u64, task: &TaskIndices) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        episode: u64,
        #[serde(flatten)]
        task: &'a TaskIndices,
    }
    serde_json::to_string(&Line { episode, task }).expect("task indices serialize")
}
