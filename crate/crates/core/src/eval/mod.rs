//! Episodic evaluation with 95% confidence intervals and base-vs-novel
//! generalization curves.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FewShotDataset, PoolKind, SampleRange, SplitSpec};
use crate::encoder::Encoder;
use crate::episodes::{consistent_task, EpisodeSpec, TaskIndices};
use crate::error::{Error, Result};
use crate::heads::{centroids, score, Metric};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod experiments;

/// Tasks per evaluation when none is requested.
pub const DEFAULT_EVAL_TASKS: usize = 800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Held-out samples of the base classes.
    BaseUnseen,
    Val,
    Novel,
}

impl EvalSplit {
    pub fn pool_kind(self) -> PoolKind {
        match self {
            EvalSplit::BaseUnseen => PoolKind::BaseHoldout,
            EvalSplit::Val => PoolKind::Val,
            EvalSplit::Novel => PoolKind::Novel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::BaseUnseen => "base_unseen",
            EvalSplit::Val => "val",
            EvalSplit::Novel => "novel",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_unseen" | "base" => Ok(EvalSplit::BaseUnseen),
            "val" => Ok(EvalSplit::Val),
            "novel" => Ok(EvalSplit::Novel),
            other => Err(Error::config(format!("unknown evaluation split {other:?}"))),
        }
    }
}

/// Which tasks to draw: the first `num_tasks` of the consistent stream
/// keyed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub episode: EpisodeSpec,
    pub seed: u64,
    pub num_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent.
    pub ci95_halfwidth: f64,
    pub num_tasks: usize,
    pub episode: EpisodeSpec,
    pub metric: Metric,
    pub split: EvalSplit,
}

impl EvalResult {
    /// One aligned, human-readable line.
    pub fn line(&self) -> String {
        format!(
            "{:<12} {}-way {}-shot  {:>6.2} +- {:>5.2}  ({} tasks, {})",
            self.split.name(),
            self.episode.n_way,
            self.episode.k_shot,
            self.mean_accuracy,
            self.ci95_halfwidth,
            self.num_tasks,
            self.metric.name()
        )
    }
}

/// Mean and normal-approximation 95% half-width `1.96 · s / √n` of
/// per-task accuracies in `[0, 1]`, both as percentages. `s` is the sample
/// standard deviation, taken as 0 for a single task.
pub fn summarize(accuracies: &[f64]) -> (f64, f64) {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (100.0 * mean, 100.0 * 1.96 * std / n.sqrt())
}

/// Scores every task of the protocol by nearest centroid and returns the
/// per-task fraction of correctly classified queries, in stream order.
pub fn task_accuracies<T: Scalar>(
    encoder: &Encoder<T>,
    metric: Metric,
    tau: Option<f64>,
    ds: &FewShotDataset,
    split: &SplitSpec,
    which: EvalSplit,
    protocol: &EvalProtocol,
) -> Result<Vec<f64>> {
    protocol.episode.validate()?;
    if protocol.num_tasks == 0 {
        return Err(Error::config("evaluation needs at least one task"));
    }
    let pool = split.pool(ds, which.pool_kind())?;
    protocol.episode.check_pool(&pool)?;
    let cache = EmbeddingCache::build(&encoder.detached(), ds, &pool)?;
    let tau = tau.map(|t| Tensor::scalar(T::of(t)));
    (0..protocol.num_tasks as u64)
        .into_par_iter()
        .map(|i| {
            let task = consistent_task(&pool, &protocol.episode, protocol.seed, i)?;
            cache.task_accuracy(&task, metric, tau.as_ref())
        })
        .collect()
}

pub fn evaluate<T: Scalar>(
    encoder: &Encoder<T>,
    metric: Metric,
    tau: Option<f64>,
    ds: &FewShotDataset,
    split: &SplitSpec,
    which: EvalSplit,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    let acc = task_accuracies(encoder, metric, tau, ds, split, which, protocol)?;
    let (mean_accuracy, ci95_halfwidth) = summarize(&acc);
    if !mean_accuracy.is_finite() {
        return Err(Error::Numeric("evaluation produced a non-finite accuracy".into()));
    }
    Ok(EvalResult {
        mean_accuracy,
        ci95_halfwidth,
        num_tasks: protocol.num_tasks,
        episode: protocol.episode,
        metric,
        split: which,
    })
}

/// Embeddings of every pool sample, computed once per evaluation.
struct EmbeddingCache<T: Scalar> {
    dim: usize,
    /// Indexed by class id; rows cover `ranges[id].start..end`.
    rows: Vec<Option<(usize, Vec<T>)>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    fn build(encoder: &Encoder<T>, ds: &FewShotDataset, pool: &[SampleRange]) -> Result<Self> {
        let dim = encoder.architecture().embed_dim;
        let mut rows = vec![None; ds.num_classes()];
        for range in pool {
            let class = &ds.classes()[range.class_id as usize];
            let raw: Vec<T> = class
                .rows(range.start..range.end)
                .iter()
                .map(|&v| T::of(v as f64))
                .collect();
            let emb = encoder.forward(&Tensor::from_vec(raw, &[range.len(), ds.sample_dim()])?)?;
            rows[range.class_id as usize] = Some((range.start, emb.data().to_vec()));
        }
        Ok(Self { dim, rows })
    }

    fn gather(&self, classes: &[u32], per_way: &[Vec<u32>]) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        for (&c, idx) in classes.iter().zip(per_way) {
            let (start, emb) = self.rows[c as usize]
                .as_ref()
                .ok_or_else(|| Error::Sampling(format!("class {c} is not in the evaluation pool")))?;
            for &i in idx {
                let r = i as usize - start;
                data.extend_from_slice(&emb[r * self.dim..(r + 1) * self.dim]);
            }
        }
        let n = data.len() / self.dim;
        Ok(Tensor::from_vec(data, &[n, self.dim])?)
    }

    fn task_accuracy(&self, task: &TaskIndices, metric: Metric, tau: Option<&Tensor<T>>) -> Result<f64> {
        let support = self.gather(&task.classes, &task.support)?;
        let query = self.gather(&task.classes, &task.query)?;
        let centers = centroids(&support, &task.support_labels(), task.classes.len())?;
        let predicted = score(&query, &centers, metric, tau)?.argmax_rows()?;
        let labels = task.query_labels();
        let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// One epoch boundary of a generalization curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub base_gen: EvalResult,
    pub novel_gen: EvalResult,
    pub train_loss: Option<f64>,
    pub tau: Option<f64>,
}

/// Base-class vs novel-class generalization over training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCurve {
    points: Vec<CurvePoint>,
}

pub const CURVE_CSV_HEADER: &str = "epoch,base_gen,base_gen_ci95,novel_gen,novel_gen_ci95,train_loss,tau";

impl GeneralizationCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, point: CurvePoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if point.epoch <= last.epoch {
                return Err(Error::config(format!(
                    "curve epochs must increase: {} after {}",
                    point.epoch, last.epoch
                )));
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn base_gen(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.base_gen.mean_accuracy).collect()
    }

    pub fn novel_gen(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.novel_gen.mean_accuracy).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(CURVE_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4},{},{}",
                p.epoch,
                p.base_gen.mean_accuracy,
                p.base_gen.ci95_halfwidth,
                p.novel_gen.mean_accuracy,
                p.novel_gen.ci95_halfwidth,
                opt(p.train_loss),
                opt(p.tau)
            );
        }
        out
    }
}
