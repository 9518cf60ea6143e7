//! Desk-scale versions of the diagnostic experiments: the dataset-property
//! sweep, the metric ablation, the from-scratch ablation and base-vs-novel
//! generalization tracking. Everything runs in `f64` on synthetic
//! hierarchical Gaussian data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalProtocol, EvalResult, EvalSplit, GeneralizationCurve};
use crate::checkpoint::Model;
use crate::data::{
    generate_synthetic, split_by_supercategory, split_shuffled, FewShotDataset, SplitFractions, SplitSpec,
    SyntheticSpec,
};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::heads::Metric;
use crate::pipelines::{generalization_curve, train_classification, train_meta, MetaInit, TrainConfig, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole super-categories per partition: large base/novel shift.
    Super,
    /// Classes shuffled across partitions: small shift.
    Shuffled,
}

impl SplitMode {
    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Super => "super",
            SplitMode::Shuffled => "shuffled",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "super" => Ok(SplitMode::Super),
            "shuffled" => Ok(SplitMode::Shuffled),
            other => Err(Error::config(format!("unknown split mode {other:?}"))),
        }
    }
}

pub fn make_split(ds: &FewShotDataset, mode: SplitMode, fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    match mode {
        SplitMode::Super => split_by_supercategory(ds, fractions, seed),
        SplitMode::Shuffled => split_shuffled(ds, fractions, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSet {
    Small,
    Large,
}

impl TrainingSet {
    pub fn name(self) -> &'static str {
        match self {
            TrainingSet::Small => "small",
            TrainingSet::Large => "large",
        }
    }
}

/// The reduced training set of the dataset-property sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallTrainingSet {
    pub classes: usize,
    pub samples_per_class: usize,
}

fn default_shots() -> Vec<usize> {
    vec![1, 5]
}

fn default_test_tasks() -> usize {
    super::DEFAULT_EVAL_TASKS
}

/// Everything one experiment replicate needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub fractions: SplitFractions,
    #[serde(default)]
    pub split_seed: u64,
    pub classification: TrainConfig,
    /// Meta-stage settings; its episode shot is replaced per evaluated shot.
    pub meta: TrainConfig,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_test_tasks")]
    pub test_tasks: usize,
    #[serde(default)]
    pub test_seed: u64,
    pub small_training_set: Option<SmallTrainingSet>,
    /// Meta epochs for the from-scratch run; a random initialization needs
    /// longer than fine-tuning. Defaults to the meta config's epochs.
    #[serde(default)]
    pub scratch_epochs: Option<usize>,
    /// Meta lr for squared-Euclidean runs. Distances are unbounded, so a
    /// rate tuned for cosine can diverge. Defaults to the meta config's lr.
    #[serde(default)]
    pub sq_euclidean_lr: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.classification.validate()?;
        self.meta.validate()?;
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("shots must be a non-empty list of positive counts"));
        }
        if self.test_tasks == 0 {
            return Err(Error::config("test_tasks must be at least 1"));
        }
        if let Some(lr) = self.sq_euclidean_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("sq_euclidean_lr must be a finite non-negative number, got {lr}")));
            }
        }
        Ok(())
    }

    /// Replicate `r`: every seed shifted by `r`.
    pub fn replicate(&self, r: u64) -> Self {
        let mut c = self.clone();
        c.data.seed += r;
        c.split_seed += r;
        c.classification.seed += r;
        c.meta.seed += r;
        c
    }

    pub fn dataset(&self) -> Result<FewShotDataset> {
        generate_synthetic(&self.data)
    }

    pub fn split(&self, ds: &FewShotDataset, mode: SplitMode) -> Result<SplitSpec> {
        make_split(ds, mode, self.fractions, self.split_seed)
    }

    /// Final test protocol for `shot`-shot tasks.
    pub fn test_protocol(&self, shot: usize) -> EvalProtocol {
        let base = self.meta.eval.episode;
        EvalProtocol {
            episode: EpisodeSpec::new(base.n_way, shot, base.q_query),
            seed: self.test_seed,
            num_tasks: self.test_tasks,
        }
    }

    /// Meta-stage config whose training and validation tasks are `shot`-shot.
    pub fn meta_for_shot(&self, shot: usize, metric: Metric) -> TrainConfig {
        let train = self.meta.meta_episode();
        let mut cfg = self.meta.clone();
        cfg.episode = Some(EpisodeSpec::new(train.n_way, shot, train.q_query));
        cfg.eval.episode.k_shot = shot;
        cfg.metric = metric;
        if metric == Metric::SqEuclidean {
            cfg.lr = self.sq_euclidean_lr.unwrap_or(cfg.lr);
        }
        cfg
    }
}

fn test<T: crate::Scalar>(
    model: &Model<T>,
    ds: &FewShotDataset,
    split: &SplitSpec,
    which: EvalSplit,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    let (metric, tau) = model.scorer();
    evaluate(&model.encoder, metric, tau, ds, split, which, protocol)
}

/// One cell of the dataset-property table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub split: SplitMode,
    pub training_set: TrainingSet,
    pub shot: usize,
    pub classifier_baseline: f64,
    pub meta_baseline: f64,
    /// Meta-Baseline minus Classifier-Baseline, accuracy points.
    pub delta: f64,
}

/// For {super, shuffled} × {small, large} training sets: trains
/// Classifier-Baseline, meta-trains it once per shot, and reports novel-class
/// accuracy of both plus their difference.
pub fn run_dataset_property_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let small = cfg
        .small_training_set
        .ok_or_else(|| Error::config("the dataset-property sweep needs small_training_set"))?;
    let ds = cfg.dataset()?;
    let mut cells = Vec::new();
    for mode in [SplitMode::Super, SplitMode::Shuffled] {
        let full = cfg.split(&ds, mode)?;
        for size in [TrainingSet::Small, TrainingSet::Large] {
            let split = match size {
                TrainingSet::Small => full.subsample_base(small.classes, small.samples_per_class, cfg.split_seed)?,
                TrainingSet::Large => full.clone(),
            };
            cells.extend(property_cells(cfg, &ds, &split, mode, size)?);
        }
    }
    Ok(cells)
}

fn property_cells(
    cfg: &ExperimentConfig,
    ds: &FewShotDataset,
    split: &SplitSpec,
    mode: SplitMode,
    size: TrainingSet,
) -> Result<Vec<SweepCell>> {
    let cls = train_classification::<f64>(ds, split, cfg.classification.clone())?;
    let mut cells = Vec::new();
    for &shot in &cfg.shots {
        let protocol = cfg.test_protocol(shot);
        let before = test(&cls.model, ds, split, EvalSplit::Novel, &protocol)?;
        let meta = train_meta(
            MetaInit::Pretrained(cls.model.encoder.clone()),
            ds,
            split,
            cfg.meta_for_shot(shot, Metric::Cosine),
        )?;
        let after = test(&meta.model, ds, split, EvalSplit::Novel, &protocol)?;
        cells.push(SweepCell {
            split: mode,
            training_set: size,
            shot,
            classifier_baseline: before.mean_accuracy,
            meta_baseline: after.mean_accuracy,
            delta: after.mean_accuracy - before.mean_accuracy,
        });
    }
    Ok(cells)
}

/// Element-wise mean of replicate tables with identical layout.
pub fn mean_sweep(replicates: &[Vec<SweepCell>]) -> Result<Vec<SweepCell>> {
    let first = replicates.first().ok_or_else(|| Error::config("no replicates to average"))?;
    let n = replicates.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let mut sums = [0.0; 3];
            for rep in replicates {
                let c = rep
                    .get(i)
                    .filter(|c| (c.split, c.training_set, c.shot) == (cell.split, cell.training_set, cell.shot))
                    .ok_or_else(|| Error::config("replicate tables differ in layout"))?;
                sums[0] += c.classifier_baseline;
                sums[1] += c.meta_baseline;
                sums[2] += c.delta;
            }
            Ok(SweepCell {
                classifier_baseline: sums[0] / n,
                meta_baseline: sums[1] / n,
                delta: sums[2] / n,
                ..cell.clone()
            })
        })
        .collect()
}

pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = format!(
        "{:<9} {:<6} {:>4} {:>10} {:>10} {:>8}\n",
        "split", "train", "shot", "classifier", "meta", "delta"
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{:<9} {:<6} {:>4} {:>10.2} {:>10.2} {:>+8.2}",
            c.split.name(),
            c.training_set.name(),
            c.shot,
            c.classifier_baseline,
            c.meta_baseline,
            c.delta
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClassifierBaseline,
    MetaBaseline,
    MetaFromScratch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClassifierBaseline => "Classifier-Baseline",
            Method::MetaBaseline => "Meta-Baseline",
            Method::MetaFromScratch => "Meta-Baseline (scratch)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAblationRow {
    pub method: Method,
    pub metric: Metric,
    /// Novel-class accuracy per shot, in `ExperimentConfig::shots` order.
    pub accuracy: Vec<f64>,
}

/// Classifier-Baseline evaluated under each metric (evaluation-only change),
/// then meta-trained under each metric: four rows.
pub fn run_metric_ablation(cfg: &ExperimentConfig, mode: SplitMode) -> Result<Vec<MetricAblationRow>> {
    let ds = cfg.dataset()?;
    let split = cfg.split(&ds, mode)?;
    let cls = train_classification::<f64>(&ds, &split, cfg.classification.clone())?;
    let metrics = [Metric::Cosine, Metric::SqEuclidean];
    let mut rows = Vec::new();
    for metric in metrics {
        let accuracy = cfg
            .shots
            .iter()
            .map(|&shot| {
                let r = evaluate(&cls.model.encoder, metric, None, &ds, &split, EvalSplit::Novel, &cfg.test_protocol(shot))?;
                Ok(r.mean_accuracy)
            })
            .collect::<Result<_>>()?;
        rows.push(MetricAblationRow {
            method: Method::ClassifierBaseline,
            metric,
            accuracy,
        });
    }
    for metric in metrics {
        let accuracy = cfg
            .shots
            .iter()
            .map(|&shot| {
                let meta = train_meta(
                    MetaInit::Pretrained(cls.model.encoder.clone()),
                    &ds,
                    &split,
                    cfg.meta_for_shot(shot, metric),
                )?;
                Ok(test(&meta.model, &ds, &split, EvalSplit::Novel, &cfg.test_protocol(shot))?.mean_accuracy)
            })
            .collect::<Result<_>>()?;
        rows.push(MetricAblationRow {
            method: Method::MetaBaseline,
            metric,
            accuracy,
        });
    }
    Ok(rows)
}

pub fn metric_table(rows: &[MetricAblationRow], shots: &[usize]) -> String {
    let mut out = format!("{:<22} {:<13}", "method", "metric");
    for s in shots {
        let _ = write!(out, " {:>8}", format!("{s}-shot"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<22} {:<13}", r.method.name(), r.metric.name());
        for a in &r.accuracy {
            let _ = write!(out, " {a:>8.2}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScratchAblationRow {
    pub method: Method,
    pub base_gen: f64,
    pub novel_gen: f64,
}

/// Meta-Baseline from a Classifier-Baseline initialization vs meta-training
/// from random initialization, at the first configured shot.
pub fn run_scratch_ablation(cfg: &ExperimentConfig, mode: SplitMode) -> Result<Vec<ScratchAblationRow>> {
    let ds = cfg.dataset()?;
    let split = cfg.split(&ds, mode)?;
    let shot = cfg.shots[0];
    let protocol = cfg.test_protocol(shot);
    let meta_cfg = cfg.meta_for_shot(shot, Metric::Cosine);
    let cls = train_classification::<f64>(&ds, &split, cfg.classification.clone())?;
    let scratch_cfg = TrainConfig {
        epochs: cfg.scratch_epochs.unwrap_or(meta_cfg.epochs),
        ..meta_cfg.clone()
    };
    let runs = [
        (Method::MetaBaseline, MetaInit::Pretrained(cls.model.encoder), meta_cfg),
        (Method::MetaFromScratch, MetaInit::Fresh, scratch_cfg),
    ];
    runs.into_iter()
        .map(|(method, init, run_cfg)| {
            let out = train_meta(init, &ds, &split, run_cfg)?;
            Ok(ScratchAblationRow {
                method,
                base_gen: test(&out.model, &ds, &split, EvalSplit::BaseUnseen, &protocol)?.mean_accuracy,
                novel_gen: test(&out.model, &ds, &split, EvalSplit::Novel, &protocol)?.mean_accuracy,
            })
        })
        .collect()
}

pub fn scratch_table(rows: &[ScratchAblationRow]) -> String {
    let mut out = format!("{:<24} {:>9} {:>9}\n", "method", "base-gen", "novel-gen");
    for r in rows {
        let _ = writeln!(out, "{:<24} {:>9.2} {:>9.2}", r.method.name(), r.base_gen, r.novel_gen);
    }
    out
}

/// Meta-training from Classifier-Baseline with both generalization splits
/// evaluated at every epoch boundary (epoch 0 is the initialization).
pub fn run_generalization_tracking(cfg: &ExperimentConfig, mode: SplitMode) -> Result<(TrainOutput<f64>, GeneralizationCurve)> {
    let ds = cfg.dataset()?;
    let split = cfg.split(&ds, mode)?;
    let cls = train_classification::<f64>(&ds, &split, cfg.classification.clone())?;
    let mut meta_cfg = cfg.meta_for_shot(cfg.shots[0], Metric::Cosine);
    meta_cfg.eval.track_generalization = true;
    let out = train_meta(MetaInit::Pretrained(cls.model.encoder), &ds, &split, meta_cfg)?;
    let curve = generalization_curve(&out.records)?;
    Ok((out, curve))
}

/// Point-wise mean of curves sampled at the same epochs:
/// `(epoch, base_gen, novel_gen)`.
pub fn mean_curve(curves: &[GeneralizationCurve]) -> Result<Vec<(usize, f64, f64)>> {
    let first = curves.first().ok_or_else(|| Error::config("no curves to average"))?;
    let n = curves.len() as f64;
    first
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mut b, mut v) = (0.0, 0.0);
            for c in curves {
                let q = c
                    .points()
                    .get(i)
                    .filter(|q| q.epoch == p.epoch)
                    .ok_or_else(|| Error::config("curves are sampled at different epochs"))?;
                b += q.base_gen.mean_accuracy;
                v += q.novel_gen.mean_accuracy;
            }
            Ok((p.epoch, b / n, v / n))
        })
        .collect()
}

/// The objective discrepancy: starting at the epoch where novel-class
/// accuracy peaks, the longest stretch over which base-class accuracy never
/// decreases. Returns `(peak index, end index, novel drop)` for the end
/// index with the largest drop, if novel accuracy drops at all.
pub fn objective_discrepancy(base: &[f64], novel: &[f64]) -> Option<(usize, usize, f64)> {
    if base.len() != novel.len() || novel.is_empty() {
        return None;
    }
    let peak = (0..novel.len()).fold(0, |best, i| if novel[i] > novel[best] { i } else { best });
    let mut found: Option<(usize, usize, f64)> = None;
    for end in peak + 1..novel.len() {
        if base[end] < base[end - 1] {
            break;
        }
        let drop = novel[peak] - novel[end];
        if drop > 0.0 && found.is_none_or(|f| drop > f.2) {
            found = Some((peak, end, drop));
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrepancy_requires_monotone_base_after_the_novel_peak() {
        let novel = [50.0, 53.0, 52.5, 51.0, 50.0];
        let base = [60.0, 61.0, 62.0, 62.0, 61.0];
        assert_eq!(objective_discrepancy(&base, &novel), Some((1, 3, 2.0)));
        let falling_base = [60.0, 61.0, 60.0, 62.0, 63.0];
        assert_eq!(objective_discrepancy(&falling_base, &novel), None);
        assert_eq!(objective_discrepancy(&base, &[1.0, 2.0, 3.0, 4.0, 5.0]), None);
    }

    #[test]
    fn split_modes_parse() {
        assert_eq!("super".parse::<SplitMode>().unwrap(), SplitMode::Super);
        assert_eq!("shuffled".parse::<SplitMode>().unwrap(), SplitMode::Shuffled);
        assert!("tiered".parse::<SplitMode>().is_err());
    }

    #[test]
    fn meta_config_per_shot_and_metric() {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/experiment.json")).unwrap();
        let mut cfg = ExperimentConfig::from_json(&text).unwrap();
        cfg.sq_euclidean_lr = Some(0.002);
        let cosine = cfg.meta_for_shot(5, Metric::Cosine);
        assert_eq!(cosine.meta_episode().k_shot, 5);
        assert_eq!(cosine.eval.episode.k_shot, 5);
        assert_eq!(cosine.lr, cfg.meta.lr);
        assert_eq!(cfg.meta_for_shot(1, Metric::SqEuclidean).lr, 0.002);
        cfg.sq_euclidean_lr = None;
        assert_eq!(cfg.meta_for_shot(1, Metric::SqEuclidean).lr, cfg.meta.lr);
        cfg.sq_euclidean_lr = Some(f64::NAN);
        assert!(cfg.validate().is_err());
    }
}
