//! The two training stages: whole-classification pre-training and episodic
//! meta-learning on the nearest-centroid metric.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BestModel, Checkpoint, Head, Model, TrainState};
use crate::data::{FewShotDataset, PoolKind, SampleRange, SplitSpec};
use crate::encoder::{Architecture, Encoder};
use crate::episodes::{sample_episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CurvePoint, EvalProtocol, EvalResult, EvalSplit, GeneralizationCurve};
use crate::heads::{episode_logits, ClassifierHead, HeadKind, Metric, MetricHead, MIN_TAU};
use crate::optim::{sgd_step, LrSchedule, SgdConfig, SgdState};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classification,
    Meta,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Classification => "classification",
            Stage::Meta => "meta",
        }
    }
}

fn default_eval_episode() -> EpisodeSpec {
    EpisodeSpec::new(5, 1, 15)
}

fn default_eval_tasks() -> usize {
    200
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// Episodic evaluation run at every epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_eval_episode")]
    pub episode: EpisodeSpec,
    #[serde(default = "default_eval_tasks")]
    pub tasks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep the epoch with the best validation accuracy.
    #[serde(default = "yes")]
    pub select_on_val: bool,
    /// Also evaluate base-class (held-out samples) and novel-class tasks.
    #[serde(default)]
    pub track_generalization: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episode: default_eval_episode(),
            tasks: default_eval_tasks(),
            seed: 0,
            select_on_val: true,
            track_generalization: false,
        }
    }
}

impl EvalSettings {
    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            episode: self.episode,
            seed: self.seed,
            num_tasks: self.tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub architecture: Architecture,
    pub epochs: usize,
    /// Classification: defaults to one pass over the training pool.
    /// Meta: required.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// Samples (classification) or tasks (meta) per step.
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "one")]
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Meta only; defaults to the evaluation episode shape.
    #[serde(default)]
    pub episode: Option<EpisodeSpec>,
    /// Classification only.
    #[serde(default)]
    pub head: HeadKind,
    /// Meta only.
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl TrainConfig {
    /// 50 epochs, lr 0.1 decayed ×0.1 at 60% and 80%, momentum 0.9,
    /// weight decay 5e-4, batches of 64 samples.
    pub fn classification(architecture: Architecture, seed: u64) -> Self {
        Self {
            stage: Stage::Classification,
            architecture,
            epochs: 50,
            batches_per_epoch: None,
            batch_size: 64,
            lr: 0.1,
            lr_decay_epochs: vec![30, 40],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            episode: None,
            head: HeadKind::Linear,
            metric: Metric::Cosine,
            seed,
            eval: EvalSettings::default(),
        }
    }

    /// 20 epochs of 200 batches of 4 tasks, fixed lr 0.001, momentum 0.9.
    pub fn meta(architecture: Architecture, seed: u64) -> Self {
        Self {
            stage: Stage::Meta,
            epochs: 20,
            batches_per_epoch: Some(200),
            batch_size: 4,
            lr: 0.001,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 1.0,
            ..Self::classification(architecture, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config(format!("lr decay factor must be > 0, got {}", self.lr_decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::config("batches per epoch must be at least 1"));
        }
        if self.stage == Stage::Meta && self.batches_per_epoch.is_none() {
            return Err(Error::config("meta training needs batches_per_epoch"));
        }
        if self.eval.tasks == 0 {
            return Err(Error::config("evaluation needs at least one task"));
        }
        self.eval.episode.validate()?;
        self.meta_episode().validate()
    }

    pub fn meta_episode(&self) -> EpisodeSpec {
        self.episode.unwrap_or(self.eval.episode)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            milestones: self.lr_decay_epochs.clone(),
            factor: self.lr_decay_factor,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Statistics of one epoch. Epoch 0 is the model before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    /// Percent.
    pub train_accuracy: Option<f64>,
    pub tau: Option<f64>,
    pub val: Option<EvalResult>,
    pub base_gen: Option<EvalResult>,
    pub novel_gen: Option<EvalResult>,
}

pub fn metrics_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Numeric(format!("metrics record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> std::result::Result<Vec<MetricsRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub const METRICS_CSV_HEADER: &str =
    "stage,epoch,lr,train_loss,train_accuracy,tau,val,val_ci95,base_gen,base_gen_ci95,novel_gen,novel_gen_ci95";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let eval = |r: &Option<EvalResult>| match r {
        Some(r) => format!("{},{}", r.mean_accuracy, r.ci95_halfwidth),
        None => ",".to_string(),
    };
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.stage.name(),
            r.epoch,
            num(r.lr),
            num(r.train_loss),
            num(r.train_accuracy),
            num(r.tau),
            eval(&r.val),
            eval(&r.base_gen),
            eval(&r.novel_gen)
        );
    }
    out
}

/// The generalization curve of every record that tracked both splits.
pub fn generalization_curve(records: &[MetricsRecord]) -> Result<GeneralizationCurve> {
    let mut curve = GeneralizationCurve::new();
    for r in records {
        if let (Some(b), Some(n)) = (&r.base_gen, &r.novel_gen) {
            curve.push(CurvePoint {
                epoch: r.epoch,
                base_gen: b.clone(),
                novel_gen: n.clone(),
                train_loss: r.train_loss,
                tau: r.tau,
            })?;
        }
    }
    Ok(curve)
}

/// Starting point of the meta stage.
pub enum MetaInit<T: Scalar> {
    /// A trained (typically classification-stage) encoder.
    Pretrained(Encoder<T>),
    /// Random initialization from the config's architecture and seed.
    Fresh,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Scalar> {
    /// The selected model: the best validation epoch, or the last epoch when
    /// selection is disabled.
    pub model: Model<T>,
    pub selected_epoch: usize,
    pub records: Vec<MetricsRecord>,
}

/// One training run, advanced an epoch at a time.
pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    ds: &'a FewShotDataset,
    split: &'a SplitSpec,
    pool: Vec<SampleRange>,
    model: Model<T>,
    opt: SgdState<T>,
    next_epoch: usize,
    step: u64,
    best: Option<BestModel<T>>,
    records: Vec<MetricsRecord>,
    batch_losses: Vec<f64>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Classification stage from a fresh encoder and head.
    pub fn classification(ds: &'a FewShotDataset, split: &'a SplitSpec, cfg: TrainConfig) -> Result<Self> {
        if cfg.stage != Stage::Classification {
            return Err(Error::config("config stage is not classification"));
        }
        let encoder = Encoder::init(cfg.architecture.clone(), cfg.seed)?;
        let head = ClassifierHead::init(cfg.head, split.base.len(), cfg.architecture.embed_dim, cfg.seed)?;
        Self::start(ds, split, cfg, encoder, Head::Classifier(head))
    }

    pub fn meta(init: MetaInit<T>, ds: &'a FewShotDataset, split: &'a SplitSpec, cfg: TrainConfig) -> Result<Self> {
        if cfg.stage != Stage::Meta {
            return Err(Error::config("config stage is not meta"));
        }
        let encoder = match init {
            MetaInit::Pretrained(e) => {
                if e.architecture() != &cfg.architecture {
                    return Err(Error::config("pretrained encoder architecture differs from the config"));
                }
                e
            }
            MetaInit::Fresh => Encoder::init(cfg.architecture.clone(), cfg.seed)?,
        };
        let head = Head::Metric(MetricHead::new(cfg.metric));
        Self::start(ds, split, cfg, encoder, head)
    }

    fn start(
        ds: &'a FewShotDataset,
        split: &'a SplitSpec,
        cfg: TrainConfig,
        encoder: Encoder<T>,
        head: Head<T>,
    ) -> Result<Self> {
        let mut t = Self::bare(ds, split, cfg, Model { encoder, head })?;
        let record = t.epoch_record(0, None, None, None)?;
        t.consider(&record);
        t.records.push(record);
        t.next_epoch = 1;
        Ok(t)
    }

    fn bare(ds: &'a FewShotDataset, split: &'a SplitSpec, cfg: TrainConfig, model: Model<T>) -> Result<Self> {
        cfg.validate()?;
        if ds.sample_dim() != cfg.architecture.input_dim {
            return Err(Error::config(format!(
                "dataset samples have {} features, encoder expects {}",
                ds.sample_dim(),
                cfg.architecture.input_dim
            )));
        }
        let pool = split.pool(ds, PoolKind::BaseTrain)?;
        if pool.is_empty() || pool.iter().all(SampleRange::is_empty) {
            return Err(Error::config("no base training samples"));
        }
        if cfg.stage == Stage::Meta {
            cfg.meta_episode().check_pool(&pool)?;
        }
        let pools = [
            (cfg.eval.select_on_val, EvalSplit::Val),
            (cfg.eval.track_generalization, EvalSplit::BaseUnseen),
            (cfg.eval.track_generalization, EvalSplit::Novel),
        ];
        for (_, which) in pools.iter().filter(|(on, _)| *on) {
            cfg.eval.episode.check_pool(&split.pool(ds, which.pool_kind())?)?;
        }
        let model = Model {
            encoder: model.encoder.tracked(),
            head: model.head,
        };
        Ok(Self {
            cfg,
            ds,
            split,
            pool,
            model,
            opt: SgdState::new(),
            next_epoch: 1,
            step: 0,
            best: None,
            records: Vec::new(),
            batch_losses: Vec::new(),
        })
    }

    /// Continues a run from a training checkpoint. `cfg` must match the
    /// checkpointed config except for the number of epochs.
    pub fn resume(ds: &'a FewShotDataset, split: &'a SplitSpec, cfg: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::config("checkpoint holds no training state"))?;
        let saved = ckpt
            .config
            .ok_or_else(|| Error::config("checkpoint holds no training config"))?;
        if (TrainConfig { epochs: cfg.epochs, ..saved }) != cfg {
            return Err(Error::config("training config differs from the checkpointed one"));
        }
        if state.stage != cfg.stage || state.seed != cfg.seed {
            return Err(Error::config("checkpoint stage or seed differs from the config"));
        }
        let mut t = Self::bare(ds, split, cfg, ckpt.model)?;
        t.opt = SgdState { velocity: state.velocity };
        t.next_epoch = state.next_epoch;
        t.step = state.step;
        t.best = state.best;
        t.records = state.records;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    /// Per-step losses of the most recent epoch.
    pub fn batch_losses(&self) -> &[f64] {
        &self.batch_losses
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch - 1
    }

    pub fn is_done(&self) -> bool {
        self.epochs_done() >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: Some(self.cfg.clone()),
            model: self.snapshot(),
            state: Some(TrainState {
                stage: self.cfg.stage,
                seed: self.cfg.seed,
                next_epoch: self.next_epoch,
                step: self.step,
                velocity: self.opt.velocity.clone(),
                best: self.best.clone(),
                records: self.records.clone(),
            }),
        }
    }

    /// Trains one epoch, evaluates, and returns the epoch's record.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let epoch = self.next_epoch;
        let lr = self.cfg.schedule().at(epoch - 1);
        let sgd = SgdConfig {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        self.batch_losses.clear();
        let (loss, acc) = match self.cfg.stage {
            Stage::Classification => self.classification_epoch(epoch, &sgd)?,
            Stage::Meta => self.meta_epoch(&sgd)?,
        };
        let record = self.epoch_record(epoch, Some(lr), Some(loss), Some(acc))?;
        self.consider(&record);
        self.records.push(record.clone());
        self.next_epoch += 1;
        Ok(record)
    }

    pub fn finish(self) -> TrainOutput<T> {
        let (model, selected_epoch) = match self.best {
            Some(b) if self.cfg.eval.select_on_val => (b.model, b.epoch),
            _ => (
                Model {
                    encoder: self.model.encoder.detached(),
                    head: self.model.head,
                },
                self.next_epoch - 1,
            ),
        };
        TrainOutput {
            model,
            selected_epoch,
            records: self.records,
        }
    }

    fn snapshot(&self) -> Model<T> {
        Model {
            encoder: self.model.encoder.detached(),
            head: self.model.head.clone(),
        }
    }

    fn consider(&mut self, record: &MetricsRecord) {
        let Some(val) = &record.val else { return };
        if self.best.as_ref().is_none_or(|b| val.mean_accuracy > b.val_accuracy) {
            self.best = Some(BestModel {
                val_accuracy: val.mean_accuracy,
                epoch: record.epoch,
                model: self.snapshot(),
            });
        }
    }

    fn epoch_record(
        &self,
        epoch: usize,
        lr: Option<f64>,
        train_loss: Option<f64>,
        train_accuracy: Option<f64>,
    ) -> Result<MetricsRecord> {
        let (metric, tau) = self.model.scorer();
        let protocol = self.cfg.eval.protocol();
        let run = |which: EvalSplit| evaluate(&self.model.encoder, metric, tau, self.ds, self.split, which, &protocol);
        let track = self.cfg.eval.track_generalization;
        Ok(MetricsRecord {
            stage: self.cfg.stage,
            epoch,
            lr,
            train_loss,
            train_accuracy,
            tau: self.model.head.tau(),
            val: self.cfg.eval.select_on_val.then(|| run(EvalSplit::Val)).transpose()?,
            base_gen: track.then(|| run(EvalSplit::BaseUnseen)).transpose()?,
            novel_gen: track.then(|| run(EvalSplit::Novel)).transpose()?,
        })
    }

    fn classification_epoch(&mut self, epoch: usize, sgd: &SgdConfig) -> Result<(f64, f64)> {
        let mut order: Vec<(usize, usize)> = self
            .pool
            .iter()
            .enumerate()
            .flat_map(|(label, r)| (r.start..r.end).map(move |i| (label, i)))
            .collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, Purpose::ClassifierBatches, epoch as u64));
        let batches = order.chunks(self.cfg.batch_size);
        let limit = self.cfg.batches_per_epoch.unwrap_or(usize::MAX);
        let dim = self.ds.sample_dim();
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for batch in batches.take(limit) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            let mut labels = Vec::with_capacity(batch.len());
            for &(label, i) in batch {
                let class = &self.ds.classes()[self.pool[label].class_id as usize];
                x.extend(class.sample(i).iter().map(|&v| T::of(v as f64)));
                labels.push(label);
            }
            let x = Tensor::from_vec(x, &[batch.len(), dim])?;
            let Head::Classifier(head) = &self.model.head else {
                unreachable!("classification trainer holds a classifier head")
            };
            let logits = head.logits(&self.model.encoder.forward(&x)?)?;
            let loss = logits.cross_entropy(&labels)?;
            correct += count_correct(&logits, &labels)?;
            seen += labels.len();
            loss_sum += self.apply(loss, sgd)?;
            steps += 1;
        }
        Ok((loss_sum / steps as f64, 100.0 * correct as f64 / seen as f64))
    }

    fn meta_epoch(&mut self, sgd: &SgdConfig) -> Result<(f64, f64)> {
        let spec = self.cfg.meta_episode();
        let batches = self.cfg.batches_per_epoch.expect("validated");
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..batches {
            let mut rng = rng::stream(self.cfg.seed, Purpose::MetaTasks, self.step);
            let Head::Metric(head) = &self.model.head else {
                unreachable!("meta trainer holds a metric head")
            };
            let mut total: Option<Tensor<T>> = None;
            for _ in 0..self.cfg.batch_size {
                let ep = sample_episode::<T, _>(self.ds, &self.pool, &spec, &mut rng)?;
                let (logits, _) = episode_logits(&ep, &self.model.encoder, head)?;
                correct += count_correct(&logits, &ep.query_labels)?;
                seen += ep.query_labels.len();
                let loss = logits.cross_entropy(&ep.query_labels)?;
                total = Some(match total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
            }
            let mean = total.expect("batch size >= 1").scale(T::of(1.0 / self.cfg.batch_size as f64));
            loss_sum += self.apply(mean, sgd)?;
        }
        Ok((loss_sum / batches as f64, 100.0 * correct as f64 / seen as f64))
    }

    /// Backpropagates `loss`, takes one SGD step and returns the loss value.
    fn apply(&mut self, loss: Tensor<T>, sgd: &SgdConfig) -> Result<f64> {
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss at step {}", self.step)));
        }
        loss.backward()?;
        let mut params: Vec<(&mut Tensor<T>, bool)> = self
            .model
            .encoder
            .params_mut()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (p, i % 2 == 0))
            .collect();
        match &mut self.model.head {
            Head::Classifier(h) => params.extend(h.params_mut()),
            Head::Metric(h) => params.push((&mut h.tau, false)),
            Head::None => {}
        }
        sgd_step(params, &mut self.opt, sgd)?;
        self.clamp_tau()?;
        self.step += 1;
        self.batch_losses.push(value);
        Ok(value)
    }

    fn clamp_tau(&mut self) -> Result<()> {
        let tau = match &mut self.model.head {
            Head::Metric(h) => &mut h.tau,
            Head::Classifier(ClassifierHead::Cosine(h)) => &mut h.tau,
            _ => return Ok(()),
        };
        let v = tau.item();
        if !v.is_finite() {
            return Err(Error::Numeric("temperature became non-finite".into()));
        }
        if v < T::of(MIN_TAU) {
            *tau = Tensor::param(vec![T::of(MIN_TAU)], &[1])?;
        }
        Ok(())
    }
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    Ok(logits
        .argmax_rows()?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count())
}

pub fn train_classification<T: Scalar>(
    ds: &FewShotDataset,
    split: &SplitSpec,
    cfg: TrainConfig,
) -> Result<TrainOutput<T>> {
    let mut t = Trainer::classification(ds, split, cfg)?;
    while !t.is_done() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

pub fn train_meta<T: Scalar>(
    init: MetaInit<T>,
    ds: &FewShotDataset,
    split: &SplitSpec,
    cfg: TrainConfig,
) -> Result<TrainOutput<T>> {
    let mut t = Trainer::meta(init, ds, split, cfg)?;
    while !t.is_done() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}
