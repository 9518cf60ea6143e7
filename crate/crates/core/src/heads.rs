//! Classification heads for whole-classification training and the
//! nearest-centroid metric heads used for few-shot scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Added to vector norms before cosine normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Lower bound enforced on learnable temperatures after every update.
pub const MIN_TAU: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    SqEuclidean,
}

impl Metric {
    /// Starting temperature: 10 for cosine, 0.1 for squared Euclidean.
    pub fn default_tau(self) -> f64 {
        match self {
            Metric::Cosine => 10.0,
            Metric::SqEuclidean => 0.1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::SqEuclidean => "sq_euclidean",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "sq_euclidean" | "euclidean" => Ok(Metric::SqEuclidean),
            other => Err(Error::config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Mean support embedding of each way. Rows of `support` are labeled by
/// `labels` in `0..n_way`.
pub fn centroids<T: Scalar>(support: &Tensor<T>, labels: &[usize], n_way: usize) -> Result<Tensor<T>> {
    let (rows, _) = support.dims2("centroids")?;
    if labels.len() != rows {
        return Err(TensorError::Shape {
            op: "centroids",
            left: support.shape().to_vec(),
            right: vec![labels.len()],
        }
        .into());
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(TensorError::Index { label: l, classes: n_way }.into());
        }
        counts[l] += 1;
    }
    if let Some(way) = counts.iter().position(|&c| c == 0) {
        return Err(TensorError::Contract(format!("centroids: way {way} has no support samples")).into());
    }
    // Averaging matrix A[way, row] = 1/|S_way| for rows of that way.
    let mut avg = vec![T::zero(); n_way * rows];
    for (r, &l) in labels.iter().enumerate() {
        avg[l * rows + r] = T::one() / T::of(counts[l] as f64);
    }
    Ok(Tensor::from_vec(avg, &[n_way, rows])?.matmul(support)?)
}

/// Similarity logits `[M × N]` of queries against centroids. `tau` scales
/// the raw score; `None` leaves it unscaled.
pub fn score<T: Scalar>(
    query: &Tensor<T>,
    centroids: &Tensor<T>,
    metric: Metric,
    tau: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (_, d) = query.dims2("score")?;
    let (_, d2) = centroids.dims2("score")?;
    if d != d2 {
        return Err(TensorError::Shape {
            op: "score",
            left: query.shape().to_vec(),
            right: centroids.shape().to_vec(),
        }
        .into());
    }
    let raw = match metric {
        Metric::Cosine => {
            let eps = T::of(NORM_EPS);
            let q = query.normalize_rows(eps)?;
            let w = centroids.normalize_rows(eps)?;
            q.matmul(&w.transpose()?)?
        }
        Metric::SqEuclidean => query.sq_distances(centroids)?.neg(),
    };
    Ok(match tau {
        Some(t) => raw.mul(t)?,
        None => raw,
    })
}

/// Nearest-centroid head with a learnable temperature.
#[derive(Debug, Clone)]
pub struct MetricHead<T: Scalar> {
    pub metric: Metric,
    pub tau: Tensor<T>,
}

impl<T: Scalar> MetricHead<T> {
    pub fn new(metric: Metric) -> Self {
        Self::with_tau(metric, metric.default_tau())
    }

    pub fn with_tau(metric: Metric, tau: f64) -> Self {
        Self {
            metric,
            tau: Tensor::scalar(T::of(tau)).requires_grad(),
        }
    }

    pub fn tau_value(&self) -> f64 {
        self.tau.item().f64()
    }

    pub fn logits(&self, query: &Tensor<T>, centroids: &Tensor<T>) -> Result<Tensor<T>> {
        score(query, centroids, self.metric, Some(&self.tau))
    }

    pub fn cast<U: Scalar>(&self) -> MetricHead<U> {
        MetricHead {
            metric: self.metric,
            tau: self.tau.cast(),
        }
    }
}

/// Mean query cross-entropy of one episode. Support and query pass through
/// the encoder together.
pub fn episode_loss<T: Scalar>(episode: &Episode<T>, encoder: &Encoder<T>, head: &MetricHead<T>) -> Result<Tensor<T>> {
    let (logits, _) = episode_logits(episode, encoder, head)?;
    Ok(logits.cross_entropy(&episode.query_labels)?)
}

/// Query logits of one episode, plus the number of ways.
pub fn episode_logits<T: Scalar>(
    episode: &Episode<T>,
    encoder: &Encoder<T>,
    head: &MetricHead<T>,
) -> Result<(Tensor<T>, usize)> {
    let n_way = episode.indices.classes.len();
    let n_support = episode.support_labels.len();
    let (_, dim) = episode.support.dims2("episode")?;
    let rows = n_support + episode.query_labels.len();
    let mut both = Vec::with_capacity(rows * dim);
    both.extend_from_slice(episode.support.data());
    both.extend_from_slice(episode.query.data());
    let emb = encoder.forward(&Tensor::from_vec(both, &[rows, dim])?)?;
    let support = emb.slice_rows(0, n_support)?;
    let query = emb.slice_rows(n_support, rows)?;
    let centers = centroids(&support, &episode.support_labels, n_way)?;
    Ok((head.logits(&query, &centers)?, n_way))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Linear,
    Cosine,
}

/// `x · Wᵀ + b` over all base classes.
#[derive(Debug, Clone)]
pub struct LinearHead<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `τ · cos(w_c, x)` over all base classes.
#[derive(Debug, Clone)]
pub struct CosineHead<T: Scalar> {
    pub weight: Tensor<T>,
    pub tau: Tensor<T>,
}

#[derive(Debug, Clone)]
pub enum ClassifierHead<T: Scalar> {
    Linear(LinearHead<T>),
    Cosine(CosineHead<T>),
}

impl<T: Scalar> ClassifierHead<T> {
    /// Glorot-uniform class weights from the initialization stream reserved
    /// for heads; zero bias or τ = 10.
    pub fn init(kind: HeadKind, num_classes: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || embed_dim == 0 {
            return Err(Error::config("classifier head needs at least one class and dimension"));
        }
        let mut rng = rng::stream(seed, Purpose::Init, HEAD_INIT_STREAM);
        let bound = (6.0 / (num_classes + embed_dim) as f64).sqrt();
        let w: Vec<T> = (0..num_classes * embed_dim)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let weight = Tensor::param(w, &[num_classes, embed_dim])?;
        Ok(match kind {
            HeadKind::Linear => ClassifierHead::Linear(LinearHead {
                weight,
                bias: Tensor::param(vec![T::zero(); num_classes], &[num_classes])?,
            }),
            HeadKind::Cosine => ClassifierHead::Cosine(CosineHead {
                weight,
                tau: Tensor::scalar(T::of(Metric::Cosine.default_tau())).requires_grad(),
            }),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            ClassifierHead::Linear(_) => HeadKind::Linear,
            ClassifierHead::Cosine(_) => HeadKind::Cosine,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight().shape()[0]
    }

    pub fn weight(&self) -> &Tensor<T> {
        match self {
            ClassifierHead::Linear(h) => &h.weight,
            ClassifierHead::Cosine(h) => &h.weight,
        }
    }

    /// Logits `[B × num_classes]`.
    pub fn logits(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d) = embeddings.dims2("classifier")?;
        if d != self.weight().shape()[1] {
            return Err(TensorError::Shape {
                op: "classifier",
                left: embeddings.shape().to_vec(),
                right: self.weight().shape().to_vec(),
            }
            .into());
        }
        match self {
            ClassifierHead::Linear(h) => Ok(embeddings.matmul(&h.weight.transpose()?)?.add_row(&h.bias)?),
            ClassifierHead::Cosine(h) => score(embeddings, &h.weight, Metric::Cosine, Some(&h.tau)),
        }
    }

    /// `(tensor, decays)` for every parameter; weight decay skips biases
    /// and temperatures.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, bool)> {
        match self {
            ClassifierHead::Linear(h) => vec![(&mut h.weight, true), (&mut h.bias, false)],
            ClassifierHead::Cosine(h) => vec![(&mut h.weight, true), (&mut h.tau, false)],
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            ClassifierHead::Linear(h) => vec![&h.weight, &h.bias],
            ClassifierHead::Cosine(h) => vec![&h.weight, &h.tau],
        }
    }
}

const HEAD_INIT_STREAM: u64 = 1 << 20;
