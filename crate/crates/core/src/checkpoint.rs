//! Trained models and resumable training state, stored in the FSCK format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FSCK" | u32 version | u8 scalar width (4 or 8)
//! u32 config length | config JSON
//! model:  u32 input_dim | u32 #hidden | u32 hidden... | u32 embed_dim | f32 slope
//!         per layer: weight [in×out] then bias [out], at the scalar width
//!         u8 head tag: 0 none | 1 metric (u8 metric, τ) | 2 linear (u32 C, u32 d, W, b)
//!                      | 3 cosine (u32 C, u32 d, W, τ)
//! u8 has state
//! state:  u8 stage | u64 seed | u32 next epoch | u64 step
//!         u32 #velocities, each u32 length + values
//!         u8 has best: f64 val accuracy | u32 epoch | model
//!         u32 length | metrics JSONL
//! ```

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::encoder::{Architecture, Encoder, Layer};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, CosineHead, LinearHead, Metric, MetricHead};
use crate::pipelines::{MetricsRecord, Stage, TrainConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum Head<T: Scalar> {
    None,
    Metric(MetricHead<T>),
    Classifier(ClassifierHead<T>),
}

impl<T: Scalar> Head<T> {
    /// Temperature of a metric or cosine head.
    pub fn tau(&self) -> Option<f64> {
        match self {
            Head::Metric(h) => Some(h.tau_value()),
            Head::Classifier(ClassifierHead::Cosine(h)) => Some(h.tau.item().f64()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub head: Head<T>,
}

impl<T: Scalar> Model<T> {
    /// Metric and temperature used for few-shot evaluation. A classification
    /// model is evaluated with the head removed: cosine, no temperature.
    pub fn scorer(&self) -> (Metric, Option<f64>) {
        match &self.head {
            Head::Metric(h) => (h.metric, Some(h.tau_value())),
            _ => (Metric::Cosine, None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BestModel<T: Scalar> {
    pub val_accuracy: f64,
    pub epoch: usize,
    pub model: Model<T>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub stage: Stage,
    pub seed: u64,
    pub next_epoch: usize,
    pub step: u64,
    pub velocity: Vec<Vec<T>>,
    pub best: Option<BestModel<T>>,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: Option<TrainConfig>,
    pub model: Model<T>,
    pub state: Option<TrainState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model_only(model: Model<T>) -> Self {
        Self {
            config: None,
            model,
            state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(T::BYTES as u8);
        let config = match &self.config {
            Some(c) => serde_json::to_vec(c).map_err(|e| Error::config(format!("config: {e}")))?,
            None => Vec::new(),
        };
        w.len32(config.len(), "config length")?;
        w.bytes(&config);
        write_model(&mut w, &self.model)?;
        match &self.state {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u8(stage_tag(s.stage));
                w.u64(s.seed);
                w.len32(s.next_epoch, "epoch")?;
                w.u64(s.step);
                w.len32(s.velocity.len(), "velocity count")?;
                for v in &s.velocity {
                    w.len32(v.len(), "velocity length")?;
                    values(&mut w, v);
                }
                match &s.best {
                    None => w.u8(0),
                    Some(b) => {
                        w.u8(1);
                        w.f64(b.val_accuracy);
                        w.len32(b.epoch, "best epoch")?;
                        write_model(&mut w, &b.model)?;
                    }
                }
                let jsonl = crate::pipelines::metrics_jsonl(&s.records)?;
                w.len32(jsonl.len(), "metrics length")?;
                w.bytes(jsonl.as_bytes());
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset() as usize;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset() as usize;
        let width = r.u8("scalar width")?;
        if width != 4 && width != 8 {
            return Err(r.error_at(at, format!("scalar width must be 4 or 8, got {width}")));
        }
        let mut rd = Reader { r, width };
        let len = rd.r.u32("config length")? as usize;
        let at = rd.r.offset() as usize;
        let raw = rd.r.take(len, "config")?;
        let config = if raw.is_empty() {
            None
        } else {
            Some(serde_json::from_slice(raw).map_err(|e| rd.r.error_at(at, format!("invalid config JSON: {e}")))?)
        };
        let model = rd.model()?;
        let state = match rd.flag("state flag")? {
            false => None,
            true => {
                let at = rd.r.offset() as usize;
                let stage = match rd.r.u8("stage")? {
                    0 => Stage::Classification,
                    1 => Stage::Meta,
                    other => return Err(rd.r.error_at(at, format!("unknown stage tag {other}"))),
                };
                let seed = rd.r.u64("seed")?;
                let next_epoch = rd.r.u32("epoch")? as usize;
                let step = rd.r.u64("step")?;
                let count = rd.r.u32("velocity count")? as usize;
                let mut velocity = Vec::new();
                for _ in 0..count {
                    let n = rd.r.u32("velocity length")? as usize;
                    velocity.push(rd.values(n, "velocity")?);
                }
                let best = match rd.flag("best flag")? {
                    false => None,
                    true => Some(BestModel {
                        val_accuracy: rd.r.f64("best accuracy")?,
                        epoch: rd.r.u32("best epoch")? as usize,
                        model: rd.model()?,
                    }),
                };
                let len = rd.r.u32("metrics length")? as usize;
                let at = rd.r.offset() as usize;
                let raw = rd.r.take(len, "metrics")?;
                let text = std::str::from_utf8(raw).map_err(|_| rd.r.error_at(at, "metrics are not UTF-8"))?;
                let records = crate::pipelines::parse_metrics_jsonl(text)
                    .map_err(|e| rd.r.error_at(at, format!("invalid metrics: {e}")))?;
                Some(TrainState {
                    stage,
                    seed,
                    next_epoch,
                    step,
                    velocity,
                    best,
                    records,
                })
            }
        };
        rd.r.finish()?;
        Ok(Self { config, model, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn stage_tag(stage: Stage) -> u8 {
    match stage {
        Stage::Classification => 0,
        Stage::Meta => 1,
    }
}

fn metric_tag(metric: Metric) -> u8 {
    match metric {
        Metric::Cosine => 0,
        Metric::SqEuclidean => 1,
    }
}

fn values<T: Scalar>(w: &mut ByteWriter, data: &[T]) {
    for &v in data {
        if T::BYTES == 4 {
            w.f32(v.f64() as f32);
        } else {
            w.f64(v.f64());
        }
    }
}

fn write_model<T: Scalar>(w: &mut ByteWriter, model: &Model<T>) -> Result<()> {
    let arch = model.encoder.architecture();
    w.len32(arch.input_dim, "input dim")?;
    w.len32(arch.hidden_dims.len(), "hidden layer count")?;
    for &h in &arch.hidden_dims {
        w.len32(h, "hidden width")?;
    }
    w.len32(arch.embed_dim, "embed dim")?;
    w.f32(arch.leaky_slope);
    for layer in model.encoder.layers() {
        values(w, layer.weight.data());
        values(w, layer.bias.data());
    }
    match &model.head {
        Head::None => w.u8(0),
        Head::Metric(h) => {
            w.u8(1);
            w.u8(metric_tag(h.metric));
            values(w, h.tau.data());
        }
        Head::Classifier(c) => {
            let (tag, extra) = match c {
                ClassifierHead::Linear(h) => (2, &h.bias),
                ClassifierHead::Cosine(h) => (3, &h.tau),
            };
            w.u8(tag);
            w.len32(c.weight().shape()[0], "class count")?;
            w.len32(c.weight().shape()[1], "head width")?;
            values(w, c.weight().data());
            values(w, extra.data());
        }
    }
    Ok(())
}

struct Reader<'a> {
    r: ByteReader<'a>,
    width: u8,
}

impl Reader<'_> {
    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.r.offset() as usize;
        match self.r.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.r.error_at(at, format!("{what} must be 0 or 1, got {other}"))),
        }
    }

    fn values<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        if self.width == 4 {
            Ok(self.r.f32s(n, what)?.into_iter().map(|v| T::of(v as f64)).collect())
        } else {
            let bytes = n
                .checked_mul(8)
                .ok_or_else(|| self.r.error(format!("{what}: element count {n} overflows")))?;
            let raw = self.r.take(bytes, what)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect())
        }
    }

    fn param<T: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<T>> {
        let data = self.values(shape.iter().product(), what)?;
        Ok(Tensor::param(data, shape)?)
    }

    fn model<T: Scalar>(&mut self) -> Result<Model<T>> {
        let at = self.r.offset() as usize;
        let input_dim = self.r.u32("input dim")? as usize;
        let n_hidden = self.r.u32("hidden layer count")? as usize;
        if n_hidden > 1024 {
            return Err(self.r.error_at(at + 4, format!("implausible hidden layer count {n_hidden}")));
        }
        let mut hidden_dims = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden_dims.push(self.r.u32("hidden width")? as usize);
        }
        let embed_dim = self.r.u32("embed dim")? as usize;
        let leaky_slope = self.r.f32("slope")?;
        let arch = Architecture {
            input_dim,
            hidden_dims,
            embed_dim,
            leaky_slope,
        };
        arch.validate().map_err(|e| self.r.error_at(at, format!("invalid architecture: {e}")))?;
        let mut layers = Vec::new();
        for (i, (din, dout)) in arch.layer_dims().into_iter().enumerate() {
            layers.push(Layer {
                weight: self.param(&[din, dout], &format!("layer {i} weight"))?,
                bias: self.param(&[dout], &format!("layer {i} bias"))?,
            });
        }
        let encoder = Encoder::from_layers(arch, layers)?;
        let at = self.r.offset() as usize;
        let head = match self.r.u8("head tag")? {
            0 => Head::None,
            1 => {
                let at = self.r.offset() as usize;
                let metric = match self.r.u8("metric")? {
                    0 => Metric::Cosine,
                    1 => Metric::SqEuclidean,
                    other => return Err(self.r.error_at(at, format!("unknown metric tag {other}"))),
                };
                Head::Metric(MetricHead {
                    metric,
                    tau: self.param(&[1], "tau")?,
                })
            }
            tag @ (2 | 3) => {
                let classes = self.r.u32("class count")? as usize;
                let width = self.r.u32("head width")? as usize;
                let weight = self.param(&[classes, width], "head weight")?;
                Head::Classifier(if tag == 2 {
                    ClassifierHead::Linear(LinearHead {
                        weight,
                        bias: self.param(&[classes], "head bias")?,
                    })
                } else {
                    ClassifierHead::Cosine(CosineHead {
                        weight,
                        tau: self.param(&[1], "head tau")?,
                    })
                })
            }
            other => return Err(self.r.error_at(at, format!("unknown head tag {other}"))),
        };
        Ok(Model { encoder, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    fn model<T: Scalar>(head: Head<T>) -> Model<T> {
        Model {
            encoder: Encoder::init(Architecture::mlp(4, &[6, 5], 3), 8).unwrap(),
            head,
        }
    }

    fn same<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
        let bits = |m: &Model<T>| -> Vec<u64> {
            let mut v: Vec<u64> = m
                .encoder
                .params()
                .iter()
                .flat_map(|p| p.data().iter().map(|x| x.f64().to_bits()))
                .collect();
            match &m.head {
                Head::None => {}
                Head::Metric(h) => v.push(h.tau_value().to_bits()),
                Head::Classifier(c) => v.extend(c.params().iter().flat_map(|p| p.data().iter().map(|x| x.f64().to_bits()))),
            }
            v
        };
        a.encoder.architecture() == b.encoder.architecture() && bits(a) == bits(b)
    }

    #[test]
    fn model_only_round_trip_is_bit_exact() {
        for head in [
            Head::None,
            Head::Metric(MetricHead::with_tau(Metric::SqEuclidean, 0.37)),
            Head::Classifier(ClassifierHead::init(HeadKind::Linear, 7, 3, 1).unwrap()),
            Head::Classifier(ClassifierHead::init(HeadKind::Cosine, 7, 3, 1).unwrap()),
        ] {
            let ck = Checkpoint::<f64>::model_only(model(head));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
            assert!(same(&ck.model, &back.model));
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn f32_checkpoints_store_four_byte_values() {
        let ck = Checkpoint::<f32>::model_only(model(Head::None));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes[8], 4);
        // header 9 + config len 4 + arch 4·5 + slope 4 + params 4·(4·6+6+6·5+5+5·3+3) + head tag 1
        assert_eq!(bytes.len(), 9 + 4 + 20 + 4 + 4 * 83 + 1 + 1);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert!(same(&ck.model, &back.model));
    }

    #[test]
    fn train_state_round_trips() {
        let ck = Checkpoint::<f64> {
            config: Some(TrainConfig::meta(Architecture::mlp(4, &[6, 5], 3), 3)),
            model: model(Head::Metric(MetricHead::new(Metric::Cosine))),
            state: Some(TrainState {
                stage: Stage::Meta,
                seed: 3,
                next_epoch: 2,
                step: 400,
                velocity: vec![vec![0.5, -0.25], vec![], vec![1e-300]],
                best: Some(BestModel {
                    val_accuracy: 61.25,
                    epoch: 1,
                    model: model(Head::Metric(MetricHead::with_tau(Metric::Cosine, 9.5))),
                }),
                records: Vec::new(),
            }),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        let (s, t) = (ck.state.as_ref().unwrap(), back.state.as_ref().unwrap());
        assert_eq!((t.stage, t.seed, t.next_epoch, t.step), (s.stage, s.seed, s.next_epoch, s.step));
        assert_eq!(t.velocity, s.velocity);
        let (bb, sb) = (t.best.as_ref().unwrap(), s.best.as_ref().unwrap());
        assert_eq!((bb.val_accuracy, bb.epoch), (sb.val_accuracy, sb.epoch));
        assert!(same(&bb.model, &sb.model));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    fn format_error(bytes: &[u8]) -> (u64, String) {
        match Checkpoint::<f64>::from_bytes(bytes) {
            Err(Error::Format { offset, reason }) => (offset, reason),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_checkpoints_report_offsets() {
        let bytes = Checkpoint::<f64>::model_only(model(Head::None)).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(format_error(&bad).0, 0);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(format_error(&bad).0, 4);

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert_eq!(format_error(&bad).0, 8);

        let (offset, reason) = format_error(&bytes[..bytes.len() - 3]);
        assert!(reason.contains("truncated"), "{reason}");
        assert!(offset > 0 && offset < bytes.len() as u64);

        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(format_error(&bad).0, bytes.len() as u64);

        let mut bad = bytes;
        let last = bad.len() - 2;
        bad[last] = 7;
        let (offset, reason) = format_error(&bad);
        assert_eq!(offset, last as u64);
        assert!(reason.contains("head tag"));
    }
}
