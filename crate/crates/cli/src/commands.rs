use std::path::{Path, PathBuf};

use fsl_core::checkpoint::{Checkpoint, Model};
use fsl_core::data::{load_dataset, save_dataset, FewShotDataset, SplitFractions, SplitSpec, SyntheticSpec};
use fsl_core::episodes::EpisodeSpec;
use fsl_core::eval::experiments::{self as exp, ExperimentConfig, SplitMode};
use fsl_core::eval::{evaluate, EvalProtocol, EvalSplit};
use fsl_core::heads::Metric;
use fsl_core::pipelines::{
    generalization_curve, metrics_csv, metrics_jsonl, MetaInit, MetricsRecord, TrainConfig, Trainer,
};
use fsl_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::plot;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io(path, e))
}

pub fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| io(path, e))?))
}

pub fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = fsl_core::data::generate_synthetic(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_dataset(&ds, out)?;
    let provenance = serde_json::json!({ "spec": spec, "sha256": sha256_file(out)? });
    write(&provenance_path(out), pretty(&provenance))?;
    println!(
        "wrote {} ({} classes, {} features)",
        out.display(),
        ds.num_classes(),
        ds.sample_dim()
    );
    Ok(())
}

pub fn provenance_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn parse_fractions(text: &str) -> Result<SplitFractions> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("fractions must be three comma-separated numbers, got {text:?}")))?;
    match parts[..] {
        [base, val, novel] => Ok(SplitFractions::new(base, val, novel)),
        _ => Err(Error::Config(format!(
            "fractions must be three comma-separated numbers, got {text:?}"
        ))),
    }
}

pub fn make_split(
    ds: &FewShotDataset,
    mode: SplitMode,
    fractions: SplitFractions,
    seed: u64,
    holdout_fraction: f64,
) -> Result<SplitSpec> {
    let mut split = exp::make_split(ds, mode, fractions, seed)?;
    split.holdout_fraction = holdout_fraction;
    split.validate(ds)?;
    Ok(split)
}

pub fn split(
    dataset: &Path,
    mode: SplitMode,
    fractions: &str,
    seed: u64,
    holdout_fraction: f64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let split = make_split(&ds, mode, parse_fractions(fractions)?, seed, holdout_fraction)?;
    write(out, pretty(&split))?;
    println!(
        "wrote {} (base {}, val {}, novel {} classes)",
        out.display(),
        split.base.len(),
        split.val.len(),
        split.novel.len()
    );
    Ok(())
}

pub fn load_split(path: &Path, ds: &FewShotDataset) -> Result<SplitSpec> {
    let split: SplitSpec = read_json(path)?;
    split.validate(ds)?;
    Ok(split)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    TrainConfig::from_json(&text)
}

pub struct TrainPaths {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub split: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
}

pub enum Init {
    Scratch,
    Model(PathBuf),
    Unspecified,
}

impl From<Option<PathBuf>> for Init {
    fn from(p: Option<PathBuf>) -> Self {
        p.map_or(Init::Unspecified, Init::Model)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.fsck";
pub const MODEL_FILE: &str = "model.fsck";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVES_CSV: &str = "curves.csv";

pub fn train(paths: &TrainPaths, init: Option<Init>) -> Result<()> {
    let mut cfg = load_train_config(&paths.config)?;
    if let Some(s) = paths.seed {
        cfg.seed = s;
    }
    let ds = load_dataset(&paths.dataset)?;
    let split = load_split(&paths.split, &ds)?;
    let written = train_to_dir(&cfg, &ds, &split, init, paths.resume.as_deref(), &paths.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Trains, checkpointing after every epoch, and writes the selected model
/// and metrics into `out`. Returns the files written.
pub fn train_to_dir(
    cfg: &TrainConfig,
    ds: &FewShotDataset,
    split: &SplitSpec,
    init: Option<Init>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut trainer = match (resume, init) {
        (Some(path), _) => Trainer::<f64>::resume(ds, split, cfg.clone(), Checkpoint::load(path)?)?,
        (None, None) => Trainer::classification(ds, split, cfg.clone())?,
        (None, Some(Init::Scratch)) => Trainer::meta(MetaInit::Fresh, ds, split, cfg.clone())?,
        (None, Some(Init::Model(path))) => {
            let encoder = Checkpoint::<f64>::load(&path)?.model.encoder;
            Trainer::meta(MetaInit::Pretrained(encoder), ds, split, cfg.clone())?
        }
        (None, Some(Init::Unspecified)) => {
            return Err(Error::Config("meta training needs --init or --scratch".into()));
        }
    };
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut saved = false;
    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        eprintln!("{}", progress_line(&r, cfg.epochs));
        trainer.checkpoint().save(&ckpt_path)?;
        saved = true;
    }
    if !saved {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    let output = trainer.finish();
    let mut written = vec![ckpt_path];
    let model_path = out.join(MODEL_FILE);
    Checkpoint::model_only(output.model).save(&model_path)?;
    written.push(model_path);
    written.extend(write_metrics(out, &output.records)?);
    Ok(written)
}

fn progress_line(r: &MetricsRecord, epochs: usize) -> String {
    let mut line = format!("{} epoch {}/{}", r.stage.name(), r.epoch, epochs);
    if let (Some(loss), Some(acc)) = (r.train_loss, r.train_accuracy) {
        line.push_str(&format!(" loss {loss:.4} acc {acc:.2}"));
    }
    if let Some(v) = &r.val {
        line.push_str(&format!(" val {:.2}", v.mean_accuracy));
    }
    line
}

pub fn write_metrics(out: &Path, records: &[MetricsRecord]) -> Result<Vec<PathBuf>> {
    let jsonl = out.join(METRICS_JSONL);
    write(&jsonl, metrics_jsonl(records)?)?;
    let csv = out.join(METRICS_CSV);
    write(&csv, metrics_csv(records))?;
    let mut written = vec![jsonl, csv];
    let curve = generalization_curve(records)?;
    if !curve.points().is_empty() {
        let path = out.join(CURVES_CSV);
        write(&path, curve.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: PathBuf,
    pub on: EvalSplit,
    pub episode: EpisodeSpec,
    pub tasks: usize,
    pub seed: u64,
    pub metric: Option<Metric>,
    pub json: bool,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let model = Checkpoint::<f64>::load(&args.checkpoint)?.model;
    let ds = load_dataset(&args.dataset)?;
    let split = load_split(&args.split, &ds)?;
    let protocol = EvalProtocol {
        episode: args.episode,
        seed: args.seed,
        num_tasks: args.tasks,
    };
    let result = evaluate_model(&model, args.metric, &ds, &split, args.on, &protocol)?;
    if args.json {
        println!("{}", serde_json::to_string(&result).expect("result serializes"));
    } else {
        println!("{}", result.line());
    }
    Ok(())
}

pub fn evaluate_model(
    model: &Model<f64>,
    metric: Option<Metric>,
    ds: &FewShotDataset,
    split: &SplitSpec,
    on: EvalSplit,
    protocol: &EvalProtocol,
) -> Result<fsl_core::eval::EvalResult> {
    let (own_metric, tau) = model.scorer();
    let metric = metric.unwrap_or(own_metric);
    evaluate(&model.encoder, metric, tau, ds, split, on, protocol)
}

#[derive(Clone, Copy)]
pub enum Ablation {
    Metric,
    Scratch,
    DatasetSweep,
    Generalization,
}

#[derive(Serialize)]
struct Replicate<'a, T> {
    replicate: Option<u64>,
    rows: &'a T,
}

fn replicate_line<T: Serialize>(replicate: Option<u64>, rows: &T) -> String {
    let mut line = serde_json::to_string(&Replicate { replicate, rows }).expect("rows serialize");
    line.push('\n');
    line
}

pub fn ablate(kind: Ablation, config: &Path, out: &Path, seeds: u64, mode: SplitMode) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| io(config, e))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let replicates = (0..seeds).map(|r| cfg.replicate(r));
    let mut jsonl = String::new();
    let (name, table) = match kind {
        Ablation::DatasetSweep => {
            let reps = replicates.map(|c| exp::run_dataset_property_sweep(&c)).collect::<Result<Vec<_>>>()?;
            reps.iter().enumerate().for_each(|(r, rows)| jsonl.push_str(&replicate_line(Some(r as u64), rows)));
            let mean = exp::mean_sweep(&reps)?;
            jsonl.push_str(&replicate_line(None, &mean));
            ("dataset-sweep", exp::sweep_table(&mean))
        }
        Ablation::Metric => {
            let reps = replicates.map(|c| exp::run_metric_ablation(&c, mode)).collect::<Result<Vec<_>>>()?;
            reps.iter().enumerate().for_each(|(r, rows)| jsonl.push_str(&replicate_line(Some(r as u64), rows)));
            let mean = mean_rows(&reps, |row| row.accuracy.clone(), |row, v| row.accuracy = v);
            jsonl.push_str(&replicate_line(None, &mean));
            ("metric", exp::metric_table(&mean, &cfg.shots))
        }
        Ablation::Scratch => {
            let reps = replicates.map(|c| exp::run_scratch_ablation(&c, mode)).collect::<Result<Vec<_>>>()?;
            reps.iter().enumerate().for_each(|(r, rows)| jsonl.push_str(&replicate_line(Some(r as u64), rows)));
            let mean = mean_rows(
                &reps,
                |row| vec![row.base_gen, row.novel_gen],
                |row, v| (row.base_gen, row.novel_gen) = (v[0], v[1]),
            );
            jsonl.push_str(&replicate_line(None, &mean));
            ("scratch", exp::scratch_table(&mean))
        }
        Ablation::Generalization => {
            let mut curves = Vec::new();
            for (r, c) in replicates.enumerate() {
                let (_, curve) = exp::run_generalization_tracking(&c, mode)?;
                write(&out.join(format!("generalization-{r}.csv")), curve.to_csv())?;
                jsonl.push_str(&replicate_line(Some(r as u64), &curve.points()));
                curves.push(curve);
            }
            let mean = exp::mean_curve(&curves)?;
            let mean_points: Vec<serde_json::Value> = mean
                .iter()
                .map(|(e, b, n)| serde_json::json!({ "epoch": e, "base_gen": b, "novel_gen": n }))
                .collect();
            jsonl.push_str(&replicate_line(None, &mean_points));
            let mut csv = String::from("epoch,base_gen,novel_gen\n");
            for (e, b, n) in &mean {
                csv.push_str(&format!("{e},{b:.4},{n:.4}\n"));
            }
            write(&out.join("generalization.csv"), &csv)?;
            let svg = plot::render(&plot::parse_curves(&csv)?, "Base vs novel class generalization");
            write(&out.join("generalization.svg"), svg)?;
            let base: Vec<f64> = mean.iter().map(|m| m.1).collect();
            let novel: Vec<f64> = mean.iter().map(|m| m.2).collect();
            let summary = match exp::objective_discrepancy(&base, &novel) {
                Some((start, end, drop)) => format!(
                    "novel-gen peaks at epoch {} and falls {drop:.2} points by epoch {} while base-gen never decreases\n",
                    mean[start].0, mean[end].0
                ),
                None => "no epoch range with rising base-gen and falling novel-gen\n".to_string(),
            };
            ("generalization", format!("{csv}{summary}"))
        }
    };
    write(&out.join(format!("{name}.jsonl")), &jsonl)?;
    write(&out.join(format!("{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

/// Mean over replicates of the numeric fields selected by `get`.
fn mean_rows<R: Clone>(reps: &[Vec<R>], get: impl Fn(&R) -> Vec<f64>, set: impl Fn(&mut R, Vec<f64>)) -> Vec<R> {
    let n = reps.len() as f64;
    let mut mean = reps[0].clone();
    for (i, row) in mean.iter_mut().enumerate() {
        let mut acc = vec![0.0; get(row).len()];
        for rep in reps {
            for (a, v) in acc.iter_mut().zip(get(&rep[i])) {
                *a += v / n;
            }
        }
        set(row, acc);
    }
    mean
}

pub fn plot(csv: &Path, out: &Path, title: &str) -> Result<()> {
    let text = std::fs::read_to_string(csv).map_err(|e| io(csv, e))?;
    let curves = plot::parse_curves(&text)?;
    write(out, plot::render(&curves, title))?;
    println!("wrote {}", out.display());
    Ok(())
}
