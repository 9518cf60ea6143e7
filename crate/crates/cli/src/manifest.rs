//! Experiment manifests: one JSON file naming the data spec, split, both
//! training configs and the evaluation protocol. `run` records what it is
//! about to do before doing it, then hashes everything it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsl_core::checkpoint::Checkpoint;
use fsl_core::data::{generate_synthetic, save_dataset, SplitFractions, SyntheticSpec, DEFAULT_HOLDOUT_FRACTION};
use fsl_core::episodes::EpisodeSpec;
use fsl_core::eval::experiments::SplitMode;
use fsl_core::eval::{EvalProtocol, EvalSplit, DEFAULT_EVAL_TASKS};
use fsl_core::pipelines::Stage;
use fsl_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{self, read_json, sha256_file, sha256_hex, write, Init, MODEL_FILE};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    /// Synthetic data spec, relative to the manifest file.
    pub data: PathBuf,
    pub split: ManifestSplit,
    pub classification: PathBuf,
    pub meta: PathBuf,
    #[serde(default)]
    pub eval: ManifestEval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSplit {
    pub mode: SplitMode,
    pub fractions: SplitFractions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    DEFAULT_HOLDOUT_FRACTION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestEval {
    pub n: usize,
    pub shots: Vec<usize>,
    pub q: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for ManifestEval {
    fn default() -> Self {
        Self {
            n: 5,
            shots: vec![1, 5],
            q: 15,
            tasks: DEFAULT_EVAL_TASKS,
            seed: 0,
        }
    }
}

pub const RECORD_FILE: &str = "manifest.json";
pub const SUMS_FILE: &str = "SHA256SUMS";
const DATASET_FILE: &str = "dataset.fsds";
const SPLIT_FILE: &str = "split.json";
const EVAL_FILE: &str = "eval.jsonl";

#[derive(Serialize)]
struct RunRecord<'a> {
    name: &'a str,
    manifest: ManifestRef,
    inputs: BTreeMap<String, InputRef>,
    seeds: BTreeMap<&'static str, u64>,
    output_dir: String,
    planned_outputs: Vec<String>,
}

#[derive(Serialize)]
struct ManifestRef {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct InputRef {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    method: &'a str,
    #[serde(flatten)]
    result: fsl_core::eval::EvalResult,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn planned_outputs(tracks_generalization: [bool; 2]) -> Vec<String> {
    let mut files = vec![DATASET_FILE.to_string(), SPLIT_FILE.to_string()];
    for (dir, tracks) in ["classification", "meta"].iter().zip(tracks_generalization) {
        for f in [
            commands::CHECKPOINT_FILE,
            MODEL_FILE,
            commands::METRICS_JSONL,
            commands::METRICS_CSV,
        ] {
            files.push(format!("{dir}/{f}"));
        }
        if tracks {
            files.push(format!("{dir}/{}", commands::CURVES_CSV));
        }
    }
    files.push(EVAL_FILE.to_string());
    files.sort();
    files
}

pub fn run(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest_bytes = std::fs::read(manifest_path).map_err(|e| commands::io(manifest_path, e))?;
    let manifest: ExperimentManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| root.join(p);

    let data_path = resolve(&manifest.data);
    let cls_path = resolve(&manifest.classification);
    let meta_path = resolve(&manifest.meta);
    let spec: SyntheticSpec = read_json(&data_path)?;
    spec.validate()?;
    let cls_cfg = commands::load_train_config(&cls_path)?;
    let meta_cfg = commands::load_train_config(&meta_path)?;
    if cls_cfg.stage != Stage::Classification || meta_cfg.stage != Stage::Meta {
        return Err(Error::Config(
            "manifest needs a classification config and a meta config, in that order".into(),
        ));
    }
    if manifest.eval.shots.is_empty() {
        return Err(Error::Config("manifest eval.shots is empty".into()));
    }
    for &k in &manifest.eval.shots {
        EpisodeSpec::new(manifest.eval.n, k, manifest.eval.q).validate()?;
    }

    let mut inputs = BTreeMap::new();
    for (key, path) in [
        ("data", &manifest.data),
        ("classification", &manifest.classification),
        ("meta", &manifest.meta),
    ] {
        let full = resolve(path);
        inputs.insert(
            key.to_string(),
            InputRef {
                path: path.to_string_lossy().into_owned(),
                sha256: sha256_file(&full)?,
            },
        );
    }
    let planned = planned_outputs([cls_cfg.eval.track_generalization, meta_cfg.eval.track_generalization]);
    let record = RunRecord {
        name: &manifest.name,
        manifest: ManifestRef {
            path: manifest_path.to_string_lossy().into_owned(),
            sha256: sha256_hex(&manifest_bytes),
        },
        inputs,
        seeds: BTreeMap::from([
            ("data", spec.seed),
            ("split", manifest.split.seed),
            ("classification", cls_cfg.seed),
            ("meta", meta_cfg.seed),
            ("eval", manifest.eval.seed),
        ]),
        output_dir: out.to_string_lossy().into_owned(),
        planned_outputs: planned.clone(),
    };
    write(&out.join(RECORD_FILE), commands::pretty(&record))?;

    let ds = generate_synthetic(&spec)?;
    let dataset_path = out.join(DATASET_FILE);
    save_dataset(&ds, &dataset_path)?;
    let split = commands::make_split(
        &ds,
        manifest.split.mode,
        manifest.split.fractions,
        manifest.split.seed,
        manifest.split.holdout_fraction,
    )?;
    write(&out.join(SPLIT_FILE), commands::pretty(&split))?;

    let cls_dir = out.join("classification");
    commands::train_to_dir(&cls_cfg, &ds, &split, None, None, &cls_dir)?;
    let meta_dir = out.join("meta");
    let cls_model_path = cls_dir.join(MODEL_FILE);
    commands::train_to_dir(
        &meta_cfg,
        &ds,
        &split,
        Some(Init::Model(cls_model_path.clone())),
        None,
        &meta_dir,
    )?;

    let mut lines = String::new();
    let models = [
        ("classifier_baseline", Checkpoint::<f64>::load(&cls_model_path)?.model),
        ("meta_baseline", Checkpoint::<f64>::load(&meta_dir.join(MODEL_FILE))?.model),
    ];
    for &k in &manifest.eval.shots {
        let protocol = EvalProtocol {
            episode: EpisodeSpec::new(manifest.eval.n, k, manifest.eval.q),
            seed: manifest.eval.seed,
            num_tasks: manifest.eval.tasks,
        };
        for (method, model) in &models {
            let result = commands::evaluate_model(model, None, &ds, &split, EvalSplit::Novel, &protocol)?;
            eprintln!("{method} {}", result.line());
            lines.push_str(&serde_json::to_string(&EvalLine { method, result }).expect("line serializes"));
            lines.push('\n');
        }
    }
    write(&out.join(EVAL_FILE), lines)?;

    let sums = sha256_sums(out)?;
    write(&out.join(SUMS_FILE), &sums)?;
    print!("{sums}");
    Ok(())
}

/// `sha256  relative/path` for every file under `dir` except the sums file
/// itself, sorted by path.
pub fn sha256_sums(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut entries: Vec<(String, String)> = files
        .iter()
        .map(|p| Ok((rel(dir, p), sha256_file(p)?)))
        .collect::<Result<_>>()?;
    entries.retain(|(name, _)| name != SUMS_FILE);
    entries.sort();
    Ok(entries.iter().map(|(name, hash)| format!("{hash}  {name}\n")).collect())
}

fn collect_files(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| commands::io(dir, e))? {
        let path = entry.map_err(|e| commands::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, files)?;
        } else {
            files.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_with_defaults() {
        let m: ExperimentManifest = serde_json::from_str(
            r#"{"name":"x","data":"d.json","classification":"c.json","meta":"m.json",
                "split":{"mode":"shuffled","fractions":{"base":3,"val":1,"novel":1}}}"#,
        )
        .unwrap();
        assert_eq!(m.eval.tasks, DEFAULT_EVAL_TASKS);
        assert_eq!(m.eval.shots, vec![1, 5]);
        assert_eq!(m.split.holdout_fraction, DEFAULT_HOLDOUT_FRACTION);
        assert!(serde_json::from_str::<ExperimentManifest>(r#"{"name":"x","bogus":1}"#).is_err());
    }

    #[test]
    fn planned_outputs_are_sorted_and_include_curves_only_when_tracked() {
        let p = planned_outputs([false, true]);
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(p, sorted);
        assert!(p.contains(&"meta/curves.csv".to_string()));
        assert!(!p.contains(&"classification/curves.csv".to_string()));
    }

    #[test]
    fn sums_are_sorted_and_skip_themselves() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("b/z.txt"), "z").unwrap();
        write(&dir.path().join("a.txt"), "a").unwrap();
        write(&dir.path().join(SUMS_FILE), "old").unwrap();
        let sums = sha256_sums(dir.path()).unwrap();
        let names: Vec<&str> = sums.lines().map(|l| l.split("  ").nth(1).unwrap()).collect();
        assert_eq!(names, vec!["a.txt", "b/z.txt"]);
        assert!(sums.starts_with(&sha256_hex(b"a")));
    }
}
