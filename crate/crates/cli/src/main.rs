//! `fsl`: generate data, split it, train both stages, evaluate, run
//! ablations, plot curves and replay experiment manifests.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fsl_core::eval::experiments::SplitMode;
use fsl_core::eval::EvalSplit;
use fsl_core::heads::Metric;
use fsl_core::Error;

#[derive(Parser)]
#[command(name = "fsl", version, about = "Few-shot classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical Gaussian dataset.
    GenData {
        /// Synthetic spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assign classes to base/val/novel.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Relative base,val,novel weights.
        #[arg(long, default_value = "0.64,0.16,0.2")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of each base class held out as unseen samples.
        #[arg(long, default_value_t = fsl_core::data::DEFAULT_HOLDOUT_FRACTION)]
        holdout_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification-stage training.
    TrainCls(TrainArgs),
    /// Meta-stage training.
    TrainMeta {
        #[command(flatten)]
        train: TrainArgs,
        /// Model to start from (typically a classification-stage model.fsck).
        #[arg(long, conflicts_with = "scratch", required_unless_present_any = ["scratch", "resume"])]
        init: Option<PathBuf>,
        /// Start from a random initialization instead.
        #[arg(long)]
        scratch: bool,
    },
    /// Episodic evaluation of a saved model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Which classes to draw tasks from.
        #[arg(long, value_enum, default_value = "novel")]
        on: SplitArg,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 15)]
        q: usize,
        #[arg(long, default_value_t = fsl_core::eval::DEFAULT_EVAL_TASKS)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the model's metric (evaluation-only change).
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Print the result as one JSON line.
        #[arg(long)]
        json: bool,
    },
    /// Reproduce an ablation or diagnostic experiment.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replicates; replicate r shifts every seed by r.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Split used by the metric, scratch and generalization experiments.
        #[arg(long, value_enum, default_value = "super")]
        mode: ModeArg,
    },
    /// Render base-gen vs novel-gen curves as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Base vs novel class generalization")]
        title: String,
    },
    /// Run every step of an experiment manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Train config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Super,
    Shuffled,
}

impl From<ModeArg> for SplitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Super => SplitMode::Super,
            ModeArg::Shuffled => SplitMode::Shuffled,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Novel,
    Val,
    BaseUnseen,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Novel => EvalSplit::Novel,
            SplitArg::Val => EvalSplit::Val,
            SplitArg::BaseUnseen => EvalSplit::BaseUnseen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    SqEuclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::SqEuclidean => Metric::SqEuclidean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Metric,
    Scratch,
    DatasetSweep,
    Generalization,
}

fn run(cli: Cli) -> fsl_core::Result<()> {
    use commands as c;
    match cli.command {
        Command::GenData { spec, out, seed } => c::gen_data(&spec, &out, seed),
        Command::Split {
            dataset,
            mode,
            fractions,
            seed,
            holdout_fraction,
            out,
        } => c::split(&dataset, mode.into(), &fractions, seed, holdout_fraction, &out),
        Command::TrainCls(t) => c::train(&t.into(), None),
        Command::TrainMeta { train, init, scratch } => {
            let init = if scratch { c::Init::Scratch } else { c::Init::from(init) };
            c::train(&train.into(), Some(init))
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            on,
            n,
            k,
            q,
            tasks,
            seed,
            metric,
            json,
        } => c::eval(&c::EvalArgs {
            checkpoint,
            dataset,
            split,
            on: on.into(),
            episode: fsl_core::episodes::EpisodeSpec::new(n, k, q),
            tasks,
            seed,
            metric: metric.map(Into::into),
            json,
        }),
        Command::Ablate {
            kind,
            config,
            out,
            seeds,
            mode,
        } => {
            let kind = match kind {
                AblationKind::Metric => c::Ablation::Metric,
                AblationKind::Scratch => c::Ablation::Scratch,
                AblationKind::DatasetSweep => c::Ablation::DatasetSweep,
                AblationKind::Generalization => c::Ablation::Generalization,
            };
            c::ablate(kind, &config, &out, seeds, mode.into())
        }
        Command::Plot { csv, out, title } => c::plot(&csv, &out, &title),
        Command::Run { manifest, out } => manifest::run(&manifest, &out),
    }
}

impl From<TrainArgs> for commands::TrainPaths {
    fn from(t: TrainArgs) -> Self {
        Self {
            config: t.config,
            dataset: t.dataset,
            split: t.split,
            out: t.out,
            seed: t.seed,
            resume: t.resume,
        }
    }
}

/// Exit status and failure class of an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::Json { .. } => (2, "config"),
        Error::Format { .. } | Error::Io { .. } | Error::Sampling(_) => (3, "data"),
        Error::Numeric(_) | Error::Tensor(_) => (4, "numeric"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let reason = serde_json::to_string(&e.to_string()).expect("string serializes");
            eprintln!("fsl: error kind={kind} code={code} reason={reason}");
            ExitCode::from(code)
        }
    }
}
