//! Batch front door: `gen-data`, `train`, `eval`, `analyze` and `report`.
//!
//! A JSON [`RunConfig`] is the unit of reproducibility; flags only pick the
//! command, paths and a few evaluation overrides. Exit codes: 0 success,
//! 2 configuration or usage error, 3 runtime or data error.

mod config;
mod report;

pub use config::RunConfig;
pub use report::{report, ReportSummary};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{self, AnalyzeError};
use crate::evaltest::{self, EvalError, ModelAgent, TestKind};
use crate::model::{Checkpoint, ModelError, PretrainArtifacts};
use crate::parallel::{init_threads, Execution};
use crate::stats::{self, StatsError};
use crate::synthgen::{build_dataset, Dataset, SynthError};
use crate::train::{
    epoch_checkpoint_name, pretrain_audio, pretrain_vision, train, TrainError, TrainLog, TrainOptions,
    BEST_CHECKPOINT,
};

pub const THREADS_ENV: &str = "ME_LAB_THREADS";
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    ConfigParse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse { .. } | CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "me-lab", version, about = "Mutual-exclusivity lab for visually grounded speech models")]
pub struct Cli {
    /// Worker threads for data-parallel loops (falls back to ME_LAB_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (default: <output_dir>/data).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model; runs proxy pretraining first when the init asks for it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (default: <output_dir>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: <output_dir>/runs/<loss>-<init>-seed<seed>-<hash>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from a checkpoint; epoch numbering continues.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write per-epoch wall-clock times (timing.csv).
        #[arg(long)]
        timing: bool,
    },
    /// Run the test battery on a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated test kinds (default: all five).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to evaluate (default: the run's best checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also evaluate every epoch checkpoint (curve.csv).
        #[arg(long)]
        curve: bool,
    },
    /// Representation-space analyses of a trained run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Also summarise the similarity groups of the untrained model.
        #[arg(long)]
        untrained: bool,
        /// Comma-separated subset of: groups, per_word, pick_matrix, audio_cosine, drilldown.
        #[arg(long, value_delimiter = ',')]
        analyses: Vec<String>,
    },
    /// Assemble tables across run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// What `train` leaves next to the checkpoints so later commands can find
/// the dataset and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub data_dir: PathBuf,
    pub loss: String,
    pub init: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub last_epoch: usize,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(RUN_RECORD);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = run_dir.join(RUN_RECORD);
        write_json(&path, self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn threads_setting(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a thread count, got {v:?}"))),
        _ => Ok(None),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    init_threads(threads_setting(cli.threads)?);
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, out, exec),
        Command::Train {
            config,
            data,
            run_dir,
            resume,
            timing,
        } => train_cmd(&config, data, run_dir, resume, timing, exec).map(|_| ()),
        Command::Eval {
            run,
            kinds,
            episodes,
            seed,
            checkpoint,
            curve,
        } => eval_cmd(&run, &kinds, episodes, seed, checkpoint, curve, exec),
        Command::Analyze { run, untrained, analyses } => analyze_cmd(&run, untrained, &analyses, exec),
        Command::Report { runs, out } => {
            let summary = report(&runs, &out, exec)?;
            println!(
                "report: {} run(s) included, {} absent -> {}",
                summary.included,
                summary.absent,
                out.display()
            );
            Ok(())
        }
    }
}

fn gen_data(config: &Path, out: Option<PathBuf>, exec: Execution) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let dir = out.unwrap_or_else(|| cfg.data_dir());
    let manifest = build_dataset(&cfg.synthgen, &cfg.featurize, &dir, exec)?;
    println!(
        "dataset: {} classes ({} novel), {} train pairs -> {}",
        manifest.vocabulary.len(),
        manifest.novel_classes().len(),
        manifest.split(crate::synthgen::SplitKind::Train).len(),
        dir.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path, cfg: &RunConfig, exec: Execution) -> Result<Dataset, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Runtime(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    let ds = Dataset::load(dir, &cfg.featurize, exec)?;
    if ds.manifest.config != cfg.synthgen {
        return Err(CliError::Config(format!(
            "dataset at {} was generated with a different synthgen section",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Trains per the config and returns the run directory.
pub fn train_cmd(
    config: &Path,
    data: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    timing: bool,
    exec: Execution,
) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(config)?;
    let data_dir = data.unwrap_or_else(|| cfg.data_dir());
    let ds = load_dataset(&data_dir, &cfg, exec)?;
    let run_dir = run_dir.unwrap_or_else(|| cfg.run_dir());
    let hash = cfg.hash();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;

    let mut opts = TrainOptions::new(&run_dir);
    opts.exec = exec;
    opts.config_hash = Some(hash.clone());
    opts.write_timing = timing;
    opts.resume = resume;
    if opts.resume.is_none() {
        opts.artifacts = pretrain_artifacts(&cfg, &ds, &run_dir, &hash)?;
    }
    let outcome = train(&cfg.train, &cfg.model, &ds, &opts)?;
    let record = RunRecord {
        config: cfg.clone(),
        config_hash: hash,
        data_dir: data_dir.clone(),
        loss: cfg.train.loss.kind.name().to_string(),
        init: cfg.train.init.label().to_string(),
        seed: cfg.seed,
        best_epoch: outcome.best.epoch,
        best_val_acc: outcome.log.best_val_acc,
        last_epoch: outcome.log.epochs.last().map(|r| r.epoch).unwrap_or(0),
    };
    record.save(&run_dir)?;
    println!(
        "trained {} / {}: best epoch {} (dev accuracy {:.3}) -> {}",
        record.loss,
        record.init,
        record.best_epoch,
        record.best_val_acc,
        run_dir.display()
    );
    Ok(run_dir)
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    branch: &'a str,
    report: &'a crate::train::PretrainReport,
    config_hash: &'a str,
    seed: u64,
}

fn pretrain_artifacts(
    cfg: &RunConfig,
    ds: &Dataset,
    run_dir: &Path,
    hash: &str,
) -> Result<PretrainArtifacts, CliError> {
    let init = cfg.train.init;
    let mut artifacts = PretrainArtifacts::default();
    if !(init.audio_pretrained || init.vision_pretrained) {
        return Ok(artifacts);
    }
    let dir = run_dir.join("pretrain");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let save = |branch: &str, container: &crate::container::Container, report: &crate::train::PretrainReport| -> Result<(), CliError> {
        let path = dir.join(format!("{branch}.bin"));
        container
            .save(&path)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let rec = PretrainRecord {
            branch,
            report,
            config_hash: hash,
            seed: cfg.seed,
        };
        write_json(&dir.join(format!("{branch}_report.json")), &rec)
    };
    if init.vision_pretrained {
        let (c, r) = pretrain_vision(ds, &cfg.model, &cfg.pretrain)?;
        save("vision", &c, &r)?;
        artifacts.vision = Some(c);
    }
    if init.audio_pretrained {
        let (c, r) = pretrain_audio(ds, &cfg.model, &cfg.pretrain)?;
        save("audio", &c, &r)?;
        artifacts.audio = Some(c);
    }
    Ok(artifacts)
}

pub(crate) fn parse_kinds(names: &[String]) -> Result<Vec<TestKind>, CliError> {
    names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| TestKind::from_str(n.trim()).map_err(|_| CliError::Usage(format!(
            "unknown test kind {n:?}; expected one of {}",
            TestKind::ALL.map(|k| k.name()).join(", ")
        ))))
        .collect()
}

fn run_label(run_dir: &Path) -> String {
    run_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run_dir.display().to_string())
}

pub const EVAL_DIR: &str = "eval";
pub const ANALYZE_DIR: &str = "analyze";

fn eval_cmd(
    run: &Path,
    kinds: &[String],
    episodes: Option<usize>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    curve: bool,
    exec: Execution,
) -> Result<(), CliError> {
    let kinds = parse_kinds(kinds)?;
    let rec = RunRecord::load(run)?;
    let mut cfg = rec.config.clone();
    if let Some(n) = episodes {
        if n == 0 {
            return Err(CliError::Usage("--episodes must be positive".into()));
        }
        cfg.evaltest.n_episodes = n;
    }
    if let Some(s) = seed {
        cfg.evaltest.seed = s;
    }
    let hash = cfg.hash();
    let eval_seed = cfg.evaltest.seed;
    let ds = load_dataset(&rec.data_dir, &cfg, exec)?;
    let ck = Checkpoint::load(&checkpoint.unwrap_or_else(|| run.join(BEST_CHECKPOINT)))?;
    let agent = ModelAgent::new(&ck.params, &ds, exec)?;
    let battery = evaltest::full_battery(&agent, &ds.manifest, &cfg.evaltest, &kinds, ck.epoch, exec)?;

    let out = run.join(EVAL_DIR);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let records = battery.all_records();
    evaltest::write_battery_csv(&out.join("battery.csv"), &battery.rows, &hash, eval_seed)?;
    evaltest::write_trials_csv(&out.join("trials.csv"), &records, &hash, eval_seed)?;
    evaltest::write_trials_json(&out.join("trials.json"), &records, &hash, eval_seed)?;
    let rows = stats::summarize_trials(&[(run_label(run), records)], &cfg.stats, cfg.seed, exec)?;
    stats::write_summary_csv(&out.join("stats_summary.csv"), &rows, &hash, cfg.seed)?;

    println!("epoch {} ({} episodes per kind)", ck.epoch, cfg.evaltest.n_episodes);
    for r in &battery.rows {
        println!(
            "  {:<22} {:>6.2}%  [{:.2}, {:.2}]  ties {}",
            r.kind.label(),
            100.0 * r.accuracy,
            100.0 * r.ci_low,
            100.0 * r.ci_high,
            r.ties
        );
    }

    if curve {
        let log = TrainLog::load(run)?;
        let mut agents = Vec::new();
        for r in &log.epochs {
            let path = run.join(&r.ckpt_path);
            if !path.is_file() {
                continue;
            }
            let ck = Checkpoint::load(&path)?;
            agents.push((r.epoch, ModelAgent::new(&ck.params, &ds, exec)?));
        }
        if agents.is_empty() {
            return Err(CliError::Runtime(format!("no epoch checkpoints under {}", run.display())));
        }
        let kinds: &[TestKind] = if kinds.is_empty() { &TestKind::ALL } else { &kinds };
        let episodes = kinds
            .iter()
            .map(|&k| {
                evaltest::sample_episodes(&ds.manifest, k, cfg.evaltest.n_episodes, eval_seed, cfg.evaltest.multiplicity)
                    .map(|e| (k, e))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let points = evaltest::epoch_curve(&agents, &episodes, cfg.analyze.curve_window, exec)?;
        evaltest::write_curve_csv(&out.join("curve.csv"), &points, &hash, eval_seed)?;
        println!("curve over {} checkpoints -> {}", agents.len(), out.join("curve.csv").display());
    }
    Ok(())
}

pub const ANALYSES: [&str; 5] = ["groups", "per_word", "pick_matrix", "audio_cosine", "drilldown"];

fn analyze_cmd(run: &Path, untrained: bool, analyses: &[String], exec: Execution) -> Result<(), CliError> {
    let wanted: Vec<&str> = if analyses.iter().all(|a| a.trim().is_empty()) {
        ANALYSES.to_vec()
    } else {
        analyses.iter().map(|a| a.trim()).filter(|a| !a.is_empty()).collect()
    };
    if let Some(bad) = wanted.iter().find(|a| !ANALYSES.contains(a)) {
        return Err(CliError::Usage(format!(
            "unknown analysis {bad:?}; expected one of {}",
            ANALYSES.join(", ")
        )));
    }
    let rec = RunRecord::load(run)?;
    let cfg = rec.config.clone();
    let hash = cfg.hash();
    let seed = cfg.seed;
    let ds = load_dataset(&rec.data_dir, &cfg, exec)?;
    let ck = Checkpoint::load(&run.join(BEST_CHECKPOINT))?;
    let agent = ModelAgent::new(&ck.params, &ds, exec)?;
    let score = |a: &str, i: &str| agent.similarity(a, i);
    let manifest = &ds.manifest;
    let novel = manifest.novel_classes();
    let familiar = manifest.familiar_classes();
    let out = run.join(ANALYZE_DIR);
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    if wanted.contains(&"groups") {
        let groups = analyze::similarity_distributions(&score, manifest, cfg.analyze.pairs_per_group, seed, exec)?;
        analyze::write_groups_csv(&out.join("groups.csv"), "trained", &groups, &hash, seed)?;
        analyze::write_groups_long_csv(&out.join("groups_long.csv"), "trained", &groups, &hash, seed)?;
        print_groups("trained", &groups);
        if untrained || cfg.analyze.untrained_baseline {
            let init = Checkpoint::load(&run.join(epoch_checkpoint_name(0)))?;
            let base = ModelAgent::new(&init.params, &ds, exec)?;
            let base_score = |a: &str, i: &str| base.similarity(a, i);
            let g0 = analyze::similarity_distributions(&base_score, manifest, cfg.analyze.pairs_per_group, seed, exec)?;
            analyze::write_groups_csv(&out.join("groups_untrained.csv"), "untrained", &g0, &hash, seed)?;
            analyze::write_groups_long_csv(&out.join("groups_untrained_long.csv"), "untrained", &g0, &hash, seed)?;
            print_groups("untrained", &g0);
        }
    }
    if wanted.contains(&"per_word") || wanted.contains(&"pick_matrix") {
        let battery = evaltest::full_battery(
            &agent,
            manifest,
            &cfg.evaltest,
            &[TestKind::MeFamiliarNovel],
            ck.epoch,
            exec,
        )?;
        let records = battery.all_records();
        if wanted.contains(&"per_word") {
            let (words, warnings) = analyze::per_word_me(&records, &novel);
            for w in warnings {
                eprintln!("warning: {w}");
            }
            analyze::write_per_word_csv(&out.join("per_word_me.csv"), &words, &hash, seed)?;
        }
        if wanted.contains(&"pick_matrix") {
            analyze::familiar_pick_matrix(&records, &novel, &familiar).write_csv(
                &out.join("familiar_pick_matrix.csv"),
                &hash,
                seed,
            )?;
        }
    }
    if wanted.contains(&"audio_cosine") {
        let classes: Vec<&str> = familiar.iter().chain(&novel).copied().collect();
        analyze::audio_cosine_matrix(&ck.params, &ds, &classes, cfg.analyze.instances_per_word, exec)?
            .write_csv(&out.join("audio_cosine.csv"), &hash, seed)?;
    }
    if wanted.contains(&"drilldown") {
        for class in &novel {
            let groups = analyze::class_drilldown(&score, manifest, class, exec)?;
            analyze::write_groups_csv(&out.join(format!("drilldown_{class}.csv")), class, &groups, &hash, seed)?;
        }
    }
    println!("analyses [{}] -> {}", wanted.join(", "), out.display());
    Ok(())
}

fn print_groups(tag: &str, groups: &[analyze::SimilarityGroupSummary]) {
    println!("similarity groups ({tag}):");
    for g in groups {
        println!(
            "  {} {:<48} median {:>9.3}  IQR [{:.3}, {:.3}]",
            g.group, g.description, g.median, g.q1, g.q3
        );
    }
}
