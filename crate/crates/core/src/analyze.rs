//! Representation-space analyses: similarity groups A–D, per-word ME rates,
//! which familiar images novel words are drawn to, audio cosine structure
//! and per-class drilldowns.
//!
//! Scores come from any `(audio id, image id) -> S` function, normally
//! [`ModelAgent::similarity`](crate::evaltest::ModelAgent::similarity), so
//! the same code runs on trained and untrained checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaltest::{EvalError, TestKind, TrialRecord};
use crate::model::{embed_audio, ModelError, ModelParams};
use crate::parallel::Execution;
use crate::synthgen::{Dataset, DatasetManifest, SplitKind};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("group {0} has no eligible pairs")]
    EmptyGroup(String),
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("class {0} is not novel")]
    NotNovel(String),
    #[error("zero-norm embedding for {0}")]
    ZeroNorm(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnalyzeError>;

/// Five-number summary of a group of similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGroupSummary {
    pub group: String,
    pub description: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl SimilarityGroupSummary {
    pub fn from_scores(group: &str, description: &str, mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(AnalyzeError::EmptyGroup(group.to_string()));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            group: group.to_string(),
            description: description.to_string(),
            count: scores.len(),
            min: scores[0],
            q1: quantile(&scores, 0.25),
            median: quantile(&scores, 0.5),
            q3: quantile(&scores, 0.75),
            max: scores[scores.len() - 1],
        })
    }
}

/// Test-split audio and image ids grouped by class.
struct TestItems<'m> {
    audio: BTreeMap<&'m str, Vec<&'m str>>,
    images: BTreeMap<&'m str, Vec<&'m str>>,
}

impl<'m> TestItems<'m> {
    fn new(manifest: &'m DatasetManifest) -> Self {
        let mut audio: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut images: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in manifest.split(SplitKind::Test) {
            audio.entry(&r.class).or_default().push(&r.audio);
            images.entry(&r.class).or_default().push(&r.image);
        }
        Self { audio, images }
    }

    /// Every (audio, image) pair whose classes satisfy `keep`.
    fn pairs(&self, keep: impl Fn(&str, &str) -> bool) -> Vec<(&'m str, &'m str)> {
        let mut out = Vec::new();
        for (qa, auds) in &self.audio {
            for (ci, imgs) in &self.images {
                if keep(qa, ci) {
                    for a in auds {
                        for i in imgs {
                            out.push((*a, *i));
                        }
                    }
                }
            }
        }
        out
    }
}

pub const GROUP_DESCRIPTIONS: [(&str, &str); 4] = [
    ("A", "familiar audio, same-class familiar image"),
    ("B", "familiar audio, other-class familiar image"),
    ("C", "novel audio, same-class novel image"),
    ("D", "novel audio, familiar image"),
];

fn score_pairs<F>(score: &F, pairs: &[(&str, &str)], exec: Execution) -> Result<Vec<f64>>
where
    F: Fn(&str, &str) -> std::result::Result<f64, EvalError> + Sync,
{
    exec.map(pairs, |(a, i)| score(a, i).map_err(AnalyzeError::from))
        .into_iter()
        .collect()
}

/// Samples `n_pairs` test pairs (with replacement) for each of groups A–D
/// and summarises their similarity scores.
pub fn similarity_distributions<F>(
    score: &F,
    manifest: &DatasetManifest,
    n_pairs: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SimilarityGroupSummary>>
where
    F: Fn(&str, &str) -> std::result::Result<f64, EvalError> + Sync,
{
    if n_pairs == 0 {
        return Err(AnalyzeError::Input("n_pairs must be positive".into()));
    }
    let items = TestItems::new(manifest);
    let novel = |c: &str| manifest.is_novel(c);
    let pools = [
        items.pairs(|a, i| !novel(a) && a == i),
        items.pairs(|a, i| !novel(a) && !novel(i) && a != i),
        items.pairs(|a, i| novel(a) && a == i),
        items.pairs(|a, i| novel(a) && !novel(i)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4);
    for ((group, description), pool) in GROUP_DESCRIPTIONS.iter().zip(pools) {
        if pool.is_empty() {
            return Err(AnalyzeError::EmptyGroup(group.to_string()));
        }
        let picked: Vec<(&str, &str)> = (0..n_pairs).map(|_| *pool.choose(&mut rng).expect("non-empty")).collect();
        out.push(SimilarityGroupSummary::from_scores(group, description, score_pairs(score, &picked, exec)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordMe {
    pub class: String,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Below 50%: the word is drawn to familiar images.
    pub anti_me: bool,
}

/// ME accuracy per novel query class (ME-kind records only), sorted by
/// accuracy then class. Listed classes without trials are skipped and
/// reported in the returned warnings.
pub fn per_word_me(records: &[TrialRecord], classes: &[&str]) -> (Vec<WordMe>, Vec<String>) {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == TestKind::MeFamiliarNovel) {
        let e = tally.entry(&r.query_class).or_default();
        e.0 += 1;
        e.1 += r.correct as usize;
    }
    let warnings = classes
        .iter()
        .filter(|c| !tally.contains_key(*c))
        .map(|c| format!("class {c} has no ME trials; excluded"))
        .collect();
    let mut out: Vec<WordMe> = tally
        .into_iter()
        .map(|(class, (trials, correct))| {
            let accuracy = correct as f64 / trials as f64;
            WordMe {
                class: class.to_string(),
                trials,
                correct,
                accuracy,
                anti_me: accuracy < 0.5,
            }
        })
        .collect();
    out.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then_with(|| a.class.cmp(&b.class)));
    (out, warnings)
}

/// Labelled matrix; `None` marks cells with no data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl ClassMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        self.cells[r][c]
    }

    pub fn write_csv(&self, path: &Path, config_hash: &str, seed: u64) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["class".to_string()];
        header.extend(self.cols.iter().cloned());
        header.extend(["config_hash".to_string(), "seed".to_string()]);
        w.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()));
            rec.extend([config_hash.to_string(), seed.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Percentage of ME trials with novel query `n` and familiar image `f` in
/// which the familiar image won. A tie counts as a familiar pick, matching
/// the accuracy rule, so each row's picks sum to that word's ME errors.
pub fn familiar_pick_matrix(records: &[TrialRecord], novel: &[&str], familiar: &[&str]) -> ClassMatrix {
    let mut tally: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == TestKind::MeFamiliarNovel) {
        let e = tally.entry((&r.query_class, &r.other_class)).or_default();
        e.0 += 1;
        e.1 += !r.correct as usize;
    }
    let cells = novel
        .iter()
        .map(|n| {
            familiar
                .iter()
                .map(|f| tally.get(&(*n, *f)).map(|&(t, p)| 100.0 * p as f64 / t as f64))
                .collect()
        })
        .collect();
    ClassMatrix {
        rows: novel.iter().map(|s| s.to_string()).collect(),
        cols: familiar.iter().map(|s| s.to_string()).collect(),
        cells,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean pairwise cosine (×100) between embeddings of each class pair; the
/// diagonal averages distinct within-class pairs (100 with one instance).
pub fn cosine_matrix(classes: &[String], embeddings: &[Vec<Vec<f64>>]) -> Result<ClassMatrix> {
    for (c, embs) in classes.iter().zip(embeddings) {
        if embs.is_empty() {
            return Err(AnalyzeError::Input(format!("class {c} has no instances")));
        }
        if embs.iter().any(|e| e.iter().all(|&x| x == 0.0)) {
            return Err(AnalyzeError::ZeroNorm(c.clone()));
        }
    }
    let k = classes.len();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let (mut sum, mut n) = (0.0, 0usize);
            for (p, a) in embeddings[i].iter().enumerate() {
                for (q, b) in embeddings[j].iter().enumerate() {
                    if i == j && (embeddings[i].len() > 1 && p == q) {
                        continue;
                    }
                    sum += cosine(a, b);
                    n += 1;
                }
            }
            let v = 100.0 * sum / n as f64;
            cells[i][j] = Some(v);
            cells[j][i] = Some(v);
        }
    }
    Ok(ClassMatrix {
        rows: classes.to_vec(),
        cols: classes.to_vec(),
        cells,
    })
}

/// Audio cosine matrix over the first `n_instances` test words of each
/// listed class.
pub fn audio_cosine_matrix(
    params: &ModelParams,
    data: &Dataset,
    classes: &[&str],
    n_instances: usize,
    exec: Execution,
) -> Result<ClassMatrix> {
    if n_instances == 0 {
        return Err(AnalyzeError::Input("need at least one instance per word".into()));
    }
    let items = TestItems::new(&data.manifest);
    let mut embeddings = Vec::with_capacity(classes.len());
    for c in classes {
        let ids = items.audio.get(c).ok_or_else(|| AnalyzeError::UnknownClass(c.to_string()))?;
        let mels: Vec<_> = ids
            .iter()
            .take(n_instances)
            .map(|id| &data.audio_by_id(id).expect("validated manifest").mel)
            .collect();
        embeddings.push(embed_audio(params, &mels, exec)?);
    }
    let names: Vec<String> = classes.iter().map(|s| s.to_string()).collect();
    cosine_matrix(&names, &embeddings)
}

/// Exhaustive scores of one novel class's test words against its own
/// images (A), other novel images (B) and familiar images (C).
pub fn class_drilldown<F>(
    score: &F,
    manifest: &DatasetManifest,
    novel_class: &str,
    exec: Execution,
) -> Result<Vec<SimilarityGroupSummary>>
where
    F: Fn(&str, &str) -> std::result::Result<f64, EvalError> + Sync,
{
    if manifest.class(novel_class).is_none() {
        return Err(AnalyzeError::UnknownClass(novel_class.to_string()));
    }
    if !manifest.is_novel(novel_class) {
        return Err(AnalyzeError::NotNovel(novel_class.to_string()));
    }
    let items = TestItems::new(manifest);
    let novel = |c: &str| manifest.is_novel(c);
    let groups = [
        ("A", "class audio, class image", items.pairs(|a, i| a == novel_class && i == novel_class)),
        (
            "B",
            "class audio, other novel images",
            items.pairs(|a, i| a == novel_class && novel(i) && i != novel_class),
        ),
        ("C", "class audio, familiar images", items.pairs(|a, i| a == novel_class && !novel(i))),
    ];
    groups
        .into_iter()
        .map(|(g, d, pairs)| SimilarityGroupSummary::from_scores(g, d, score_pairs(score, &pairs, exec)?))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalyzeError + '_ {
    move |source| AnalyzeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Summaries as one row each (`tag` distinguishes e.g. trained/untrained).
pub fn write_groups_csv(
    path: &Path,
    tag: &str,
    groups: &[SimilarityGroupSummary],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model", "group", "description", "count", "min", "q1", "median", "q3", "max", "config_hash", "seed",
    ])?;
    for g in groups {
        w.write_record([
            tag.to_string(),
            g.group.clone(),
            g.description.clone(),
            g.count.to_string(),
            format!("{:.6}", g.min),
            format!("{:.6}", g.q1),
            format!("{:.6}", g.median),
            format!("{:.6}", g.q3),
            format!("{:.6}", g.max),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Plot-ready long format: `group,statistic,value` (plus provenance).
pub fn write_groups_long_csv(
    path: &Path,
    tag: &str,
    groups: &[SimilarityGroupSummary],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "statistic", "value", "model", "config_hash", "seed"])?;
    for g in groups {
        for (stat, v) in [
            ("count", g.count as f64),
            ("min", g.min),
            ("q1", g.q1),
            ("median", g.median),
            ("q3", g.q3),
            ("max", g.max),
        ] {
            w.write_record([
                g.group.clone(),
                stat.to_string(),
                format!("{v:.6}"),
                tag.to_string(),
                config_hash.to_string(),
                seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_per_word_csv(path: &Path, words: &[WordMe], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "trials", "correct", "accuracy", "anti_me", "config_hash", "seed"])?;
    for r in words {
        w.write_record([
            r.class.clone(),
            r.trials.to_string(),
            r.correct.to_string(),
            format!("{:.6}", r.accuracy),
            r.anti_me.to_string(),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Settings of the `analyze` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Pairs sampled per similarity group.
    pub pairs_per_group: usize,
    /// Spoken instances per word in the audio cosine matrix.
    pub instances_per_word: usize,
    /// Also summarise the groups for the untrained (epoch 0) model.
    pub untrained_baseline: bool,
    /// Moving-average window of the epoch curves.
    pub curve_window: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            pairs_per_group: 2000,
            instances_per_word: 5,
            untrained_baseline: false,
            curve_window: 5,
        }
    }
}
