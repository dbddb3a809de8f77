//! The five two-image test kinds, episode sampling, scoring agents and the
//! evaluation battery.
//!
//! Every trial presents one spoken query and two isolated-object test images
//! from the same source bucket. The kinds differ only in the class pattern:
//!
//! | kind | query | target image | other image |
//! |---|---|---|---|
//! | familiar–familiar | familiar `q` | `q` | familiar `≠ q` |
//! | familiar-query–novel | familiar `q` | `q` | novel |
//! | familiar–novel (ME) | novel `q` | `q` | familiar |
//! | novel–novel | novel `q` | `q` | novel `≠ q` |
//! | familiar–novel* | novel `q` | novel `≠ q` | familiar |
//!
//! The ME-family kinds are derived from one set of matched draws so that the
//! familiar-query and mismatched sanity tests reuse the ME image pairs exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{embed_audio, embed_images, similarity, ModelError, ModelParams};
use crate::parallel::Execution;
use crate::stats::{binomial_ci, StatsError};
use crate::synthgen::{Dataset, DatasetManifest, SplitKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test kind {kind} is infeasible: {reason}")]
    Infeasible { kind: TestKind, reason: String },
    #[error("invalid episode {episode}/{slot}: {reason}")]
    InvalidEpisode {
        episode: usize,
        slot: usize,
        reason: String,
    },
    #[error("unknown test kind {0:?}")]
    UnknownKind(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    FamiliarFamiliar,
    FamiliarqNovel,
    MeFamiliarNovel,
    NovelNovel,
    MeMismatched,
}

impl TestKind {
    pub const ALL: [TestKind; 5] = [
        TestKind::FamiliarFamiliar,
        TestKind::FamiliarqNovel,
        TestKind::MeFamiliarNovel,
        TestKind::NovelNovel,
        TestKind::MeMismatched,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::FamiliarFamiliar => "familiar_familiar",
            TestKind::FamiliarqNovel => "familiarq_novel",
            TestKind::MeFamiliarNovel => "me_familiar_novel",
            TestKind::NovelNovel => "novel_novel",
            TestKind::MeMismatched => "me_mismatched",
        }
    }

    /// Column heading used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            TestKind::FamiliarFamiliar => "familiar–familiar",
            TestKind::FamiliarqNovel => "familiar-query–novel",
            TestKind::MeFamiliarNovel => "familiar–novel (ME)",
            TestKind::NovelNovel => "novel–novel",
            TestKind::MeMismatched => "familiar–novel*",
        }
    }

    pub fn query_is_novel(self) -> bool {
        matches!(
            self,
            TestKind::MeFamiliarNovel | TestKind::NovelNovel | TestKind::MeMismatched
        )
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        TestKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EvalError::UnknownKind(s.to_string()))
    }
}

/// How many queries one episode carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMultiplicity {
    /// One query for every eligible class.
    #[default]
    PerClass,
    /// A single query of a randomly chosen eligible class.
    Single,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeImage {
    pub id: String,
    pub class: String,
    pub is_target: bool,
}

/// One trial slot: a query and the two images shown with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub episode: usize,
    pub slot: usize,
    pub kind: TestKind,
    pub query_audio: String,
    pub query_class: String,
    /// Presentation order; exactly one image is the target.
    pub images: [EpisodeImage; 2],
    pub source_bucket: u8,
}

impl Episode {
    pub fn target(&self) -> &EpisodeImage {
        self.images.iter().find(|i| i.is_target).expect("validated episode")
    }

    pub fn other(&self) -> &EpisodeImage {
        self.images.iter().find(|i| !i.is_target).expect("validated episode")
    }
}

/// Test-split items indexed for sampling.
struct TestPool<'m> {
    familiar: Vec<&'m str>,
    novel: Vec<&'m str>,
    audio: HashMap<&'m str, Vec<&'m str>>,
    /// (class, bucket) → image ids.
    images: HashMap<(&'m str, u8), Vec<&'m str>>,
    buckets: Vec<u8>,
}

impl<'m> TestPool<'m> {
    fn new(manifest: &'m DatasetManifest) -> Self {
        let mut audio: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut images: HashMap<(&str, u8), Vec<&str>> = HashMap::new();
        let mut buckets = Vec::new();
        for r in manifest.split(SplitKind::Test) {
            audio.entry(&r.class).or_default().push(&r.audio);
            images.entry((&r.class, r.source_bucket)).or_default().push(&r.image);
            if !buckets.contains(&r.source_bucket) {
                buckets.push(r.source_bucket);
            }
        }
        buckets.sort_unstable();
        Self {
            familiar: manifest.familiar_classes(),
            novel: manifest.novel_classes(),
            audio,
            images,
            buckets,
        }
    }

    fn has_images(&self, class: &str, bucket: u8) -> bool {
        self.images.get(&(class, bucket)).is_some_and(|v| !v.is_empty())
    }

    fn has_audio(&self, class: &str) -> bool {
        self.audio.get(class).is_some_and(|v| !v.is_empty())
    }

    fn audio_of<R: Rng>(&self, class: &str, rng: &mut R) -> String {
        self.audio[class].choose(rng).expect("checked").to_string()
    }

    fn image_of<R: Rng>(&self, class: &str, bucket: u8, rng: &mut R) -> String {
        self.images[&(class, bucket)].choose(rng).expect("checked").to_string()
    }

    fn classes_in<'a>(&self, classes: &'a [&'m str], bucket: u8) -> Vec<&'m str> {
        classes.iter().copied().filter(|c| self.has_images(c, bucket)).collect()
    }
}

/// The matched draw behind one ME-family trial slot.
struct MatchedSlot {
    bucket: u8,
    novel: String,
    novel_audio: String,
    novel_image: String,
    familiar: String,
    familiar_audio: String,
    familiar_image: String,
    /// A novel image of another class for the novel–novel test.
    other_novel: String,
    other_novel_image: String,
    /// A query of another novel class for the mismatched test.
    mismatch: String,
    mismatch_audio: String,
    swap: bool,
}

fn infeasible(kind: TestKind, reason: impl Into<String>) -> EvalError {
    EvalError::Infeasible {
        kind,
        reason: reason.into(),
    }
}

fn kind_seed(seed: u64, family: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(family);
    rng
}

fn pick_queries<'a, R: Rng>(eligible: &[&'a str], mult: QueryMultiplicity, rng: &mut R) -> Vec<&'a str> {
    match mult {
        QueryMultiplicity::PerClass => eligible.to_vec(),
        QueryMultiplicity::Single => vec![*eligible.choose(rng).expect("non-empty")],
    }
}

fn matched_slots(
    pool: &TestPool,
    kind: TestKind,
    n_episodes: usize,
    seed: u64,
    mult: QueryMultiplicity,
) -> Result<Vec<Vec<MatchedSlot>>> {
    if pool.novel.is_empty() || pool.familiar.is_empty() {
        return Err(infeasible(kind, "needs at least one novel and one familiar class"));
    }
    if matches!(kind, TestKind::NovelNovel | TestKind::MeMismatched) && pool.novel.len() < 2 {
        return Err(infeasible(kind, "needs at least two novel classes"));
    }
    for c in pool.novel.iter().chain(&pool.familiar) {
        if !pool.has_audio(c) {
            return Err(infeasible(kind, format!("class {c} has no test audio")));
        }
    }
    // A bucket is usable when every novel class, one familiar class and (for
    // two-novel kinds) a second novel class all have images there.
    let usable: Vec<u8> = pool
        .buckets
        .iter()
        .copied()
        .filter(|&b| {
            pool.classes_in(&pool.novel, b).len() == pool.novel.len()
                && !pool.classes_in(&pool.familiar, b).is_empty()
        })
        .collect();
    if usable.is_empty() {
        return Err(infeasible(kind, "no source bucket holds images of every novel class"));
    }
    let mut rng = kind_seed(seed, 1);
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let bucket = *usable.choose(&mut rng).expect("non-empty");
        let familiar_here = pool.classes_in(&pool.familiar, bucket);
        let queries = pick_queries(&pool.novel, mult, &mut rng);
        let mut slots = Vec::with_capacity(queries.len());
        for q in queries {
            let f = *familiar_here.choose(&mut rng).expect("non-empty");
            let others: Vec<&str> = pool.novel.iter().copied().filter(|c| *c != q).collect();
            let (other_novel, mismatch) = if others.is_empty() {
                (q, q)
            } else {
                (
                    *others.choose(&mut rng).expect("non-empty"),
                    *others.choose(&mut rng).expect("non-empty"),
                )
            };
            slots.push(MatchedSlot {
                bucket,
                novel: q.to_string(),
                novel_audio: pool.audio_of(q, &mut rng),
                novel_image: pool.image_of(q, bucket, &mut rng),
                familiar: f.to_string(),
                familiar_audio: pool.audio_of(f, &mut rng),
                familiar_image: pool.image_of(f, bucket, &mut rng),
                other_novel: other_novel.to_string(),
                other_novel_image: pool.image_of(other_novel, bucket, &mut rng),
                mismatch: mismatch.to_string(),
                mismatch_audio: pool.audio_of(mismatch, &mut rng),
                swap: rng.random_bool(0.5),
            });
        }
        episodes.push(slots);
    }
    Ok(episodes)
}

#[allow(clippy::too_many_arguments)]
fn make_episode(
    episode: usize,
    slot: usize,
    kind: TestKind,
    query: (&str, &str),
    target: (&str, &str),
    other: (&str, &str),
    bucket: u8,
    swap: bool,
) -> Episode {
    let t = EpisodeImage {
        id: target.0.to_string(),
        class: target.1.to_string(),
        is_target: true,
    };
    let o = EpisodeImage {
        id: other.0.to_string(),
        class: other.1.to_string(),
        is_target: false,
    };
    Episode {
        episode,
        slot,
        kind,
        query_audio: query.0.to_string(),
        query_class: query.1.to_string(),
        images: if swap { [o, t] } else { [t, o] },
        source_bucket: bucket,
    }
}

/// Samples `n_episodes` episodes of `kind` from the test split. The same
/// seed yields the same image pairs across all ME-family kinds.
pub fn sample_episodes(
    manifest: &DatasetManifest,
    kind: TestKind,
    n_episodes: usize,
    seed: u64,
    mult: QueryMultiplicity,
) -> Result<Vec<Episode>> {
    let pool = TestPool::new(manifest);
    if kind == TestKind::FamiliarFamiliar {
        return sample_familiar(&pool, n_episodes, seed, mult);
    }
    let slots = matched_slots(&pool, kind, n_episodes, seed, mult)?;
    let mut out = Vec::new();
    for (e, episode) in slots.iter().enumerate() {
        for (s, m) in episode.iter().enumerate() {
            let novel_img = (m.novel_image.as_str(), m.novel.as_str());
            let fam_img = (m.familiar_image.as_str(), m.familiar.as_str());
            let ep = match kind {
                TestKind::MeFamiliarNovel => make_episode(
                    e,
                    s,
                    kind,
                    (&m.novel_audio, &m.novel),
                    novel_img,
                    fam_img,
                    m.bucket,
                    m.swap,
                ),
                TestKind::FamiliarqNovel => make_episode(
                    e,
                    s,
                    kind,
                    (&m.familiar_audio, &m.familiar),
                    fam_img,
                    novel_img,
                    m.bucket,
                    !m.swap,
                ),
                TestKind::MeMismatched => make_episode(
                    e,
                    s,
                    kind,
                    (&m.mismatch_audio, &m.mismatch),
                    novel_img,
                    fam_img,
                    m.bucket,
                    m.swap,
                ),
                TestKind::NovelNovel => make_episode(
                    e,
                    s,
                    kind,
                    (&m.novel_audio, &m.novel),
                    novel_img,
                    (&m.other_novel_image, &m.other_novel),
                    m.bucket,
                    m.swap,
                ),
                TestKind::FamiliarFamiliar => unreachable!("handled above"),
            };
            out.push(ep);
        }
    }
    Ok(out)
}

fn sample_familiar(pool: &TestPool, n_episodes: usize, seed: u64, mult: QueryMultiplicity) -> Result<Vec<Episode>> {
    let kind = TestKind::FamiliarFamiliar;
    if pool.familiar.len() < 2 {
        return Err(infeasible(kind, "needs at least two familiar classes"));
    }
    for c in &pool.familiar {
        if !pool.has_audio(c) {
            return Err(infeasible(kind, format!("class {c} has no test audio")));
        }
    }
    let usable: Vec<u8> = pool
        .buckets
        .iter()
        .copied()
        .filter(|&b| pool.classes_in(&pool.familiar, b).len() == pool.familiar.len())
        .collect();
    if usable.is_empty() {
        return Err(infeasible(kind, "no source bucket holds images of every familiar class"));
    }
    let mut rng = kind_seed(seed, 2);
    let mut out = Vec::new();
    for e in 0..n_episodes {
        let bucket = *usable.choose(&mut rng).expect("non-empty");
        for (s, q) in pick_queries(&pool.familiar, mult, &mut rng).into_iter().enumerate() {
            let others: Vec<&str> = pool.familiar.iter().copied().filter(|c| *c != q).collect();
            let o = *others.choose(&mut rng).expect("two familiar classes");
            let audio = pool.audio_of(q, &mut rng);
            let target = pool.image_of(q, bucket, &mut rng);
            let other = pool.image_of(o, bucket, &mut rng);
            let swap = rng.random_bool(0.5);
            out.push(make_episode(e, s, kind, (&audio, q), (&target, q), (&other, o), bucket, swap));
        }
    }
    Ok(out)
}

/// Checks every structural invariant of an episode against the manifest.
pub fn validate_episode(manifest: &DatasetManifest, ep: &Episode) -> Result<()> {
    let bad = |reason: String| EvalError::InvalidEpisode {
        episode: ep.episode,
        slot: ep.slot,
        reason,
    };
    let audio = manifest
        .audio
        .iter()
        .find(|a| a.id == ep.query_audio)
        .ok_or_else(|| bad(format!("unknown query {}", ep.query_audio)))?;
    if audio.split != SplitKind::Test || audio.class != ep.query_class {
        return Err(bad("query is not a test word of the stated class".into()));
    }
    if ep.images.iter().filter(|i| i.is_target).count() != 1 {
        return Err(bad("exactly one image must be the target".into()));
    }
    for img in &ep.images {
        let item = manifest
            .images
            .iter()
            .find(|i| i.id == img.id)
            .ok_or_else(|| bad(format!("unknown image {}", img.id)))?;
        if item.split != SplitKind::Test || !item.is_isolated || item.class != img.class {
            return Err(bad(format!("image {} is not an isolated test image of {}", img.id, img.class)));
        }
        if item.source_bucket != ep.source_bucket {
            return Err(bad("images come from different source buckets".into()));
        }
    }
    let novel = |c: &str| manifest.is_novel(c);
    let (q, t, o) = (ep.query_class.as_str(), ep.target().class.as_str(), ep.other().class.as_str());
    let ok = match ep.kind {
        TestKind::FamiliarFamiliar => !novel(q) && t == q && !novel(o) && o != q,
        TestKind::FamiliarqNovel => !novel(q) && t == q && novel(o),
        TestKind::MeFamiliarNovel => novel(q) && t == q && !novel(o),
        TestKind::NovelNovel => novel(q) && t == q && novel(o) && o != q,
        TestKind::MeMismatched => novel(q) && novel(t) && t != q && !novel(o),
    };
    if !ok {
        return Err(bad(format!("class pattern ({q}; {t}, {o}) does not match {}", ep.kind)));
    }
    Ok(())
}

/// Anything that scores a query against an image within an episode.
pub trait Agent: Sync {
    fn score(&self, episode: &Episode, image: &EpisodeImage) -> Result<f64>;
}

/// Deterministic uniform number in `[0, 1)` from a seed and strings.
fn hash_unit(seed: u64, parts: &[&str], n: usize) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for p in parts.iter().map(|s| s.as_bytes()).chain([n.to_le_bytes().as_slice()]) {
        for &b in p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix finaliser
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn trial_key(ep: &Episode) -> usize {
    ep.episode * 1_000_003 + ep.slot
}

/// Uniform random choice: independent random scores per trial and image.
#[derive(Debug, Clone, Copy)]
pub struct RandomAgent {
    pub seed: u64,
}

impl Agent for RandomAgent {
    fn score(&self, ep: &Episode, image: &EpisodeImage) -> Result<f64> {
        Ok(hash_unit(self.seed, &[ep.kind.name(), &ep.query_audio, &image.id], trial_key(ep)))
    }
}

/// Scores the target 1 and the other image 0.
#[derive(Debug, Clone, Copy)]
pub struct OracleAgent;

impl Agent for OracleAgent {
    fn score(&self, _: &Episode, image: &EpisodeImage) -> Result<f64> {
        Ok(if image.is_target { 1.0 } else { 0.0 })
    }
}

/// Scores the target 0 and the other image 1.
#[derive(Debug, Clone, Copy)]
pub struct AntiOracleAgent;

impl Agent for AntiOracleAgent {
    fn score(&self, _: &Episode, image: &EpisodeImage) -> Result<f64> {
        Ok(if image.is_target { 0.0 } else { 1.0 })
    }
}

/// An idealised learner with a perfect mutual-exclusivity bias: it matches
/// familiar words to their own class and maps every novel word to whichever
/// image is novel, choosing at random when both are.
#[derive(Debug, Clone)]
pub struct PerfectMeAgent {
    novel: Vec<String>,
    seed: u64,
}

impl PerfectMeAgent {
    pub fn new(manifest: &DatasetManifest, seed: u64) -> Self {
        Self {
            novel: manifest.novel_classes().into_iter().map(String::from).collect(),
            seed,
        }
    }
}

impl Agent for PerfectMeAgent {
    fn score(&self, ep: &Episode, image: &EpisodeImage) -> Result<f64> {
        let is_novel = |c: &str| self.novel.iter().any(|n| n == c);
        Ok(if is_novel(&ep.query_class) {
            if is_novel(&image.class) {
                1.0 + 0.5 * hash_unit(self.seed, &[&ep.query_audio, &image.id], trial_key(ep))
            } else {
                0.0
            }
        } else if image.class == ep.query_class {
            1.0
        } else {
            0.0
        })
    }
}

/// A trained (or untrained) model: embeddings of every test item are
/// computed once and S looked up per trial.
#[derive(Debug, Clone)]
pub struct ModelAgent {
    words: HashMap<String, Vec<f64>>,
    cells: HashMap<String, Vec<Vec<f64>>>,
}

impl ModelAgent {
    pub fn new(params: &ModelParams, data: &Dataset, exec: Execution) -> Result<Self> {
        let test = data.manifest.split(SplitKind::Test);
        let mut audio_ids: Vec<&str> = test.iter().map(|r| r.audio.as_str()).collect();
        let mut image_ids: Vec<&str> = test.iter().map(|r| r.image.as_str()).collect();
        audio_ids.sort_unstable();
        audio_ids.dedup();
        image_ids.sort_unstable();
        image_ids.dedup();
        Self::for_items(params, data, &audio_ids, &image_ids, exec)
    }

    pub fn for_items(
        params: &ModelParams,
        data: &Dataset,
        audio_ids: &[&str],
        image_ids: &[&str],
        exec: Execution,
    ) -> Result<Self> {
        let mels = audio_ids
            .iter()
            .map(|id| data.audio_by_id(id).map(|a| &a.mel).ok_or_else(|| EvalError::UnknownItem(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let imgs = image_ids
            .iter()
            .map(|id| data.image_by_id(id).ok_or_else(|| EvalError::UnknownItem(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let words = embed_audio(params, &mels, exec)?;
        let cells = embed_images(params, &imgs, exec)?;
        Ok(Self {
            words: audio_ids.iter().map(|s| s.to_string()).zip(words).collect(),
            cells: image_ids.iter().map(|s| s.to_string()).zip(cells).collect(),
        })
    }

    pub fn word(&self, id: &str) -> Option<&[f64]> {
        self.words.get(id).map(Vec::as_slice)
    }

    pub fn similarity(&self, audio: &str, image: &str) -> Result<f64> {
        let w = self.words.get(audio).ok_or_else(|| EvalError::UnknownItem(audio.to_string()))?;
        let c = self.cells.get(image).ok_or_else(|| EvalError::UnknownItem(image.to_string()))?;
        Ok(similarity(w, c)?.0)
    }
}

impl Agent for ModelAgent {
    fn score(&self, ep: &Episode, image: &EpisodeImage) -> Result<f64> {
        self.similarity(&ep.query_audio, &image.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub episode: usize,
    pub slot: usize,
    pub kind: TestKind,
    pub query_audio: String,
    pub query_class: String,
    pub target_image: String,
    pub target_class: String,
    pub other_image: String,
    pub other_class: String,
    pub s_target: f64,
    pub s_other: f64,
    /// Id of the chosen image.
    pub chosen: String,
    pub correct: bool,
    pub tie: bool,
    pub epoch: usize,
}

impl TrialRecord {
    pub fn chose_target(&self) -> bool {
        self.chosen == self.target_image
    }
}

/// The higher-scoring image; a tie goes to the image with the smaller id, so
/// the choice never depends on presentation order.
pub fn choose<'a>(a: (&'a str, f64), b: (&'a str, f64)) -> &'a str {
    if a.1 > b.1 {
        a.0
    } else if b.1 > a.1 {
        b.0
    } else {
        a.0.min(b.0)
    }
}

/// Scores every episode; accuracy counts ties as errors.
pub fn run_test<A: Agent + ?Sized>(
    agent: &A,
    episodes: &[Episode],
    epoch: usize,
    exec: Execution,
) -> Result<(f64, Vec<TrialRecord>)> {
    let recs = exec.map(episodes, |ep| -> Result<TrialRecord> {
        let t = ep.target();
        let o = ep.other();
        let (s_target, s_other) = (agent.score(ep, t)?, agent.score(ep, o)?);
        let chosen = choose((&t.id, s_target), (&o.id, s_other)).to_string();
        let tie = s_target == s_other;
        Ok(TrialRecord {
            episode: ep.episode,
            slot: ep.slot,
            kind: ep.kind,
            query_audio: ep.query_audio.clone(),
            query_class: ep.query_class.clone(),
            target_image: t.id.clone(),
            target_class: t.class.clone(),
            other_image: o.id.clone(),
            other_class: o.class.clone(),
            s_target,
            s_other,
            correct: !tie && chosen == t.id,
            chosen,
            tie,
            epoch,
        })
    });
    let mut recs = recs.into_iter().collect::<Result<Vec<_>>>()?;
    recs.sort_by_key(|r| (r.kind, r.episode, r.slot));
    Ok((accuracy(&recs), recs))
}

pub fn accuracy(records: &[TrialRecord]) -> f64 {
    records.iter().filter(|r| r.correct).count() as f64 / records.len().max(1) as f64
}

/// Trailing moving average over at most `window` points.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            series[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub kind: TestKind,
    pub accuracy: f64,
    pub smoothed: f64,
}

/// Accuracy of each checkpoint on a fixed episode set per kind, with the
/// smoothed series alongside.
pub fn epoch_curve<A: Agent>(
    checkpoints: &[(usize, A)],
    episodes: &[(TestKind, Vec<Episode>)],
    window: usize,
    exec: Execution,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (kind, eps) in episodes {
        let mut raw = Vec::with_capacity(checkpoints.len());
        for (epoch, agent) in checkpoints {
            raw.push((*epoch, run_test(agent, eps, *epoch, exec)?.0));
        }
        let acc: Vec<f64> = raw.iter().map(|r| r.1).collect();
        for ((epoch, accuracy), smoothed) in raw.into_iter().zip(smooth(&acc, window)) {
            out.push(CurvePoint {
                epoch,
                kind: *kind,
                accuracy,
                smoothed,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub multiplicity: QueryMultiplicity,
    /// Level of the Clopper–Pearson interval in the battery table.
    pub level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 1000,
            seed: 0,
            multiplicity: QueryMultiplicity::PerClass,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryRow {
    pub kind: TestKind,
    pub trials: usize,
    pub correct: usize,
    pub ties: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl BatteryRow {
    pub fn from_records(kind: TestKind, records: &[TrialRecord], level: f64) -> Result<Self> {
        let correct = records.iter().filter(|r| r.correct).count();
        let (ci_low, ci_high) = binomial_ci(correct as u64, records.len() as u64, level)?;
        Ok(Self {
            kind,
            trials: records.len(),
            correct,
            ties: records.iter().filter(|r| r.tie).count(),
            accuracy: accuracy(records),
            ci_low,
            ci_high,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub rows: Vec<BatteryRow>,
    pub records: BTreeMap<TestKind, Vec<TrialRecord>>,
}

impl Battery {
    pub fn row(&self, kind: TestKind) -> Option<&BatteryRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn all_records(&self) -> Vec<TrialRecord> {
        self.records.values().flatten().cloned().collect()
    }
}

/// Runs the requested kinds (all five by default) with one shared episode
/// seed.
pub fn full_battery<A: Agent + ?Sized>(
    agent: &A,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
    kinds: &[TestKind],
    epoch: usize,
    exec: Execution,
) -> Result<Battery> {
    let kinds: &[TestKind] = if kinds.is_empty() { &TestKind::ALL } else { kinds };
    let mut rows = Vec::new();
    let mut records = BTreeMap::new();
    for &kind in kinds {
        let eps = sample_episodes(manifest, kind, cfg.n_episodes, cfg.seed, cfg.multiplicity)?;
        let (_, recs) = run_test(agent, &eps, epoch, exec)?;
        rows.push(BatteryRow::from_records(kind, &recs, cfg.level)?);
        records.insert(kind, recs);
    }
    Ok(Battery { rows, records })
}

const TRIAL_HEADER: [&str; 17] = [
    "episode",
    "kind",
    "query_class",
    "target_class",
    "other_class",
    "s_target",
    "s_other",
    "chosen",
    "correct",
    "slot",
    "query_audio",
    "target_image",
    "other_image",
    "tie",
    "epoch",
    "config_hash",
    "seed",
];

/// Writes trial records as CSV; floats use Rust's shortest round-trip form.
pub fn write_trials_csv(path: &Path, records: &[TrialRecord], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRIAL_HEADER)?;
    for r in records {
        w.write_record([
            r.episode.to_string(),
            r.kind.name().to_string(),
            r.query_class.clone(),
            r.target_class.clone(),
            r.other_class.clone(),
            r.s_target.to_string(),
            r.s_other.to_string(),
            r.chosen.clone(),
            (r.correct as u8).to_string(),
            r.slot.to_string(),
            r.query_audio.clone(),
            r.target_image.clone(),
            r.other_image.clone(),
            (r.tie as u8).to_string(),
            r.epoch.to_string(),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::UnknownItem(format!("column {name} in {}", path.display())))
    };
    let idx: Vec<usize> = TRIAL_HEADER[..15].iter().map(|h| col(h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| row.get(idx[i]).unwrap_or_default().to_string();
        let parse_err = |what: &str| EvalError::UnknownItem(format!("malformed {what} in {}", path.display()));
        out.push(TrialRecord {
            episode: f(0).parse().map_err(|_| parse_err("episode"))?,
            kind: f(1).parse()?,
            query_class: f(2),
            target_class: f(3),
            other_class: f(4),
            s_target: f(5).parse().map_err(|_| parse_err("s_target"))?,
            s_other: f(6).parse().map_err(|_| parse_err("s_other"))?,
            chosen: f(7),
            correct: f(8) == "1",
            slot: f(9).parse().map_err(|_| parse_err("slot"))?,
            query_audio: f(10),
            target_image: f(11),
            other_image: f(12),
            tie: f(13) == "1",
            epoch: f(14).parse().map_err(|_| parse_err("epoch"))?,
        });
    }
    Ok(out)
}

pub fn write_trials_json(path: &Path, records: &[TrialRecord], config_hash: &str, seed: u64) -> Result<()> {
    let doc = serde_json::json!({ "config_hash": config_hash, "seed": seed, "trials": records });
    let mut text = serde_json::to_string_pretty(&doc).expect("records serialise");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_battery_csv(path: &Path, rows: &[BatteryRow], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "kind", "label", "trials", "correct", "ties", "accuracy", "ci_low", "ci_high", "config_hash", "seed",
    ])?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.kind.label().to_string(),
            r.trials.to_string(),
            r.correct.to_string(),
            r.ties.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "kind", "accuracy", "smoothed", "config_hash", "seed"])?;
    for p in points {
        w.write_record([
            p.epoch.to_string(),
            p.kind.name().to_string(),
            format!("{:.6}", p.accuracy),
            format!("{:.6}", p.smoothed),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::synthgen::{AudioItem, ClassSpec, DatasetConfig, ImageItem, PairRecord};

    /// A hand-built manifest: test items only, classes f0..f2 familiar and
    /// n0..n2 novel, two buckets, two items per class and bucket.
    pub(crate) fn toy_manifest() -> DatasetManifest {
        let cfg = DatasetConfig {
            n_familiar: 3,
            n_novel: 3,
            ..DatasetConfig::default()
        };
        let vocabulary: Vec<ClassSpec> = crate::synthgen::generate_vocabulary(3, 3, 0, 7).unwrap();
        let mut audio = Vec::new();
        let mut images = Vec::new();
        let mut test = Vec::new();
        let mut n = 0;
        for c in &vocabulary {
            for bucket in 0..2u8 {
                for _ in 0..2 {
                    let a = format!("a{n:06}");
                    let i = format!("i{n:06}");
                    n += 1;
                    audio.push(AudioItem {
                        id: a.clone(),
                        class: c.name.clone(),
                        split: SplitKind::Test,
                    });
                    images.push(ImageItem {
                        id: i.clone(),
                        class: c.name.clone(),
                        split: SplitKind::Test,
                        source_bucket: bucket,
                        is_isolated: true,
                        shapes: vec![c.name.clone()],
                    });
                    test.push(PairRecord {
                        audio: a,
                        image: i,
                        class: c.name.clone(),
                        source_bucket: bucket,
                    });
                }
            }
        }
        DatasetManifest {
            schema_version: crate::synthgen::MANIFEST_SCHEMA_VERSION,
            seed: 7,
            config_hash: None,
            config: cfg,
            vocabulary,
            audio,
            images,
            train: vec![],
            dev: vec![],
            test,
        }
    }

}
