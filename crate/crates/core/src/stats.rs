//! Uncertainty and significance: exact binomial intervals, permutation
//! tests and a cluster bootstrap over trial outcomes.
//!
//! Trials sharing an episode, a spoken query or a class pair are not
//! independent, so accuracy intervals resample whole clusters. Every
//! resampling routine derives one RNG per replicate from `(seed, index)`,
//! which keeps results identical with or without the thread pool.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF};
use thiserror::Error;

use crate::evaltest::{TestKind, TrialRecord};
use crate::parallel::Execution;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid counts: {successes} successes out of {n}")]
    Counts { successes: u64, n: u64 },
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("{0}")]
    Input(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StatsError::Level(level))
    }
}

/// Clopper–Pearson interval for a binomial proportion.
pub fn binomial_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if n == 0 || successes > n {
        return Err(StatsError::Counts { successes, n });
    }
    let alpha = 1.0 - level;
    let (k, n) = (successes as f64, n as f64);
    let low = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .expect("positive shapes")
            .inverse_cdf(alpha / 2.0)
    };
    let high = if k == n {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .expect("positive shapes")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((low, high))
}

/// Central acceptance region, as proportions, of `n` Bernoulli(`p`) trials:
/// an observed accuracy inside it is consistent with `p` at the given level.
pub fn binomial_acceptance(n: u64, p: f64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if n == 0 || !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Input(format!("bad binomial n={n}, p={p}")));
    }
    let alpha = 1.0 - level;
    let dist = Binomial::new(p, n).map_err(|e| StatsError::Input(e.to_string()))?;
    let lo = dist.inverse_cdf(alpha / 2.0);
    let hi = dist.inverse_cdf(1.0 - alpha / 2.0);
    Ok((lo as f64 / n as f64, hi as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// Mean of the first group exceeds the second.
    Greater,
}

fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Permutation test for a difference in means; `p = (1 + #extreme) / (1 + n)`.
pub fn permutation_test(
    a: &[f64],
    b: &[f64],
    n_permutations: usize,
    alternative: Alternative,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Input("permutation test needs two non-empty groups".into()));
    }
    let stat = |d: f64| match alternative {
        Alternative::TwoSided => d.abs(),
        Alternative::Greater => d,
    };
    let observed = stat(mean(a) - mean(b));
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    // Tolerance so that permutations reproducing the observed split count
    // as extreme despite summation-order rounding.
    let tol = 1e-12 * (1.0 + observed.abs());
    let extreme = exec.map_range(n_permutations, |i| {
        let mut rng = replicate_rng(seed, i);
        let mut p = pooled.clone();
        p.shuffle(&mut rng);
        let d = mean(&p[..a.len()]) - mean(&p[a.len()..]);
        stat(d) >= observed - tol
    });
    let count = extreme.into_iter().filter(|&e| e).count();
    Ok((1 + count) as f64 / (1 + n_permutations) as f64)
}

/// Which grouping a cluster bootstrap resamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKey {
    Episode,
    Query,
    ClassPair,
    /// Every trial is its own cluster (the iid bootstrap).
    Trial,
}

impl ClusterKey {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "episode" => Some(Self::Episode),
            "query" => Some(Self::Query),
            "class_pair" => Some(Self::ClassPair),
            "trial" => Some(Self::Trial),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Episode => "episode",
            Self::Query => "query",
            Self::ClassPair => "class_pair",
            Self::Trial => "trial",
        }
    }
}

/// Binary outcomes, each labelled with the clusters it belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusteredOutcomes {
    pub outcomes: Vec<bool>,
    pub episode: Vec<String>,
    pub query: Vec<String>,
    pub class_pair: Vec<String>,
}

impl ClusteredOutcomes {
    pub fn push(&mut self, outcome: bool, episode: String, query: String, class_pair: String) {
        self.outcomes.push(outcome);
        self.episode.push(episode);
        self.query.push(query);
        self.class_pair.push(class_pair);
    }

    /// Outcomes of trial records; `run` prefixes the episode label so that
    /// records pooled over runs keep their episodes apart.
    pub fn extend_from_records(&mut self, records: &[TrialRecord], run: &str) {
        for r in records {
            let mut pair = [r.query_class.as_str(), r.target_class.as_str(), r.other_class.as_str()];
            pair[1..].sort_unstable();
            self.push(
                r.correct,
                format!("{run}/{}", r.episode),
                r.query_audio.clone(),
                pair.join("|"),
            );
        }
    }

    pub fn from_records(records: &[TrialRecord]) -> Self {
        let mut c = Self::default();
        c.extend_from_records(records, "");
        c
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().filter(|&&o| o).count() as f64 / self.outcomes.len().max(1) as f64
    }

    /// `(successes, trials)` per cluster, in label order.
    pub fn clusters(&self, key: ClusterKey) -> Vec<(u64, u64)> {
        let labels = match key {
            ClusterKey::Episode => &self.episode,
            ClusterKey::Query => &self.query,
            ClusterKey::ClassPair => &self.class_pair,
            ClusterKey::Trial => {
                return self.outcomes.iter().map(|&o| (o as u64, 1)).collect();
            }
        };
        let mut map: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for (o, l) in self.outcomes.iter().zip(labels) {
            let e = map.entry(l).or_default();
            e.0 += *o as u64;
            e.1 += 1;
        }
        map.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

impl BootstrapCi {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// Percentile interval of a quantile-sorted sample (linear interpolation).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile cluster bootstrap for mean accuracy: whole clusters are drawn
/// with replacement and the pooled success rate of each replicate recorded.
pub fn cluster_bootstrap(
    c: &ClusteredOutcomes,
    key: ClusterKey,
    n_resamples: usize,
    level: f64,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapCi> {
    check_level(level)?;
    let clusters = c.clusters(key);
    if clusters.len() < 2 {
        return Err(StatsError::Input(format!(
            "cluster bootstrap needs at least two clusters, got {}",
            clusters.len()
        )));
    }
    if n_resamples == 0 {
        return Err(StatsError::Input("n_resamples must be positive".into()));
    }
    let m = clusters.len();
    let mut reps = exec.map_range(n_resamples, |i| {
        let mut rng = replicate_rng(seed, i);
        let (mut s, mut n) = (0u64, 0u64);
        for _ in 0..m {
            let (cs, cn) = clusters[rng.random_range(0..m)];
            s += cs;
            n += cn;
        }
        s as f64 / n as f64
    });
    reps.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(BootstrapCi {
        estimate: c.mean(),
        low: quantile(&reps, alpha / 2.0),
        high: quantile(&reps, 1.0 - alpha / 2.0),
    })
}

/// One line of the statistics summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub estimate: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
    pub method: String,
}

/// Writes `metric,estimate,ci_low,ci_high,p_value,method` plus the config
/// hash and seed of the producing run.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "estimate", "ci_low", "ci_high", "p_value", "method", "config_hash", "seed"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.metric.clone(),
            format!("{:.6}", r.estimate),
            opt(r.ci_low),
            opt(r.ci_high),
            opt(r.p_value),
            r.method.clone(),
            config_hash.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush().map_err(|source| StatsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Resampling settings shared by the `eval` summary and the `report`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub n_resamples: usize,
    pub n_permutations: usize,
    pub level: f64,
    pub cluster_key: ClusterKey,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            n_resamples: 2000,
            n_permutations: 5000,
            level: 0.95,
            cluster_key: ClusterKey::Episode,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        check_level(self.level)?;
        if self.n_resamples == 0 || self.n_permutations == 0 {
            return Err(StatsError::Input("n_resamples and n_permutations must be positive".into()));
        }
        Ok(())
    }
}

/// Directional comparisons reported alongside the per-kind accuracies:
/// (metric, first kind, second kind, alternative).
pub const COMPARISONS: [(&str, TestKind, TestKind, Alternative); 3] = [
    ("me_minus_novel_novel", TestKind::MeFamiliarNovel, TestKind::NovelNovel, Alternative::Greater),
    ("familiarq_novel_minus_me", TestKind::FamiliarqNovel, TestKind::MeFamiliarNovel, Alternative::Greater),
    ("me_mismatched_minus_me", TestKind::MeMismatched, TestKind::MeFamiliarNovel, Alternative::TwoSided),
];

/// Pools trial records of several runs (labelled by run) into per-kind
/// accuracies with cluster-bootstrap intervals, plus permutation tests for
/// the [`COMPARISONS`] whose kinds are both present.
pub fn summarize_trials(
    runs: &[(String, Vec<TrialRecord>)],
    cfg: &StatsConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let mut by_kind: BTreeMap<TestKind, ClusteredOutcomes> = BTreeMap::new();
    for (run, records) in runs {
        for kind in TestKind::ALL {
            let subset: Vec<TrialRecord> = records.iter().filter(|r| r.kind == kind).cloned().collect();
            if !subset.is_empty() {
                by_kind.entry(kind).or_default().extend_from_records(&subset, run);
            }
        }
    }
    let mut rows = Vec::new();
    for (i, (kind, c)) in by_kind.iter().enumerate() {
        let (ci_low, ci_high) = if c.clusters(cfg.cluster_key).len() >= 2 {
            let ci = cluster_bootstrap(c, cfg.cluster_key, cfg.n_resamples, cfg.level, seed ^ (i as u64 + 1), exec)?;
            (Some(ci.low), Some(ci.high))
        } else {
            (None, None)
        };
        rows.push(SummaryRow {
            metric: format!("{}_accuracy", kind.name()),
            estimate: c.mean(),
            ci_low,
            ci_high,
            p_value: None,
            method: format!("cluster_bootstrap:{}", cfg.cluster_key.name()),
        });
    }
    let as_f64 = |c: &ClusteredOutcomes| -> Vec<f64> { c.outcomes.iter().map(|&o| o as u8 as f64).collect() };
    for (j, (metric, a, b, alt)) in COMPARISONS.iter().enumerate() {
        let (Some(ca), Some(cb)) = (by_kind.get(a), by_kind.get(b)) else {
            continue;
        };
        let p = permutation_test(&as_f64(ca), &as_f64(cb), cfg.n_permutations, *alt, seed ^ (0x100 + j as u64), exec)?;
        rows.push(SummaryRow {
            metric: metric.to_string(),
            estimate: ca.mean() - cb.mean(),
            ci_low: None,
            ci_high: None,
            p_value: Some(p),
            method: match alt {
                Alternative::Greater => "permutation:greater".into(),
                Alternative::TwoSided => "permutation:two_sided".into(),
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::beta::beta_reg;

    /// Reference Clopper–Pearson by bisection on the regularised incomplete
    /// beta function (independent of the quantile routine under test).
    fn cp_by_bisection(k: u64, n: u64, level: f64) -> (f64, f64) {
        let a = (1.0 - level) / 2.0;
        let solve = |f: &dyn Fn(f64) -> f64| {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (kf, nf) = (k as f64, n as f64);
        // P(X >= k | p) = I_p(k, n-k+1) increases in p; lower bound where it equals a.
        let low = if k == 0 { 0.0 } else { solve(&|p| beta_reg(kf, nf - kf + 1.0, p) - a) };
        // P(X <= k | p) = 1 - I_p(k+1, n-k) decreases in p; upper bound where it equals a.
        let high = if k == n { 1.0 } else { solve(&|p| beta_reg(kf + 1.0, nf - kf, p) - (1.0 - a)) };
        (low, high)
    }

    #[test]
    fn clopper_pearson_reference_value() {
        let (lo, hi) = binomial_ci(50, 100, 0.95).unwrap();
        assert!((lo - 0.3983).abs() < 1e-3 && (hi - 0.6017).abs() < 1e-3, "{lo} {hi}");
    }

    #[test]
    fn clopper_pearson_matches_bisection_oracle() {
        for &(k, n) in &[(0, 10), (1, 10), (5, 10), (9, 10), (10, 10), (37, 80), (500, 1000), (3, 7)] {
            for &level in &[0.9, 0.95, 0.99] {
                let (lo, hi) = binomial_ci(k, n, level).unwrap();
                let (rlo, rhi) = cp_by_bisection(k, n, level);
                assert!((lo - rlo).abs() < 1e-8 && (hi - rhi).abs() < 1e-8, "{k}/{n}@{level}");
            }
        }
    }

    #[test]
    fn clopper_pearson_boundaries_and_symmetry() {
        assert_eq!(binomial_ci(0, 10, 0.95).unwrap().0, 0.0);
        assert_eq!(binomial_ci(10, 10, 0.95).unwrap().1, 1.0);
        for k in 0..=10 {
            let (lo, hi) = binomial_ci(k, 10, 0.95).unwrap();
            let (mlo, mhi) = binomial_ci(10 - k, 10, 0.95).unwrap();
            assert!((lo - (1.0 - mhi)).abs() < 1e-9 && (hi - (1.0 - mlo)).abs() < 1e-9);
        }
        assert!(binomial_ci(11, 10, 0.95).is_err());
        assert!(binomial_ci(1, 0, 0.95).is_err());
        assert!(binomial_ci(1, 2, 1.0).is_err());
    }

    #[test]
    fn acceptance_region_covers_its_mass() {
        let (lo, hi) = binomial_acceptance(1000, 0.5, 0.99).unwrap();
        assert!(lo < 0.5 && hi > 0.5);
        let d = Binomial::new(0.5, 1000).unwrap();
        let mass = d.cdf((hi * 1000.0).round() as u64) - d.cdf((lo * 1000.0).round() as u64 - 1);
        assert!(mass >= 0.99, "{mass}");
    }

    #[test]
    fn permutation_extremes_and_null() {
        let ones = vec![1.0; 50];
        let zeros = vec![0.0; 50];
        let n = 999;
        let p = permutation_test(&ones, &zeros, n, Alternative::TwoSided, 1, Execution::Sequential).unwrap();
        assert!(p <= 1.0 / n as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let a: Vec<f64> = (0..40).map(|_| rng.random_range(0..2) as f64).collect();
            let p = permutation_test(&a, &a, 200, Alternative::TwoSided, seed, Execution::Sequential).unwrap();
            assert!(p > 0.05 && p <= 1.0);
        }
        // one-sided in the wrong direction is never significant
        let p = permutation_test(&zeros, &ones, 200, Alternative::Greater, 3, Execution::Sequential).unwrap();
        assert!(p > 0.9);
        assert!(permutation_test(&[], &ones, 10, Alternative::TwoSided, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn permutation_is_execution_independent() {
        let a: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let s = permutation_test(&a, &b, 300, Alternative::TwoSided, 9, Execution::Sequential).unwrap();
        let p = permutation_test(&a, &b, 300, Alternative::TwoSided, 9, Execution::Parallel).unwrap();
        assert_eq!(s, p);
    }

    fn simulate(rng: &mut ChaCha8Rng, clusters: usize, per: usize, p: f64) -> ClusteredOutcomes {
        let mut c = ClusteredOutcomes::default();
        for k in 0..clusters {
            for t in 0..per {
                c.push(rng.random_bool(p), format!("e{k}"), format!("q{k}-{t}"), "x".into());
            }
        }
        c
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let mut c = ClusteredOutcomes::default();
        for k in 0..5 {
            c.push(true, format!("e{k}"), "q".into(), "p".into());
        }
        let ci = cluster_bootstrap(&c, ClusterKey::Episode, 100, 0.95, 0, Execution::Sequential).unwrap();
        assert_eq!((ci.low, ci.high), (1.0, 1.0));
        assert!(cluster_bootstrap(&c, ClusterKey::Query, 100, 0.95, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn singleton_clusters_match_iid_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = simulate(&mut rng, 300, 1, 0.6);
        let cl = cluster_bootstrap(&c, ClusterKey::Episode, 2000, 0.95, 1, Execution::Sequential).unwrap();
        let iid = cluster_bootstrap(&c, ClusterKey::Trial, 2000, 0.95, 2, Execution::Sequential).unwrap();
        assert!((cl.width() / iid.width() - 1.0).abs() < 0.2);
    }

    #[test]
    fn duplication_leaves_cluster_ci_but_shrinks_naive_ci() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = simulate(&mut rng, 60, 5, 0.5);
        let mut dup = c.clone();
        for i in 0..c.len() {
            dup.push(c.outcomes[i], c.episode[i].clone(), c.query[i].clone() + "'", c.class_pair[i].clone());
        }
        let a = cluster_bootstrap(&c, ClusterKey::Episode, 4000, 0.95, 7, Execution::Sequential).unwrap();
        let b = cluster_bootstrap(&dup, ClusterKey::Episode, 4000, 0.95, 7, Execution::Sequential).unwrap();
        assert!((b.width() / a.width() - 1.0).abs() < 0.1);
        let k = c.outcomes.iter().filter(|&&o| o).count() as u64;
        let (l1, h1) = binomial_ci(k, c.len() as u64, 0.95).unwrap();
        let (l2, h2) = binomial_ci(2 * k, 2 * c.len() as u64, 0.95).unwrap();
        let ratio = (h1 - l1) / (h2 - l2);
        assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn summary_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![SummaryRow {
            metric: "me".into(),
            estimate: 0.6,
            ci_low: Some(0.55),
            ci_high: Some(0.65),
            p_value: None,
            method: "cluster_bootstrap".into(),
        }];
        write_summary_csv(&path, &rows, "abc", 4).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("metric,estimate,ci_low,ci_high,p_value,method"));
        assert!(text.contains("me,0.600000,0.550000,0.650000,,cluster_bootstrap,abc,4"));
    }
}
