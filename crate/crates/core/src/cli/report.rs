//! Cross-run tables: the familiar/ME table and the sanity battery per
//! initialisation, the loss comparison, the 2×2 initialisation grid and
//! pooled statistics. Runs that are missing or not yet evaluated are listed
//! as absent rather than failing the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{io_err, CliError, RunRecord, EVAL_DIR};
use crate::evaltest::{read_trials_csv, TestKind, TrialRecord};
use crate::losses::LossKind;
use crate::model::InitStrategy;
use crate::parallel::Execution;
use crate::stats::{summarize_trials, SummaryRow};

const INITS: [InitStrategy; 4] = [
    InitStrategy {
        audio_pretrained: false,
        vision_pretrained: false,
    },
    InitStrategy {
        audio_pretrained: true,
        vision_pretrained: false,
    },
    InitStrategy {
        audio_pretrained: false,
        vision_pretrained: true,
    },
    InitStrategy {
        audio_pretrained: true,
        vision_pretrained: true,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportSummary {
    pub included: usize,
    pub absent: usize,
}

struct LoadedRun {
    label: String,
    record: RunRecord,
    trials: Vec<TrialRecord>,
}

fn load_run(dir: &Path) -> Result<LoadedRun, String> {
    if !dir.is_dir() {
        return Err("directory does not exist".into());
    }
    let record = RunRecord::load(dir).map_err(|_| "no run.json (not trained)".to_string())?;
    let trials_path = dir.join(EVAL_DIR).join("trials.csv");
    if !trials_path.is_file() {
        return Err("no eval/trials.csv (not evaluated)".into());
    }
    let trials = read_trials_csv(&trials_path).map_err(|e| format!("unreadable trials: {e}"))?;
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun { label, record, trials })
}

/// (loss order, init order) so tables follow a fixed layout.
type GroupKey = (usize, usize);

fn group_key(r: &RunRecord) -> GroupKey {
    let loss = LossKind::ALL
        .iter()
        .position(|k| *k == r.config.train.loss.kind)
        .unwrap_or(usize::MAX);
    let init = INITS
        .iter()
        .position(|i| *i == r.config.train.init)
        .unwrap_or(usize::MAX);
    (loss, init)
}

struct Group<'a> {
    loss: &'static str,
    init: &'static str,
    runs: Vec<&'a LoadedRun>,
    stats: Vec<SummaryRow>,
}

impl Group<'_> {
    fn accuracy(&self, kind: TestKind) -> Option<f64> {
        let (mut c, mut n) = (0usize, 0usize);
        for r in &self.runs {
            for t in r.trials.iter().filter(|t| t.kind == kind) {
                n += 1;
                c += t.correct as usize;
            }
        }
        (n > 0).then(|| c as f64 / n as f64)
    }

    fn ci(&self, kind: TestKind) -> Option<(f64, f64)> {
        let metric = format!("{}_accuracy", kind.name());
        let row = self.stats.iter().find(|r| r.metric == metric)?;
        Some((row.ci_low?, row.ci_high?))
    }

    fn seeds(&self) -> String {
        self.runs
            .iter()
            .map(|r| r.record.seed.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "—".into())
}

fn pct_ci(v: Option<(f64, f64)>) -> String {
    v.map(|(l, h)| format!("[{:.2}, {:.2}]", 100.0 * l, 100.0 * h))
        .unwrap_or_else(|| "—".into())
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let to_cli = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_cli)?;
    w.write_record(header).map_err(to_cli)?;
    for r in rows {
        w.write_record(r).map_err(to_cli)?;
    }
    w.flush().map_err(io_err(path))
}

fn md_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

/// Writes `report.md` and the `report_*.csv` bundle into `out`.
pub fn report(runs: &[PathBuf], out: &Path, exec: Execution) -> Result<ReportSummary, CliError> {
    let mut dirs: Vec<PathBuf> = runs.to_vec();
    dirs.sort();
    dirs.dedup();
    let mut loaded = Vec::new();
    let mut absent = Vec::new();
    for d in &dirs {
        match load_run(d) {
            Ok(r) => loaded.push(r),
            Err(reason) => absent.push((d.display().to_string(), reason)),
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut digest = Sha256::new();
    for r in &loaded {
        digest.update(r.label.as_bytes());
        digest.update(b"\0");
        digest.update(r.record.config_hash.as_bytes());
        digest.update(b"\n");
    }
    let hash: String = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();

    let mut by_key: BTreeMap<GroupKey, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &loaded {
        by_key.entry(group_key(&r.record)).or_default().push(r);
    }
    let mut groups = Vec::new();
    for (_, runs) in by_key {
        let first = &runs[0].record;
        let inputs: Vec<(String, Vec<TrialRecord>)> =
            runs.iter().map(|r| (r.label.clone(), r.trials.clone())).collect();
        let stats = summarize_trials(&inputs, &first.config.stats, first.config.seed, exec)?;
        groups.push(Group {
            loss: first.config.train.loss.kind.name(),
            init: first.config.train.init.label(),
            runs,
            stats,
        });
    }
    let default_loss = LossKind::default().name();

    let mut md = String::new();
    let _ = writeln!(md, "# Mutual-exclusivity report\n");
    let _ = writeln!(
        md,
        "{} run(s) included, {} absent. Report digest `{}`.\n",
        loaded.len(),
        absent.len(),
        &hash[..16]
    );
    let _ = writeln!(md, "Accuracies are percentages pooled over runs; intervals are 95% cluster-bootstrap intervals.\n");

    // Familiar and ME accuracy per initialisation, default loss.
    let me_header = ["init", "runs", "seeds", "familiar_familiar", "me_familiar_novel", "me_ci", "config_hash"];
    let me_rows: Vec<Vec<String>> = groups
        .iter()
        .filter(|g| g.loss == default_loss)
        .map(|g| {
            vec![
                g.init.to_string(),
                g.runs.len().to_string(),
                g.seeds(),
                pct(g.accuracy(TestKind::FamiliarFamiliar)),
                pct(g.accuracy(TestKind::MeFamiliarNovel)),
                pct_ci(g.ci(TestKind::MeFamiliarNovel)),
                hash.clone(),
            ]
        })
        .collect();
    write_table(&out.join("report_me.csv"), &me_header, &me_rows)?;
    let _ = writeln!(md, "## Familiar–familiar and familiar–novel (ME) accuracy, `{default_loss}` loss\n");
    md_table(
        &mut md,
        &["init", "runs", "seeds", "familiar–familiar", "familiar–novel (ME)", "ME 95% CI"],
        &me_rows.iter().map(|r| r[..6].to_vec()).collect::<Vec<_>>(),
    );

    let sanity_header = [
        "init",
        "runs",
        "seeds",
        "familiarq_novel",
        "me_familiar_novel",
        "me_mismatched",
        "novel_novel",
        "novel_novel_ci",
        "config_hash",
    ];
    let sanity_rows: Vec<Vec<String>> = groups
        .iter()
        .filter(|g| g.loss == default_loss)
        .map(|g| {
            vec![
                g.init.to_string(),
                g.runs.len().to_string(),
                g.seeds(),
                pct(g.accuracy(TestKind::FamiliarqNovel)),
                pct(g.accuracy(TestKind::MeFamiliarNovel)),
                pct(g.accuracy(TestKind::MeMismatched)),
                pct(g.accuracy(TestKind::NovelNovel)),
                pct_ci(g.ci(TestKind::NovelNovel)),
                hash.clone(),
            ]
        })
        .collect();
    write_table(&out.join("report_sanity.csv"), &sanity_header, &sanity_rows)?;
    let _ = writeln!(md, "## Sanity battery, `{default_loss}` loss\n");
    md_table(
        &mut md,
        &[
            "init",
            "runs",
            "seeds",
            "familiar query–novel",
            "familiar–novel (ME)",
            "familiar–novel*",
            "novel–novel",
            "novel–novel 95% CI",
        ],
        &sanity_rows.iter().map(|r| r[..8].to_vec()).collect::<Vec<_>>(),
    );

    let loss_header = ["loss", "init", "runs", "seeds", "familiar_familiar", "me_familiar_novel", "me_ci", "config_hash"];
    let loss_rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.loss.to_string(),
                g.init.to_string(),
                g.runs.len().to_string(),
                g.seeds(),
                pct(g.accuracy(TestKind::FamiliarFamiliar)),
                pct(g.accuracy(TestKind::MeFamiliarNovel)),
                pct_ci(g.ci(TestKind::MeFamiliarNovel)),
                hash.clone(),
            ]
        })
        .collect();
    write_table(&out.join("report_losses.csv"), &loss_header, &loss_rows)?;
    let _ = writeln!(md, "## Loss comparison\n");
    md_table(
        &mut md,
        &["loss", "init", "runs", "seeds", "familiar–familiar", "familiar–novel (ME)", "ME 95% CI"],
        &loss_rows.iter().map(|r| r[..7].to_vec()).collect::<Vec<_>>(),
    );

    // 2×2 grid: rows audio init, columns vision init.
    let cell = |audio: bool, vision: bool| -> String {
        let want = InitStrategy {
            audio_pretrained: audio,
            vision_pretrained: vision,
        };
        groups
            .iter()
            .find(|g| g.loss == default_loss && g.init == want.label())
            .map(|g| format!("{} (n={})", pct(g.accuracy(TestKind::MeFamiliarNovel)), g.runs.len()))
            .unwrap_or_else(|| "absent".into())
    };
    let grid_rows = vec![
        vec!["audio scratch".to_string(), cell(false, false), cell(false, true), hash.clone()],
        vec!["audio pretrained".to_string(), cell(true, false), cell(true, true), hash.clone()],
    ];
    write_table(
        &out.join("report_grid.csv"),
        &["audio_init", "vision_scratch", "vision_pretrained", "config_hash"],
        &grid_rows,
    )?;
    let _ = writeln!(md, "## Initialisation grid (ME accuracy, `{default_loss}` loss)\n");
    md_table(
        &mut md,
        &["", "vision scratch", "vision pretrained"],
        &grid_rows.iter().map(|r| r[..3].to_vec()).collect::<Vec<_>>(),
    );

    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut stats_rows = Vec::new();
    for g in &groups {
        for r in &g.stats {
            stats_rows.push(vec![
                g.loss.to_string(),
                g.init.to_string(),
                r.metric.clone(),
                format!("{:.6}", r.estimate),
                opt(r.ci_low),
                opt(r.ci_high),
                opt(r.p_value),
                r.method.clone(),
                g.seeds(),
                hash.clone(),
            ]);
        }
    }
    write_table(
        &out.join("report_stats.csv"),
        &[
            "loss", "init", "metric", "estimate", "ci_low", "ci_high", "p_value", "method", "seeds", "config_hash",
        ],
        &stats_rows,
    )?;
    let _ = writeln!(md, "## Pooled statistics\n");
    md_table(
        &mut md,
        &["loss", "init", "metric", "estimate", "CI", "p", "method"],
        &stats_rows
            .iter()
            .map(|r| {
                let ci = if r[4].is_empty() {
                    "—".to_string()
                } else {
                    format!("[{}, {}]", r[4], r[5])
                };
                let p = if r[6].is_empty() { "—".to_string() } else { r[6].clone() };
                vec![r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone(), ci, p, r[7].clone()]
            })
            .collect::<Vec<_>>(),
    );

    let mut run_rows: Vec<Vec<String>> = loaded
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                "included".into(),
                String::new(),
                r.record.seed.to_string(),
                r.record.config_hash.clone(),
            ]
        })
        .collect();
    run_rows.extend(
        absent
            .iter()
            .map(|(d, why)| vec![d.clone(), "absent".into(), why.clone(), String::new(), String::new()]),
    );
    write_table(&out.join("report_runs.csv"), &["run", "status", "reason", "seed", "config_hash"], &run_rows)?;
    if !absent.is_empty() {
        let _ = writeln!(md, "## Absent runs\n");
        for (d, why) in &absent {
            let _ = writeln!(md, "- `{d}`: {why}");
        }
        md.push('\n');
    }
    let path = out.join("report.md");
    fs::write(&path, md).map_err(io_err(&path))?;
    Ok(ReportSummary {
        included: loaded.len(),
        absent: absent.len(),
    })
}
