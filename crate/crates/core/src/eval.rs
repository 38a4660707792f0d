//! Exact-match tuple scoring.
//!
//! A predicted tuple counts as correct only if every element equals a gold
//! tuple's element byte for byte. Micro scores pool counts over all
//! instances; macro-F1 averages per-instance F1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DataError, EvalError};
use crate::multiview::{PredictionRecord, Strategy};
use crate::types::{Instance, Task, TupleSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl Add for MatchCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            true_positives: self.true_positives + rhs.true_positives,
            false_positives: self.false_positives + rhs.false_positives,
            false_negatives: self.false_negatives + rhs.false_negatives,
        }
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Counts exact matches between two tuple sets.
pub fn match_tuples(gold: &TupleSet, pred: &TupleSet) -> MatchCounts {
    let tp = pred.iter().filter(|t| gold.contains(*t)).count() as u64;
    MatchCounts {
        true_positives: tp,
        false_positives: pred.len() as u64 - tp,
        false_negatives: gold.len() as u64 - tp,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 from pooled counts, zero wherever a
/// denominator is zero.
pub fn micro_scores(counts: MatchCounts) -> Scores {
    let precision = ratio(counts.true_positives, counts.true_positives + counts.false_positives);
    let recall = ratio(counts.true_positives, counts.true_positives + counts.false_negatives);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        precision,
        recall,
        f1,
    }
}

/// F1 of one instance, 1 when gold and prediction are both empty.
pub fn instance_f1(counts: MatchCounts) -> f64 {
    if counts == MatchCounts::default() {
        1.0
    } else {
        micro_scores(counts).f1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    #[serde(flatten)]
    pub counts: MatchCounts,
    pub f1: f64,
}

/// Run settings echoed into reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub task: Option<Task>,
    pub dataset: Option<String>,
    pub strategy: Option<Strategy>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub escalated: Vec<String>,
    #[serde(default)]
    pub cancelled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub counts: MatchCounts,
    /// Gold instances without a prediction, scored as empty predictions.
    pub missing_predictions: usize,
    pub per_instance: Vec<InstanceScore>,
    pub metadata: RunMetadata,
}

/// Scores predictions against gold. Every gold instance is scored; those
/// without a prediction count as predicting nothing.
pub fn evaluate(
    gold: &[Instance],
    predictions: &[PredictionRecord],
    metadata: RunMetadata,
) -> Result<MetricReport, EvalError> {
    let gold_by_id: HashMap<&str, &TupleSet> = gold
        .iter()
        .map(|i| {
            i.gold
                .as_ref()
                .map(|g| (i.id.as_str(), g))
                .ok_or_else(|| EvalError::MissingGold(format!("instance `{}` has no labels", i.id)))
        })
        .collect::<Result<_, _>>()?;
    let mut pred_by_id: HashMap<&str, TupleSet> = HashMap::new();
    for p in predictions {
        if !gold_by_id.contains_key(p.id.as_str()) {
            return Err(EvalError::MissingGold(format!(
                "no gold labels for predicted instance `{}`",
                p.id
            )));
        }
        pred_by_id.insert(&p.id, p.tuples.iter().cloned().collect());
    }

    let empty = TupleSet::new();
    let mut counts = MatchCounts::default();
    let mut per_instance = Vec::with_capacity(gold.len());
    let mut missing = 0;
    for inst in gold {
        let pred = pred_by_id.get(inst.id.as_str()).unwrap_or_else(|| {
            missing += 1;
            &empty
        });
        let c = match_tuples(gold_by_id[inst.id.as_str()], pred);
        counts += c;
        per_instance.push(InstanceScore {
            id: inst.id.clone(),
            counts: c,
            f1: instance_f1(c),
        });
    }
    let micro = micro_scores(counts);
    let macro_f1 = if per_instance.is_empty() {
        0.0
    } else {
        per_instance.iter().map(|s| s.f1).sum::<f64>() / per_instance.len() as f64
    };
    Ok(MetricReport {
        micro_precision: micro.precision,
        micro_recall: micro.recall,
        micro_f1: micro.f1,
        macro_f1,
        counts,
        missing_predictions: missing,
        per_instance,
        metadata,
    })
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METADATA_FILE: &str = "metadata.json";

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Data(DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a JSONL file of predictions.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| {
            EvalError::Data(DataError::Json {
                path: path.to_owned(),
                line: n + 1,
                source,
            })
        })?);
    }
    if out.is_empty() {
        return Err(EvalError::EmptyPredictions(path.to_owned()));
    }
    Ok(out)
}

/// Scores for one seed directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub directory: PathBuf,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Per-seed reports and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: Vec<SeedReport>,
    pub mean: MeanScores,
}

impl RunReport {
    /// Plain-text table with scores ×100 to two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>8}",
            "run", "P", "R", "F1", "macroF1"
        );
        let row = |out: &mut String, name: &str, p: f64, r: f64, f: f64, m: f64| {
            let _ = writeln!(
                out,
                "{name:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                p * 100.0,
                r * 100.0,
                f * 100.0,
                m * 100.0
            );
        };
        for s in &self.seeds {
            let name = match s.report.metadata.seed {
                Some(seed) => format!("seed {seed}"),
                None => s.directory.display().to_string(),
            };
            let r = &s.report;
            row(&mut out, &name, r.micro_precision, r.micro_recall, r.micro_f1, r.macro_f1);
        }
        if self.seeds.len() > 1 {
            let m = &self.mean;
            row(&mut out, "mean", m.micro_precision, m.micro_recall, m.micro_f1, m.macro_f1);
        }
        if let Some(md) = self.seeds.first().map(|s| &s.report.metadata) {
            let _ = writeln!(
                out,
                "strategy={} m={} k={}",
                md.strategy.map_or("-".into(), |s| s.to_string()),
                md.m.map_or("-".into(), |m| m.to_string()),
                md.k.map_or("-".into(), |k| k.to_string()),
            );
        }
        out
    }
}

/// Seed directories of a run: the directory itself when it holds
/// predictions, otherwise its `seed-*` subdirectories in numeric order.
pub fn seed_directories(run: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if run.join(PREDICTIONS_FILE).is_file() {
        return Ok(vec![run.to_owned()]);
    }
    let entries = fs::read_dir(run).map_err(|e| io_err(run, e))?;
    let mut dirs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(run, e))?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed-")) else {
            continue;
        };
        if let Ok(seed) = seed.parse() {
            if entry.path().join(PREDICTIONS_FILE).is_file() {
                dirs.push((seed, entry.path()));
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(EvalError::EmptyPredictions(run.to_owned()));
    }
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

/// Scores every seed directory of `run` against `gold`.
pub fn report(run: &Path, gold: &[Instance]) -> Result<RunReport, EvalError> {
    let mut seeds = Vec::new();
    for dir in seed_directories(run)? {
        let predictions = read_predictions(&dir.join(PREDICTIONS_FILE))?;
        let md_path = dir.join(METADATA_FILE);
        let metadata = match fs::read_to_string(&md_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|source| {
                EvalError::Data(DataError::Json {
                    path: md_path.clone(),
                    line: 1,
                    source,
                })
            })?,
            Err(_) => RunMetadata::default(),
        };
        seeds.push(SeedReport {
            report: evaluate(gold, &predictions, metadata)?,
            directory: dir,
        });
    }
    let n = seeds.len() as f64;
    let mean = MeanScores {
        micro_precision: seeds.iter().map(|s| s.report.micro_precision).sum::<f64>() / n,
        micro_recall: seeds.iter().map(|s| s.report.micro_recall).sum::<f64>() / n,
        micro_f1: seeds.iter().map(|s| s.report.micro_f1).sum::<f64>() / n,
        macro_f1: seeds.iter().map(|s| s.report.macro_f1).sum::<f64>() / n,
    };
    Ok(RunReport { seeds, mean })
}
