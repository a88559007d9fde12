//! Benchmark loading, engine runs and recall/confusion reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjudication::{Adjudicator, EngineConfig, SceneMetadata, SceneQuery};
use crate::graph::{DrivingAction, OutcomeLabel};

pub const REPORT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: record '{record_id}': {message}")]
    Invalid { line: usize, record_id: String, message: String },
    #[error("record_id '{record_id}' appears on lines {first} and {second}")]
    DuplicateId { record_id: String, first: usize, second: usize },
    #[error("reports cover different record sets ({a} vs {b})")]
    RecordSetMismatch { a: String, b: String },
    #[error("cannot draw {wanted} {label} records, only {available} available")]
    Insufficient { label: OutcomeLabel, wanted: usize, available: usize },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labelled (scene, action) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRecord {
    pub record_id: String,
    pub description: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub metadata: SceneMetadata,
    pub action: DrivingAction,
    pub human_label: OutcomeLabel,
    pub annotator_id: String,
}

impl BenchmarkRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.record_id.trim().is_empty() {
            return Err("record_id is empty".into());
        }
        if self.description.trim().is_empty() {
            return Err("description is empty".into());
        }
        if self.action.is_free_text() {
            return Err(format!("action '{}' is not one of the ten canonical actions", self.action));
        }
        if self.metadata.agent_types.len() != self.metadata.relative_positions.len() {
            return Err("agent_types and relative_positions differ in length".into());
        }
        Ok(())
    }

    pub fn to_query(&self) -> SceneQuery {
        SceneQuery {
            description: self.description.clone(),
            image_ref: self.image_ref.clone(),
            metadata: self.metadata.clone(),
            candidate_action: self.action.clone(),
        }
    }
}

/// Parses newline-delimited benchmark records. Blank lines are skipped.
pub fn parse_benchmark(text: &str) -> Result<Vec<BenchmarkRecord>, EvalError> {
    let mut records = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: BenchmarkRecord = serde_json::from_str(raw).map_err(|e| EvalError::Schema {
            line,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| EvalError::Invalid {
            line,
            record_id: record.record_id.clone(),
            message,
        })?;
        if let Some(first) = seen.insert(record.record_id.clone(), line) {
            return Err(EvalError::DuplicateId {
                record_id: record.record_id,
                first,
                second: line,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkRecord>, EvalError> {
    parse_benchmark(&std::fs::read_to_string(path)?)
}

pub fn write_benchmark(path: &Path, records: &[BenchmarkRecord]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| EvalError::Report(e.to_string()))?);
        out.push('\n');
    }
    crate::fsutil::atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Records per human label, every label present.
pub fn class_counts(records: &[BenchmarkRecord]) -> BTreeMap<OutcomeLabel, usize> {
    let mut counts: BTreeMap<OutcomeLabel, usize> = OutcomeLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for r in records {
        *counts.entry(r.human_label).or_default() += 1;
    }
    counts
}

pub fn is_balanced(records: &[BenchmarkRecord]) -> bool {
    class_counts(records).values().collect::<BTreeSet<_>>().len() == 1
}

/// Draws `per_class` records of each label with a seeded generator. The
/// result is sorted by record id so it does not depend on input order.
pub fn balanced_sample(records: &[BenchmarkRecord], per_class: usize, seed: u64) -> Result<Vec<BenchmarkRecord>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 3);
    for label in OutcomeLabel::ALL {
        let mut pool: Vec<&BenchmarkRecord> = records.iter().filter(|r| r.human_label == label).collect();
        pool.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        if pool.len() < per_class {
            return Err(EvalError::Insufficient {
                label,
                wanted: per_class,
                available: pool.len(),
            });
        }
        out.extend(pool.choose_multiple(&mut rng, per_class).map(|r| (*r).clone()));
    }
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(out)
}

/// What happened to one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: String,
    pub truth: OutcomeLabel,
    /// `Ok(predicted label)` or `Err(error message)`.
    pub result: Result<OutcomeLabel, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub report_version: String,
    pub engine_fingerprint: String,
    pub n_records: usize,
    /// Digest of the sorted (record id, human label) pairs.
    pub record_set: String,
    /// Rows are true labels, columns predictions, both in UNSAFE, SAFE,
    /// REASONABLE order.
    pub confusion: [[u64; 3]; 3],
    /// `None` for a label with no evaluated records.
    pub per_class_recall: BTreeMap<OutcomeLabel, Option<f64>>,
    /// Keyed `TRUE->PREDICTED` over off-diagonal cells, as a share of the
    /// true label's row.
    pub misclassification_rates: BTreeMap<String, Option<f64>>,
    pub failures: Vec<RecordFailure>,
    pub predictions: Vec<RecordOutcome>,
}

fn record_set_digest<'a>(pairs: impl Iterator<Item = (&'a str, OutcomeLabel)>) -> String {
    let mut sorted: Vec<(&str, OutcomeLabel)> = pairs.collect();
    sorted.sort();
    let mut h = Sha256::new();
    for (id, label) in sorted {
        h.update(id.as_bytes());
        h.update(b"\t");
        h.update(label.canonical().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn pair_key(truth: OutcomeLabel, predicted: OutcomeLabel) -> String {
    format!("{truth}->{predicted}")
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvaluationReport {
    /// Aggregates per-record outcomes. Order of `outcomes` does not matter.
    pub fn from_outcomes(engine_fingerprint: impl Into<String>, outcomes: &[RecordOutcome]) -> Self {
        let mut confusion = [[0u64; 3]; 3];
        let mut failures = Vec::new();
        for o in outcomes {
            match &o.result {
                Ok(pred) => confusion[o.truth.index()][pred.index()] += 1,
                Err(error) => failures.push(RecordFailure {
                    record_id: o.record_id.clone(),
                    error: error.clone(),
                }),
            }
        }
        failures.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let mut per_class_recall = BTreeMap::new();
        let mut misclassification_rates = BTreeMap::new();
        for truth in OutcomeLabel::ALL {
            let row = confusion[truth.index()];
            let total: u64 = row.iter().sum();
            per_class_recall.insert(truth, ratio(row[truth.index()], total));
            for pred in OutcomeLabel::ALL.into_iter().filter(|p| *p != truth) {
                misclassification_rates.insert(pair_key(truth, pred), ratio(row[pred.index()], total));
            }
        }
        let mut predictions = outcomes.to_vec();
        predictions.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        EvaluationReport {
            report_version: REPORT_VERSION.into(),
            engine_fingerprint: engine_fingerprint.into(),
            n_records: outcomes.len(),
            record_set: record_set_digest(outcomes.iter().map(|o| (o.record_id.as_str(), o.truth))),
            confusion,
            per_class_recall,
            misclassification_rates,
            failures,
            predictions,
        }
    }

    pub fn recall(&self, label: OutcomeLabel) -> Option<f64> {
        self.per_class_recall.get(&label).copied().flatten()
    }

    /// Every record is either in the matrix or among the failures.
    pub fn is_conserved(&self) -> bool {
        let cells: u64 = self.confusion.iter().flatten().sum();
        cells as usize + self.failures.len() == self.n_records
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EvalError::Report(e.to_string()))?;
        crate::fsutil::atomic_write(path, format!("{text}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let report: Self = serde_json::from_str(&text).map_err(|e| EvalError::Report(e.to_string()))?;
        if report.report_version != REPORT_VERSION {
            return Err(EvalError::Report(format!(
                "unsupported report_version '{}'",
                report.report_version
            )));
        }
        Ok(report)
    }

    /// Plain-text confusion matrix, recall and misclassification table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "engine:   {}", self.engine_fingerprint);
        let _ = writeln!(s, "records:  {} ({} failed)", self.n_records, self.failures.len());
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12}{:>8}{:>8}{:>12}{:>10}", "true\\pred", "UNSAFE", "SAFE", "REASONABLE", "recall");
        for truth in OutcomeLabel::ALL {
            let row = self.confusion[truth.index()];
            let _ = writeln!(
                s,
                "{:<12}{:>8}{:>8}{:>12}{:>10}",
                truth.canonical(),
                row[0],
                row[1],
                row[2],
                pct(self.recall(truth))
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "misclassification (share of true class):");
        for (k, v) in &self.misclassification_rates {
            let _ = writeln!(s, "  {k:<24}{:>8}", pct(*v));
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "failures:");
            for f in &self.failures {
                let _ = writeln!(s, "  {}: {}", f.record_id, f.error);
            }
        }
        s
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.1}%", x * 100.0))
}

fn signed_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:+.1}%", x * 100.0))
}

/// File name for a record's episode; ids may contain path separators.
pub fn episode_file_name(record_id: &str) -> String {
    let safe: String = record_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

/// Runs one engine over the records in order. Episode failures are
/// recorded and the run continues. Episodes are written to `episodes_out`
/// when given.
pub fn run_benchmark(
    records: &[BenchmarkRecord],
    cfg: &EngineConfig,
    adjudicator: &Adjudicator<'_>,
    episodes_out: Option<&Path>,
) -> Result<EvaluationReport, EvalError> {
    if let Some(dir) = episodes_out {
        std::fs::create_dir_all(dir)?;
    }
    let mut outcomes = Vec::with_capacity(records.len());
    for r in records {
        let outcome = match adjudicator.adjudicate(&r.to_query(), cfg) {
            Ok(ep) => {
                if let Some(dir) = episodes_out {
                    ep.save(&dir.join(episode_file_name(&r.record_id)))?;
                }
                RecordOutcome {
                    record_id: r.record_id.clone(),
                    truth: r.human_label,
                    result: Ok(ep.verdict),
                    episode_id: Some(ep.episode_id),
                }
            }
            Err(e) => RecordOutcome {
                record_id: r.record_id.clone(),
                truth: r.human_label,
                result: Err(e.to_string()),
                episode_id: None,
            },
        };
        outcomes.push(outcome);
    }
    Ok(EvaluationReport::from_outcomes(cfg.fingerprint(adjudicator.templates()), &outcomes))
}

/// Signed differences `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub a_engine: String,
    pub b_engine: String,
    pub recall: BTreeMap<OutcomeLabel, Option<f64>>,
    pub confusion: [[i64; 3]; 3],
    pub misclassification_rates: BTreeMap<String, Option<f64>>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

pub fn compare_reports(a: &EvaluationReport, b: &EvaluationReport) -> Result<ReportDelta, EvalError> {
    if a.record_set != b.record_set {
        return Err(EvalError::RecordSetMismatch {
            a: a.record_set.clone(),
            b: b.record_set.clone(),
        });
    }
    let mut confusion = [[0i64; 3]; 3];
    for (i, row) in confusion.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = b.confusion[i][j] as i64 - a.confusion[i][j] as i64;
        }
    }
    Ok(ReportDelta {
        a_engine: a.engine_fingerprint.clone(),
        b_engine: b.engine_fingerprint.clone(),
        recall: OutcomeLabel::ALL
            .into_iter()
            .map(|l| (l, diff(a.recall(l), b.recall(l))))
            .collect(),
        confusion,
        misclassification_rates: a
            .misclassification_rates
            .iter()
            .map(|(k, va)| (k.clone(), diff(*va, b.misclassification_rates.get(k).copied().flatten())))
            .collect(),
    })
}

impl ReportDelta {
    /// Side-by-side recall and misclassification for both reports.
    pub fn render_table(&self, a: &EvaluationReport, b: &EvaluationReport) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "a: {}", self.a_engine);
        let _ = writeln!(s, "b: {}", self.b_engine);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24}{:>10}{:>10}{:>10}", "recall", "a", "b", "b-a");
        for l in OutcomeLabel::ALL {
            let _ = writeln!(
                s,
                "{:<24}{:>10}{:>10}{:>10}",
                l.canonical(),
                pct(a.recall(l)),
                pct(b.recall(l)),
                signed_pct(self.recall[&l])
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24}{:>10}{:>10}{:>10}", "misclassification", "a", "b", "b-a");
        for (k, d) in &self.misclassification_rates {
            let _ = writeln!(
                s,
                "{k:<24}{:>10}{:>10}{:>10}",
                pct(a.misclassification_rates[k]),
                pct(b.misclassification_rates.get(k).copied().flatten()),
                signed_pct(*d)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion delta (rows true, cols predicted):");
        for l in OutcomeLabel::ALL {
            let row = self.confusion[l.index()];
            let _ = writeln!(s, "{:<12}{:>+8}{:>+8}{:>+12}", l.canonical(), row[0], row[1], row[2]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use OutcomeLabel::*;

    fn outcome(id: &str, truth: OutcomeLabel, pred: Option<OutcomeLabel>) -> RecordOutcome {
        RecordOutcome {
            record_id: id.into(),
            truth,
            result: pred.ok_or_else(|| "boom".to_string()),
            episode_id: None,
        }
    }

    fn line(id: &str, action: &str, label: &str) -> String {
        format!(
            r#"{{"record_id":"{id}","description":"scene","action":"{action}","human_label":"{label}","annotator_id":"a1"}}"#
        )
    }

    #[test]
    fn loads_and_counts() {
        let text = [
            line("r1", "STOP", "SAFE"),
            String::new(),
            line("r2", "TURN LEFT", "UNSAFE"),
            line("r3", "ACCELERATE", "REASONABLE"),
        ]
        .join("\n");
        let records = parse_benchmark(&text).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(class_counts(&records).values().copied().collect::<Vec<_>>(), [1, 1, 1]);
        assert!(is_balanced(&records));
    }

    #[test]
    fn rejects_bad_labels_actions_and_duplicates() {
        assert!(matches!(parse_benchmark(&line("r1", "STOP", "OK")), Err(EvalError::Schema { line: 1, .. })));
        assert!(matches!(parse_benchmark(&line("r1", "STOP", "safe")), Err(EvalError::Schema { .. })));
        assert!(matches!(
            parse_benchmark(&line("r1", "hover gently", "SAFE")),
            Err(EvalError::Invalid { .. })
        ));
        let dup = [line("r1", "STOP", "SAFE"), line("r1", "STOP", "SAFE")].join("\n");
        assert!(matches!(
            parse_benchmark(&dup),
            Err(EvalError::DuplicateId { first: 1, second: 2, .. })
        ));
    }

    #[test]
    fn empty_class_recall_is_undefined() {
        let r = EvaluationReport::from_outcomes("e", &[outcome("a", Safe, Some(Safe))]);
        assert_eq!(r.recall(Safe), Some(1.0));
        assert_eq!(r.recall(Unsafe), None);
        assert_eq!(r.misclassification_rates["UNSAFE->SAFE"], None);
        assert!(r.render_table().contains("n/a"));
    }

    #[test]
    fn failures_are_excluded_and_conserved() {
        let r = EvaluationReport::from_outcomes(
            "e",
            &[
                outcome("a", Safe, Some(Unsafe)),
                outcome("b", Safe, None),
                outcome("c", Unsafe, Some(Unsafe)),
            ],
        );
        assert_eq!(r.confusion[Safe.index()], [1, 0, 0]);
        assert_eq!(r.failures.len(), 1);
        assert!(r.is_conserved());
        assert_eq!(r.recall(Safe), Some(0.0));
    }

    #[test]
    fn deltas_are_b_minus_a() {
        let a = EvaluationReport::from_outcomes("a", &[outcome("x", Safe, Some(Unsafe)), outcome("y", Unsafe, Some(Unsafe))]);
        let b = EvaluationReport::from_outcomes("b", &[outcome("y", Unsafe, Some(Safe)), outcome("x", Safe, Some(Safe))]);
        let d = compare_reports(&a, &b).unwrap();
        assert_eq!(d.recall[&Safe], Some(1.0));
        assert_eq!(d.recall[&Unsafe], Some(-1.0));
        assert_eq!(d.recall[&Reasonable], None);
        assert_eq!(d.confusion[Safe.index()], [-1, 1, 0]);
        assert!(d.render_table(&a, &b).contains("+100.0%"));

        let c = EvaluationReport::from_outcomes("c", &[outcome("z", Safe, Some(Safe))]);
        assert!(matches!(compare_reports(&a, &c), Err(EvalError::RecordSetMismatch { .. })));
    }

    #[test]
    fn balanced_sampling_is_seeded_and_order_free() {
        let mut records = Vec::new();
        for i in 0..10 {
            for (label, l) in [("UNSAFE", 'u'), ("SAFE", 's'), ("REASONABLE", 'r')] {
                records.push(parse_benchmark(&line(&format!("{l}{i}"), "STOP", label)).unwrap().remove(0));
            }
        }
        let a = balanced_sample(&records, 4, 7).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(a, balanced_sample(&reversed, 4, 7).unwrap());
        assert_eq!(class_counts(&a).values().copied().collect::<Vec<_>>(), [4, 4, 4]);
        assert!(matches!(balanced_sample(&records, 11, 7), Err(EvalError::Insufficient { .. })));
    }

    #[test]
    fn report_round_trips() {
        let r = EvaluationReport::from_outcomes("e", &[outcome("a", Reasonable, Some(Safe)), outcome("b", Safe, None)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(EvaluationReport::load(&path).unwrap(), r);
    }
}
