//! Annotation task pool and append-only submission log.
//!
//! Every submission is one JSON line holding all ten labels, written with a
//! single append. A torn trailing line from a crash is ignored on load and
//! dropped by [`AnnotationStore::compact`], so a submission is stored either
//! whole or not at all.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use precedent_core::adjudication::SceneMetadata;
use precedent_core::evaluation::BenchmarkRecord;
use precedent_core::{DrivingAction, OutcomeLabel};

use crate::error::{ErrorCode, ServiceError};

/// One scene awaiting labels, as stored in the task pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub description: String,
    /// Image path relative to the media root.
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub metadata: SceneMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Complete,
}

/// A task as presented to one annotator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub description: String,
    #[serde(default)]
    pub image_url: Option<String>,
    #[serde(default)]
    pub metadata: SceneMetadata,
    pub actions: Vec<String>,
    pub labels: Vec<String>,
    pub status: TaskStatus,
}

/// Labels as submitted: canonical action phrase to canonical label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub task_id: String,
    pub annotator_id: String,
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub submitted_at: Option<String>,
}

/// A validated submission as written to the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredSubmission {
    pub task_id: String,
    pub annotator_id: String,
    pub labels: BTreeMap<String, OutcomeLabel>,
    pub submitted_at: String,
}

pub fn canonical_actions() -> Vec<String> {
    DrivingAction::ALL.iter().map(|a| a.canonical().to_string()).collect()
}

pub fn canonical_labels() -> Vec<String> {
    OutcomeLabel::ALL.iter().map(|l| l.canonical().to_string()).collect()
}

pub fn read_task_pool(path: &Path) -> Result<Vec<TaskRecord>, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    let mut tasks: Vec<TaskRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: TaskRecord = serde_json::from_str(line)
            .map_err(|e| ServiceError::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if t.task_id.trim().is_empty() || t.description.trim().is_empty() {
            return Err(ServiceError::invalid(format!(
                "{}:{}: task_id and description must be non-empty",
                path.display(),
                i + 1
            )));
        }
        if !seen.insert(t.task_id.clone()) {
            return Err(ServiceError::new(
                ErrorCode::Conflict,
                format!("{}:{}: duplicate task_id '{}'", path.display(), i + 1, t.task_id),
            ));
        }
        tasks.push(t);
    }
    Ok(tasks)
}

/// Checks a submission against the canonical action and label sets.
pub fn validate_submission(s: &AnnotationSubmission) -> Result<BTreeMap<String, OutcomeLabel>, ServiceError> {
    if s.annotator_id.trim().is_empty() {
        return Err(ServiceError::invalid("annotator_id is empty"));
    }
    let actions = canonical_actions();
    let missing: Vec<&String> = actions.iter().filter(|a| !s.labels.contains_key(*a)).collect();
    let unknown: Vec<&String> = s.labels.keys().filter(|k| !actions.contains(k)).collect();
    let bad_labels: Vec<String> = s
        .labels
        .iter()
        .filter(|(_, v)| OutcomeLabel::from_canonical(v).is_none())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() || !bad_labels.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing labels for {}", join(&missing)));
        }
        if !unknown.is_empty() {
            parts.push(format!("unknown actions {}", join(&unknown)));
        }
        if !bad_labels.is_empty() {
            parts.push(format!("invalid labels {}", bad_labels.join(", ")));
        }
        return Err(ServiceError::invalid(parts.join("; ")).with_details(json!({
            "missing": missing,
            "unknown": unknown,
            "invalid_labels": bad_labels,
        })));
    }
    Ok(s.labels
        .iter()
        .map(|(k, v)| (k.clone(), OutcomeLabel::from_canonical(v).expect("checked")))
        .collect())
}

fn join(items: &[&String]) -> String {
    items.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

/// Parses the log, skipping a torn final line. A malformed line anywhere
/// else is an error.
fn read_log(path: &Path) -> Result<Vec<StoredSubmission>, ServiceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StoredSubmission>(line) {
            Ok(s) => out.push(s),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!(path = %path.display(), "ignoring torn final annotation line");
            }
            Err(e) => {
                return Err(ServiceError::new(
                    ErrorCode::Io,
                    format!("{}:{}: corrupt annotation line: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

struct LogState {
    submissions: Vec<StoredSubmission>,
    done: BTreeSet<(String, String)>,
}

pub struct AnnotationStore {
    tasks: BTreeMap<String, TaskRecord>,
    log_path: PathBuf,
    media_root: Option<PathBuf>,
    annotators: Option<BTreeSet<String>>,
    state: Mutex<LogState>,
}

impl AnnotationStore {
    pub fn open(tasks: Vec<TaskRecord>, log_path: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let log_path = log_path.into();
        let submissions = read_log(&log_path)?;
        let done = submissions
            .iter()
            .map(|s| (s.task_id.clone(), s.annotator_id.clone()))
            .collect();
        Ok(AnnotationStore {
            tasks: tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect(),
            log_path,
            media_root: None,
            annotators: None,
            state: Mutex::new(LogState { submissions, done }),
        })
    }

    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = Some(root.into());
        self
    }

    /// Restricts who may fetch and submit tasks.
    pub fn with_annotators(mut self, ids: impl IntoIterator<Item = String>) -> Self {
        self.annotators = Some(ids.into_iter().collect());
        self
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), ServiceError> {
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::invalid("annotator id is empty"));
        }
        match &self.annotators {
            Some(allowed) if !allowed.contains(annotator_id) => Err(ServiceError::new(
                ErrorCode::UnknownAnnotator,
                format!("annotator '{annotator_id}' is not in the annotator pool"),
            )),
            _ => Ok(()),
        }
    }

    fn view(&self, t: &TaskRecord, status: TaskStatus) -> AnnotationTask {
        AnnotationTask {
            task_id: t.task_id.clone(),
            description: t.description.clone(),
            image_url: t.image_ref.as_ref().map(|_| format!("/media/{}", t.task_id)),
            metadata: t.metadata.clone(),
            actions: canonical_actions(),
            labels: canonical_labels(),
            status,
        }
    }

    /// The lowest task id this annotator has not submitted, if any.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<AnnotationTask>, ServiceError> {
        self.check_annotator(annotator_id)?;
        let state = self.state.lock().expect("annotation lock");
        Ok(self
            .tasks
            .values()
            .find(|t| !state.done.contains(&(t.task_id.clone(), annotator_id.to_string())))
            .map(|t| self.view(t, TaskStatus::Pending)))
    }

    pub fn task_status(&self, task_id: &str, annotator_id: &str) -> Option<TaskStatus> {
        self.tasks.get(task_id)?;
        let state = self.state.lock().expect("annotation lock");
        Some(if state.done.contains(&(task_id.to_string(), annotator_id.to_string())) {
            TaskStatus::Complete
        } else {
            TaskStatus::Pending
        })
    }

    /// Validates and appends a submission, returning its ten benchmark
    /// records.
    pub fn submit(&self, s: &AnnotationSubmission) -> Result<Vec<BenchmarkRecord>, ServiceError> {
        self.check_annotator(&s.annotator_id)?;
        let task = self
            .tasks
            .get(&s.task_id)
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("no task '{}'", s.task_id)))?;
        let labels = validate_submission(s)?;
        let stored = StoredSubmission {
            task_id: s.task_id.clone(),
            annotator_id: s.annotator_id.clone(),
            labels,
            submitted_at: s
                .submitted_at
                .clone()
                .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
        };

        let mut state = self.state.lock().expect("annotation lock");
        let key = (s.task_id.clone(), s.annotator_id.clone());
        if state.done.contains(&key) {
            return Err(ServiceError::new(
                ErrorCode::Conflict,
                format!("annotator '{}' already submitted task '{}'", s.annotator_id, s.task_id),
            ));
        }
        let line = serde_json::to_string(&stored).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        if let Some(dir) = self.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.log_path)?;
        file.write_all(format!("{line}\n").as_bytes())?;
        file.sync_data()?;
        state.done.insert(key);
        state.submissions.push(stored.clone());
        Ok(expand(task, &stored))
    }

    /// All stored submissions expanded into benchmark records, in log order.
    pub fn records(&self) -> Vec<BenchmarkRecord> {
        let state = self.state.lock().expect("annotation lock");
        state
            .submissions
            .iter()
            .filter_map(|s| self.tasks.get(&s.task_id).map(|t| expand(t, s)))
            .flatten()
            .collect()
    }

    /// Path of a task's image under the media root. Refs escaping the root
    /// are refused.
    pub fn media_path(&self, task_id: &str) -> Result<PathBuf, ServiceError> {
        let not_found = || ServiceError::new(ErrorCode::NotFound, format!("no media for task '{task_id}'"));
        let task = self.tasks.get(task_id).ok_or_else(not_found)?;
        let (root, rel) = match (&self.media_root, &task.image_ref) {
            (Some(root), Some(rel)) => (root, rel),
            _ => return Err(not_found()),
        };
        let root = root.canonicalize().map_err(|_| not_found())?;
        let path = root.join(rel).canonicalize().map_err(|_| not_found())?;
        if !path.starts_with(&root) {
            return Err(not_found());
        }
        Ok(path)
    }
}

fn expand(task: &TaskRecord, s: &StoredSubmission) -> Vec<BenchmarkRecord> {
    DrivingAction::ALL
        .iter()
        .map(|a| BenchmarkRecord {
            record_id: format!("{}:{}:{}", s.task_id, s.annotator_id, a.canonical()),
            description: task.description.clone(),
            image_ref: task.image_ref.clone(),
            metadata: task.metadata.clone(),
            action: a.clone(),
            human_label: s.labels[a.canonical()],
            annotator_id: s.annotator_id.clone(),
        })
        .collect()
}

/// Rewrites the log keeping the first submission per (task, annotator) and
/// dropping a torn trailing line. Returns (kept, dropped).
pub fn compact(log_path: &Path) -> Result<(usize, usize), ServiceError> {
    let text = std::fs::read_to_string(log_path).unwrap_or_default();
    let total = text.lines().filter(|l| !l.trim().is_empty()).count();
    let mut seen = BTreeSet::new();
    let kept: Vec<StoredSubmission> = read_log(log_path)?
        .into_iter()
        .filter(|s| seen.insert((s.task_id.clone(), s.annotator_id.clone())))
        .collect();
    let mut out = String::new();
    for s in &kept {
        out.push_str(&serde_json::to_string(s).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?);
        out.push('\n');
    }
    let dir = log_path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(out.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(log_path).map_err(|e| e.error)?;
    Ok((kept.len(), total - kept.len()))
}
