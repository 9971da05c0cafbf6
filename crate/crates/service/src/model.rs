//! Session, cell and job records as persisted and served.

use std::time::{SystemTime, UNIX_EPOCH};

use icontra_core::progress::Phase;
use icontra_core::EditRequest;
use serde::{Deserialize, Serialize};

/// Generation cells per session.
pub const CELL_COUNT: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Extracting,
    Ready,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Idle,
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Extract,
    Generate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// Which result a cell's record was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub cell: usize,
    pub ordinal: usize,
}

/// Outcome of one prompt; `results[n]` belongs to `prompt_history[n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub ordinal: usize,
    pub job_id: String,
    pub state: JobState,
    /// Served path of the generated image.
    pub image_url: Option<String>,
    /// Result manifest, relative to the session directory.
    pub manifest: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationCell {
    pub index: usize,
    pub prompt_history: Vec<String>,
    pub results: Vec<CellResult>,
    pub imported_from: Option<Lineage>,
    /// Directory of the record this cell edits, relative to the session.
    /// Empty for the session's own record.
    pub record_dir: String,
    /// An import is waiting for its record to be extracted; the next
    /// generation does that first.
    pub needs_extraction: bool,
    pub status: CellStatus,
}

impl GenerationCell {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            prompt_history: Vec::new(),
            results: Vec::new(),
            imported_from: None,
            record_dir: String::new(),
            needs_extraction: false,
            status: CellStatus::Idle,
        }
    }

    pub fn has_pending(&self) -> bool {
        self.results.iter().any(|r| !r.state.is_finished())
    }

    pub(crate) fn refresh_status(&mut self) {
        self.status = if self.results.iter().any(|r| r.state == JobState::Running) {
            CellStatus::Running
        } else if self.results.iter().any(|r| r.state == JobState::Queued) {
            CellStatus::Queued
        } else {
            match self.results.last().map(|r| r.state) {
                Some(JobState::Done) => CellStatus::Done,
                Some(JobState::Failed) => CellStatus::Failed,
                _ => CellStatus::Idle,
            }
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub caption: String,
    pub object_prompt: Option<String>,
    /// Letterboxed, 8-bit source image, relative to the session directory.
    pub source_image: String,
    pub status: SessionStatus,
    pub error: Option<String>,
    pub reconstruction_psnr: Option<f64>,
    pub extraction_job: String,
    pub cells: Vec<GenerationCell>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub phase: Option<Phase>,
    /// Steps completed over all phases of the job; never decreases.
    pub step: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub cell: Option<usize>,
    pub ordinal: Option<usize>,
    pub request: Option<EditRequest>,
    pub state: JobState,
    pub progress: JobProgress,
    pub error: Option<String>,
    #[serde(default)]
    pub cancel_requested: bool,
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(state: JobState) -> CellResult {
        CellResult {
            ordinal: 0,
            job_id: String::new(),
            state,
            image_url: None,
            manifest: None,
            error: None,
        }
    }

    #[test]
    fn cell_status_follows_results() {
        let mut cell = GenerationCell::new(0);
        cell.refresh_status();
        assert_eq!(cell.status, CellStatus::Idle);
        cell.results = vec![result(JobState::Done), result(JobState::Queued)];
        cell.refresh_status();
        assert_eq!(cell.status, CellStatus::Queued);
        cell.results[1].state = JobState::Running;
        cell.refresh_status();
        assert_eq!(cell.status, CellStatus::Running);
        cell.results[1].state = JobState::Failed;
        cell.refresh_status();
        assert_eq!(cell.status, CellStatus::Failed);
        assert!(!cell.has_pending());
    }

    #[test]
    fn ids_are_distinct() {
        assert_ne!(new_id(), new_id());
    }
}
