//! Sessions, cells and the single-worker job queue.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use icontra_core::progress::{Phase, Progress};
use icontra_core::store::{read_json, result_stem, write_json, write_rgb_png, RESULTS_DIR, SOURCE_FILE};
use icontra_core::{EditRequest, Image};

use crate::engine::{Engine, ExtractJob, GenerateJob, MaskInput};
use crate::model::{
    new_id, now_ms, CellResult, GenerationCell, Job, JobKind, JobProgress, JobState, Lineage, Session,
    SessionStatus, CELL_COUNT,
};

pub const SESSIONS_DIR: &str = "sessions";
pub const JOBS_DIR: &str = "jobs";
pub const SESSION_FILE: &str = "session.json";
/// Target mask of an imported result, used as the derived record's object mask.
pub const INHERITED_MASK_FILE: &str = "inherited_mask.png";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Internal(String),
}

impl From<icontra_core::Error> for ServiceError {
    fn from(e: icontra_core::Error) -> Self {
        use icontra_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::EmptyMask { .. } => ServiceError::Invalid(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

struct State {
    sessions: HashMap<String, Session>,
    jobs: HashMap<String, Job>,
    queue: VecDeque<String>,
    shutdown: bool,
}

struct Inner {
    data_dir: PathBuf,
    engine: Arc<dyn Engine>,
    state: Mutex<State>,
    /// Signalled when work is queued or on shutdown.
    work: Condvar,
    /// Signalled when a job finishes.
    finished: Condvar,
}

/// Handle to the service; clones share the same state and worker.
#[derive(Clone)]
pub struct SessionService {
    inner: Arc<Inner>,
    worker: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl SessionService {
    /// Loads persisted sessions and jobs from `data_dir`, recovers work cut
    /// short by a previous process, and starts the worker.
    pub fn open(data_dir: impl Into<PathBuf>, engine: Arc<dyn Engine>) -> ServiceResult<Self> {
        let data_dir = data_dir.into();
        for sub in [SESSIONS_DIR, JOBS_DIR] {
            let dir = data_dir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", dir.display())))?;
        }
        let mut state = State {
            sessions: load_all::<Session>(&data_dir.join(SESSIONS_DIR), Some(SESSION_FILE))?,
            jobs: load_all::<Job>(&data_dir.join(JOBS_DIR), None)?,
            queue: VecDeque::new(),
            shutdown: false,
        };
        let inner = Arc::new(Inner {
            data_dir,
            engine,
            state: Mutex::new(State {
                sessions: HashMap::new(),
                jobs: HashMap::new(),
                queue: VecDeque::new(),
                shutdown: false,
            }),
            work: Condvar::new(),
            finished: Condvar::new(),
        });
        inner.recover(&mut state)?;
        *inner.state.lock().unwrap() = state;

        let worker_inner = Arc::clone(&inner);
        let handle = std::thread::Builder::new()
            .name("icontra-worker".into())
            .spawn(move || worker_inner.work_loop())
            .map_err(|e| ServiceError::Internal(format!("cannot start worker: {e}")))?;
        Ok(Self {
            inner,
            worker: Arc::new(Mutex::new(Some(handle))),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.data_dir
    }

    pub fn engine(&self) -> &dyn Engine {
        self.inner.engine.as_ref()
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.inner.session_dir(session_id)
    }

    /// Stores the letterboxed source and queues its extraction.
    pub fn create_session(
        &self,
        image: &Image,
        caption: &str,
        object_prompt: Option<&str>,
    ) -> ServiceResult<(Session, Job)> {
        let size = self.inner.engine.working_resolution();
        let image = if image.height() == size && image.width() == size {
            image.clone()
        } else {
            image.letterbox(size)
        };
        let id = new_id();
        let dir = self.inner.session_dir(&id);
        write_rgb_png(&dir.join(SOURCE_FILE), &image)?;
        let now = now_ms();
        let object_prompt = object_prompt.map(str::trim).filter(|p| !p.is_empty()).map(String::from);
        let job = Job {
            id: new_id(),
            session_id: id.clone(),
            kind: JobKind::Extract,
            cell: None,
            ordinal: None,
            request: None,
            state: JobState::Queued,
            progress: JobProgress::default(),
            error: None,
            cancel_requested: false,
            created_at: now,
            started_at: None,
            finished_at: None,
        };
        let session = Session {
            id: id.clone(),
            caption: caption.trim().to_string(),
            object_prompt,
            source_image: SOURCE_FILE.into(),
            status: SessionStatus::Extracting,
            error: None,
            reconstruction_psnr: None,
            extraction_job: job.id.clone(),
            cells: (0..CELL_COUNT).map(GenerationCell::new).collect(),
            created_at: now,
            updated_at: now,
        };
        let mut st = self.inner.lock();
        self.inner.persist_session(&session)?;
        self.inner.persist_job(&job)?;
        st.sessions.insert(id, session.clone());
        st.jobs.insert(job.id.clone(), job.clone());
        st.queue.push_back(job.id.clone());
        self.inner.work.notify_all();
        Ok((session, job))
    }

    pub fn session(&self, session_id: &str) -> ServiceResult<Session> {
        self.inner.lock().sessions.get(session_id).cloned().ok_or_else(|| no_session(session_id))
    }

    /// All sessions, oldest first.
    pub fn sessions(&self) -> Vec<Session> {
        let mut all: Vec<Session> = self.inner.lock().sessions.values().cloned().collect();
        all.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        all
    }

    pub fn cell(&self, session_id: &str, cell: usize) -> ServiceResult<GenerationCell> {
        check_cell(cell)?;
        Ok(self.session(session_id)?.cells[cell].clone())
    }

    pub fn job(&self, job_id: &str) -> ServiceResult<Job> {
        self.inner.lock().jobs.get(job_id).cloned().ok_or_else(|| no_job(job_id))
    }

    /// Queues a generation in `cell`. The prompt is appended to the cell's
    /// history immediately; its result lands at the same ordinal.
    pub fn generate(&self, session_id: &str, cell: usize, request: EditRequest) -> ServiceResult<Job> {
        check_cell(cell)?;
        let mut request = request;
        request.target_prompt = request.target_prompt.trim().to_string();
        request.validate(self.inner.engine.num_inference_steps())?;

        let mut guard = self.inner.lock();
        let st = &mut *guard;
        let session = st.sessions.get_mut(session_id).ok_or_else(|| no_session(session_id))?;
        match session.status {
            SessionStatus::Ready => {}
            SessionStatus::Extracting => {
                return Err(ServiceError::Conflict(format!("session {session_id} is still extracting")))
            }
            SessionStatus::Failed => {
                return Err(ServiceError::Conflict(format!(
                    "session {session_id} failed extraction: {}",
                    session.error.as_deref().unwrap_or("unknown error")
                )))
            }
        }
        let now = now_ms();
        let target = &mut session.cells[cell];
        let ordinal = target.prompt_history.len();
        let job = Job {
            id: new_id(),
            session_id: session_id.to_string(),
            kind: JobKind::Generate,
            cell: Some(cell),
            ordinal: Some(ordinal),
            request: Some(request.clone()),
            state: JobState::Queued,
            progress: JobProgress::default(),
            error: None,
            cancel_requested: false,
            created_at: now,
            started_at: None,
            finished_at: None,
        };
        target.prompt_history.push(request.target_prompt);
        target.results.push(CellResult {
            ordinal,
            job_id: job.id.clone(),
            state: JobState::Queued,
            image_url: None,
            manifest: None,
            error: None,
        });
        target.refresh_status();
        session.updated_at = now;
        self.inner.persist_job(&job)?;
        self.inner.persist_session(session)?;
        st.jobs.insert(job.id.clone(), job.clone());
        st.queue.push_back(job.id.clone());
        self.inner.work.notify_all();
        Ok(job)
    }

    /// Makes result `from` the source of cell `to`. The derived record is
    /// extracted by the cell's next generation. Imports that would make the
    /// lineage cyclic are refused.
    pub fn import_to_cell(&self, session_id: &str, to: usize, from: Lineage) -> ServiceResult<GenerationCell> {
        check_cell(to)?;
        check_cell(from.cell)?;
        let mut guard = self.inner.lock();
        let st = &mut *guard;
        let session = st.sessions.get_mut(session_id).ok_or_else(|| no_session(session_id))?;
        if session.status != SessionStatus::Ready {
            return Err(ServiceError::Conflict(format!("session {session_id} is not ready")));
        }
        let source = session.cells[from.cell]
            .results
            .get(from.ordinal)
            .ok_or_else(|| ServiceError::NotFound(format!("cell {} has no result {}", from.cell, from.ordinal)))?;
        if source.state != JobState::Done {
            return Err(ServiceError::Conflict(format!(
                "result {} of cell {} is not finished",
                from.ordinal, from.cell
            )));
        }
        if lineage_reaches(&session.cells, from.cell, to) {
            return Err(ServiceError::Conflict(format!(
                "importing from cell {} into cell {to} would create a lineage cycle",
                from.cell
            )));
        }
        if session.cells[to].has_pending() {
            return Err(ServiceError::Conflict(format!("cell {to} has generations in progress")));
        }

        let session_dir = self.inner.session_dir(session_id);
        let record_rel = format!("cells/cell_{to}");
        let record_dir = session_dir.join(&record_rel);
        let stem = result_stem(from.cell, from.ordinal);
        let results = session_dir.join(RESULTS_DIR);
        let copy = |src: PathBuf, dst: PathBuf| -> ServiceResult<()> {
            fs::copy(&src, &dst)
                .map(|_| ())
                .map_err(|e| ServiceError::Internal(format!("copy {} -> {}: {e}", src.display(), dst.display())))
        };
        fs::create_dir_all(&record_dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", record_dir.display())))?;
        // a previous derived record must not survive the new import
        for entry in fs::read_dir(&record_dir).map_err(|e| ServiceError::Internal(e.to_string()))? {
            let path = entry.map_err(|e| ServiceError::Internal(e.to_string()))?.path();
            if path.is_file() {
                fs::remove_file(&path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
            }
        }
        copy(results.join(format!("{stem}.png")), record_dir.join(SOURCE_FILE))?;
        let mask = results.join(format!("{stem}_target_mask.png"));
        if mask.is_file() {
            copy(mask, record_dir.join(INHERITED_MASK_FILE))?;
        }

        let cell = &mut session.cells[to];
        cell.imported_from = Some(from);
        cell.record_dir = record_rel;
        cell.needs_extraction = true;
        session.updated_at = now_ms();
        self.inner.persist_session(session)?;
        Ok(session.cells[to].clone())
    }

    /// Queued jobs fail at once; running jobs stop at the next step.
    pub fn cancel_job(&self, job_id: &str) -> ServiceResult<Job> {
        let mut guard = self.inner.lock();
        let st = &mut *guard;
        let job = st.jobs.get_mut(job_id).ok_or_else(|| no_job(job_id))?;
        match job.state {
            JobState::Queued => {
                st.queue.retain(|id| id != job_id);
                let job = job.clone();
                self.inner.finish(st, &job.id, Err("cancelled".into()));
                self.inner.finished.notify_all();
            }
            JobState::Running => {
                job.cancel_requested = true;
            }
            JobState::Done | JobState::Failed => {}
        }
        Ok(st.jobs[job_id].clone())
    }

    /// Blocks until the job finishes or `timeout` passes.
    pub fn wait_for_job(&self, job_id: &str, timeout: Duration) -> ServiceResult<Job> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.lock();
        loop {
            let job = st.jobs.get(job_id).ok_or_else(|| no_job(job_id))?;
            if job.state.is_finished() {
                return Ok(job.clone());
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ServiceError::Conflict(format!("job {job_id} still {:?}", job.state)));
            }
            st = self.inner.finished.wait_timeout(st, left).unwrap().0;
        }
    }

    /// Blocks until no job is queued or running.
    pub fn wait_idle(&self, timeout: Duration) -> ServiceResult<()> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.lock();
        while st.jobs.values().any(|j| !j.state.is_finished()) {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ServiceError::Conflict("jobs still pending".into()));
            }
            st = self.inner.finished.wait_timeout(st, left).unwrap().0;
        }
        Ok(())
    }

    /// Path of a file under a session's results directory.
    pub fn result_file(&self, session_id: &str, file: &str) -> ServiceResult<PathBuf> {
        self.session(session_id)?;
        let safe = !file.is_empty()
            && !file.starts_with('.')
            && file.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        let path = self.inner.session_dir(session_id).join(RESULTS_DIR).join(file);
        if !safe || !path.is_file() {
            return Err(ServiceError::NotFound(format!("no result file {file:?}")));
        }
        Ok(path)
    }

    /// Stops the worker after its current job. Queued jobs stay queued on disk.
    pub fn shutdown(&self) {
        self.inner.lock().shutdown = true;
        self.inner.work.notify_all();
        if let Some(handle) = self.worker.lock().unwrap().take() {
            let _ = handle.join();
        }
    }
}

fn check_cell(cell: usize) -> ServiceResult<()> {
    if cell < CELL_COUNT {
        Ok(())
    } else {
        Err(ServiceError::NotFound(format!("cell {cell} out of range 0..{CELL_COUNT}")))
    }
}

fn no_session(id: &str) -> ServiceError {
    ServiceError::NotFound(format!("no session {id}"))
}

fn no_job(id: &str) -> ServiceError {
    ServiceError::NotFound(format!("no job {id}"))
}

/// Whether following `imported_from` links from `start` arrives at `target`.
fn lineage_reaches(cells: &[GenerationCell], start: usize, target: usize) -> bool {
    let mut at = start;
    for _ in 0..=cells.len() {
        if at == target {
            return true;
        }
        match cells[at].imported_from {
            Some(l) => at = l.cell,
            None => return false,
        }
    }
    true
}

fn load_all<V: serde::de::DeserializeOwned>(
    dir: &Path,
    nested: Option<&str>,
) -> ServiceResult<HashMap<String, V>> {
    let mut out = HashMap::new();
    let entries = fs::read_dir(dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| ServiceError::Internal(e.to_string()))?.path();
        let (file, id) = match nested {
            Some(name) if path.is_dir() => (path.join(name), path.file_name()),
            None if path.extension().is_some_and(|e| e == "json") => (path.clone(), path.file_stem()),
            _ => continue,
        };
        let Some(id) = id.and_then(|s| s.to_str()).map(String::from) else { continue };
        if !file.is_file() {
            continue;
        }
        match read_json::<V>(&file) {
            Ok(v) => {
                out.insert(id, v);
            }
            Err(e) => log::error!("skipping unreadable {}: {e}", file.display()),
        }
    }
    Ok(out)
}

/// Work order copied out of the shared state so the engine runs unlocked.
enum Plan {
    Extract {
        caption: String,
        mask: MaskInput,
    },
    Generate {
        cell: usize,
        ordinal: usize,
        request: EditRequest,
        record_dir: PathBuf,
        /// Caption and mask for a pending derived record.
        derive: Option<(String, MaskInput)>,
    },
}

/// Maps per-phase progress onto one monotone job-wide counter.
struct Tracker {
    offsets: Vec<(Phase, usize)>,
    total: usize,
    step: usize,
}

impl Tracker {
    fn new(steps: usize, extraction: bool, synthesis: bool) -> Self {
        let mut offsets = Vec::new();
        let mut total = 0;
        if extraction {
            offsets.push((Phase::Masking, 0));
            offsets.push((Phase::Inversion, 1));
            offsets.push((Phase::NullOptimization, 1 + steps));
            total = 1 + 2 * steps;
        }
        if synthesis {
            offsets.push((Phase::Synthesis, total));
            total += steps;
        }
        Self { offsets, total, step: 0 }
    }

    fn update(&mut self, p: Progress) -> JobProgress {
        let offset = self.offsets.iter().find(|(ph, _)| *ph == p.phase).map_or(0, |(_, o)| *o);
        self.step = self.step.max((offset + p.step).min(self.total));
        JobProgress {
            phase: Some(p.phase),
            step: self.step,
            total: self.total,
        }
    }
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join(SESSIONS_DIR).join(id)
    }

    fn persist_session(&self, session: &Session) -> ServiceResult<()> {
        Ok(write_json(&self.session_dir(&session.id).join(SESSION_FILE), session)?)
    }

    fn persist_job(&self, job: &Job) -> ServiceResult<()> {
        Ok(write_json(&self.data_dir.join(JOBS_DIR).join(format!("{}.json", job.id)), job)?)
    }

    fn persist_logged(&self, st: &State, job_id: &str) {
        if let Some(job) = st.jobs.get(job_id) {
            if let Err(e) = self.persist_job(job) {
                log::error!("persisting job {job_id}: {e}");
            }
            if let Some(s) = st.sessions.get(&job.session_id) {
                if let Err(e) = self.persist_session(s) {
                    log::error!("persisting session {}: {e}", s.id);
                }
            }
        }
    }

    /// Extractions are restarted, generations that were mid-flight fail,
    /// and sessions left extracting without a job get a fresh one.
    fn recover(&self, st: &mut State) -> ServiceResult<()> {
        let mut pending: Vec<Job> = st.jobs.values().filter(|j| !j.state.is_finished()).cloned().collect();
        pending.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        for job in pending {
            match (job.kind, job.state) {
                (JobKind::Generate, JobState::Running) => {
                    log::warn!("generation {} was interrupted", job.id);
                    self.finish(st, &job.id, Err("interrupted by a service restart".into()));
                }
                _ => {
                    let j = st.jobs.get_mut(&job.id).unwrap();
                    j.state = JobState::Queued;
                    j.progress = JobProgress::default();
                    j.started_at = None;
                    j.cancel_requested = false;
                    if let Some(cell) = j.cell {
                        if let Some(s) = st.sessions.get_mut(&j.session_id) {
                            if let Some(r) = s.cells[cell].results.iter_mut().find(|r| r.job_id == job.id) {
                                r.state = JobState::Queued;
                            }
                            s.cells[cell].refresh_status();
                        }
                    }
                    st.queue.push_back(job.id.clone());
                    self.persist_logged(st, &job.id);
                }
            }
        }
        let orphaned: Vec<String> = st
            .sessions
            .values()
            .filter(|s| s.status == SessionStatus::Extracting)
            .filter(|s| st.jobs.get(&s.extraction_job).is_none_or(|j| j.state.is_finished()))
            .map(|s| s.id.clone())
            .collect();
        for id in orphaned {
            let job = Job {
                id: new_id(),
                session_id: id.clone(),
                kind: JobKind::Extract,
                cell: None,
                ordinal: None,
                request: None,
                state: JobState::Queued,
                progress: JobProgress::default(),
                error: None,
                cancel_requested: false,
                created_at: now_ms(),
                started_at: None,
                finished_at: None,
            };
            let session = st.sessions.get_mut(&id).unwrap();
            session.extraction_job = job.id.clone();
            self.persist_session(session)?;
            self.persist_job(&job)?;
            st.queue.push_back(job.id.clone());
            st.jobs.insert(job.id.clone(), job);
        }
        Ok(())
    }

    fn work_loop(self: Arc<Self>) {
        loop {
            let job_id = {
                let mut st = self.lock();
                loop {
                    if st.shutdown {
                        return;
                    }
                    if let Some(id) = st.queue.pop_front() {
                        if st.jobs.get(&id).is_some_and(|j| j.state == JobState::Queued) {
                            break id;
                        }
                        continue;
                    }
                    st = self.work.wait(st).unwrap_or_else(|e| e.into_inner());
                }
            };
            self.run(&job_id);
            self.finished.notify_all();
        }
    }

    /// Marks the job running and copies out what the engine needs.
    fn start(&self, job_id: &str) -> Result<(Plan, String), String> {
        let mut guard = self.lock();
        let st = &mut *guard;
        let job = st.jobs.get_mut(job_id).ok_or("job vanished")?;
        job.state = JobState::Running;
        job.started_at = Some(now_ms());
        let session_id = job.session_id.clone();
        let session = st.sessions.get_mut(&session_id).ok_or("session vanished")?;
        let plan = match job.kind {
            JobKind::Extract => Plan::Extract {
                caption: session.caption.clone(),
                mask: MaskInput::from_prompt(session.object_prompt.as_deref()),
            },
            JobKind::Generate => {
                let cell = job.cell.ok_or("generation without cell")?;
                let ordinal = job.ordinal.ok_or("generation without ordinal")?;
                let request = job.request.clone().ok_or("generation without request")?;
                let target = &session.cells[cell];
                let record_dir = self.session_dir(&session_id).join(&target.record_dir);
                let derive = match (target.needs_extraction, target.imported_from) {
                    (true, Some(from)) => {
                        let caption = session.cells[from.cell]
                            .prompt_history
                            .get(from.ordinal)
                            .cloned()
                            .unwrap_or_else(|| session.caption.clone());
                        let mask_path = record_dir.join(INHERITED_MASK_FILE);
                        let mask = if mask_path.is_file() {
                            MaskInput::File(mask_path)
                        } else {
                            MaskInput::Saliency
                        };
                        Some((caption, mask))
                    }
                    _ => None,
                };
                let target = &mut session.cells[cell];
                if let Some(r) = target.results.get_mut(ordinal) {
                    r.state = JobState::Running;
                }
                target.refresh_status();
                Plan::Generate {
                    cell,
                    ordinal,
                    request,
                    record_dir,
                    derive,
                }
            }
        };
        session.updated_at = now_ms();
        self.persist_logged(st, job_id);
        Ok((plan, session_id))
    }

    fn run(self: &Arc<Self>, job_id: &str) {
        let (plan, session_id) = match self.start(job_id) {
            Ok(p) => p,
            Err(e) => {
                let mut st = self.lock();
                self.finish(&mut st, job_id, Err(e));
                return;
            }
        };
        let engine = Arc::clone(&self.engine);
        let steps = engine.num_inference_steps();
        let session_dir = self.session_dir(&session_id);
        let (extraction, synthesis) = match &plan {
            Plan::Extract { .. } => (true, false),
            Plan::Generate { derive, .. } => (derive.is_some(), true),
        };
        let mut tracker = Tracker::new(steps, extraction, synthesis);
        {
            let mut st = self.lock();
            if let Some(j) = st.jobs.get_mut(job_id) {
                j.progress.total = tracker.total;
            }
        }
        let mut observe = |p: Progress| -> bool {
            let mut st = self.lock();
            match st.jobs.get_mut(job_id) {
                Some(j) => {
                    j.progress = tracker.update(p);
                    !j.cancel_requested
                }
                None => false,
            }
        };

        let outcome: Result<Outcome, String> = match plan {
            Plan::Extract { caption, mask } => {
                let job = ExtractJob {
                    image_path: &session_dir.join(SOURCE_FILE),
                    caption: &caption,
                    mask: &mask,
                    record_dir: &session_dir,
                };
                engine
                    .extract(&job, &mut observe)
                    .map_err(|e| e.to_string())
                    .and_then(|o| {
                        if o.usable() {
                            Ok(Outcome::Extracted(o.reconstruction_psnr))
                        } else {
                            Err(format!(
                                "reconstruction PSNR {:.2} dB is below the {:.2} dB floor; this photo cannot be edited reliably",
                                o.reconstruction_psnr, o.min_psnr
                            ))
                        }
                    })
            }
            Plan::Generate {
                cell,
                ordinal,
                request,
                record_dir,
                derive,
            } => {
                let derived = match derive {
                    Some((caption, mask)) => {
                        let job = ExtractJob {
                            image_path: &record_dir.join(SOURCE_FILE),
                            caption: &caption,
                            mask: &mask,
                            record_dir: &record_dir,
                        };
                        engine.extract(&job, &mut observe).map(|_| ()).map_err(|e| e.to_string()).inspect(|_| {
                            let mut st = self.lock();
                            if let Some(s) = st.sessions.get_mut(&session_id) {
                                s.cells[cell].needs_extraction = false;
                                if let Err(e) = self.persist_session(s) {
                                    log::error!("persisting session {session_id}: {e}");
                                }
                            }
                        })
                    }
                    None => Ok(()),
                };
                derived.and_then(|()| {
                    let job = GenerateJob {
                        record_dir: &record_dir,
                        session_dir: &session_dir,
                        cell,
                        ordinal,
                        request: &request,
                    };
                    engine
                        .generate(&job, &mut observe)
                        .map(|m| Outcome::Generated {
                            image_url: format!("/results/{session_id}/{}", m.image),
                            manifest: format!("{RESULTS_DIR}/{}.json", result_stem(cell, ordinal)),
                        })
                        .map_err(|e| e.to_string())
                })
            }
        };
        if let Err(e) = &outcome {
            log::warn!("job {job_id} failed: {e}");
        }
        let mut st = self.lock();
        self.finish(&mut st, job_id, outcome);
    }

    /// Records a job's outcome on the job, its session and its cell.
    fn finish(&self, st: &mut State, job_id: &str, outcome: Result<Outcome, String>) {
        let Some(job) = st.jobs.get_mut(job_id) else { return };
        let now = now_ms();
        job.finished_at = Some(now);
        job.state = if outcome.is_ok() { JobState::Done } else { JobState::Failed };
        job.error = outcome.as_ref().err().cloned();
        if job.state == JobState::Done {
            job.progress.step = job.progress.total;
        }
        let (kind, cell, ordinal) = (job.kind, job.cell, job.ordinal);
        if let Some(session) = st.sessions.get_mut(&job.session_id) {
            session.updated_at = now;
            match (kind, outcome) {
                (JobKind::Extract, Ok(Outcome::Extracted(psnr))) => {
                    session.status = SessionStatus::Ready;
                    session.reconstruction_psnr = Some(psnr);
                    session.error = None;
                }
                (JobKind::Extract, Err(e)) => {
                    session.status = SessionStatus::Failed;
                    session.error = Some(e);
                }
                (JobKind::Generate, outcome) => {
                    if let (Some(cell), Some(ordinal)) = (cell, ordinal) {
                        let target = &mut session.cells[cell];
                        if let Some(r) = target.results.get_mut(ordinal) {
                            match outcome {
                                Ok(Outcome::Generated { image_url, manifest }) => {
                                    r.state = JobState::Done;
                                    r.image_url = Some(image_url);
                                    r.manifest = Some(manifest);
                                }
                                Ok(_) => r.state = JobState::Done,
                                Err(e) => {
                                    r.state = JobState::Failed;
                                    r.error = Some(e);
                                }
                            }
                        }
                        target.refresh_status();
                    }
                }
                _ => {}
            }
        }
        self.persist_logged(st, job_id);
    }
}

enum Outcome {
    Extracted(f64),
    Generated { image_url: String, manifest: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_walk_detects_cycles() {
        let mut cells: Vec<GenerationCell> = (0..CELL_COUNT).map(GenerationCell::new).collect();
        cells[1].imported_from = Some(Lineage { cell: 0, ordinal: 0 });
        cells[2].imported_from = Some(Lineage { cell: 1, ordinal: 0 });
        // 2 -> 0 would close 0 -> 1 -> 2
        assert!(lineage_reaches(&cells, 2, 0));
        assert!(lineage_reaches(&cells, 3, 3));
        assert!(!lineage_reaches(&cells, 0, 2));
        assert!(!lineage_reaches(&cells, 2, 4));
    }

    #[test]
    fn tracker_is_monotone_across_phases() {
        let mut t = Tracker::new(5, true, true);
        assert_eq!(t.total, 16);
        let mut last = 0;
        let mut seen = Vec::new();
        for (phase, total) in [
            (Phase::Masking, 1),
            (Phase::Inversion, 5),
            (Phase::NullOptimization, 5),
            (Phase::Synthesis, 5),
        ] {
            for step in 1..=total {
                let p = t.update(Progress { phase, step, total });
                assert!(p.step >= last);
                last = p.step;
                seen.push(p.step);
            }
        }
        assert_eq!(seen, (1..=16).collect::<Vec<_>>());
        // a stale report never moves the counter back
        assert_eq!(t.update(Progress { phase: Phase::Masking, step: 1, total: 1 }).step, 16);
    }
}
