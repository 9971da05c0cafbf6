//! Session service for interactive concept transfer.
//!
//! A session holds one extracted source photo and six generation cells.
//! All extraction and synthesis work runs on a single FIFO worker thread;
//! HTTP handlers only enqueue jobs and read state. Every state change is
//! written to disk, so a restarted service resumes from the data directory.

pub mod config;
pub mod engine;
pub mod http;
pub mod model;
pub mod service;

pub use config::ServiceConfig;
pub use engine::{load_model, Engine, FakeEngine, PipelineEngine};
pub use http::{router, serve};
pub use model::{CellStatus, GenerationCell, Job, JobKind, JobState, Lineage, Session, SessionStatus, CELL_COUNT};
pub use service::{ServiceError, ServiceResult, SessionService};
