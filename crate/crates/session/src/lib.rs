//! HTTP/JSON service that runs risk-aware active learning against a human
//! demonstrator.
//!
//! A client creates a session from a [`TaskSpec`], then alternates between
//! `GET /sessions/{id}/query` and `POST /sessions/{id}/answer` until the
//! session reports `stopped`. The per-candidate bound heatmap, history and
//! MAP estimate are available at any time from `GET /sessions/{id}`.

pub mod api;
pub mod error;
pub mod session;
pub mod spec;

pub use api::{router, serve, AnswerRequest, AppState, JobState, JobStatus, ServiceConfig, TASK_SPEC_SCHEMA};
pub use error::{ApiError, ErrorBody};
pub use session::{Heatmap, HistoryItem, PendingQuery, QueryView, Session, SessionError, SessionView, WorldView};
pub use spec::{FieldError, GridTaskSpec, PlacementTaskSpec, TableSpec, TaskSpec, WorldSpec};
