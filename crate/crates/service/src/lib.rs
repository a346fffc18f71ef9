//! HTTP adapter over an [`ArchiveIndex`]. Handlers deserialize, call the
//! synchronous functions in [`payload`], [`session`] and [`feedback`], and
//! serialize; the CLI calls the same functions directly.
//!
//! | method | path                      | body                                                     |
//! |--------|---------------------------|----------------------------------------------------------|
//! | GET    | `/slides`                 |                                                          |
//! | GET    | `/slides/{id}/thumbnail`  |                                                          |
//! | POST   | `/search/scan`            | [`ScanRequest`]                                          |
//! | POST   | `/search/patch`           | [`PatchRequest`]                                         |
//! | POST   | `/sessions`               | [`SessionRequest`]                                       |
//! | GET    | `/sessions/{id}/next`     |                                                          |
//! | POST   | `/feedback`               | [`FeedbackRequest`]                                      |
//! | GET    | `/feedback/summary`       |                                                          |

pub mod error;
pub mod feedback;
pub mod payload;
pub mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bob_core::features::{ExtractorKind, ReferenceExtractor, REFERENCE_ID};
use bob_core::index_store::{build_index, ArchiveIndex};
use bob_core::slide_io::{list_slide_dirs, open_slide};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

pub use error::ApiError;
pub use feedback::{FeedbackRecord, FeedbackRequest, FeedbackStore, FeedbackSummary, Rating, RaterRole};
pub use payload::{
    index_upload, list_slides, patch_search, scan_search, ModeName, PatchRequest, PatchResponse, ScanRequest,
    ScanResponse, SlideList,
};
pub use session::{build_session, NextQuestion, SessionCreated, SessionRequest};

/// Threads given to background indexing; queries keep the global pool.
const INDEXING_THREADS: usize = 2;

pub struct AppState {
    index: RwLock<Arc<ArchiveIndex>>,
    generation: AtomicU64,
    thumbnails: RwLock<HashMap<String, PathBuf>>,
    feedback: Mutex<FeedbackStore>,
    extend_lock: Mutex<()>,
    indexing_pool: rayon::ThreadPool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtendReport {
    pub generation: u64,
    pub added: Vec<String>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl AppState {
    pub fn new(index: ArchiveIndex, feedback: FeedbackStore) -> Self {
        Self {
            index: RwLock::new(Arc::new(index)),
            generation: AtomicU64::new(1),
            thumbnails: RwLock::new(HashMap::new()),
            feedback: Mutex::new(feedback),
            extend_lock: Mutex::new(()),
            indexing_pool: rayon::ThreadPoolBuilder::new()
                .num_threads(INDEXING_THREADS)
                .thread_name(|i| format!("bob-indexing-{i}"))
                .build()
                .expect("indexing pool"),
        }
    }

    /// Registers the lowest pyramid level of every slide under `corpus` as
    /// its thumbnail. Returns how many slides were found.
    pub fn register_corpus(&self, corpus: &Path) -> bob_core::Result<usize> {
        let mut found = HashMap::new();
        for dir in list_slide_dirs(corpus)? {
            let Ok(slide) = open_slide(&dir) else { continue };
            if let Some(file) = slide.thumbnail_level().file() {
                found.insert(slide.slide_id.clone(), file.to_path_buf());
            }
        }
        let n = found.len();
        self.thumbnails.write().extend(found);
        Ok(n)
    }

    /// The current index generation. Holders keep it alive across swaps.
    pub fn index(&self) -> Arc<ArchiveIndex> {
        self.index.read().clone()
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::SeqCst)
    }

    pub fn swap_index(&self, index: ArchiveIndex) -> u64 {
        let mut slot = self.index.write();
        *slot = Arc::new(index);
        self.generation.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// Indexes `dirs` on the dedicated indexing pool and publishes a new
    /// generation containing them. Searches keep using the previous
    /// generation until the swap.
    pub fn extend_index(&self, dirs: &[PathBuf]) -> Result<ExtendReport, ApiError> {
        let _one_writer = self.extend_lock.lock();
        let base = self.index();
        if base.extractor.kind != ExtractorKind::BuiltIn || base.extractor.extractor_id != REFERENCE_ID {
            return Err(ApiError::invalid("only indexes built with the built-in extractor can grow"));
        }
        let extractor = ReferenceExtractor::new(base.config.s_h)?;
        let built = self.indexing_pool.install(|| build_index(dirs, &base.config, &extractor))?;
        let mut next = (*base).clone();
        let mut added = Vec::new();
        for slide in built.index.slides() {
            next.insert(slide.clone())?;
            added.push(slide.slide_id.clone());
        }
        let generation = self.swap_index(next);
        for dir in dirs {
            if let Ok(slide) = open_slide(dir) {
                if let Some(file) = slide.thumbnail_level().file() {
                    self.thumbnails.write().insert(slide.slide_id.clone(), file.to_path_buf());
                }
            }
        }
        Ok(ExtendReport {
            generation,
            added,
            skipped: built.skipped.into_iter().map(|(p, e)| (p, e.to_string())).collect(),
        })
    }

    pub fn feedback(&self) -> parking_lot::MutexGuard<'_, FeedbackStore> {
        self.feedback.lock()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/slides", get(slides))
        .route("/slides/{id}/thumbnail", get(thumbnail))
        .route("/search/scan", post(search_scan))
        .route("/search/patch", post(search_patch))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_question))
        .route("/feedback", post(post_feedback))
        .route("/feedback/summary", get(feedback_summary))
        .with_state(state)
}

/// Serves on an already bound listener until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

type Shared = State<Arc<AppState>>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|r| ApiError::new(r.status(), r.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn slides(State(state): Shared) -> Json<SlideList> {
    Json(list_slides(&state.index()))
}

async fn thumbnail(State(state): Shared, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    if state.index().get(&id).is_none() && !state.thumbnails.read().contains_key(&id) {
        return Err(ApiError::not_found(format!("unknown slide {id}")));
    }
    let path = state
        .thumbnails
        .read()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no thumbnail for slide {id}; start the server with a corpus")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn search_scan(State(state): Shared, req: Result<Json<ScanRequest>, JsonRejection>) -> Result<Json<ScanResponse>, ApiError> {
    let req = body(req)?;
    let index = state.index();
    blocking(move || {
        let upload = req.upload.as_deref().map(|dir| index_upload(&index, Path::new(dir))).transpose()?;
        scan_search(&index, &req, upload.as_ref())
    })
    .await
    .map(Json)
}

async fn search_patch(State(state): Shared, req: Result<Json<PatchRequest>, JsonRejection>) -> Result<Json<PatchResponse>, ApiError> {
    let req = body(req)?;
    let index = state.index();
    blocking(move || patch_search(&index, &req)).await.map(Json)
}

async fn create_session(State(state): Shared, req: Result<Json<SessionRequest>, JsonRejection>) -> Result<Json<SessionCreated>, ApiError> {
    let req = body(req)?;
    let index = state.index();
    let worker = state.clone();
    blocking(move || {
        let mut store = worker.feedback();
        let session = build_session(&index, &req, store.next_session_id())?;
        let created = SessionCreated {
            session_id: session.session_id.clone(),
            questions: session.questions.len(),
            results_per_question: session::RESULTS_PER_QUESTION,
        };
        store.add_session(session)?;
        Ok(created)
    })
    .await
    .map(Json)
}

async fn next_question(State(state): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<NextQuestion>, ApiError> {
    let store = state.feedback();
    let q = store.next_question(&id)?;
    let session = store.session(&id).expect("checked by next_question");
    let view = session::question_view(session, q, store.answered_count(&id), |p| {
        q.is_some_and(|q| store.is_answered(&id, q, p))
    });
    Ok(Json(view))
}

async fn post_feedback(State(state): Shared, req: Result<Json<FeedbackRequest>, JsonRejection>) -> Result<Json<FeedbackRecord>, ApiError> {
    let req = body(req)?;
    let worker = state.clone();
    blocking(move || worker.feedback().record(&req)).await.map(Json)
}

async fn feedback_summary(State(state): Shared) -> Json<FeedbackSummary> {
    Json(state.feedback().summary())
}
