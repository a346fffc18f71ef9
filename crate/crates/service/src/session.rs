use bob_core::index_store::ArchiveIndex;
use bob_core::search::{scan_knn, ScanQuery, SearchMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::feedback::{QueryRef, Question, Session, ShownResult};
use crate::payload::{resolve_mode, thumbnail_url, ModeName};

pub const RESULTS_PER_QUESTION: usize = 3;
pub const DEFAULT_QUESTIONS: usize = 48;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    /// Query slides; drawn from the index when absent.
    #[serde(default)]
    pub queries: Option<Vec<String>>,
    /// Number of questions when `queries` is absent.
    #[serde(default)]
    pub questions: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub questions: usize,
    pub results_per_question: usize,
}

/// Builds a session: queries and each question's top results are shuffled
/// with `seed`; true ranks are kept in the returned [`Session`] only.
pub fn build_session(index: &ArchiveIndex, req: &SessionRequest, session_id: String) -> Result<Session, ApiError> {
    let mode = resolve_mode(req.mode, req.site.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let queries: Vec<String> = match &req.queries {
        Some(list) => {
            if req.questions.is_some_and(|n| n != list.len()) {
                return Err(ApiError::invalid("`questions` disagrees with the length of `queries`"));
            }
            if let Some(missing) = list.iter().find(|id| index.get(id).is_none()) {
                return Err(ApiError::not_found(format!("unknown slide {missing}")));
            }
            let mut list = list.clone();
            list.shuffle(&mut rng);
            list
        }
        None => {
            let wanted = req.questions.unwrap_or(DEFAULT_QUESTIONS);
            let mut pool: Vec<String> = match &mode {
                SearchMode::Horizontal => index.slides().map(|s| s.slide_id.clone()).collect(),
                SearchMode::Vertical(site) => bob_core::index_store::filter_by_site(index, site),
            };
            if pool.is_empty() {
                return Err(ApiError::conflict("no slides to draw queries from"));
            }
            let mut out = Vec::with_capacity(wanted);
            while out.len() < wanted {
                pool.shuffle(&mut rng);
                out.extend(pool.iter().take(wanted - out.len()).cloned());
            }
            out
        }
    };
    if queries.is_empty() {
        return Err(ApiError::invalid("a session needs at least one question"));
    }

    let mut questions = Vec::with_capacity(queries.len());
    for id in queries {
        let slide = index.get(&id).expect("queries are indexed");
        let result = scan_knn(&ScanQuery::new(&slide.bob, mode.clone(), RESULTS_PER_QUESTION), index)?;
        let mut shown: Vec<ShownResult> = result
            .ranked
            .into_iter()
            .enumerate()
            .map(|(i, h)| ShownResult {
                slide_id: h.slide_id,
                true_rank: i + 1,
                distance: h.distance,
            })
            .collect();
        shown.shuffle(&mut rng);
        questions.push(Question {
            query: QueryRef::Slide { slide_id: id },
            shown,
        });
    }
    Ok(Session {
        session_id,
        seed: req.seed,
        mode: req.mode,
        site: req.site.clone(),
        questions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub slide_id: String,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub position: usize,
    pub slide_id: String,
    pub thumbnail: String,
    pub rated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextQuestion {
    pub session_id: String,
    pub done: bool,
    pub total_questions: usize,
    pub rated_results: usize,
    pub question: Option<usize>,
    pub query: Option<QueryView>,
    pub results: Vec<ResultView>,
}

pub fn question_view(session: &Session, q: Option<usize>, rated_results: usize, rated: impl Fn(usize) -> bool) -> NextQuestion {
    let mut view = NextQuestion {
        session_id: session.session_id.clone(),
        done: q.is_none(),
        total_questions: session.questions.len(),
        rated_results,
        question: q,
        query: None,
        results: Vec::new(),
    };
    if let Some(q) = q {
        let question = &session.questions[q];
        let query_id = match &question.query {
            QueryRef::Slide { slide_id } | QueryRef::Patch { slide_id, .. } => slide_id,
        };
        view.query = Some(QueryView {
            slide_id: query_id.clone(),
            thumbnail: thumbnail_url(query_id),
        });
        view.results = question
            .shown
            .iter()
            .enumerate()
            .map(|(i, r)| ResultView {
                position: i + 1,
                slide_id: r.slide_id.clone(),
                thumbnail: thumbnail_url(&r.slide_id),
                rated: rated(i + 1),
            })
            .collect();
    }
    view
}
