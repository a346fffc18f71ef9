//! Feedback sessions, the append-only log that persists them, and the
//! rating analyzer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::payload::ModeName;

/// Five-point rating scale, worst first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rating {
    VeryBad,
    Bad,
    Neutral,
    Good,
    Great,
}

impl Rating {
    pub const ALL: [Rating; 5] = [Rating::VeryBad, Rating::Bad, Rating::Neutral, Rating::Good, Rating::Great];

    /// 1 for `VeryBad` up to 5 for `Great`.
    pub fn score(self) -> u8 {
        self as u8 + 1
    }

    pub fn parse(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.token() == token)
    }

    pub fn token(self) -> &'static str {
        match self {
            Rating::VeryBad => "VeryBad",
            Rating::Bad => "Bad",
            Rating::Neutral => "Neutral",
            Rating::Good => "Good",
            Rating::Great => "Great",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RaterRole {
    Expert,
    NonExpert,
}

impl RaterRole {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "expert" => Some(RaterRole::Expert),
            "non-expert" => Some(RaterRole::NonExpert),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueryRef {
    Slide { slide_id: String },
    Patch { slide_id: String, grid_x: u32, grid_y: u32 },
}

/// A result as placed on screen. `true_rank` and `distance` stay on the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownResult {
    pub slide_id: String,
    pub true_rank: usize,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub query: QueryRef,
    /// Presentation order.
    pub shown: Vec<ShownResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub seed: u64,
    pub mode: ModeName,
    pub site: Option<String>,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub session_id: String,
    /// 0-based question index.
    pub question: usize,
    /// 1-based on-screen slot.
    pub position: usize,
    pub rating: String,
    pub rater_role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session_id: String,
    pub question: usize,
    pub query_ref: QueryRef,
    pub position: usize,
    pub result_slide_id: String,
    pub result_rank: usize,
    pub distance: u32,
    pub rating: Rating,
    pub rater_role: RaterRole,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LogEvent {
    Session(Session),
    Feedback(FeedbackRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub total: usize,
    pub counts: BTreeMap<Rating, usize>,
    pub frequencies: BTreeMap<Rating, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub records: usize,
    pub spearman_rating_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub records: usize,
    pub per_rank: Vec<RankSummary>,
    /// Rank correlation of rating score against Hamming distance.
    pub spearman_rating_distance: Option<f64>,
    pub by_role: BTreeMap<RaterRole, RoleSummary>,
    pub echo: Vec<FeedbackRecord>,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks. `None` when
/// either side is constant or fewer than two pairs exist.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn rating_distance_rho(records: &[&FeedbackRecord]) -> Option<f64> {
    let scores: Vec<f64> = records.iter().map(|r| f64::from(r.rating.score())).collect();
    let dists: Vec<f64> = records.iter().map(|r| f64::from(r.distance)).collect();
    spearman(&scores, &dists)
}

/// Aggregates over `records`; independent of their order except for `echo`.
pub fn summarize(records: &[FeedbackRecord]) -> FeedbackSummary {
    let all: Vec<&FeedbackRecord> = records.iter().collect();
    let mut ranks: BTreeMap<usize, BTreeMap<Rating, usize>> = BTreeMap::new();
    for r in records {
        *ranks.entry(r.result_rank).or_default().entry(r.rating).or_default() += 1;
    }
    let per_rank = ranks
        .into_iter()
        .map(|(rank, mut counts)| {
            for rating in Rating::ALL {
                counts.entry(rating).or_default();
            }
            let total: usize = counts.values().sum();
            let frequencies = counts.iter().map(|(&k, &c)| (k, c as f64 / total as f64)).collect();
            RankSummary {
                rank,
                total,
                counts,
                frequencies,
            }
        })
        .collect();
    let mut by_role = BTreeMap::new();
    for role in [RaterRole::Expert, RaterRole::NonExpert] {
        let subset: Vec<&FeedbackRecord> = records.iter().filter(|r| r.rater_role == role).collect();
        if !subset.is_empty() {
            by_role.insert(
                role,
                RoleSummary {
                    records: subset.len(),
                    spearman_rating_distance: rating_distance_rho(&subset),
                },
            );
        }
    }
    FeedbackSummary {
        records: records.len(),
        per_rank,
        spearman_rating_distance: rating_distance_rho(&all),
        by_role,
        echo: records.to_vec(),
    }
}

/// Sessions and ratings, mirrored to a JSON-lines log when a path is given.
#[derive(Debug, Default)]
pub struct FeedbackStore {
    sessions: HashMap<String, Session>,
    records: Vec<FeedbackRecord>,
    answered: HashSet<(String, usize, usize)>,
    log: Option<(PathBuf, File)>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl FeedbackStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending after replaying whatever it already holds.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let mut store = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (no, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.display(), no + 1),
                    )
                })?;
                store.apply(event);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    fn apply(&mut self, event: LogEvent) {
        match event {
            LogEvent::Session(s) => {
                self.sessions.insert(s.session_id.clone(), s);
            }
            LogEvent::Feedback(r) => {
                self.answered.insert((r.session_id.clone(), r.question, r.position));
                self.records.push(r);
            }
        }
    }

    fn append(&mut self, event: LogEvent) -> Result<(), ApiError> {
        if let Some((path, file)) = &mut self.log {
            let line = serde_json::to_string(&event).map_err(|e| ApiError::internal(e.to_string()))?;
            file.write_all(format!("{line}\n").as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        }
        self.apply(event);
        Ok(())
    }

    pub fn next_session_id(&self) -> String {
        format!("session-{:04}", self.sessions.len() + 1)
    }

    pub fn add_session(&mut self, session: Session) -> Result<(), ApiError> {
        if self.sessions.contains_key(&session.session_id) {
            return Err(ApiError::conflict(format!("session {} exists", session.session_id)));
        }
        self.append(LogEvent::Session(session))
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    pub fn is_answered(&self, session_id: &str, question: usize, position: usize) -> bool {
        self.answered.contains(&(session_id.to_string(), question, position))
    }

    /// First question with an unrated slot.
    pub fn next_question(&self, session_id: &str) -> Result<Option<usize>, ApiError> {
        let s = self
            .session(session_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown session {session_id}")))?;
        Ok(s.questions
            .iter()
            .enumerate()
            .find(|(q, question)| (1..=question.shown.len()).any(|p| !self.is_answered(session_id, *q, p)))
            .map(|(q, _)| q))
    }

    pub fn answered_count(&self, session_id: &str) -> usize {
        self.answered.iter().filter(|(s, _, _)| s == session_id).count()
    }

    pub fn record(&mut self, req: &FeedbackRequest) -> Result<FeedbackRecord, ApiError> {
        let rating = Rating::parse(&req.rating).ok_or_else(|| {
            ApiError::invalid(format!(
                "rating `{}` is not one of VeryBad, Bad, Neutral, Good, Great",
                req.rating
            ))
        })?;
        let rater_role = RaterRole::parse(&req.rater_role)
            .ok_or_else(|| ApiError::invalid(format!("rater_role `{}` is not expert or non-expert", req.rater_role)))?;
        let session = self
            .session(&req.session_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown session {}", req.session_id)))?;
        let question = session
            .questions
            .get(req.question)
            .ok_or_else(|| ApiError::invalid(format!("session has no question {}", req.question)))?;
        let shown = req
            .position
            .checked_sub(1)
            .and_then(|i| question.shown.get(i))
            .ok_or_else(|| ApiError::invalid(format!("position {} is not on screen", req.position)))?;
        if self.is_answered(&req.session_id, req.question, req.position) {
            return Err(ApiError::conflict("this result is already rated"));
        }
        let record = FeedbackRecord {
            session_id: req.session_id.clone(),
            question: req.question,
            query_ref: question.query.clone(),
            position: req.position,
            result_slide_id: shown.slide_id.clone(),
            result_rank: shown.true_rank,
            distance: shown.distance,
            rating,
            rater_role,
            timestamp_ms: now_ms(),
        };
        self.append(LogEvent::Feedback(record.clone()))?;
        Ok(record)
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn summary(&self) -> FeedbackSummary {
        summarize(&self.records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> Session {
        Session {
            session_id: "s1".into(),
            seed: 0,
            mode: ModeName::Horizontal,
            site: None,
            questions: vec![Question {
                query: QueryRef::Slide { slide_id: "q".into() },
                shown: vec![
                    ShownResult {
                        slide_id: "b".into(),
                        true_rank: 2,
                        distance: 9,
                    },
                    ShownResult {
                        slide_id: "a".into(),
                        true_rank: 1,
                        distance: 0,
                    },
                ],
            }],
        }
    }

    fn req(position: usize, rating: &str) -> FeedbackRequest {
        FeedbackRequest {
            session_id: "s1".into(),
            question: 0,
            position,
            rating: rating.into(),
            rater_role: "expert".into(),
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), None);
        // Ranks x: 1,2,3,4; y: 1,3,2,4 → ρ = 1 - 6·2/(4·15) = 0.8.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 7.0, 6.0, 8.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn record_resolves_true_rank() {
        let mut store = FeedbackStore::in_memory();
        store.add_session(session()).unwrap();
        let r = store.record(&req(2, "Great")).unwrap();
        assert_eq!((r.result_slide_id.as_str(), r.result_rank, r.distance), ("a", 1, 0));
        assert_eq!(store.record(&req(2, "Bad")).unwrap_err().status.as_u16(), 409);
        assert_eq!(store.record(&req(1, "Excellent")).unwrap_err().status.as_u16(), 422);
        assert_eq!(store.record(&req(3, "Good")).unwrap_err().status.as_u16(), 422);
        let mut bad_role = req(1, "Good");
        bad_role.rater_role = "student".into();
        assert_eq!(store.record(&bad_role).unwrap_err().status.as_u16(), 422);
        let mut unknown = req(1, "Good");
        unknown.session_id = "nope".into();
        assert_eq!(store.record(&unknown).unwrap_err().status.as_u16(), 404);
        assert_eq!(store.next_question("s1").unwrap(), Some(0));
        store.record(&req(1, "VeryBad")).unwrap();
        assert_eq!(store.next_question("s1").unwrap(), None);
    }

    #[test]
    fn summary_counts_and_correlation() {
        let mut store = FeedbackStore::in_memory();
        store.add_session(session()).unwrap();
        store.record(&req(2, "Great")).unwrap();
        store.record(&req(1, "VeryBad")).unwrap();
        let s = store.summary();
        assert_eq!(s.records, 2);
        assert_eq!(s.per_rank[0].counts[&Rating::Great], 1);
        assert_eq!(s.per_rank[1].frequencies[&Rating::VeryBad], 1.0);
        assert_eq!(s.spearman_rating_distance, Some(-1.0));
        assert_eq!(s.by_role[&RaterRole::Expert].records, 2);
    }

    #[test]
    fn log_replay_reproduces_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        let mut store = FeedbackStore::open(&path).unwrap();
        store.add_session(session()).unwrap();
        store.record(&req(1, "Neutral")).unwrap();
        store.record(&req(2, "Good")).unwrap();
        let before = store.summary();
        drop(store);
        let replayed = FeedbackStore::open(&path).unwrap();
        assert_eq!(replayed.summary(), before);
        assert_eq!(replayed.next_session_id(), "session-0002");
        assert!(replayed.is_answered("s1", 0, 1));
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(FeedbackStore::open(&path).is_err());
    }
}
